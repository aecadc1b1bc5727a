//! Binary checkpoint: magic, format version, a JSON header with the model
//! config, vocabulary and tensor index, then raw little-endian f32 blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::optim::ParameterStore;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 8] = b"COCONUT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocabulary: Vocabulary,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save(path: &Path, model: &Transformer<f32>, vocab: &Vocabulary) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        vocabulary: vocab.clone(),
        tensors: model
            .store()
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.store().iter() {
        for x in p.value().data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Transformer<f32>, Vocabulary)> {
    let bad = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| bad(e.to_string()))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.vocabulary.len() != header.config.vocab_size {
        return Err(bad(format!(
            "vocabulary has {} tokens, config expects {}",
            header.vocabulary.len(),
            header.config.vocab_size
        )));
    }
    let mut store = ParameterStore::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad(format!("truncated data for {}", t.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store
            .insert(t.name.clone(), Tensor::new(t.shape.clone(), data).map_err(|e| bad(e.to_string()))?)
            .map_err(|e| bad(e.to_string()))?;
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes after tensor data".into()));
    }
    let model = Transformer::from_store(header.config, store).map_err(|e| bad(e.to_string()))?;
    Ok((model, header.vocabulary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::VocabularyBuilder;

    fn tiny() -> (Transformer<f32>, Vocabulary) {
        let mut b = VocabularyBuilder::new(true);
        b.text("Tom is a terpus.");
        let v = b.build();
        let m = Transformer::new(ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            context: 8,
            vocab_size: v.len(),
            tie_head: false,
            seed: 1,
        })
        .unwrap();
        (m, v)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, v) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, &v).unwrap();
        let (back, bv) = load(&p).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(bv.tokens(), v.tokens());
        for ((_, a), (_, b)) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (m, v) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, &v).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));
        std::fs::write(&p, b"garbage!").unwrap();
        assert!(matches!(load(&p), Err(Error::Checkpoint { .. })));
    }
}
