//! Saves a model with its vocabulary and checks the reload decodes identically.

use coconut::checkpoint;
use coconut::latent::{coconut_generate, InferenceMode};
use coconut::model::{ModelConfig, Transformer};
use coconut::prosqa::{generate_instance, prosqa_vocabulary, GeneratorConfig, Split};

fn main() -> coconut::Result<()> {
    let vocab = prosqa_vocabulary(false);
    let model = Transformer::<f32>::new(ModelConfig {
        layers: 1,
        d_model: 32,
        heads: 2,
        d_ff: 64,
        vocab_size: vocab.len(),
        seed: 5,
        ..ModelConfig::default()
    })?;
    let path = std::env::temp_dir().join(format!("coconut-example-{}.ckpt", std::process::id()));
    checkpoint::save(&path, &model, &vocab)?;
    let (loaded, loaded_vocab) = checkpoint::load(&path)?;
    println!("{} bytes, {} parameters", std::fs::metadata(&path)?.len(), loaded.store().len());

    let (inst, _) = generate_instance(&GeneratorConfig::default(), 0, Split::Val, 0)?;
    let q = vocab.tokenize(&inst.example.question)?;
    let a = coconut_generate(&model, &q, InferenceMode::Latent, 2, 12, vocab.specials())?;
    let b = coconut_generate(&loaded, &q, InferenceMode::Latent, 2, 12, loaded_vocab.specials())?;
    println!("same vocabulary: {}", vocab.tokens() == loaded_vocab.tokens());
    println!("same thoughts: {}", a.thoughts == b.thoughts);
    println!("same output: {} ({:?})", a.output == b.output, vocab.detokenize(&a.output.tokens));
    std::fs::remove_file(&path)?;
    Ok(())
}
