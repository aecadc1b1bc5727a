//! Mixed language/latent sequences: assembling them, the multi-pass training
//! forward, generation with a fixed number of continuous thoughts, and
//! reading thoughts back through the output head.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{shifted_loss, softmax, Decoded, KvCache, ModelInput, Session, Transformer};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::{Specials, TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    Tokens(Vec<TokenId>),
    /// Continuous-thought positions.
    Latent(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeTrace {
    segments: Vec<Segment>,
}

impl ModeTrace {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    pub fn tokens(ids: Vec<TokenId>) -> Self {
        Self::new(vec![Segment::Tokens(ids)])
    }

    /// `head ++ <bot> ++ n thoughts ++ <eot> ++ tail`.
    pub fn delimited(head: &[TokenId], n: usize, tail: &[TokenId], specials: Specials) -> Self {
        let mut pre = head.to_vec();
        pre.push(specials.bot);
        let mut post = vec![specials.eot];
        post.extend_from_slice(tail);
        let mut segments = vec![Segment::Tokens(pre)];
        if n > 0 {
            segments.push(Segment::Latent(n));
        }
        segments.push(Segment::Tokens(post));
        Self::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Realized sequence length: tokens plus latent positions.
    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Tokens(t) => t.len(),
                Segment::Latent(n) => *n,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn latent_slots(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s {
                Segment::Latent(n) => *n,
                Segment::Tokens(_) => 0,
            })
            .sum()
    }

    /// One entry per position; `None` marks a continuous thought.
    pub fn realized(&self) -> Vec<Option<TokenId>> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            match s {
                Segment::Tokens(t) => out.extend(t.iter().map(|&x| Some(x))),
                Segment::Latent(n) => out.extend(std::iter::repeat_n(None, *n)),
            }
        }
        out
    }

    pub fn latent_positions(&self) -> Vec<usize> {
        self.realized()
            .iter()
            .enumerate()
            .filter(|(_, x)| x.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// A trace with next-token targets and a per-position supervision mask.
/// `targets[t]` is the token at position `t` (padding on latent positions)
/// and `mask[t]` says whether predicting it from position `t-1` is trained.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingItem {
    pub trace: ModeTrace,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl TrainingItem {
    pub fn new(trace: ModeTrace, mask: Vec<bool>, pad: TokenId) -> Result<Self> {
        let realized = trace.realized();
        if mask.len() != realized.len() {
            return Err(Error::Structure(format!(
                "mask has {} entries for {} positions",
                mask.len(),
                realized.len()
            )));
        }
        if realized.iter().zip(&mask).any(|(t, &m)| t.is_none() && m) {
            return Err(Error::Structure("latent positions cannot be supervised".into()));
        }
        if mask.first() == Some(&true) {
            return Err(Error::Structure("position 0 has no predecessor to predict it".into()));
        }
        let targets = realized.iter().map(|t| t.unwrap_or(pad)).collect();
        Ok(Self { trace, targets, mask })
    }

    /// Supervises every position from `start` on, except latent ones.
    pub fn supervised_from(trace: ModeTrace, start: usize, pad: TokenId) -> Result<Self> {
        let mask = trace
            .realized()
            .iter()
            .enumerate()
            .map(|(i, t)| i >= start && t.is_some())
            .collect();
        Self::new(trace, mask, pad)
    }
}

/// Result of assembling a trace on a tape.
pub struct LatentForward {
    /// Post-final-norm hidden states for every realized position.
    pub hidden: Var,
    /// The inputs actually fed, with thoughts as embedding rows.
    pub inputs: Vec<ModelInput>,
}

/// Runs a trace in `latent_slots + 1` forward passes. Each thought is the
/// hidden state of the position just before it, taken from the previous pass.
pub fn latent_forward<T: Real>(model: &Transformer<T>, tape: &mut Tape<'_, T>, trace: &ModeTrace) -> Result<LatentForward> {
    let realized = trace.realized();
    if realized.is_empty() {
        return Err(Error::Structure("empty trace".into()));
    }
    if realized[0].is_none() {
        return Err(Error::Structure("continuous thought at position 0 has no preceding state".into()));
    }
    let needed = realized.len();
    if needed > model.config().context {
        return Err(Error::Capacity {
            needed,
            capacity: model.config().context,
        });
    }
    let mut bounds: Vec<usize> = trace.latent_positions();
    bounds.insert(0, 0);
    bounds.push(realized.len());
    let mut cache = KvCache::default();
    let mut parts = Vec::with_capacity(bounds.len() - 1);
    let mut inputs = Vec::with_capacity(realized.len());
    let mut prev: Option<Var> = None;
    for w in bounds.windows(2) {
        let chunk: Vec<ModelInput> = realized[w[0]..w[1]]
            .iter()
            .enumerate()
            .map(|(i, t)| match t {
                Some(id) => Ok(ModelInput::Token(*id)),
                None if i == 0 => {
                    let h = prev.expect("a chunk precedes every thought");
                    let rows = tape.shape(h)[0];
                    let row = if rows == 1 { h } else { tape.slice_rows(h, rows - 1, 1)? };
                    Ok(ModelInput::Embedding(row))
                }
                None => unreachable!("chunks split before each thought"),
            })
            .collect::<Result<_>>()?;
        let h = model.forward(tape, &chunk, &mut cache)?;
        inputs.extend(chunk);
        parts.push(h);
        prev = Some(h);
    }
    let hidden = tape.concat_rows(&parts)?;
    Ok(LatentForward { hidden, inputs })
}

/// Masked next-token loss of a training item through the full multi-pass forward.
pub fn coconut_forward_train<T: Real>(model: &Transformer<T>, tape: &mut Tape<'_, T>, item: &TrainingItem) -> Result<Var> {
    let fwd = latent_forward(model, tape, &item.trace)?;
    shifted_loss(model, tape, fwd.hidden, &item.targets, &item.mask)
}

/// What follows the question at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Decode straight after the question.
    Plain,
    /// `<bot>`, k continuous thoughts, `<eot>`.
    Latent,
    /// k literal `<pause>` tokens, optionally wrapped in `<bot>`/`<eot>`.
    Pause { delimited: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation<T = f32> {
    pub output: Decoded,
    /// Continuous thoughts fed at each latent step, in order.
    pub thoughts: Vec<Vec<T>>,
    /// Positions added after the question, including delimiters and thoughts.
    pub new_tokens: usize,
}

/// A session positioned right after the question and the k reasoning
/// positions of `mode`, ready for language decoding.
pub fn prime_session<'m, T: Real>(
    model: &'m Transformer<T>,
    question: &[TokenId],
    mode: InferenceMode,
    k: usize,
    specials: Specials,
) -> Result<(Session<'m, T>, Vec<Vec<T>>, usize)> {
    let mut s = model.session();
    let mut thoughts = Vec::new();
    let mut added = 0;
    match mode {
        InferenceMode::Plain => {
            s.feed_tokens(question)?;
        }
        InferenceMode::Latent => {
            let mut prefix = question.to_vec();
            prefix.push(specials.bot);
            s.feed_tokens(&prefix)?;
            for _ in 0..k {
                thoughts.push(s.feed_latent()?);
            }
            s.feed_tokens(&[specials.eot])?;
            added = k + 2;
        }
        InferenceMode::Pause { delimited } => {
            let mut prefix = question.to_vec();
            if delimited {
                prefix.push(specials.bot);
            }
            prefix.extend(std::iter::repeat_n(specials.pause, k));
            if delimited {
                prefix.push(specials.eot);
            }
            s.feed_tokens(&prefix)?;
            added = k + if delimited { 2 } else { 0 };
        }
    }
    Ok((s, thoughts, added))
}

/// Question, then the reasoning positions of `mode`, then greedy decoding to `<eos>`.
pub fn coconut_generate<T: Real>(
    model: &Transformer<T>,
    question: &[TokenId],
    mode: InferenceMode,
    k: usize,
    max_new: usize,
    specials: Specials,
) -> Result<Generation<T>> {
    let (mut s, thoughts, added) = prime_session(model, question, mode, k, specials)?;
    let output = s.greedy_decode(&[specials.eos], max_new)?;
    let new_tokens = added + output.tokens.len();
    Ok(Generation {
        output,
        thoughts,
        new_tokens,
    })
}

/// Output-head distribution of a thought, highest first, ties by lower id.
pub fn decode_thought<T: Real>(model: &Transformer<T>, thought: &[T], top_k: usize) -> Result<Vec<(TokenId, f64)>> {
    let d = model.d_model();
    if thought.len() != d {
        return Err(Error::dim("decode_thought", format!("thought has width {}, model {d}", thought.len())));
    }
    let mut tape = Tape::inference(model.store());
    let h = tape.constant(Tensor::new(vec![1, d], thought.to_vec())?);
    let logits = model.logits(&mut tape, h)?;
    let probs = softmax(&tape.value(logits).to_f64_vec());
    let mut ranked: Vec<(TokenId, f64)> = probs.into_iter().enumerate().map(|(i, p)| (i as TokenId, p)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_k);
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThoughtDump {
    pub example: usize,
    pub slot: usize,
    pub tokens: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl ThoughtDump {
    pub fn new(example: usize, slot: usize, ranked: &[(TokenId, f64)], vocab: &Vocabulary) -> Self {
        Self {
            example,
            slot,
            tokens: ranked.iter().map(|&(t, _)| vocab.token(t).to_string()).collect(),
            probabilities: ranked.iter().map(|&(_, p)| p).collect(),
        }
    }
}

pub fn write_jsonl<W: Write, S: Serialize>(mut w: W, rows: &[S]) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
