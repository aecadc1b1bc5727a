//! Pre-norm decoder-only transformer with learned positions, a key/value
//! cache, and inputs that may be either token ids or raw embedding rows.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{ParamId, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::vocab::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub tie_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 192,
            heads: 6,
            d_ff: 768,
            context: 512,
            vocab_size: 0,
            tie_head: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.context == 0 {
            return bad("layers, d_model, d_ff and context must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    tok: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head: Option<ParamId>,
}

impl Ids {
    fn resolve<T: Real>(store: &ParameterStore<T>, config: &ModelConfig) -> Result<Self> {
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| get(format!("h{l}.{s}"));
                Ok(LayerIds {
                    ln1_g: p("ln1.g")?,
                    ln1_b: p("ln1.b")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    bk: p("attn.bk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.g")?,
                    ln2_b: p("ln2.b")?,
                    w1: p("mlp.w1")?,
                    b1: p("mlp.b1")?,
                    w2: p("mlp.w2")?,
                    b2: p("mlp.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok: get("wte".into())?,
            pos: get("wpe".into())?,
            layers,
            lnf_g: get("ln_f.g".into())?,
            lnf_b: get("ln_f.b".into())?,
            head: if config.tie_head { None } else { Some(get("head.w".into())?) },
        })
    }
}

/// Parameter names and shapes in canonical order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut out = vec![
        ("wte".to_string(), vec![config.vocab_size, d]),
        ("wpe".to_string(), vec![config.context, d]),
    ];
    for l in 0..config.layers {
        for (s, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.wk", vec![d, d]),
            ("attn.bk", vec![d]),
            ("attn.wv", vec![d, d]),
            ("attn.bv", vec![d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("mlp.w1", vec![d, f]),
            ("mlp.b1", vec![f]),
            ("mlp.w2", vec![f, d]),
            ("mlp.b2", vec![d]),
        ] {
            out.push((format!("h{l}.{s}"), shape));
        }
    }
    out.push(("ln_f.g".into(), vec![d]));
    out.push(("ln_f.b".into(), vec![d]));
    if !config.tie_head {
        out.push(("head.w".into(), vec![d, config.vocab_size]));
    }
    out
}

/// One input position: a token looked up in the embedding table, or an
/// embedding row (`1×d`) already on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelInput {
    Token(TokenId),
    Embedding(Var),
}

/// Per-layer keys and values for a processed prefix, as tape variables.
#[derive(Clone, Debug, Default)]
pub struct KvCache {
    layers: Vec<(Var, Var)>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub struct Transformer<T: Real = f32> {
    config: ModelConfig,
    store: ParameterStore<T>,
    ids: Ids,
    passes: AtomicUsize,
}

impl<T: Real> Clone for Transformer<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            ids: self.ids.clone(),
            passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

impl<T: Real> std::fmt::Debug for Transformer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transformer")
            .field("config", &self.config)
            .field("parameters", &self.store.num_scalars())
            .finish()
    }
}

impl<T: Real> Transformer<T> {
    /// Fresh weights: normal(0, 0.02), residual output projections scaled by
    /// `1/sqrt(2·layers)`, unit norm gains, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = 1.0 / ((2 * config.layers) as f64).sqrt();
        let mut store = ParameterStore::new();
        for (name, shape) in parameter_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("attn.wo") || name.ends_with("mlp.w2") { resid } else { 1.0 };
                (0..n).map(|_| normal.sample(&mut rng) * s).collect()
            };
            store.insert(name, Tensor::from_f64(shape, &data)?)?;
        }
        Self::from_store(config, store)
    }

    /// Wraps existing weights, checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParameterStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != store.len() {
            return Err(Error::Config(format!(
                "config expects {} parameters, store holds {}",
                layout.len(),
                store.len()
            )));
        }
        for (name, shape) in &layout {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config implies {shape:?}",
                    store.value(id).shape()
                )));
            }
        }
        let ids = Ids::resolve(&store, &config)?;
        Ok(Self {
            config,
            store,
            ids,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParameterStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore<T> {
        &mut self.store
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Number of [`forward`](Self::forward) calls made so far.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer::from_store(self.config.clone(), self.store.cast()).expect("same layout")
    }

    fn embed(&self, tape: &mut Tape<'_, T>, inputs: &[ModelInput], offset: usize) -> Result<Var> {
        let d = self.config.d_model;
        let wte = tape.param(self.ids.tok);
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for input in inputs {
            match *input {
                ModelInput::Token(id) => run.push(id as usize),
                ModelInput::Embedding(v) => {
                    if tape.shape(v) != [1, d] {
                        return Err(Error::dim(
                            "forward",
                            format!("embedding input has shape {:?}, expected [1, {d}]", tape.shape(v)),
                        ));
                    }
                    if !run.is_empty() {
                        parts.push(tape.gather(wte, &run)?);
                        run.clear();
                    }
                    parts.push(v);
                }
            }
        }
        if !run.is_empty() {
            parts.push(tape.gather(wte, &run)?);
        }
        let x = tape.concat_rows(&parts)?;
        let wpe = tape.param(self.ids.pos);
        let positions: Vec<usize> = (offset..offset + inputs.len()).collect();
        let pos = tape.gather(wpe, &positions)?;
        tape.add(x, pos)
    }

    /// Runs `inputs` after the prefix held in `cache`, extending the cache.
    /// Returns post-final-norm hidden states, one row per input.
    pub fn forward(&self, tape: &mut Tape<'_, T>, inputs: &[ModelInput], cache: &mut KvCache) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::dim("forward", "no inputs"));
        }
        let offset = cache.len;
        let needed = offset + inputs.len();
        if needed > self.config.context {
            return Err(Error::Capacity {
                needed,
                capacity: self.config.context,
            });
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut x = self.embed(tape, inputs, offset)?;
        let fresh = cache.layers.is_empty();
        for (l, ids) in self.ids.layers.iter().enumerate() {
            let p = |tape: &mut Tape<'_, T>, id| tape.param(id);
            let (g, b) = (p(tape, ids.ln1_g), p(tape, ids.ln1_b));
            let h = tape.layer_norm(x, g, b, LN_EPS)?;
            let proj = |tape: &mut Tape<'_, T>, w: ParamId, bias: ParamId| -> Result<Var> {
                let (w, bias) = (tape.param(w), tape.param(bias));
                let m = tape.matmul(h, w)?;
                tape.add_bias(m, bias)
            };
            let q = proj(tape, ids.wq, ids.bq)?;
            let k = proj(tape, ids.wk, ids.bk)?;
            let v = proj(tape, ids.wv, ids.bv)?;
            let (k, v) = if fresh {
                cache.layers.push((k, v));
                (k, v)
            } else {
                let (ck, cv) = cache.layers[l];
                let k = tape.append_rows(ck, k)?;
                let v = tape.append_rows(cv, v)?;
                cache.layers[l] = (k, v);
                (k, v)
            };
            let a = tape.causal_attention(q, k, v, self.config.heads, offset)?;
            let (wo, bo) = (p(tape, ids.wo), p(tape, ids.bo));
            let a = tape.matmul(a, wo)?;
            let a = tape.add_bias(a, bo)?;
            x = tape.add(x, a)?;

            let (g, b) = (p(tape, ids.ln2_g), p(tape, ids.ln2_b));
            let h = tape.layer_norm(x, g, b, LN_EPS)?;
            let (w1, b1) = (p(tape, ids.w1), p(tape, ids.b1));
            let h = tape.matmul(h, w1)?;
            let h = tape.add_bias(h, b1)?;
            let h = tape.gelu(h)?;
            let (w2, b2) = (p(tape, ids.w2), p(tape, ids.b2));
            let h = tape.matmul(h, w2)?;
            let h = tape.add_bias(h, b2)?;
            x = tape.add(x, h)?;
        }
        cache.len = needed;
        let (g, b) = (tape.param(self.ids.lnf_g), tape.param(self.ids.lnf_b));
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Output-head logits for each row of `hidden`.
    pub fn logits(&self, tape: &mut Tape<'_, T>, hidden: Var) -> Result<Var> {
        match self.ids.head {
            Some(w) => {
                let w = tape.param(w);
                tape.matmul(hidden, w)
            }
            None => {
                let w = tape.param(self.ids.tok);
                tape.matmul_ext(hidden, w, true)
            }
        }
    }

    /// Mean next-token loss of a plain token sequence: row `t` predicts
    /// `tokens[t+1]` wherever `mask[t+1]` holds.
    pub fn lm_loss(&self, tape: &mut Tape<'_, T>, tokens: &[TokenId], mask: &[bool]) -> Result<Var> {
        let inputs: Vec<ModelInput> = tokens.iter().map(|&t| ModelInput::Token(t)).collect();
        let hidden = self.forward(tape, &inputs, &mut KvCache::default())?;
        shifted_loss(self, tape, hidden, tokens, mask)
    }

    pub fn session(&self) -> Session<'_, T> {
        Session {
            model: self,
            tape: Tape::inference(&self.store),
            cache: KvCache::default(),
            last: None,
        }
    }
}

/// Next-token cross-entropy from hidden rows, evaluated only on rows whose
/// successor is supervised.
pub(crate) fn shifted_loss<T: Real>(
    model: &Transformer<T>,
    tape: &mut Tape<'_, T>,
    hidden: Var,
    targets: &[TokenId],
    mask: &[bool],
) -> Result<Var> {
    if targets.len() != mask.len() || tape.shape(hidden)[0] != targets.len() {
        return Err(Error::dim("loss", "hidden rows, targets and mask must align"));
    }
    let rows: Vec<usize> = (1..targets.len()).filter(|&t| mask[t]).map(|t| t - 1).collect();
    if rows.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let picked = tape.gather(hidden, &rows)?;
    let logits = model.logits(tape, picked)?;
    let tgt: Vec<usize> = rows.iter().map(|&r| targets[r + 1] as usize).collect();
    tape.cross_entropy_masked(logits, &tgt, &vec![true; tgt.len()])
}

/// Incremental inference state: a value-only tape, the cache, and the hidden
/// state of the most recent position.
pub struct Session<'m, T: Real = f32> {
    model: &'m Transformer<T>,
    tape: Tape<'m, T>,
    cache: KvCache,
    last: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Emitted ids, including the stop token when one was hit.
    pub tokens: Vec<TokenId>,
    pub stopped: bool,
    pub truncated: bool,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn model(&self) -> &'m Transformer<T> {
        self.model
    }

    pub fn len(&self) -> usize {
        self.cache.len
    }

    pub fn is_empty(&self) -> bool {
        self.cache.len == 0
    }

    fn feed(&mut self, inputs: &[ModelInput]) -> Result<Var> {
        let hidden = self.model.forward(&mut self.tape, inputs, &mut self.cache)?;
        let rows = inputs.len();
        let last = if rows == 1 { hidden } else { self.tape.slice_rows(hidden, rows - 1, 1)? };
        self.last = Some(last);
        Ok(hidden)
    }

    /// Feeds tokens and returns their hidden states as a `rows×d` tensor.
    pub fn feed_tokens(&mut self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let inputs: Vec<ModelInput> = ids.iter().map(|&t| ModelInput::Token(t)).collect();
        let h = self.feed(&inputs)?;
        Ok(self.tape.value(h).clone())
    }

    /// Feeds arbitrary embedding rows (`rows×d`).
    pub fn feed_embeddings(&mut self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.model.d_model();
        if rows.shape().len() != 2 || rows.cols() != d {
            return Err(Error::dim("feed_embeddings", format!("expected rows of width {d}, got {:?}", rows.shape())));
        }
        let inputs: Vec<ModelInput> = (0..rows.rows())
            .map(|r| {
                let row = Tensor::from_parts_unchecked(vec![1, d], rows.row(r).to_vec());
                ModelInput::Embedding(self.tape.constant(row))
            })
            .collect();
        let h = self.feed(&inputs)?;
        Ok(self.tape.value(h).clone())
    }

    /// Feeds the last hidden state back as the next input and returns the
    /// vector that was fed.
    pub fn feed_latent(&mut self) -> Result<Vec<T>> {
        let last = self
            .last
            .ok_or_else(|| Error::Structure("latent input needs a preceding position".into()))?;
        let thought = self.tape.value(last).data().to_vec();
        self.feed(&[ModelInput::Embedding(last)])?;
        Ok(thought)
    }

    /// Hidden state of the most recent position.
    pub fn last_hidden(&self) -> Option<&[T]> {
        self.last.map(|v| self.tape.value(v).data())
    }

    /// Next-token logits at the most recent position, in `f64`.
    pub fn next_logits(&mut self) -> Result<Vec<f64>> {
        let last = self
            .last
            .ok_or_else(|| Error::Structure("no position processed yet".into()))?;
        let logits = self.model.logits(&mut self.tape, last)?;
        Ok(self.tape.value(logits).to_f64_vec())
    }

    /// Independent copy of this session's state.
    pub fn fork(&self) -> Session<'m, T> {
        let mut tape = Tape::inference(&self.model.store);
        let layers = self
            .cache
            .layers
            .iter()
            .map(|&(k, v)| {
                (
                    tape.constant(self.tape.value(k).clone()),
                    tape.constant(self.tape.value(v).clone()),
                )
            })
            .collect();
        let last = self.last.map(|v| tape.constant(self.tape.value(v).clone()));
        Session {
            model: self.model,
            tape,
            cache: KvCache {
                layers,
                len: self.cache.len,
            },
            last,
        }
    }

    /// Appends argmax tokens (lowest id on ties) until one in `stop` or `max_new` tokens.
    pub fn greedy_decode(&mut self, stop: &[TokenId], max_new: usize) -> Result<Decoded> {
        let mut tokens = Vec::new();
        for _ in 0..max_new {
            let next = argmax(&self.next_logits()?) as TokenId;
            tokens.push(next);
            if stop.contains(&next) {
                return Ok(Decoded {
                    tokens,
                    stopped: true,
                    truncated: false,
                });
            }
            self.feed_tokens(&[next])?;
        }
        Ok(Decoded {
            tokens,
            stopped: false,
            truncated: true,
        })
    }

    /// Teacher-forced `Σ log p(continuation[i] | prefix, continuation[..i])`.
    /// Leaves this session untouched.
    pub fn sequence_logprob(&self, continuation: &[TokenId]) -> Result<f64> {
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let needed = self.len() + continuation.len() - 1;
        if needed > self.model.config.context {
            return Err(Error::Capacity {
                needed,
                capacity: self.model.config.context,
            });
        }
        let mut s = self.fork();
        let mut total = log_softmax_at(&s.next_logits()?, continuation[0] as usize);
        if continuation.len() > 1 {
            let inputs: Vec<ModelInput> = continuation[..continuation.len() - 1]
                .iter()
                .map(|&t| ModelInput::Token(t))
                .collect();
            let h = s.feed(&inputs)?;
            let logits = s.model.logits(&mut s.tape, h)?;
            let lv = s.tape.value(logits);
            for (r, &tok) in continuation[1..].iter().enumerate() {
                let row: Vec<f64> = lv.row(r).iter().map(|x| x.as_f64()).collect();
                total += log_softmax_at(&row, tok as usize);
            }
        }
        Ok(total)
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax_at(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
