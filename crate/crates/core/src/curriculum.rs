//! Staged training: each stage swaps the first k language steps for k·c
//! continuous thoughts. Baselines and ablations are alternative mappings
//! from a stage index to a training sequence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::ReasoningExample;
use crate::error::{Error, Result};
use crate::eval::{answer_matches, output_text};
use crate::latent::{coconut_forward_train, coconut_generate, InferenceMode, ModeTrace, TrainingItem};
use crate::model::Transformer;
use crate::optim::Adam;
use crate::tape::Tape;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Coconut,
    Cot,
    NoCot,
    WoCurriculum,
    WoThought,
    PauseAsThought,
    PauseToken,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Coconut,
        Variant::Cot,
        Variant::NoCot,
        Variant::WoCurriculum,
        Variant::WoThought,
        Variant::PauseAsThought,
        Variant::PauseToken,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Coconut => "coconut",
            Variant::Cot => "cot",
            Variant::NoCot => "no_cot",
            Variant::WoCurriculum => "wo_curriculum",
            Variant::WoThought => "wo_thought",
            Variant::PauseAsThought => "pause_as_thought",
            Variant::PauseToken => "pause_token",
        }
    }

    fn staged(self) -> bool {
        matches!(self, Variant::Coconut | Variant::WoThought | Variant::PauseAsThought)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalPolicy {
    /// Stay in stage N.
    #[default]
    Hold,
    /// Add stage N+1: N·c thoughts and no language steps at all.
    ExtraStageDropRemainder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub variant: Variant,
    /// Thoughts per replaced step.
    pub thoughts_per_step: usize,
    /// Number of stages after the initial one.
    pub stages: usize,
    /// Epochs for stages `0..=stages`; under the extra-stage policy the last
    /// entry also sets the extra stage's epochs.
    pub epochs_per_stage: Vec<usize>,
    /// Total epoch budget: the final stage is held until it is reached and
    /// longer stage lists are cut off.
    pub max_epochs: usize,
    pub final_policy: FinalPolicy,
    pub lr: f64,
    /// Examples per optimizer step (gradients are accumulated one example at a time).
    pub batch_size: usize,
    pub seed: u64,
    pub reset_optimizer: bool,
    /// Draw each example's stage uniformly from `0..=k` instead of using `k`.
    pub mix_earlier_stages: bool,
    /// Use `k·c` thoughts even when an example has fewer than `k` steps.
    pub pad_latent_to_max: bool,
    /// Greedy decoding budget for validation.
    pub max_new_tokens: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self::prosqa(Variant::Coconut)
    }
}

impl StageSchedule {
    /// Six stages of one thought per step, five epochs each, held to fifty epochs.
    pub fn prosqa(variant: Variant) -> Self {
        Self {
            variant,
            thoughts_per_step: 1,
            stages: 6,
            epochs_per_stage: vec![5; 7],
            max_epochs: 50,
            final_policy: FinalPolicy::Hold,
            lr: 1e-4,
            batch_size: 128,
            seed: 0,
            reset_optimizer: true,
            mix_earlier_stages: false,
            pad_latent_to_max: false,
            max_new_tokens: 96,
        }
    }

    /// Two thoughts per step, three stages plus a stage that drops all
    /// remaining language steps; six epochs first, then three per stage.
    pub fn gsm8k(variant: Variant) -> Self {
        Self {
            thoughts_per_step: 2,
            stages: 3,
            epochs_per_stage: vec![6, 3, 3, 3],
            final_policy: FinalPolicy::ExtraStageDropRemainder,
            max_new_tokens: 128,
            ..Self::prosqa(variant)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_stage.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "epochs_per_stage has {} entries, expected stages + 1 = {}",
                self.epochs_per_stage.len(),
                self.stages + 1
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn extra_stage(&self) -> Option<usize> {
        (self.final_policy == FinalPolicy::ExtraStageDropRemainder).then_some(self.stages + 1)
    }

    /// Highest stage index the schedule reaches.
    pub fn last_stage(&self) -> usize {
        if self.variant.staged() || self.variant == Variant::WoCurriculum {
            self.extra_stage().unwrap_or(self.stages)
        } else {
            0
        }
    }

    /// Stage index for every epoch, in order.
    pub fn plan(&self) -> Vec<usize> {
        if !self.variant.staged() {
            return vec![self.last_stage(); self.max_epochs];
        }
        let mut plan = Vec::new();
        for (k, &e) in self.epochs_per_stage.iter().enumerate() {
            plan.extend(std::iter::repeat_n(k, e));
        }
        if let Some(extra) = self.extra_stage() {
            plan.extend(std::iter::repeat_n(extra, *self.epochs_per_stage.last().expect("validated")));
        }
        let last = self.last_stage();
        plan.resize(self.max_epochs, last);
        plan
    }

    /// Thoughts in the final stage, also the fixed pause count of the pause-token baseline.
    pub fn final_slots(&self) -> usize {
        self.stages * self.thoughts_per_step
    }

    /// Inference mode and reasoning positions matching a stage.
    pub fn inference(&self, stage: usize) -> (InferenceMode, usize) {
        let k = stage.min(self.stages) * self.thoughts_per_step;
        match self.variant {
            Variant::Coconut | Variant::WoCurriculum => (InferenceMode::Latent, k),
            Variant::PauseAsThought => (InferenceMode::Pause { delimited: true }, k),
            Variant::PauseToken => (InferenceMode::Pause { delimited: false }, self.final_slots()),
            Variant::Cot | Variant::NoCot | Variant::WoThought => (InferenceMode::Plain, 0),
        }
    }
}

struct Tokenized {
    question: Vec<TokenId>,
    steps: Vec<Vec<TokenId>>,
    answer: Vec<TokenId>,
}

fn tokenize_example(ex: &ReasoningExample, vocab: &Vocabulary) -> Result<Tokenized> {
    Ok(Tokenized {
        question: vocab.tokenize(&ex.question)?,
        steps: ex.steps.iter().map(|s| vocab.tokenize(s)).collect::<Result<_>>()?,
        answer: vocab.tokenize(&ex.answer)?,
    })
}

fn build_from_tokens(t: &Tokenized, stage: usize, schedule: &StageSchedule, vocab: &Vocabulary) -> Result<TrainingItem> {
    let sp = vocab.specials();
    let c = schedule.thoughts_per_step;
    let extra = schedule.extra_stage() == Some(stage);
    let removed = if extra { t.steps.len() } else { stage.min(t.steps.len()) };
    let slots = if extra {
        schedule.final_slots()
    } else if schedule.pad_latent_to_max {
        stage * c
    } else {
        removed * c
    };
    let tail = |skip: usize| -> Vec<TokenId> {
        let mut v: Vec<TokenId> = t.steps[skip..].iter().flatten().copied().collect();
        v.extend_from_slice(&t.answer);
        v.push(sp.eos);
        v
    };
    let q = t.question.len();
    let plain = |ids: Vec<TokenId>, from: usize| TrainingItem::supervised_from(ModeTrace::tokens(ids), from, sp.pad);
    match schedule.variant {
        Variant::Coconut | Variant::WoCurriculum => {
            let trace = ModeTrace::delimited(&t.question, slots, &tail(removed), sp);
            TrainingItem::supervised_from(trace, q + slots + 2, sp.pad)
        }
        Variant::PauseAsThought => {
            let mut ids = t.question.clone();
            ids.push(sp.bot);
            ids.extend(std::iter::repeat_n(sp.pause, slots));
            ids.push(sp.eot);
            ids.extend(tail(removed));
            plain(ids, q + slots + 2)
        }
        Variant::WoThought => plain([t.question.clone(), tail(removed)].concat(), q),
        Variant::Cot => plain([t.question.clone(), tail(0)].concat(), q),
        Variant::NoCot => plain([t.question.clone(), tail(t.steps.len())].concat(), q),
        Variant::PauseToken => {
            let m = schedule.final_slots();
            let mut ids = t.question.clone();
            ids.extend(std::iter::repeat_n(sp.pause, m));
            ids.extend(tail(t.steps.len()));
            plain(ids, q + m)
        }
    }
}

/// The training sequence for `ex` at `stage` under the schedule's variant.
pub fn build_stage_example(
    ex: &ReasoningExample,
    stage: usize,
    schedule: &StageSchedule,
    vocab: &Vocabulary,
) -> Result<TrainingItem> {
    if stage > schedule.last_stage().max(schedule.stages) {
        return Err(Error::Config(format!("stage {stage} beyond schedule")));
    }
    build_from_tokens(&tokenize_example(ex, vocab)?, stage, schedule, vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub stage: usize,
    pub epoch: usize,
    pub val_accuracy: f64,
    /// Present when weights for this epoch were written.
    pub path: Option<PathBuf>,
}

/// Best validation accuracy within the last stage present; ties go to the earliest epoch.
pub fn select_checkpoint(records: &[CheckpointRecord]) -> Result<&CheckpointRecord> {
    let last = records
        .iter()
        .map(|r| r.stage)
        .max()
        .ok_or_else(|| Error::Selection("no checkpoint records".into()))?;
    let mut best: Option<&CheckpointRecord> = None;
    for r in records.iter().filter(|r| r.stage == last) {
        if best.is_none_or(|b| r.val_accuracy > b.val_accuracy || (r.val_accuracy == b.val_accuracy && r.epoch < b.epoch)) {
            best = Some(r);
        }
    }
    best.ok_or_else(|| Error::Selection("no last-stage records".into()))
}

/// One row per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub stage: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Optimizer state observed as a stage begins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: usize,
    pub epoch: usize,
    pub moments_zero: bool,
}

pub struct TrainOutcome {
    pub records: Vec<CheckpointRecord>,
    pub stage_entries: Vec<StageEntry>,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepLoss>,
    /// Weights at the selected epoch.
    pub best: Transformer<f32>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where metrics, loss trace, checkpoints and manifest go.
    pub run_dir: Option<&'a Path>,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
    /// Stop after this many epochs of the plan.
    pub epoch_limit: Option<usize>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    crate_version: &'static str,
    schedule: &'a StageSchedule,
    records: &'a [CheckpointRecord],
    selected: Option<&'a CheckpointRecord>,
}

/// Final-answer accuracy on `examples` with the stage's own inference setting.
pub fn validation_accuracy(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    examples: &[ReasoningExample],
    schedule: &StageSchedule,
    stage: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let (mode, k) = schedule.inference(stage);
    let mut hits = 0;
    for ex in examples {
        let q = vocab.tokenize(&ex.question)?;
        let g = coconut_generate(model, &q, mode, k, schedule.max_new_tokens, vocab.specials())?;
        if answer_matches(&output_text(vocab, &g.output.tokens), &ex.answer) {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn diverged(stage: usize, epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            stage,
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` through the schedule, validating after every epoch.
pub fn run_curriculum(
    model: &mut Transformer<f32>,
    vocab: &Vocabulary,
    train: &[ReasoningExample],
    val: &[ReasoningExample],
    schedule: &StageSchedule,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary {} differs from tokenizer {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let tokenized = train.iter().map(|e| tokenize_example(e, vocab)).collect::<Result<Vec<_>>>()?;
    let mut plan = schedule.plan();
    if let Some(limit) = opts.epoch_limit {
        plan.truncate(limit);
    }
    let last_stage = *plan.last().ok_or_else(|| Error::Config("empty epoch plan".into()))?;
    let run_dir = opts.run_dir;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let snapshot = toml::to_string(schedule).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join("schedule.toml"), snapshot)?;
    }
    let mut metrics_csv = match run_dir {
        Some(d) => Some(csv::Writer::from_path(d.join("metrics.csv"))?),
        None => None,
    };
    let mut trace_csv = match run_dir {
        Some(d) => Some(csv::Writer::from_path(d.join("loss_trace.csv"))?),
        None => None,
    };
    let adam = Adam::with_lr(schedule.lr);
    let mut records = Vec::new();
    let mut stage_entries = Vec::new();
    let mut metrics = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(f64, Transformer<f32>)> = None;
    let mut prev_stage = None;
    let mut step = 0;
    for (epoch, &stage) in plan.iter().enumerate() {
        if prev_stage != Some(stage) {
            if prev_stage.is_some() && schedule.reset_optimizer {
                model.store_mut().reset_optimizer_state();
            }
            stage_entries.push(StageEntry {
                stage,
                epoch,
                moments_zero: model.store().moments_are_zero(),
            });
        }
        prev_stage = Some(stage);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(schedule.batch_size) {
            let mut batch_loss = 0.0;
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let s = if schedule.mix_earlier_stages { rng.random_range(0..=stage) } else { stage };
                let item = build_from_tokens(&tokenized[i], s, schedule, vocab)?;
                let grads = {
                    let mut tape = Tape::new(model.store());
                    let loss = coconut_forward_train(model, &mut tape, &item).map_err(|e| diverged(stage, epoch, e))?;
                    let value = tape.value(loss).item() as f64;
                    if !value.is_finite() {
                        return Err(Error::Divergence {
                            stage,
                            epoch,
                            detail: "loss is not finite".into(),
                        });
                    }
                    batch_loss += value;
                    tape.backward(loss).map_err(|e| diverged(stage, epoch, e))?
                };
                model.store_mut().accumulate(&grads, scale);
            }
            adam.step(model.store_mut()).map_err(|e| diverged(stage, epoch, e))?;
            let mean = batch_loss / batch.len() as f64;
            epoch_loss += batch_loss;
            let row = StepLoss {
                stage,
                epoch,
                step,
                loss: mean,
            };
            if let Some(w) = trace_csv.as_mut() {
                w.serialize(&row)?;
            }
            steps.push(row);
            step += 1;
        }
        let val_accuracy = validation_accuracy(model, vocab, val, schedule, stage)?;
        let m = EpochMetrics {
            stage,
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_accuracy,
        };
        if let Some(w) = metrics_csv.as_mut() {
            w.serialize(&m)?;
            w.flush()?;
        }
        if let Some(f) = opts.on_epoch.as_mut() {
            f(&m);
        }
        metrics.push(m);
        let mut path = None;
        if stage == last_stage && best.as_ref().is_none_or(|(b, _)| val_accuracy > *b) {
            if let Some(dir) = run_dir {
                let p = dir.join("checkpoints").join(format!("stage{stage}-epoch{epoch}.ckpt"));
                checkpoint::save(&p, model, vocab)?;
                path = Some(p);
            }
            best = Some((val_accuracy, model.clone()));
        }
        records.push(CheckpointRecord {
            stage,
            epoch,
            val_accuracy,
            path,
        });
    }
    if let Some(w) = trace_csv.as_mut() {
        w.flush()?;
    }
    let best = match best {
        Some((_, m)) => m,
        None => model.clone(),
    };
    if let Some(dir) = run_dir {
        let selected = select_checkpoint(&records).ok();
        let manifest = Manifest {
            crate_version: env!("CARGO_PKG_VERSION"),
            schedule,
            records: &records,
            selected,
        };
        let mut f = fs::File::create(dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
    }
    Ok(TrainOutcome {
        records,
        stage_entries,
        metrics,
        steps,
        best,
    })
}
