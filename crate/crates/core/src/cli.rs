//! Run configuration and the four commands behind the `coconut` binary.
//! Every command writes its resolved configuration before any output.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::curriculum::{
    run_curriculum, select_checkpoint, CheckpointRecord, EpochMetrics, StageSchedule, TrainOptions, TrainOutcome, Variant,
};
use crate::data::{read_jsonl, ReasoningExample};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_category_csv, Evaluation, ModelReasoner};
use crate::latent;
use crate::model::{ModelConfig, Transformer};
use crate::probe::{decode_thoughts, frontiers_at, height_value_analysis, parallelism_curves, probe_split, write_csv, ProbeOptions};
use crate::prosqa::{generate_dataset, prosqa_vocabulary, DatasetStats, GeneratorConfig, Split, SplitSizes};
use crate::vocab::Vocabulary;

pub const OUTPUT_ROOT_ENV: &str = "COCONUT_OUTPUT_ROOT";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub sizes: SplitSizes,
    pub generator: GeneratorConfig,
    /// Concepts become a stem token plus a shared suffix token.
    pub subword_concepts: bool,
    /// Use only the first n training examples.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data/prosqa"),
            sizes: SplitSizes::default(),
            generator: GeneratorConfig::default(),
            subword_concepts: true,
            train_limit: None,
            val_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Defaults to the checkpoint selected in the run manifest.
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub ks: Vec<usize>,
    pub limit: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Test,
            ks: (0..=6).collect(),
            limit: None,
            max_new_tokens: 96,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    #[default]
    Parallelism,
    Height,
    Decode,
}

impl FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallelism" => Ok(Analysis::Parallelism),
            "height" => Ok(Analysis::Height),
            "decode" => Ok(Analysis::Decode),
            _ => Err(Error::Config(format!("unknown analysis {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub analysis: Analysis,
    /// Frontier steps for the percentile curves.
    pub steps: Vec<usize>,
    /// Frontier steps pooled for the height buckets.
    pub height_steps: Vec<usize>,
    /// Example index for thought decoding.
    pub example: usize,
    /// Latent steps decoded for that example.
    pub k: usize,
    pub limit: Option<usize>,
    pub options: ProbeOptions,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: Split::Test,
            analysis: Analysis::Parallelism,
            steps: vec![1, 2],
            height_steps: (1..=6).collect(),
            example: 0,
            k: 6,
            limit: None,
            options: ProbeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    /// Seeds data generation, initialization and shuffling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: StageSchedule::default(),
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Copies the master seed into the model and schedule and fills the
    /// vocabulary size.
    pub fn resolve(&mut self) -> Result<()> {
        self.model.seed = self.seed;
        self.schedule.seed = self.seed;
        self.model.vocab_size = self.vocabulary().len();
        self.model.validate()?;
        self.schedule.validate()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        prosqa_vocabulary(self.data.subword_concepts)
    }

    fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_SNAPSHOT), self.to_toml()?)?;
        Ok(())
    }

    fn split_path(&self, split: Split) -> PathBuf {
        self.data.dir.join(format!("{}.jsonl", split.name()))
    }

    fn read_split(&self, split: Split, limit: Option<usize>) -> Result<Vec<ReasoningExample>> {
        let mut v = read_jsonl(&self.split_path(split))?;
        if let Some(n) = limit {
            v.truncate(n);
        }
        Ok(v)
    }

    /// The explicit checkpoint, else the one the run manifest selected.
    pub fn checkpoint_path(&self, explicit: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.to_path_buf());
        }
        let manifest = self.output_dir.join("manifest.json");
        let text = fs::read_to_string(&manifest).map_err(|e| Error::Selection(format!("{}: {e}", manifest.display())))?;
        #[derive(Deserialize)]
        struct Selected {
            records: Vec<CheckpointRecord>,
        }
        let m: Selected = serde_json::from_str(&text)?;
        let rec = select_checkpoint(&m.records)?;
        let path = rec
            .path
            .as_ref()
            .ok_or_else(|| Error::Selection("selected epoch has no saved weights".into()))?;
        let name = path.file_name().ok_or_else(|| Error::Selection("bad checkpoint path".into()))?;
        Ok(self.output_dir.join("checkpoints").join(name))
    }
}

/// Dataset files and `stats.json` under `data.dir`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<DatasetStats> {
    cfg.write_snapshot(&cfg.data.dir)?;
    generate_dataset(&cfg.data.dir, cfg.data.sizes, cfg.seed, &cfg.data.generator)
}

/// Trains a fresh model into `output_dir`.
pub fn cmd_train(cfg: &RunConfig, on_epoch: Option<&mut dyn FnMut(&EpochMetrics)>) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    cfg.write_snapshot(&cfg.output_dir)?;
    let train = cfg.read_split(Split::Train, cfg.data.train_limit)?;
    let val = cfg.read_split(Split::Val, cfg.data.val_limit)?;
    let vocab = cfg.vocabulary();
    let mut model = Transformer::new(cfg.model.clone())?;
    run_curriculum(
        &mut model,
        &vocab,
        &train,
        &val,
        &cfg.schedule,
        TrainOptions {
            run_dir: Some(&cfg.output_dir),
            on_epoch: match on_epoch {
                Some(f) => Some(f),
                None => None,
            },
            epoch_limit: None,
        },
    )
}

/// Inference mode used when evaluating a variant's final checkpoint.
pub fn eval_mode(schedule: &StageSchedule) -> latent::InferenceMode {
    schedule.inference(schedule.last_stage()).0
}

/// `eval/report.json`, `eval/outcomes.jsonl`, `eval/categories.csv`, and wall
/// time separately in `eval/timing.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Evaluation> {
    let dir = cfg.output_dir.join("eval");
    cfg.write_snapshot(&dir)?;
    let (model, vocab) = checkpoint::load(&cfg.checkpoint_path(cfg.eval.checkpoint.as_deref())?)?;
    let examples = cfg.read_split(cfg.eval.split, cfg.eval.limit)?;
    let reasoner = ModelReasoner {
        model: &model,
        mode: eval_mode(&cfg.schedule),
        vocab: &vocab,
        max_new: cfg.eval.max_new_tokens,
    };
    let ks = if cfg.schedule.variant == Variant::PauseToken {
        vec![cfg.schedule.final_slots()]
    } else {
        cfg.eval.ks.clone()
    };
    let started = Instant::now();
    let ev = evaluate(&reasoner, &vocab, &examples, &ks)?;
    let elapsed = started.elapsed().as_secs_f64();
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&ev.report)? + "\n")?;
    latent::write_jsonl(fs::File::create(dir.join("outcomes.jsonl"))?, &ev.outcomes)?;
    write_category_csv(fs::File::create(dir.join("categories.csv"))?, &ev.report)?;
    let timing = serde_json::json!({ "total_seconds": elapsed, "per_k": ev.timing });
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    Ok(ev)
}

/// Writes the selected analysis under `probe/` and returns the files written.
pub fn cmd_probe(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.join("probe");
    cfg.write_snapshot(&dir)?;
    let p = &cfg.probe;
    let (model, vocab) = checkpoint::load(&cfg.checkpoint_path(p.checkpoint.as_deref())?)?;
    let examples = cfg.read_split(p.split, p.limit)?;
    let mut written = Vec::new();
    let mut out = |name: String| -> Result<fs::File> {
        let path = dir.join(name);
        let f = fs::File::create(&path)?;
        written.push(path);
        Ok(f)
    };
    match p.analysis {
        Analysis::Parallelism | Analysis::Height => {
            let steps = if p.analysis == Analysis::Height { &p.height_steps } else { &p.steps };
            let (values, heights) = probe_split(&model, &vocab, &examples, steps)?;
            write_csv(out("frontier_values.csv".into())?, &values)?;
            if p.analysis == Analysis::Parallelism {
                for &s in &p.steps {
                    let rows = parallelism_curves(&frontiers_at(&values, s), p.options.normalize);
                    write_csv(out(format!("parallelism_step{s}.csv"))?, &rows)?;
                }
            } else {
                write_csv(out("height_records.csv".into())?, &heights)?;
                write_csv(out("height_buckets.csv".into())?, &height_value_analysis(&heights, p.options.height_mode))?;
            }
        }
        Analysis::Decode => {
            let ex = examples
                .get(p.example)
                .ok_or_else(|| Error::Config(format!("example {} beyond split of {}", p.example, examples.len())))?;
            let dumps = decode_thoughts(&model, &vocab, p.example, ex, p.k, p.options.top_k)?;
            latent::write_jsonl(out(format!("thoughts_example{}.jsonl", p.example))?, &dumps)?;
        }
    }
    Ok(written)
}
