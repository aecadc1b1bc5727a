//! Trains a small model through the staged curriculum, then evaluates it
//! with different numbers of thoughts.
//!
//! `cargo run --release --example train_tiny -- [variant]`

use coconut::cli::eval_mode;
use coconut::curriculum::{run_curriculum, StageSchedule, TrainOptions, Variant};
use coconut::eval::{evaluate, ModelReasoner};
use coconut::model::{ModelConfig, Transformer};
use coconut::prosqa::{generate_split, prosqa_vocabulary, GeneratorConfig, Split};

fn main() -> coconut::Result<()> {
    let variant: Variant = std::env::args().nth(1).as_deref().unwrap_or("coconut").parse()?;
    let vocab = prosqa_vocabulary(true);
    let cfg = GeneratorConfig::default();
    let split = |s, n| -> coconut::Result<Vec<_>> {
        Ok(generate_split(&cfg, 0, s, n)?.0.into_iter().map(|i| i.example).collect())
    };
    let (train, val, test) = (split(Split::Train, 256)?, split(Split::Val, 16)?, split(Split::Test, 16)?);

    let mut model = Transformer::<f32>::new(ModelConfig {
        layers: 2,
        d_model: 48,
        heads: 4,
        d_ff: 96,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })?;
    let schedule = StageSchedule {
        epochs_per_stage: vec![3; 7],
        max_epochs: 24,
        batch_size: 16,
        lr: 3e-3,
        ..StageSchedule::prosqa(variant)
    };
    let mut report = |m: &coconut::curriculum::EpochMetrics| {
        println!("epoch {:>2} stage {} loss {:.4} val acc {:.3}", m.epoch, m.stage, m.train_loss, m.val_accuracy);
    };
    let out = run_curriculum(
        &mut model,
        &vocab,
        &train,
        &val,
        &schedule,
        TrainOptions { on_epoch: Some(&mut report), ..TrainOptions::default() },
    )?;
    println!("{} optimizer steps, {} stage entries", out.steps.len(), out.stage_entries.len());

    let reasoner = ModelReasoner { model: &out.best, mode: eval_mode(&schedule), vocab: &vocab, max_new: 96 };
    let ks = [0, schedule.final_slots()];
    let result = evaluate(&reasoner, &vocab, &test, &ks)?;
    for s in &result.report.per_k {
        println!("k={} accuracy {:.3} mean new tokens {:.1}", s.k, s.accuracy, s.mean_new_tokens);
        for (c, f) in &s.categories {
            println!("  {:<16} {f:.3}", c.name());
        }
    }
    Ok(())
}
