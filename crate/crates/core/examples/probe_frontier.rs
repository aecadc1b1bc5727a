//! Frontier values after k thoughts and their percentile curves.

use coconut::model::{ModelConfig, Transformer};
use coconut::probe::{cumulative_top3, frontiers_at, height_value_analysis, parallelism_curves, probe_split};
use coconut::prosqa::oracle::HeightMode;
use coconut::prosqa::{generate_split, prosqa_vocabulary, GeneratorConfig, Split};

fn main() -> coconut::Result<()> {
    let vocab = prosqa_vocabulary(true);
    let model = Transformer::<f32>::new(ModelConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        d_ff: 64,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })?;
    let examples: Vec<_> = generate_split(&GeneratorConfig::default(), 1, Split::Test, 20)?
        .0
        .into_iter()
        .map(|i| i.example)
        .collect();
    let (values, heights) = probe_split(&model, &vocab, &examples, &[1, 2, 3])?;

    for v in values.iter().filter(|v| v.example == 0) {
        println!("example 0 step {} {:<10} {:.3e}", v.step, v.concept, v.value);
    }
    for step in [1, 2] {
        let frontiers = frontiers_at(&values, step);
        let curve = parallelism_curves(&frontiers, false);
        let median = &curve[curve.len() / 2];
        println!(
            "step {step}: {} frontiers, median top1 {:.3e} top2 {:.3e} top3 {:.3e}; first frontier {:?}",
            frontiers.len(),
            median.top1,
            median.top2,
            median.top3,
            cumulative_top3(&frontiers[0], true)
        );
    }
    for b in height_value_analysis(&heights, HeightMode::Shortest) {
        println!(
            "height {}: correct {} nodes mean {:?}, incorrect {} nodes mean {:?}",
            b.height, b.correct_nodes, b.correct_mean, b.incorrect_nodes, b.incorrect_mean
        );
    }
    Ok(())
}
