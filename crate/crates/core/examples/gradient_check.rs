//! Finite-difference check of the multi-pass latent loss in double precision.

use coconut::gradcheck::{check_parameters, sample_coordinates};
use coconut::latent::{coconut_forward_train, ModeTrace, TrainingItem};
use coconut::model::{ModelConfig, Transformer};
use coconut::vocab::VocabularyBuilder;
use coconut::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> coconut::Result<()> {
    let sp = VocabularyBuilder::new(true).build().specials();
    let model = Transformer::<f64>::new(ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        context: 64,
        vocab_size: 24,
        tie_head: false,
        seed: 1,
    })?;

    let (q, tail) = ([7, 8, 9, 10], [11, 12, 13, sp.eos]);
    let trace = ModeTrace::delimited(&q, 2, &tail, sp);
    let item = TrainingItem::supervised_from(trace, q.len() + 4, sp.pad)?;

    let mut tape = Tape::new(model.store());
    let loss = coconut_forward_train(&model, &mut tape, &item)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6} over {} forward passes", tape.value(loss).item(), item.trace.latent_slots() + 1);

    let mut store = model.store().clone();
    store.zero_grad();
    store.accumulate(&grads, 1.0);
    let coords = sample_coordinates(&store, 12, &mut ChaCha8Rng::seed_from_u64(3));
    let checks = check_parameters(&mut store, &coords, 1e-5, |s| {
        let mut t = Tape::new(s);
        let l = coconut_forward_train(&model, &mut t, &item).expect("forward");
        t.value(l).item()
    });
    for c in &checks {
        println!("{:>12}[{:>5}] analytic {:+.6e} numeric {:+.6e} rel {:.1e}", c.param, c.index, c.analytic, c.numeric, c.relative_error());
    }
    let worst = checks.iter().map(|c| c.relative_error()).fold(0.0, f64::max);
    println!("worst relative error {worst:.2e}");
    Ok(())
}
