mod common;

use coconut::latent::{coconut_forward_train, coconut_generate, InferenceMode, ModeTrace, TrainingItem};
use coconut::model::{KvCache, ModelInput, Transformer};
use coconut::vocab::{Specials, TokenId, VocabularyBuilder};
use coconut::{Gradients, Tape};
use common::tiny;
use proptest::prelude::*;

const VOCAB: usize = 20;

fn specials() -> Specials {
    VocabularyBuilder::new(true).build().specials()
}

fn grads_of(model: &Transformer<f64>, item: &TrainingItem) -> (f64, Gradients<f64>) {
    let mut t = Tape::new(model.store());
    let l = coconut_forward_train(model, &mut t, item).unwrap();
    (t.value(l).item(), t.backward(l).unwrap())
}

#[test]
fn gradients_flow_through_the_thought() {
    let model = tiny::<f64>(VOCAB, 2);
    let sp = specials();
    let q = [6, 7, 8];
    let tail = [9, 10, 11, sp.eos];
    let trace = ModeTrace::delimited(&q, 1, &tail, sp);
    let item = TrainingItem::supervised_from(trace, q.len() + 3, sp.pad).unwrap();
    let (_, full) = grads_of(&model, &item);

    // same forward, but the thought enters as a constant
    let detached = {
        let mut t = Tape::new(model.store());
        let mut cache = KvCache::default();
        let head: Vec<ModelInput> = q.iter().chain(&[sp.bot]).map(|&i| ModelInput::Token(i)).collect();
        let h1 = model.forward(&mut t, &head, &mut cache).unwrap();
        let last = t.value(h1).row(q.len()).to_vec();
        let thought = t.constant(coconut::Tensor::new(vec![1, last.len()], last).unwrap());
        let rest: Vec<ModelInput> = std::iter::once(ModelInput::Embedding(thought))
            .chain([sp.eot].iter().chain(&tail).map(|&i| ModelInput::Token(i)))
            .collect();
        let h2 = model.forward(&mut t, &rest, &mut cache).unwrap();
        let hidden = t.concat_rows(&[h1, h2]).unwrap();
        let rows: Vec<usize> = (q.len() + 2..q.len() + 2 + tail.len()).collect();
        let picked = t.gather(hidden, &rows).unwrap();
        let logits = model.logits(&mut t, picked).unwrap();
        let targets: Vec<usize> = tail.iter().map(|&x| x as usize).collect();
        let l = t.cross_entropy_masked(logits, &targets, &vec![true; targets.len()]).unwrap();
        t.backward(l).unwrap()
    };

    let store = model.store();
    let mut differs = 0;
    for (id, p) in store.iter() {
        let a = full.param(id).expect("every parameter reaches the loss");
        assert!(a.data().iter().any(|&g| g != 0.0), "{} has zero gradient", p.name());
        let b = detached.param(id).unwrap();
        if a.data().iter().zip(b.data()).any(|(x, y)| (x - y).abs() > 1e-12) {
            differs += 1;
        }
    }
    let wte = store.id("wte").unwrap();
    let g = full.param(wte).unwrap();
    let d = g.cols();
    for &tok in q.iter().chain(&[sp.bot]) {
        let row = &g.data()[tok as usize * d..(tok as usize + 1) * d];
        assert!(row.iter().any(|&x| x != 0.0), "token {tok} row has zero gradient");
    }
    assert!(differs > store.len() / 2, "only {differs} parameters see the thought path");

    let coord = tok_coord(q[0], d);
    let mut probe = store.clone();
    probe.zero_grad();
    probe.accumulate(&full, 1.0);
    let check = coconut::gradcheck::check_parameters(&mut probe, &[(wte, coord)], 1e-5, |s| {
        let mut t = Tape::new(s);
        let l = coconut_forward_train(&model, &mut t, &item).unwrap();
        t.value(l).item()
    });
    assert!(check[0].relative_error() < 1e-4 && check[0].analytic != 0.0, "{check:?}");
}

fn tok_coord(tok: TokenId, d: usize) -> usize {
    tok as usize * d + 3
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_targets_do_not_affect_loss_or_gradients(
        q in prop::collection::vec(5..VOCAB as TokenId, 1..6),
        tail in prop::collection::vec(5..VOCAB as TokenId, 1..6),
        n in 0usize..4,
        junk in prop::collection::vec(0..VOCAB as TokenId, 20),
    ) {
        let model = tiny::<f64>(VOCAB, 7);
        let sp = specials();
        let trace = ModeTrace::delimited(&q, n, &tail, sp);
        let item = TrainingItem::supervised_from(trace, q.len() + n + 2, sp.pad).unwrap();
        let mut swapped = item.clone();
        for (i, (t, &m)) in swapped.targets.iter_mut().zip(&item.mask).enumerate() {
            if !m {
                *t = junk[i % junk.len()];
            }
        }
        let (la, ga) = grads_of(&model, &item);
        let (lb, gb) = grads_of(&model, &swapped);
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        for (id, _) in model.store().iter() {
            prop_assert_eq!(ga.param(id).map(|t| t.data().to_vec()), gb.param(id).map(|t| t.data().to_vec()));
        }
    }

    #[test]
    fn thoughts_are_final_normalized(q in prop::collection::vec(5..VOCAB as TokenId, 1..8), k in 1usize..5, seed in 0u64..3) {
        let model = tiny::<f32>(VOCAB, seed);
        let g = coconut_generate(&model, &q, InferenceMode::Latent, k, 3, specials()).unwrap();
        prop_assert_eq!(g.thoughts.len(), k);
        for th in &g.thoughts {
            let n = th.len() as f64;
            let mean = th.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = th.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-4 && var > 0.9 && var <= 1.0 + 1e-4, "mean {} var {}", mean, var);
        }
    }
}
