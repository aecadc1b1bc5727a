mod common;

use coconut::eval::{classify, classify_by_enumeration, evaluate, parse_output, Category, ModelReasoner};
use coconut::latent::InferenceMode;
use coconut::prosqa::{generate_instance, generate_split, prosqa_vocabulary, GeneratorConfig, Puzzle, Split};
use common::tiny_config;
use coconut::model::{ModelConfig, Transformer};
use proptest::prelude::*;

fn puzzle(seed: u64) -> Puzzle {
    let (inst, _) = generate_instance(&GeneratorConfig::default(), seed, Split::Val, 0).unwrap();
    Puzzle::from_example(&inst.example).unwrap()
}

/// Word salad assembled from the puzzle's own names and sentence fragments.
fn salad(p: &Puzzle, picks: &[(u8, usize, usize)]) -> String {
    let n = p.names.len();
    picks
        .iter()
        .map(|&(form, a, b)| {
            let (a, b) = (&p.names[a % n], &p.names[b % n]);
            match form % 6 {
                0 => format!("Every {a} is a {b}."),
                1 => format!("{a} is a {b}."),
                2 => format!("{} is a {b}.", p.names[p.entity]),
                3 => format!("Every {a} {b}."),
                4 => format!("{a} is a"),
                _ => format!("Is {a} a {b} or {a}?"),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_output_gets_the_oracle_category(
        seed in 0u64..200,
        picks in prop::collection::vec((any::<u8>(), any::<usize>(), any::<usize>()), 0..10),
        k in 0usize..7,
    ) {
        let p = puzzle(seed);
        let text = salad(&p, &picks);
        let parsed = parse_output(&text, &p);
        let c = classify(&parsed, k, &p);
        prop_assert!(Category::ALL.contains(&c));
        prop_assert_eq!(c, classify_by_enumeration(&parsed, k, &p), "{}", text);
    }

    #[test]
    fn raw_text_never_escapes_classification(text in "[A-Za-z .?]{0,80}", seed in 0u64..50, k in 0usize..7) {
        let p = puzzle(seed);
        let parsed = parse_output(&text, &p);
        prop_assert_eq!(classify(&parsed, k, &p), classify_by_enumeration(&parsed, k, &p));
    }
}

#[test]
fn evaluation_is_reproducible() {
    let vocab = prosqa_vocabulary(true);
    let model = Transformer::<f32>::new(ModelConfig { context: 512, ..tiny_config(vocab.len(), 3) }).unwrap();
    let examples: Vec<_> = generate_split(&GeneratorConfig::default(), 5, Split::Test, 6)
        .unwrap()
        .0
        .into_iter()
        .map(|i| i.example)
        .collect();
    let reasoner = ModelReasoner { model: &model, mode: InferenceMode::Latent, vocab: &vocab, max_new: 24 };
    let a = evaluate(&reasoner, &vocab, &examples, &[0, 2]).unwrap();
    let b = evaluate(&reasoner, &vocab, &examples, &[0, 2]).unwrap();
    assert_eq!(a.outcomes, b.outcomes);
    assert_eq!(a.report, b.report);
    for s in &a.report.per_k {
        let total: f64 = s.categories.values().sum();
        assert!((total - 1.0).abs() < 1e-12, "k={} fractions sum to {total}", s.k);
    }
}
