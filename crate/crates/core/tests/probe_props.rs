mod common;

use coconut::model::{ModelConfig, Transformer};
use coconut::probe::{cumulative_top3, frontier_set, height_records, parallelism_curves, probe_split, ValueFrame};
use coconut::prosqa::{generate_instance, prosqa_vocabulary, GeneratorConfig, Puzzle, Split};
use common::tiny_config;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cumulative_values_are_monotone_and_padded(values in prop::collection::vec(0.0f64..1.0, 0..9), normalize in any::<bool>()) {
        let top = cumulative_top3(&values, normalize);
        prop_assert!(top[0] <= top[1] && top[1] <= top[2]);
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = values.iter().sum();
        let scale = if normalize && total > 0.0 { total } else { 1.0 };
        let want: f64 = sorted.iter().take(3).sum::<f64>() / scale;
        prop_assert!((top[2] - want).abs() < 1e-12);
        if values.len() < 3 {
            prop_assert_eq!(top[2], top[values.len().saturating_sub(1).min(2)]);
        }
        if normalize && total > 0.0 {
            prop_assert!(top[2] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn percentile_columns_are_sorted(frontiers in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..6), 1..30)) {
        let rows = parallelism_curves(&frontiers, false);
        prop_assert_eq!(rows.len(), frontiers.len());
        for w in rows.windows(2) {
            prop_assert!(w[0].top1 <= w[1].top1 && w[0].top2 <= w[1].top2 && w[0].top3 <= w[1].top3);
            prop_assert!(w[0].percentile < w[1].percentile);
        }
        prop_assert_eq!(rows.last().unwrap().percentile, 100.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn concept_mass_is_bounded(seed in 0u64..100, k in 0usize..4, subword in any::<bool>(), init in 0u64..3) {
        let vocab = prosqa_vocabulary(subword);
        let model = Transformer::<f32>::new(ModelConfig { context: 512, ..tiny_config(vocab.len(), init) }).unwrap();
        let (inst, _) = generate_instance(&GeneratorConfig::default(), seed, Split::Test, 0).unwrap();
        let p = Puzzle::from_example(&inst.example).unwrap();
        let frame = ValueFrame::new(&model, &vocab, &inst.example, &p, k).unwrap();
        let mut concepts: Vec<&String> = p.names.iter().enumerate().filter(|&(i, _)| i != p.entity).map(|(_, n)| n).collect();
        concepts.sort();
        concepts.dedup();
        let mut mass = 0.0;
        for c in concepts {
            let v = frame.value(&vocab, c).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            mass += v;
        }
        prop_assert!(mass <= 1.0 + 1e-5, "mass {}", mass);
    }
}

#[test]
fn probe_rows_cover_frontiers_with_consistent_heights() {
    let vocab = prosqa_vocabulary(true);
    let model = Transformer::<f32>::new(ModelConfig { context: 512, ..tiny_config(vocab.len(), 0) }).unwrap();
    let examples: Vec<_> = (0..4)
        .map(|i| generate_instance(&GeneratorConfig::default(), 8, Split::Test, i).unwrap().0.example)
        .collect();
    let (values, heights) = probe_split(&model, &vocab, &examples, &[1, 2, 3]).unwrap();
    assert_eq!(values.len(), heights.len());
    for (i, ex) in examples.iter().enumerate() {
        let p = Puzzle::from_example(ex).unwrap();
        for step in [1, 2, 3] {
            let mut nodes: Vec<usize> = values.iter().filter(|v| v.example == i && v.step == step).map(|v| v.node).collect();
            nodes.sort();
            assert_eq!(nodes, frontier_set(&p, step));
        }
        let own: Vec<_> = values.iter().filter(|v| v.example == i).cloned().collect();
        for h in height_records(&p, &own) {
            assert!(h.height_shortest <= h.height_longest);
            if h.node == p.correct {
                assert!(h.correct && h.height_shortest == 0);
            }
        }
    }
}
