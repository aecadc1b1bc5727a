//! Reading the latent search off a trained model: how much probability each
//! frontier concept gets as the first concept after k thoughts.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::ReasoningExample;
use crate::error::{Error, Result};
use crate::latent::{decode_thought, prime_session, InferenceMode, ThoughtDump};
use crate::model::{Session, Transformer};
use crate::prosqa::oracle::{bfs_layer, node_height, reachable, HeightMode};
use crate::prosqa::Puzzle;
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub height_mode: HeightMode,
    /// Rescale each frontier so its values sum to one before ranking.
    pub normalize: bool,
    /// Candidates kept when decoding a thought through the output head.
    pub top_k: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            height_mode: HeightMode::Shortest,
            normalize: false,
            top_k: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierValue {
    pub example: usize,
    pub step: usize,
    pub node: usize,
    pub concept: String,
    pub value: f64,
}

/// Nodes exactly `step` hops below the queried entity.
pub fn frontier_set(puzzle: &Puzzle, step: usize) -> Vec<usize> {
    bfs_layer(&puzzle.children, puzzle.entity, step)
}

/// Session after the question, k thoughts, `<eot>` and the sentence opening
/// that precedes the first concept.
pub struct ValueFrame<'m> {
    session: Session<'m, f32>,
}

impl<'m> ValueFrame<'m> {
    pub fn new(model: &'m Transformer<f32>, vocab: &Vocabulary, ex: &ReasoningExample, puzzle: &Puzzle, k: usize) -> Result<Self> {
        let question = vocab.tokenize(&ex.question)?;
        let (mut session, _, _) = prime_session(model, &question, InferenceMode::Latent, k, vocab.specials())?;
        let opening = if k == 0 {
            format!("{} is a", puzzle.names[puzzle.entity])
        } else {
            "Every".to_string()
        };
        session.feed_tokens(&vocab.tokenize(&opening)?)?;
        Ok(Self { session })
    }

    /// Product of the concept's token probabilities in this frame.
    pub fn value(&self, vocab: &Vocabulary, concept: &str) -> Result<f64> {
        let ids = vocab.tokenize(concept)?;
        Ok(self.session.sequence_logprob(&ids)?.exp())
    }
}

/// Value of a single node after k thoughts.
pub fn candidate_value(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    ex: &ReasoningExample,
    k: usize,
    node: usize,
) -> Result<f64> {
    let puzzle = Puzzle::from_example(ex)?;
    if node >= puzzle.names.len() {
        return Err(Error::Structure(format!("node {node} not in the instance")));
    }
    ValueFrame::new(model, vocab, ex, &puzzle, k)?.value(vocab, &puzzle.names[node])
}

/// Values of every frontier node at `step`, using `step` thoughts.
pub fn frontier_values(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    example_index: usize,
    ex: &ReasoningExample,
    step: usize,
) -> Result<Vec<FrontierValue>> {
    if step == 0 {
        return Err(Error::Config("frontier step must be at least 1".into()));
    }
    let puzzle = Puzzle::from_example(ex)?;
    let frontier = frontier_set(&puzzle, step);
    if frontier.is_empty() {
        return Ok(Vec::new());
    }
    let frame = ValueFrame::new(model, vocab, ex, &puzzle, step)?;
    frontier
        .into_iter()
        .map(|node| {
            Ok(FrontierValue {
                example: example_index,
                step,
                node,
                concept: puzzle.names[node].clone(),
                value: frame.value(vocab, &puzzle.names[node])?,
            })
        })
        .collect()
}

/// Top-1, top-2 and top-3 cumulative values of one frontier. Short frontiers
/// repeat their last cumulative value.
pub fn cumulative_top3(values: &[f64], normalize: bool) -> [f64; 3] {
    let mut v = values.to_vec();
    if normalize {
        let total: f64 = v.iter().sum();
        if total > 0.0 {
            v.iter_mut().for_each(|x| *x /= total);
        }
    }
    v.sort_by(|a, b| b.total_cmp(a));
    let mut out = [0.0; 3];
    let mut acc = 0.0;
    for (r, slot) in out.iter_mut().enumerate() {
        if let Some(x) = v.get(r) {
            acc += x;
        }
        *slot = acc;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub percentile: f64,
    pub top1: f64,
    pub top2: f64,
    pub top3: f64,
}

/// Each rank's cumulative values sorted independently, indexed by percentile.
pub fn parallelism_curves(frontiers: &[Vec<f64>], normalize: bool) -> Vec<PercentileRow> {
    let tops: Vec<[f64; 3]> = frontiers.iter().map(|f| cumulative_top3(f, normalize)).collect();
    let column = |r: usize| {
        let mut c: Vec<f64> = tops.iter().map(|t| t[r]).collect();
        c.sort_by(|a, b| a.total_cmp(b));
        c
    };
    let (c1, c2, c3) = (column(0), column(1), column(2));
    let n = tops.len();
    (0..n)
        .map(|i| PercentileRow {
            percentile: 100.0 * (i + 1) as f64 / n as f64,
            top1: c1[i],
            top2: c2[i],
            top3: c3[i],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightRecord {
    pub example: usize,
    pub step: usize,
    pub node: usize,
    pub concept: String,
    pub height_shortest: usize,
    pub height_longest: usize,
    /// The correct target is reachable from this node.
    pub correct: bool,
    pub value: f64,
}

/// Annotates frontier values with heights and reachability of the target.
pub fn height_records(puzzle: &Puzzle, values: &[FrontierValue]) -> Vec<HeightRecord> {
    values
        .iter()
        .map(|v| HeightRecord {
            example: v.example,
            step: v.step,
            node: v.node,
            concept: v.concept.clone(),
            height_shortest: node_height(&puzzle.children, v.node, HeightMode::Shortest),
            height_longest: node_height(&puzzle.children, v.node, HeightMode::Longest),
            correct: reachable(&puzzle.children, v.node, puzzle.correct),
            value: v.value,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightBucket {
    pub height: usize,
    pub correct_nodes: usize,
    pub correct_mean: Option<f64>,
    pub incorrect_nodes: usize,
    pub incorrect_mean: Option<f64>,
}

/// Mean value per height, split by reachability of the target. Heights with
/// no nodes are absent.
pub fn height_value_analysis(records: &[HeightRecord], mode: HeightMode) -> Vec<HeightBucket> {
    let mut acc: BTreeMap<usize, [(usize, f64); 2]> = BTreeMap::new();
    for r in records {
        let h = match mode {
            HeightMode::Shortest => r.height_shortest,
            HeightMode::Longest => r.height_longest,
        };
        let e = &mut acc.entry(h).or_default()[r.correct as usize];
        e.0 += 1;
        e.1 += r.value;
    }
    let mean = |(n, s): (usize, f64)| (n > 0).then(|| s / n as f64);
    acc.into_iter()
        .map(|(height, [inc, cor])| HeightBucket {
            height,
            correct_nodes: cor.0,
            correct_mean: mean(cor),
            incorrect_nodes: inc.0,
            incorrect_mean: mean(inc),
        })
        .collect()
}

/// Frontier values for each example and step, with height annotations.
pub fn probe_split(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    examples: &[ReasoningExample],
    steps: &[usize],
) -> Result<(Vec<FrontierValue>, Vec<HeightRecord>)> {
    let mut values = Vec::new();
    let mut heights = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let puzzle = Puzzle::from_example(ex)?;
        for &step in steps {
            let v = frontier_values(model, vocab, i, ex, step)?;
            heights.extend(height_records(&puzzle, &v));
            values.extend(v);
        }
    }
    Ok((values, heights))
}

/// Groups values by (example, step) for the percentile curves of one step.
pub fn frontiers_at(values: &[FrontierValue], step: usize) -> Vec<Vec<f64>> {
    let mut by_example: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for v in values.iter().filter(|v| v.step == step) {
        by_example.entry(v.example).or_default().push(v.value);
    }
    by_example.into_values().collect()
}

/// Output-head readings of each thought for one example.
pub fn decode_thoughts(
    model: &Transformer<f32>,
    vocab: &Vocabulary,
    example_index: usize,
    ex: &ReasoningExample,
    k: usize,
    top_k: usize,
) -> Result<Vec<ThoughtDump>> {
    let q = vocab.tokenize(&ex.question)?;
    let (_, thoughts, _) = prime_session(model, &q, InferenceMode::Latent, k, vocab.specials())?;
    thoughts
        .iter()
        .enumerate()
        .map(|(slot, t)| Ok(ThoughtDump::new(example_index, slot, &decode_thought(model, t, top_k)?, vocab)))
        .collect()
}

pub fn write_csv<W: Write, S: Serialize>(w: W, rows: &[S]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{softmax, ModelConfig};
    use crate::vocab::VocabularyBuilder;

    fn reference() -> ReasoningExample {
        ReasoningExample {
            question: "Tom is a terpus. Every terpus is a brimpus. Every terpus is a gorpus. Every brimpus is a lempus. \
                       Every gorpus is a scrompus. Is Tom a lempus or scrompus?"
                .into(),
            steps: vec![],
            answer: "Tom is a lempus.".into(),
        }
    }

    fn setup(subword: bool) -> (Transformer<f32>, Vocabulary) {
        let mut b = VocabularyBuilder::new(subword);
        b.text(&reference().question);
        b.text("Every");
        let v = b.build();
        let m = Transformer::new(ModelConfig {
            layers: 1,
            d_model: 16,
            heads: 2,
            d_ff: 32,
            context: 64,
            vocab_size: v.len(),
            tie_head: false,
            seed: 5,
        })
        .unwrap();
        (m, v)
    }

    #[test]
    fn frontier_layers() {
        let p = Puzzle::from_example(&reference()).unwrap();
        let names = |s: usize| {
            let mut v: Vec<&str> = frontier_set(&p, s).into_iter().map(|i| p.names[i].as_str()).collect();
            v.sort();
            v
        };
        assert_eq!(names(1), vec!["terpus"]);
        assert_eq!(names(2), vec!["brimpus", "gorpus"]);
        assert!(names(9).is_empty());
    }

    #[test]
    fn single_token_value_is_softmax_entry() {
        let (m, v) = setup(false);
        let ex = reference();
        let p = Puzzle::from_example(&ex).unwrap();
        let frame = ValueFrame::new(&m, &v, &ex, &p, 2).unwrap();
        let mut s = frame.session.fork();
        let probs = softmax(&s.next_logits().unwrap());
        let id = v.id("gorpus").unwrap() as usize;
        let got = frame.value(&v, "gorpus").unwrap();
        assert!((got - probs[id]).abs() < 1e-9);
        let via = candidate_value(&m, &v, &ex, 2, p.node("gorpus").unwrap()).unwrap();
        assert_eq!(via, got);
    }

    #[test]
    fn concept_mass_is_at_most_one() {
        for subword in [false, true] {
            let (m, v) = setup(subword);
            let ex = reference();
            let p = Puzzle::from_example(&ex).unwrap();
            let frame = ValueFrame::new(&m, &v, &ex, &p, 1).unwrap();
            let total: f64 = p.names[1..].iter().map(|c| frame.value(&v, c).unwrap()).sum();
            assert!(total <= 1.0 + 1e-6, "{total}");
        }
    }

    #[test]
    fn cumulative_curves_pad_and_order() {
        assert_eq!(cumulative_top3(&[0.2, 0.5], false), [0.5, 0.7, 0.7]);
        assert_eq!(cumulative_top3(&[], false), [0.0; 3]);
        assert_eq!(cumulative_top3(&[0.9], false), [0.9; 3]);
        let n = cumulative_top3(&[0.1, 0.3], true);
        assert!((n[0] - 0.75).abs() < 1e-12 && (n[2] - 1.0).abs() < 1e-12);
        let rows = parallelism_curves(&[vec![0.1, 0.2, 0.3, 0.05], vec![0.6], vec![0.3, 0.3]], false);
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.top3 >= r.top2 && r.top2 >= r.top1);
        }
        assert_eq!(rows[2].percentile, 100.0);
    }

    #[test]
    fn target_has_height_zero_and_is_correct() {
        let ex = reference();
        let p = Puzzle::from_example(&ex).unwrap();
        let values: Vec<FrontierValue> = [p.correct, p.incorrect, p.node("brimpus").unwrap()]
            .into_iter()
            .map(|node| FrontierValue {
                example: 0,
                step: 3,
                node,
                concept: p.names[node].clone(),
                value: 0.5,
            })
            .collect();
        let recs = height_records(&p, &values);
        assert_eq!((recs[0].height_shortest, recs[0].correct), (0, true));
        assert!(!recs[1].correct);
        assert_eq!((recs[2].height_shortest, recs[2].correct), (1, true));
        let buckets = height_value_analysis(&recs, HeightMode::Shortest);
        assert_eq!(buckets.len(), 2);
        assert_eq!(buckets[0].correct_nodes, 1);
        assert_eq!(buckets[1].incorrect_mean, None);
    }
}
