//! Seeded split generation, summary statistics, and the closed vocabulary.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, ReasoningExample};
use crate::error::{Error, Result};
use crate::prosqa::graph::build_graph;
use crate::prosqa::oracle::shortest_paths;
use crate::prosqa::render::{concept_stems, render, select_question, surface_words, ProblemInstance, Rejection};
use crate::vocab::{Vocabulary, VocabularyBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Nodes per graph.
    pub nodes: usize,
    pub min_path: usize,
    pub max_path: usize,
    /// Give up on an instance after this many rejected graphs.
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            nodes: 25,
            min_path: 3,
            max_path: 6,
            max_attempts: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x5452_4149_4e00_0001,
            Split::Val => 0x5641_4c00_0000_0002,
            Split::Test => 0x5445_5354_0000_0003,
        }
    }
}

/// The RNG for instance `index` of `split`: its own ChaCha stream, so every
/// instance is a pure function of `(seed, split, index)`.
pub fn instance_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.tag());
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionCounts {
    pub no_correct_leaf: usize,
    pub no_incorrect_leaf: usize,
    pub path_too_short: usize,
    pub path_too_long: usize,
}

impl RejectionCounts {
    pub fn total(&self) -> usize {
        self.no_correct_leaf + self.no_incorrect_leaf + self.path_too_short + self.path_too_long
    }

    fn add(&mut self, r: Rejection, cfg: &GeneratorConfig) {
        match r {
            Rejection::NoCorrectLeaf => self.no_correct_leaf += 1,
            Rejection::NoIncorrectLeaf => self.no_incorrect_leaf += 1,
            Rejection::PathLength(l) if l < cfg.min_path => self.path_too_short += 1,
            Rejection::PathLength(_) => self.path_too_long += 1,
        }
    }

    fn merge(&mut self, o: &RejectionCounts) {
        self.no_correct_leaf += o.no_correct_leaf;
        self.no_incorrect_leaf += o.no_incorrect_leaf;
        self.path_too_short += o.path_too_short;
        self.path_too_long += o.path_too_long;
    }
}

pub fn generate_instance(
    cfg: &GeneratorConfig,
    seed: u64,
    split: Split,
    index: u64,
) -> Result<(ProblemInstance, RejectionCounts)> {
    let mut rng = instance_rng(seed, split, index);
    let mut rejected = RejectionCounts::default();
    for _ in 0..cfg.max_attempts {
        let g = build_graph(cfg.nodes, &mut rng);
        match select_question(&g, (cfg.min_path, cfg.max_path), &mut rng) {
            Ok(q) => return Ok((render(g, q, &mut rng)?, rejected)),
            Err(r) => rejected.add(r, cfg),
        }
    }
    Err(Error::Generation(format!(
        "no acceptable graph after {} attempts for {} instance {index}",
        cfg.max_attempts,
        split.name()
    )))
}

pub fn generate_split(
    cfg: &GeneratorConfig,
    seed: u64,
    split: Split,
    count: usize,
) -> Result<(Vec<ProblemInstance>, RejectionCounts)> {
    let mut out = Vec::with_capacity(count);
    let mut rejected = RejectionCounts::default();
    for i in 0..count {
        let (inst, r) = generate_instance(cfg, seed, split, i as u64)?;
        rejected.merge(&r);
        out.push(inst);
    }
    Ok((out, rejected))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub instances: usize,
    pub mean_nodes: f64,
    /// Nodes that appear in at least one statement.
    pub mean_mentioned_nodes: f64,
    pub mean_edges: f64,
    pub mean_shortest_path_len: f64,
    pub mean_shortest_path_count: f64,
    pub correct_first_rate: f64,
    pub rejected_graphs: RejectionCounts,
    pub rejection_rate: f64,
}

pub fn split_stats(instances: &[ProblemInstance], rejected: &RejectionCounts) -> SplitStats {
    let n = instances.len().max(1) as f64;
    let mut s = SplitStats {
        instances: instances.len(),
        rejected_graphs: rejected.clone(),
        ..SplitStats::default()
    };
    for inst in instances {
        let (len, paths) = shortest_paths(&inst.graph.children(), inst.question.entity, inst.question.correct);
        s.mean_nodes += inst.graph.len() as f64 / n;
        let mut mentioned = vec![false; inst.graph.len()];
        for &(a, b) in &inst.graph.edges {
            mentioned[a] = true;
            mentioned[b] = true;
        }
        s.mean_mentioned_nodes += mentioned.iter().filter(|&&m| m).count() as f64 / n;
        s.mean_edges += inst.graph.edges.len() as f64 / n;
        s.mean_shortest_path_len += len.unwrap_or(0) as f64 / n;
        s.mean_shortest_path_count += paths.len() as f64 / n;
        s.correct_first_rate += inst.correct_first as u8 as f64 / n;
    }
    let attempts = instances.len() + rejected.total();
    s.rejection_rate = if attempts == 0 { 0.0 } else { rejected.total() as f64 / attempts as f64 };
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
    /// Questions appearing in more than one split.
    pub cross_split_duplicates: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 17_886,
            val: 300,
            test: 500,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `stats.json` into `dir`.
pub fn generate_dataset(dir: &Path, sizes: SplitSizes, seed: u64, cfg: &GeneratorConfig) -> Result<DatasetStats> {
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(Error::Config("split sizes must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let mut stats = Vec::new();
    let mut seen: Vec<HashSet<String>> = Vec::new();
    for split in Split::ALL {
        let (instances, rejected) = generate_split(cfg, seed, split, sizes.get(split))?;
        let examples: Vec<ReasoningExample> = instances.iter().map(|i| i.example.clone()).collect();
        write_jsonl(&dir.join(format!("{}.jsonl", split.name())), &examples)?;
        stats.push(split_stats(&instances, &rejected));
        seen.push(examples.into_iter().map(|e| e.question).collect());
    }
    let cross_split_duplicates = seen[0].intersection(&seen[1]).count()
        + seen[0].intersection(&seen[2]).count()
        + seen[1].intersection(&seen[2]).count();
    let mut it = stats.into_iter();
    let report = DatasetStats {
        seed,
        generator: cfg.clone(),
        train: it.next().expect("three splits"),
        val: it.next().expect("three splits"),
        test: it.next().expect("three splits"),
        cross_split_duplicates,
    };
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Closed vocabulary covering everything the generator can write.
pub fn prosqa_vocabulary(subword_concepts: bool) -> Vocabulary {
    let mut b = VocabularyBuilder::new(subword_concepts);
    b.punctuation(".").punctuation("?");
    let (words, _) = surface_words();
    for w in words {
        b.word(w);
    }
    for stem in concept_stems() {
        b.concept(&format!("{stem}pus"));
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosqa::oracle::{reachability_labels, reachable};
    use crate::prosqa::render::Puzzle;

    #[test]
    fn instances_are_pure_functions_of_seed_split_index() {
        let cfg = GeneratorConfig::default();
        let a = generate_instance(&cfg, 11, Split::Val, 7).unwrap().0;
        let b = generate_instance(&cfg, 11, Split::Val, 7).unwrap().0;
        let c = generate_instance(&cfg, 11, Split::Test, 7).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a.example, c.example);
    }

    #[test]
    fn instances_are_valid_and_text_round_trips() {
        let cfg = GeneratorConfig::default();
        let vocab = prosqa_vocabulary(true);
        let (insts, _) = generate_split(&cfg, 3, Split::Train, 200).unwrap();
        for inst in &insts {
            let ch = inst.graph.children();
            assert!(reachable(&ch, 0, inst.question.correct));
            assert!(!reachable(&ch, 0, inst.question.incorrect));
            assert_eq!(reachability_labels(&ch), inst.graph.labels);
            assert_eq!(inst.example.steps.len(), inst.path.len() - 1);

            let p = Puzzle::from_example(&inst.example).unwrap();
            let mut want: Vec<(String, String)> = inst
                .graph
                .edges
                .iter()
                .map(|&(a, b)| (inst.names[a].clone(), inst.names[b].clone()))
                .collect();
            let mut got: Vec<(String, String)> =
                p.edges().iter().map(|&(a, b)| (p.names[a].clone(), p.names[b].clone())).collect();
            want.sort();
            got.sort();
            assert_eq!(got, want);
            assert_eq!(p.names[p.correct], inst.names[inst.question.correct]);

            for text in [&inst.example.question, &inst.example.answer] {
                assert_eq!(&vocab.detokenize(&vocab.tokenize(text).unwrap()), text);
            }
        }
    }

    #[test]
    fn dataset_files_and_stats() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = SplitSizes {
            train: 20,
            val: 5,
            test: 5,
        };
        let stats = generate_dataset(dir.path(), sizes, 1, &GeneratorConfig::default()).unwrap();
        assert_eq!(stats.train.instances, 20);
        assert_eq!(crate::data::read_jsonl(&dir.path().join("val.jsonl")).unwrap().len(), 5);
        assert!(dir.path().join("stats.json").exists());
    }
}
