//! Reasoning-process classification and k-sweep evaluation.
//!
//! A model output is a run of statements followed by a final claim
//! `Entity is a X.`. The statements are checked against the question's graph:
//! with `k = 0` they must form a path from the entity, with `k > 0` they only
//! need to be completable by some real path from the entity.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ReasoningExample;
use crate::error::{Error, Result};
use crate::latent::{coconut_generate, InferenceMode};
use crate::model::Transformer;
use crate::prosqa::oracle::{all_paths_from, bfs_distances};
use crate::prosqa::render::{parse_sentence, sentences, Puzzle, Sentence};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    CorrectPath,
    LongerPath,
    Hallucination,
    WrongTarget,
    CorrectLabel,
    IncorrectLabel,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::CorrectPath,
        Category::LongerPath,
        Category::Hallucination,
        Category::WrongTarget,
        Category::CorrectLabel,
        Category::IncorrectLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::CorrectPath => "correct_path",
            Category::LongerPath => "longer_path",
            Category::Hallucination => "hallucination",
            Category::WrongTarget => "wrong_target",
            Category::CorrectLabel => "correct_label",
            Category::IncorrectLabel => "incorrect_label",
        }
    }
}

/// A node mentioned in an output: one of the question's nodes, or a name the
/// question never used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeRef {
    Known(usize),
    Unknown(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    /// One `(from, to)` per statement; `None` for a sentence outside the grammar.
    pub statements: Vec<Option<(NodeRef, NodeRef)>>,
    /// Subject and object of the final `X is a Y.` sentence.
    pub claim: Option<(NodeRef, NodeRef)>,
}

fn node_ref(p: &Puzzle, name: &str) -> NodeRef {
    p.node(name).map_or_else(|| NodeRef::Unknown(name.to_string()), NodeRef::Known)
}

pub fn parse_output(text: &str, puzzle: &Puzzle) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    let all = sentences(text);
    let mut body: &[&str] = &all;
    if let Some((last, rest)) = all.split_last() {
        if let Some(Sentence::Member(x, y)) = parse_sentence(last) {
            out.claim = Some((node_ref(puzzle, x), node_ref(puzzle, y)));
            body = rest;
        }
    }
    out.statements = body
        .iter()
        .map(|s| match parse_sentence(s) {
            Some(Sentence::Member(a, b)) | Some(Sentence::Every(a, b)) => Some((node_ref(puzzle, a), node_ref(puzzle, b))),
            _ => None,
        })
        .collect();
    out
}

impl ParsedOutput {
    /// The claimed concept, when the claim is about the entity.
    fn claimed(&self, puzzle: &Puzzle) -> Option<&NodeRef> {
        match &self.claim {
            Some((NodeRef::Known(e), c)) if *e == puzzle.entity => Some(c),
            _ => None,
        }
    }

    pub fn answer_correct(&self, puzzle: &Puzzle) -> bool {
        self.claimed(puzzle) == Some(&NodeRef::Known(puzzle.correct))
    }

    /// The node chain spelled by the statements, if every statement names
    /// known nodes and each starts where the previous one ended.
    pub fn chain(&self) -> Option<Vec<usize>> {
        let mut nodes = Vec::new();
        for s in &self.statements {
            let (NodeRef::Known(a), NodeRef::Known(b)) = s.as_ref()? else {
                return None;
            };
            if let Some(&last) = nodes.last() {
                if last != *a {
                    return None;
                }
            } else {
                nodes.push(*a);
            }
            nodes.push(*b);
        }
        Some(nodes)
    }

    pub fn path_names(&self, puzzle: &Puzzle) -> Vec<String> {
        let name = |r: &NodeRef| match r {
            NodeRef::Known(i) => puzzle.names[*i].clone(),
            NodeRef::Unknown(s) => s.clone(),
        };
        let mut out = Vec::new();
        for s in self.statements.iter().flatten() {
            if out.last() != Some(&name(&s.0)) {
                out.push(name(&s.0));
            }
            out.push(name(&s.1));
        }
        out
    }
}

fn empty_path_category(parsed: &ParsedOutput, puzzle: &Puzzle) -> Category {
    if parsed.answer_correct(puzzle) {
        Category::CorrectLabel
    } else {
        Category::IncorrectLabel
    }
}

/// Six-way classification. With `k = 0` the statements must start at the
/// entity; with `k > 0` any real path from the entity may precede them.
/// A claim that disagrees with where the statements end counts as a break in
/// the chain.
pub fn classify(parsed: &ParsedOutput, k: usize, puzzle: &Puzzle) -> Category {
    if parsed.statements.is_empty() {
        return empty_path_category(parsed, puzzle);
    }
    let Some(chain) = parsed.chain() else {
        return Category::Hallucination;
    };
    if chain.windows(2).any(|w| !puzzle.has_edge(w[0], w[1])) {
        return Category::Hallucination;
    }
    let end = *chain.last().expect("non-empty chain");
    if let Some(c) = &parsed.claim {
        if c.1 != NodeRef::Known(end) || parsed.claimed(puzzle).is_none() {
            return Category::Hallucination;
        }
    }
    let dist = bfs_distances(&puzzle.children, puzzle.entity);
    let start = chain[0];
    let prefix = match dist[start] {
        Some(d) if k > 0 || d == 0 => d,
        _ => return Category::Hallucination,
    };
    if end != puzzle.correct {
        return Category::WrongTarget;
    }
    let shortest = dist[puzzle.correct].expect("correct answer is reachable");
    if prefix + chain.len() - 1 == shortest {
        Category::CorrectPath
    } else {
        Category::LongerPath
    }
}

/// The same classification by enumerating every path from the entity and
/// testing whether the emitted chain is a suffix of (or, with `k = 0`, equal to) one.
pub fn classify_by_enumeration(parsed: &ParsedOutput, k: usize, puzzle: &Puzzle) -> Category {
    if parsed.statements.is_empty() {
        return empty_path_category(parsed, puzzle);
    }
    let mut emitted = Vec::new();
    for s in &parsed.statements {
        match s {
            Some((NodeRef::Known(a), NodeRef::Known(b))) => emitted.push((*a, *b)),
            _ => return Category::Hallucination,
        }
    }
    let claim = match &parsed.claim {
        None => None,
        Some((NodeRef::Known(e), NodeRef::Known(c))) if *e == puzzle.entity => Some(*c),
        Some(_) => return Category::Hallucination,
    };
    let paths = all_paths_from(&puzzle.children, puzzle.entity);
    let fits = |p: &Vec<usize>| {
        let edges: Vec<(usize, usize)> = p.windows(2).map(|w| (w[0], w[1])).collect();
        let ok = if k == 0 { edges == emitted } else { edges.ends_with(&emitted) };
        ok && claim.is_none_or(|c| c == *p.last().expect("non-empty"))
    };
    let matching: Vec<&Vec<usize>> = paths.iter().filter(|p| fits(p)).collect();
    let best = paths
        .iter()
        .filter(|p| *p.last().expect("non-empty") == puzzle.correct)
        .map(Vec::len)
        .min();
    let to_correct: Vec<&&Vec<usize>> = matching.iter().filter(|p| *p.last().unwrap() == puzzle.correct).collect();
    if to_correct.iter().any(|p| Some(p.len()) == best) {
        Category::CorrectPath
    } else if !to_correct.is_empty() {
        Category::LongerPath
    } else if !matching.is_empty() {
        Category::WrongTarget
    } else {
        Category::Hallucination
    }
}

/// Whether the output's last sentence equals the reference answer's last sentence.
pub fn answer_matches(output: &str, reference: &str) -> bool {
    match (sentences(output).last(), sentences(reference).last()) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// Produces an output for a question under a requested number of latent steps.
pub trait Reasoner {
    fn reason(&self, question: &[TokenId], k: usize) -> Result<ReasonerOutput>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReasonerOutput {
    /// Language tokens emitted after the reasoning prefix, stop token included.
    pub tokens: Vec<TokenId>,
    /// Every position added after the question.
    pub new_tokens: usize,
}

pub struct ModelReasoner<'m> {
    pub model: &'m Transformer<f32>,
    pub mode: InferenceMode,
    pub vocab: &'m Vocabulary,
    pub max_new: usize,
}

impl Reasoner for ModelReasoner<'_> {
    fn reason(&self, question: &[TokenId], k: usize) -> Result<ReasonerOutput> {
        let g = coconut_generate(self.model, question, self.mode, k, self.max_new, self.vocab.specials())?;
        Ok(ReasonerOutput {
            tokens: g.output.tokens,
            new_tokens: g.new_tokens,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub example: usize,
    pub k: usize,
    pub category: Category,
    pub path: Vec<String>,
    pub claim: Option<String>,
    pub answer_correct: bool,
    pub new_tokens: usize,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub examples: usize,
    pub accuracy: f64,
    pub categories: BTreeMap<Category, f64>,
    pub mean_new_tokens: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_k: Vec<KSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub k: usize,
    pub mean_seconds: f64,
}

pub struct Evaluation {
    pub report: EvalReport,
    pub outcomes: Vec<EvalOutcome>,
    pub timing: Vec<Timing>,
}

/// Text of emitted language tokens, without the stop token.
pub fn output_text(vocab: &Vocabulary, tokens: &[TokenId]) -> String {
    let eos = vocab.specials().eos;
    let body: Vec<TokenId> = tokens.iter().copied().take_while(|&t| t != eos).collect();
    vocab.detokenize(&body)
}

pub fn evaluate(reasoner: &dyn Reasoner, vocab: &Vocabulary, examples: &[ReasoningExample], ks: &[usize]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let puzzles = examples.iter().map(Puzzle::from_example).collect::<Result<Vec<_>>>()?;
    let questions = examples
        .iter()
        .map(|e| vocab.tokenize(&e.question))
        .collect::<Result<Vec<_>>>()?;
    let mut outcomes = Vec::new();
    let mut per_k = Vec::new();
    let mut timing = Vec::new();
    for &k in ks {
        let mut seconds = 0.0;
        let start = outcomes.len();
        for (i, (puzzle, q)) in puzzles.iter().zip(&questions).enumerate() {
            let t0 = Instant::now();
            let out = reasoner.reason(q, k)?;
            seconds += t0.elapsed().as_secs_f64();
            let text = output_text(vocab, &out.tokens);
            let parsed = parse_output(&text, puzzle);
            outcomes.push(EvalOutcome {
                example: i,
                k,
                category: classify(&parsed, k, puzzle),
                path: parsed.path_names(puzzle),
                claim: parsed.claimed(puzzle).map(|c| match c {
                    NodeRef::Known(n) => puzzle.names[*n].clone(),
                    NodeRef::Unknown(s) => s.clone(),
                }),
                answer_correct: parsed.answer_correct(puzzle),
                new_tokens: out.new_tokens,
                output: text,
            });
        }
        per_k.push(summarize(k, &outcomes[start..]));
        timing.push(Timing {
            k,
            mean_seconds: seconds / examples.len() as f64,
        });
    }
    Ok(Evaluation {
        report: EvalReport { per_k },
        outcomes,
        timing,
    })
}

pub fn summarize(k: usize, outcomes: &[EvalOutcome]) -> KSummary {
    let n = outcomes.len().max(1) as f64;
    let mut categories: BTreeMap<Category, f64> = Category::ALL.iter().map(|&c| (c, 0.0)).collect();
    for o in outcomes {
        *categories.get_mut(&o.category).expect("all categories present") += 1.0 / n;
    }
    KSummary {
        k,
        examples: outcomes.len(),
        accuracy: outcomes.iter().filter(|o| o.answer_correct).count() as f64 / n,
        categories,
        mean_new_tokens: outcomes.iter().map(|o| o.new_tokens as f64).sum::<f64>() / n,
    }
}

/// One row per k: accuracy and the six category shares.
pub fn write_category_csv<W: Write>(w: W, report: &EvalReport) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    let mut header = vec!["k".to_string(), "accuracy".into(), "mean_new_tokens".into()];
    header.extend(Category::ALL.iter().map(|c| c.name().to_string()));
    csv.write_record(&header)?;
    for s in &report.per_k {
        let mut row = vec![s.k.to_string(), format!("{:.6}", s.accuracy), format!("{:.6}", s.mean_new_tokens)];
        row.extend(Category::ALL.iter().map(|c| format!("{:.6}", s.categories[c])));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> ReasoningExample {
        ReasoningExample {
            question: "Every shumpus is a rempus. Every shumpus is a yimpus. Every terpus is a fompus. \
                Every terpus is a gerpus. Every gerpus is a brimpus. Alex is a rempus. Every rorpus is a scrompus. \
                Every rorpus is a yimpus. Every terpus is a brimpus. Every brimpus is a lempus. Tom is a terpus. \
                Every shumpus is a timpus. Every yimpus is a boompus. Davis is a shumpus. Every gerpus is a lorpus. \
                Davis is a fompus. Every shumpus is a boompus. Every shumpus is a rorpus. Every terpus is a lorpus. \
                Every boompus is a timpus. Every fompus is a yerpus. Tom is a dumpus. Every rempus is a rorpus. \
                Is Tom a lempus or scrompus?"
                .into(),
            steps: vec![
                "Tom is a terpus.".into(),
                "Every terpus is a brimpus.".into(),
                "Every brimpus is a lempus.".into(),
            ],
            answer: "Tom is a lempus.".into(),
        }
    }

    fn run(text: &str, k: usize) -> Category {
        let p = Puzzle::from_example(&example()).unwrap();
        let parsed = parse_output(text, &p);
        let c = classify(&parsed, k, &p);
        assert_eq!(c, classify_by_enumeration(&parsed, k, &p), "{text}");
        c
    }

    #[test]
    fn reference_steps_are_a_correct_path() {
        let ex = example();
        let text = format!("{} {}", ex.steps.join(" "), ex.answer);
        let p = Puzzle::from_example(&ex).unwrap();
        let parsed = parse_output(&text, &p);
        assert_eq!(parsed.chain().unwrap().len(), 4);
        assert_eq!(run(&text, 0), Category::CorrectPath);
    }

    #[test]
    fn answer_only_is_a_label() {
        assert_eq!(run("Tom is a lempus.", 6), Category::CorrectLabel);
        assert_eq!(run("Tom is a scrompus.", 6), Category::IncorrectLabel);
    }

    #[test]
    fn longer_path() {
        let text = "Tom is a terpus. Every terpus is a gerpus. Every gerpus is a brimpus. \
            Every brimpus is a lempus. Tom is a lempus.";
        assert_eq!(run(text, 0), Category::LongerPath);
    }

    #[test]
    fn invented_edge_is_hallucination() {
        let text = "Tom is a terpus. Every terpus is a rorpus. Every rorpus is a scrompus. Tom is a scrompus.";
        assert_eq!(run(text, 0), Category::Hallucination);
        assert_eq!(run("Tom is a yumpus. Tom is a yumpus.", 0), Category::Hallucination);
    }

    #[test]
    fn partial_path_ending_elsewhere_is_wrong_target() {
        assert_eq!(run("Every terpus is a lorpus. Tom is a lorpus.", 1), Category::WrongTarget);
        assert_eq!(run("Every brimpus is a lempus. Tom is a lempus.", 2), Category::CorrectPath);
        assert_eq!(run("Every brimpus is a lempus. Tom is a lempus.", 0), Category::Hallucination);
    }

    #[test]
    fn claim_must_match_path_end() {
        assert_eq!(run("Every brimpus is a lempus. Tom is a lorpus.", 2), Category::Hallucination);
    }

    #[test]
    fn answer_match_uses_final_sentence() {
        assert!(answer_matches("Tom is a terpus. Tom is a lempus.", "Tom is a lempus."));
        assert!(!answer_matches("Tom is a terpus.", "Tom is a lempus."));
        assert!(!answer_matches("", "Tom is a lempus."));
    }
}
