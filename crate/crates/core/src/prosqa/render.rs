//! Question selection, naming, surface text, and parsing the text back.

use std::collections::HashMap;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;

use crate::data::ReasoningExample;
use crate::error::{Error, Result};
use crate::prosqa::graph::ConceptGraph;
use crate::prosqa::oracle::{bfs_distances, shortest_paths};

pub const PERSON_NAMES: [&str; 48] = [
    "Alex", "Amy", "Ben", "Bob", "Carl", "Clara", "Davis", "Dan", "Eve", "Emma", "Fae", "Fred", "Gary", "Grace",
    "Hank", "Holly", "Ian", "Ivy", "Jack", "Jane", "Kate", "Kim", "Leo", "Lily", "Max", "Mia", "Nick", "Nora",
    "Owen", "Olive", "Paul", "Polly", "Quinn", "Rex", "Rose", "Sally", "Sam", "Stella", "Tom", "Tina", "Uma",
    "Vic", "Wendy", "Wren", "Xena", "Yale", "Zack", "Zoe",
];

const CONSONANTS: [char; 8] = ['b', 'd', 'g', 'l', 'm', 'r', 's', 't'];
const VOWELS: [char; 3] = ['a', 'e', 'o'];

/// Every two-syllable consonant-vowel stem, in a fixed order.
pub fn concept_stems() -> Vec<String> {
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{c}{v}")))
        .collect();
    syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect()
}

pub fn concept_name(stem: &str) -> String {
    format!("{stem}pus")
}

/// All surface words the generator can emit, for building a closed vocabulary.
pub fn surface_words() -> (Vec<&'static str>, Vec<String>) {
    let words = ["Every", "is", "a", "Is", "or"];
    let mut w: Vec<&str> = words.to_vec();
    w.extend(PERSON_NAMES);
    (w, concept_stems().iter().map(|s| concept_name(s)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    NoCorrectLeaf,
    NoIncorrectLeaf,
    PathLength(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub entity: usize,
    pub correct: usize,
    pub incorrect: usize,
}

/// Node 0 as the entity, a uniform label-1 leaf as the answer and a uniform
/// label-2 leaf as the distractor. Rejects graphs whose answer is out of
/// `path_bounds` hops.
pub fn select_question<R: Rng + ?Sized>(
    graph: &ConceptGraph,
    path_bounds: (usize, usize),
    rng: &mut R,
) -> std::result::Result<Question, Rejection> {
    let leaves = graph.leaves();
    let pool = |label: u8| -> Vec<usize> { leaves.iter().copied().filter(|&l| graph.labels[l] == label).collect() };
    let a = pool(1);
    let b = pool(2);
    if a.is_empty() {
        return Err(Rejection::NoCorrectLeaf);
    }
    if b.is_empty() {
        return Err(Rejection::NoIncorrectLeaf);
    }
    let correct = a[rng.random_range(0..a.len())];
    let incorrect = b[rng.random_range(0..b.len())];
    let dist = bfs_distances(&graph.children(), 0)[correct].expect("label 1 implies reachable from node 0");
    if dist < path_bounds.0 || dist > path_bounds.1 {
        return Err(Rejection::PathLength(dist));
    }
    Ok(Question {
        entity: 0,
        correct,
        incorrect,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProblemInstance {
    pub graph: ConceptGraph,
    pub names: Vec<String>,
    pub question: Question,
    pub correct_first: bool,
    /// The shortest path used for the reasoning steps.
    pub path: Vec<usize>,
    pub example: ReasoningExample,
}

pub fn statement(names: &[String], is_root: &[bool], from: usize, to: usize) -> String {
    if is_root[from] {
        format!("{} is a {}.", names[from], names[to])
    } else {
        format!("Every {} is a {}.", names[from], names[to])
    }
}

/// Names the nodes, shuffles the edge statements, picks one shortest path
/// for the steps and orders the two options at random.
pub fn render<R: Rng + ?Sized>(graph: ConceptGraph, question: Question, rng: &mut R) -> Result<ProblemInstance> {
    let n = graph.len();
    let parents = graph.parents();
    let is_root: Vec<bool> = parents.iter().map(Vec::is_empty).collect();
    let roots = is_root.iter().filter(|&&r| r).count();
    if roots > PERSON_NAMES.len() {
        return Err(Error::Generation(format!(
            "{roots} parentless nodes but only {} person names",
            PERSON_NAMES.len()
        )));
    }
    let stems = concept_stems();
    if n - roots > stems.len() {
        return Err(Error::Generation(format!("{} concepts but only {} names", n - roots, stems.len())));
    }
    let mut people = sample(rng, PERSON_NAMES.len(), roots).into_iter();
    let mut concepts = sample(rng, stems.len(), n - roots).into_iter();
    let names: Vec<String> = is_root
        .iter()
        .map(|&r| {
            if r {
                PERSON_NAMES[people.next().expect("counted")].to_string()
            } else {
                concept_name(&stems[concepts.next().expect("counted")])
            }
        })
        .collect();

    let mut order: Vec<(usize, usize)> = graph.edges.clone();
    order.shuffle(rng);
    let mut sentences: Vec<String> = order.iter().map(|&(a, b)| statement(&names, &is_root, a, b)).collect();

    let (_, paths) = shortest_paths(&graph.children(), question.entity, question.correct);
    let path = paths[rng.random_range(0..paths.len())].clone();
    let steps: Vec<String> = path.windows(2).map(|w| statement(&names, &is_root, w[0], w[1])).collect();

    let correct_first = rng.random_bool(0.5);
    let (first, second) = if correct_first {
        (question.correct, question.incorrect)
    } else {
        (question.incorrect, question.correct)
    };
    let e = &names[question.entity];
    sentences.push(format!("Is {e} a {} or {}?", names[first], names[second]));
    let example = ReasoningExample {
        question: sentences.join(" "),
        steps,
        answer: format!("{e} is a {}.", names[question.correct]),
    };
    Ok(ProblemInstance {
        graph,
        names,
        question,
        correct_first,
        path,
        example,
    })
}

/// Splits text into sentences, keeping each terminal `.` or `?`.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if c == '.' || c == '?' {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sentence<'a> {
    /// `X is a Y.`
    Member(&'a str, &'a str),
    /// `Every X is a Y.`
    Every(&'a str, &'a str),
    /// `Is X a Y or Z?`
    Query(&'a str, &'a str, &'a str),
}

pub fn parse_sentence(s: &str) -> Option<Sentence<'_>> {
    let s = s.trim();
    if let Some(body) = s.strip_suffix('?') {
        let w: Vec<&str> = body.split(' ').collect();
        return match w.as_slice() {
            ["Is", x, "a", y, "or", z] => Some(Sentence::Query(x, y, z)),
            _ => None,
        };
    }
    let w: Vec<&str> = s.strip_suffix('.')?.split(' ').collect();
    match w.as_slice() {
        ["Every", x, "is", "a", y] => Some(Sentence::Every(x, y)),
        [x, "is", "a", y] => Some(Sentence::Member(x, y)),
        _ => None,
    }
}

/// A question reconstructed from its text: node names, edges, and the three
/// designated nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Puzzle {
    pub names: Vec<String>,
    index: HashMap<String, usize>,
    pub children: Vec<Vec<usize>>,
    pub entity: usize,
    pub correct: usize,
    pub incorrect: usize,
}

impl Puzzle {
    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .children
            .iter()
            .enumerate()
            .flat_map(|(u, ch)| ch.iter().map(move |&v| (u, v)))
            .collect();
        e.sort_unstable();
        e
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.children[a].contains(&b)
    }

    pub fn from_example(ex: &ReasoningExample) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |s: &str| -> usize {
            if let Some(&i) = index.get(s) {
                return i;
            }
            names.push(s.to_string());
            index.insert(s.to_string(), names.len() - 1);
            names.len() - 1
        };
        let mut edges = Vec::new();
        let mut query = None;
        for s in sentences(&ex.question) {
            match parse_sentence(s) {
                Some(Sentence::Member(a, b)) | Some(Sentence::Every(a, b)) => edges.push((intern(a), intern(b))),
                Some(Sentence::Query(e, x, y)) => query = Some((intern(e), intern(x), intern(y))),
                None => return Err(Error::Data(format!("unparseable sentence {s:?}"))),
            }
        }
        let (entity, x, y) = query.ok_or_else(|| Error::Data("question has no query sentence".into()))?;
        let claim = match sentences(&ex.answer).as_slice() {
            [s] => match parse_sentence(s) {
                Some(Sentence::Member(_, c)) => intern(c),
                _ => return Err(Error::Data(format!("unparseable answer {:?}", ex.answer))),
            },
            _ => return Err(Error::Data(format!("unparseable answer {:?}", ex.answer))),
        };
        let (correct, incorrect) = if claim == x {
            (x, y)
        } else if claim == y {
            (y, x)
        } else {
            return Err(Error::Data("answer names neither option".into()));
        };
        let mut children = vec![Vec::new(); names.len()];
        for (a, b) in edges {
            if !children[a].contains(&b) {
                children[a].push(b);
            }
        }
        Ok(Self {
            names,
            index,
            children,
            entity,
            correct,
            incorrect,
        })
    }
}
