//! Closed word-level vocabulary and tokenizer.
//!
//! Text is canonical: words separated by single spaces, punctuation attached
//! to the word before it. With subword concepts on, a fictional concept such
//! as `terpus` is split into its stem `terp` and the suffix `us`, so each
//! concept spans two tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const BOT: &str = "<bot>";
pub const EOT: &str = "<eot>";
pub const PAUSE: &str = "<pause>";

pub const CONCEPT_SUFFIX: &str = "us";
const PUNCTUATION: [char; 6] = ['.', '?', ',', ':', ';', '!'];

pub type TokenId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: TokenId,
    pub eos: TokenId,
    pub bot: TokenId,
    pub eot: TokenId,
    pub pause: TokenId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    /// Tokens rendered without a leading space.
    glue: Vec<bool>,
    subword_concepts: bool,
    index: HashMap<String, TokenId>,
    specials: Specials,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    glue: Vec<bool>,
    subword_concepts: bool,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        let index = f
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect::<HashMap<_, _>>();
        let specials = Specials {
            pad: index[PAD],
            eos: index[EOS],
            bot: index[BOT],
            eot: index[EOT],
            pause: index[PAUSE],
        };
        Self {
            tokens: f.tokens,
            glue: f.glue,
            subword_concepts: f.subword_concepts,
            index,
            specials,
        }
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            glue: v.glue,
            subword_concepts: v.subword_concepts,
        }
    }
}

fn is_punct(s: &str) -> bool {
    let mut chars = s.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if PUNCTUATION.contains(&c))
}

/// Splits canonical text into words and trailing punctuation marks.
fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(' ').filter(|w| !w.is_empty()).flat_map(|w| {
        let core_end = w.trim_end_matches(PUNCTUATION).len();
        let (core, punct) = w.split_at(core_end);
        std::iter::once(core)
            .filter(|c| !c.is_empty())
            .chain(punct.char_indices().map(move |(i, c)| &punct[i..i + c.len_utf8()]))
    })
}

#[derive(Default)]
pub struct VocabularyBuilder {
    tokens: Vec<String>,
    glue: Vec<bool>,
    seen: HashMap<String, TokenId>,
    subword_concepts: bool,
}

impl VocabularyBuilder {
    pub fn new(subword_concepts: bool) -> Self {
        let mut b = Self {
            subword_concepts,
            ..Self::default()
        };
        for s in [PAD, EOS, BOT, EOT, PAUSE] {
            b.push(s, false);
        }
        if subword_concepts {
            b.push(CONCEPT_SUFFIX, true);
        }
        b
    }

    fn push(&mut self, token: &str, glue: bool) {
        if !self.seen.contains_key(token) {
            self.seen.insert(token.to_string(), self.tokens.len() as TokenId);
            self.tokens.push(token.to_string());
            self.glue.push(glue);
        }
    }

    pub fn word(&mut self, word: &str) -> &mut Self {
        self.push(word, false);
        self
    }

    /// Registers a concept name, split into stem and suffix in subword mode.
    pub fn concept(&mut self, name: &str) -> &mut Self {
        match name.strip_suffix(CONCEPT_SUFFIX) {
            Some(stem) if self.subword_concepts && !stem.is_empty() => self.push(stem, false),
            _ => self.push(name, false),
        }
        self
    }

    pub fn punctuation(&mut self, mark: &str) -> &mut Self {
        self.push(mark, true);
        self
    }

    /// Registers every word of `text`; words ending in the concept suffix are
    /// treated as concepts.
    pub fn text(&mut self, text: &str) -> &mut Self {
        for w in words(text) {
            if is_punct(w) {
                self.punctuation(w);
            } else if w.len() > CONCEPT_SUFFIX.len() && w.ends_with(CONCEPT_SUFFIX) {
                self.concept(w);
            } else {
                self.word(w);
            }
        }
        self
    }

    pub fn build(self) -> Vocabulary {
        VocabularyFile {
            tokens: self.tokens,
            glue: self.glue,
            subword_concepts: self.subword_concepts,
        }
        .into()
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn subword_concepts(&self) -> bool {
        self.subword_concepts
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn word_ids(&self, word: &str, out: &mut Vec<TokenId>) -> Result<()> {
        if let Some(id) = self.id(word) {
            if !self.glue[id as usize] || is_punct(word) {
                out.push(id);
                return Ok(());
            }
        }
        if self.subword_concepts {
            if let Some(stem) = word.strip_suffix(CONCEPT_SUFFIX) {
                if let (Some(s), Some(u)) = (self.id(stem), self.id(CONCEPT_SUFFIX)) {
                    out.extend([s, u]);
                    return Ok(());
                }
            }
        }
        Err(Error::Tokenize {
            fragment: word.to_string(),
        })
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for w in words(text) {
            self.word_ids(w, &mut out)?;
        }
        Ok(out)
    }

    /// Token ids of a single concept name.
    pub fn concept_ids(&self, name: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        self.word_ids(name, &mut out)?;
        Ok(out)
    }

    /// Inverse of [`tokenize`](Self::tokenize) on canonical text. Special tokens
    /// render as their literal names.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 && !self.glue[id as usize] {
                s.push(' ');
            }
            s.push_str(self.token(id));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let mut b = VocabularyBuilder::new(true);
        b.text("Tom is a terpus. Every terpus is a brimpus. Is Tom a lempus or scrompus?");
        b.build()
    }

    #[test]
    fn splits_concepts_into_stem_and_suffix() {
        let v = vocab();
        let ids = v.tokenize("Tom is a terpus.").unwrap();
        let pieces: Vec<&str> = ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(pieces, ["Tom", "is", "a", "terp", "us", "."]);
    }

    #[test]
    fn empty_text() {
        assert!(vocab().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn round_trip() {
        let v = vocab();
        let text = "Every terpus is a brimpus. Is Tom a lempus or scrompus?";
        assert_eq!(v.detokenize(&v.tokenize(text).unwrap()), text);
    }

    #[test]
    fn out_of_vocabulary_names_fragment() {
        match vocab().tokenize("Tom is a gorpus.") {
            Err(Error::Tokenize { fragment }) => assert_eq!(fragment, "gorpus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn whole_word_mode() {
        let mut b = VocabularyBuilder::new(false);
        b.text("Tom is a terpus.");
        let v = b.build();
        assert_eq!(v.tokenize("Tom is a terpus.").unwrap().len(), 5);
    }

    #[test]
    fn specials_are_dense_and_unique() {
        let v = vocab();
        let s = v.specials();
        let mut ids = [s.pad, s.eos, s.bot, s.eot, s.pause];
        ids.sort();
        assert_eq!(ids, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn serde_preserves_vocabulary() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.tokenize("Tom is a terpus.").unwrap(), v.tokenize("Tom is a terpus.").unwrap());
    }
}
