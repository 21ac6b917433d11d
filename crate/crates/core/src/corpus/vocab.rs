use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Corpus;

/// Word-level vocabulary. Id 0 is the out-of-vocabulary bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "[UNK]";

impl Vocab {
    /// Sorted vocabulary over every token of the given corpora.
    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        let mut words = BTreeSet::new();
        for c in corpora {
            for d in &c.documents {
                for s in &d.sentences {
                    words.extend(s.iter().map(String::as_str));
                }
            }
        }
        let mut list = vec![UNK.to_string()];
        list.extend(words.into_iter().filter(|w| *w != UNK).map(String::from));
        Self::from(list)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, CorpusFormat};

    #[test]
    fn unknown_words_map_to_bucket_zero() {
        let raw = include_str!("../../tests/data/three_docs.json");
        let c = parse_corpus(raw.as_bytes(), CorpusFormat::DocRed).unwrap();
        let v = Vocab::build([&c]);
        assert_eq!(v.word(0), Some(UNK));
        assert_eq!(v.id("never-seen"), 0);
        let id = v.id("Skagen");
        assert!(id > 0);
        assert_eq!(v.word(id), Some("Skagen"));
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
