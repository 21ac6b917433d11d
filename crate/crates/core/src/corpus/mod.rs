//! Annotated documents, DocRED-style JSON ingestion and validation.

mod synthetic;
mod vocab;

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_corpus, GeneratorConfig};
pub use vocab::Vocab;

/// Default upper bound on flattened document length.
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub sent_id: usize,
    /// Half-open token interval within the sentence.
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RelationFact {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub sentences: Vec<Vec<String>>,
    pub entities: Vec<Entity>,
    pub facts: Vec<RelationFact>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub relation_inventory: Vec<String>,
}

/// On-disk corpus layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorpusFormat {
    /// List of `{title, sents, vertexSet, labels}` objects.
    #[default]
    DocRed,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "docred" => Ok(CorpusFormat::DocRed),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMention {
    sent_id: usize,
    pos: [usize; 2],
    #[serde(default)]
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawLabel {
    h: usize,
    t: usize,
    r: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDocument {
    title: String,
    sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    vertex_set: Vec<Vec<RawMention>>,
    #[serde(default)]
    labels: Vec<RawLabel>,
}

impl From<RawDocument> for Document {
    fn from(raw: RawDocument) -> Self {
        Document {
            doc_id: raw.title,
            sentences: raw.sents,
            entities: raw
                .vertex_set
                .into_iter()
                .map(|ms| Entity {
                    mentions: ms
                        .into_iter()
                        .map(|m| Mention {
                            sent_id: m.sent_id,
                            start: m.pos[0],
                            end: m.pos[1],
                            surface: m.name,
                        })
                        .collect(),
                })
                .collect(),
            facts: raw
                .labels
                .into_iter()
                .map(|l| RelationFact {
                    head: l.h,
                    relation: l.r,
                    tail: l.t,
                })
                .collect(),
        }
    }
}

impl From<&Document> for RawDocument {
    fn from(doc: &Document) -> Self {
        RawDocument {
            title: doc.doc_id.clone(),
            sents: doc.sentences.clone(),
            vertex_set: doc
                .entities
                .iter()
                .map(|e| {
                    e.mentions
                        .iter()
                        .map(|m| RawMention {
                            sent_id: m.sent_id,
                            pos: [m.start, m.end],
                            name: m.surface.clone(),
                        })
                        .collect()
                })
                .collect(),
            labels: doc
                .facts
                .iter()
                .map(|f| RawLabel {
                    h: f.head,
                    t: f.tail,
                    r: f.relation.clone(),
                })
                .collect(),
        }
    }
}

/// Parses a corpus, deriving the relation inventory from the labels
/// (sorted).
pub fn parse_corpus(raw: &[u8], format: CorpusFormat) -> Result<Corpus> {
    let docs = parse_documents(raw, format)?;
    let inventory: BTreeSet<&str> = docs
        .iter()
        .flat_map(|d| d.facts.iter().map(|f| f.relation.as_str()))
        .collect();
    let inventory = inventory.into_iter().map(String::from).collect();
    Corpus::new(docs, inventory)
}

/// Parses a corpus against a fixed relation inventory; facts naming any
/// other relation are rejected.
pub fn parse_corpus_with_inventory(raw: &[u8], format: CorpusFormat, inventory: Vec<String>) -> Result<Corpus> {
    let docs = parse_documents(raw, format)?;
    Corpus::new(docs, inventory)
}

fn parse_documents(raw: &[u8], format: CorpusFormat) -> Result<Vec<Document>> {
    match format {
        CorpusFormat::DocRed => {
            let raw_docs: Vec<RawDocument> = serde_json::from_slice(raw)?;
            Ok(raw_docs.into_iter().map(Document::from).collect())
        }
    }
}

/// Parses a relation inventory file (a JSON list of ids).
pub fn parse_inventory(raw: &[u8]) -> Result<Vec<String>> {
    let inv: Vec<String> = serde_json::from_slice(raw)?;
    let unique: HashSet<&String> = inv.iter().collect();
    if unique.len() != inv.len() {
        return Err(Error::Config("relation inventory contains duplicates".into()));
    }
    Ok(inv)
}

impl Document {
    /// Checks spans, entity references and duplicate facts.
    pub fn validate(&self, inventory: &HashSet<&str>) -> Result<()> {
        let id = self.doc_id.as_str();
        for (ei, e) in self.entities.iter().enumerate() {
            if e.mentions.is_empty() {
                return Err(Error::validation(id, format!("entity {ei} has no mentions")));
            }
            for m in &e.mentions {
                let Some(sent) = self.sentences.get(m.sent_id) else {
                    return Err(Error::validation(
                        id,
                        format!("entity {ei} mention sentence {} out of range", m.sent_id),
                    ));
                };
                if m.start >= m.end || m.end > sent.len() {
                    return Err(Error::validation(
                        id,
                        format!(
                            "entity {ei} mention span [{}, {}) invalid for sentence {} of length {}",
                            m.start,
                            m.end,
                            m.sent_id,
                            sent.len()
                        ),
                    ));
                }
            }
        }
        let mut seen = HashSet::new();
        for f in &self.facts {
            if f.head >= self.entities.len() || f.tail >= self.entities.len() {
                return Err(Error::validation(id, format!("fact references missing entity: {f:?}")));
            }
            if f.head == f.tail {
                return Err(Error::validation(id, format!("fact with head == tail: {f:?}")));
            }
            if !inventory.contains(f.relation.as_str()) {
                return Err(Error::validation(id, format!("unknown relation `{}`", f.relation)));
            }
            if !seen.insert(f) {
                return Err(Error::validation(id, format!("duplicate fact {f:?}")));
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Concatenates sentences and maps every mention to a global span.
    pub fn flatten_tokens(&self, max_len: usize) -> Result<FlatDocument> {
        let mut offsets = Vec::with_capacity(self.sentences.len());
        let mut len = 0;
        for s in &self.sentences {
            offsets.push(len);
            len += s.len();
        }
        if len > max_len {
            return Err(Error::Truncation {
                doc_id: self.doc_id.clone(),
                len,
                max: max_len,
            });
        }
        let tokens = self.sentences.iter().flatten().cloned().collect();
        let entity_spans = self
            .entities
            .iter()
            .map(|e| {
                e.mentions
                    .iter()
                    .map(|m| (offsets[m.sent_id] + m.start, offsets[m.sent_id] + m.end))
                    .collect()
            })
            .collect();
        Ok(FlatDocument {
            tokens,
            entity_spans,
        })
    }
}

/// A document as one token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlatDocument {
    pub tokens: Vec<String>,
    /// Per entity, the global `[start, end)` span of each mention.
    pub entity_spans: Vec<Vec<(usize, usize)>>,
}

impl FlatDocument {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Corpus {
    /// Builds and validates a corpus.
    pub fn new(documents: Vec<Document>, relation_inventory: Vec<String>) -> Result<Self> {
        let inv: HashSet<&str> = relation_inventory.iter().map(String::as_str).collect();
        if inv.len() != relation_inventory.len() {
            return Err(Error::Config("relation inventory contains duplicates".into()));
        }
        let mut ids = HashSet::new();
        for d in &documents {
            if !ids.insert(d.doc_id.as_str()) {
                return Err(Error::validation(&d.doc_id, "duplicate doc_id"));
            }
            d.validate(&inv)?;
        }
        Ok(Self {
            documents,
            relation_inventory,
        })
    }

    pub fn load(path: &Path, format: CorpusFormat) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_corpus(&raw, format)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn num_facts(&self) -> usize {
        self.documents.iter().map(|d| d.facts.len()).sum()
    }

    pub fn document(&self, doc_id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.doc_id == doc_id)
    }

    /// Serializes in the DocRED layout.
    pub fn to_json(&self) -> String {
        let raw: Vec<RawDocument> = self.documents.iter().map(RawDocument::from).collect();
        serde_json::to_string(&raw).expect("corpus serialization is infallible")
    }

    pub fn inventory_json(&self) -> String {
        serde_json::to_string(&self.relation_inventory).expect("inventory serialization is infallible")
    }

    /// Fraction of ordered entity pairs carrying no fact.
    pub fn nota_fraction(&self) -> f64 {
        let mut pairs = 0usize;
        let mut labeled = 0usize;
        for d in &self.documents {
            let n = d.entities.len();
            pairs += n * n.saturating_sub(1);
            let distinct: HashSet<(usize, usize)> = d.facts.iter().map(|f| (f.head, f.tail)).collect();
            labeled += distinct.len();
        }
        if pairs == 0 {
            return 0.0;
        }
        1.0 - labeled as f64 / pairs as f64
    }
}
