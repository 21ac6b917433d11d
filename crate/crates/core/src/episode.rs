//! Episode construction: relation splits, support/query sampling,
//! candidate-pair enumeration and the support-side NOTA pool.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Document, RelationFact};
use crate::error::{Error, Result};

/// Retry budget for strategies that constrain the relation multiplicity.
pub const MAX_SAMPLING_RETRIES: usize = 1000;

/// Default cap on support NOTA pairs kept per document.
pub const DEFAULT_NOTA_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskSetting {
    /// One support document, three query documents.
    #[serde(rename = "1doc")]
    OneDoc,
    /// Three support documents, one query document.
    #[serde(rename = "3doc")]
    ThreeDoc,
}

impl TaskSetting {
    pub fn support_docs(self) -> usize {
        match self {
            TaskSetting::OneDoc => 1,
            TaskSetting::ThreeDoc => 3,
        }
    }

    pub fn query_docs(self) -> usize {
        match self {
            TaskSetting::OneDoc => 3,
            TaskSetting::ThreeDoc => 1,
        }
    }
}

impl std::str::FromStr for TaskSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1doc" | "OneDoc" => Ok(TaskSetting::OneDoc),
            "3doc" | "ThreeDoc" => Ok(TaskSetting::ThreeDoc),
            other => Err(Error::Config(format!("unknown setting `{other}` (expected 1doc or 3doc)"))),
        }
    }
}

impl fmt::Display for TaskSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskSetting::OneDoc => "1doc",
            TaskSetting::ThreeDoc => "3doc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Support facts of exactly one relation type.
    Single,
    /// Support facts of several relation types whenever the corpus allows.
    Hard,
}

impl std::str::FromStr for SamplingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "Single" => Ok(SamplingStrategy::Single),
            "hard" | "Hard" => Ok(SamplingStrategy::Hard),
            other => Err(Error::Config(format!("unknown strategy `{other}` (expected single or hard)"))),
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingStrategy::Single => "single",
            SamplingStrategy::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSplit {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded partition of the inventory into train/dev/test relation sets.
///
/// Sizes are `floor(n * f_i)` with the remainder handed out by largest
/// fractional part (ties to the earlier split).
pub fn split_relations(corpus: &Corpus, fractions: [f64; 3], seed: u64) -> Result<RelationSplit> {
    let n = corpus.relation_inventory.len();
    if n == 0 {
        return Err(Error::Config("relation inventory is empty".into()));
    }
    if fractions.iter().any(|f| *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|x| (x + 1e-9).floor() as usize).collect();
    let mut remainder = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - sizes[a] as f64;
        let fb = raw[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in &order {
        if remainder == 0 {
            break;
        }
        sizes[i] += 1;
        remainder -= 1;
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "split {fractions:?} of {n} relations leaves an empty part (sizes {sizes:?})"
        )));
    }
    let mut rels = corpus.relation_inventory.clone();
    rels.shuffle(&mut crate::rng::stream(seed, crate::rng::streams::SPLIT));
    let test = rels.split_off(sizes[0] + sizes[1]);
    let dev = rels.split_off(sizes[0]);
    let mut split = RelationSplit { train: rels, dev, test };
    split.train.sort();
    split.dev.sort();
    split.test.sort();
    Ok(split)
}

/// One document of an episode with the facts visible to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeDoc {
    pub doc_id: String,
    /// Position of the document in its corpus.
    pub doc_index: usize,
    pub facts: Vec<EpisodeFact>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EpisodeFact {
    pub h: usize,
    pub r: String,
    pub t: usize,
}

impl From<&RelationFact> for EpisodeFact {
    fn from(f: &RelationFact) -> Self {
        EpisodeFact {
            h: f.head,
            r: f.relation.clone(),
            t: f.tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub setting: TaskSetting,
    /// Relation types of the episode, sorted.
    pub relations: Vec<String>,
    pub support: Vec<EpisodeDoc>,
    pub query: Vec<EpisodeDoc>,
}

impl Episode {
    /// Checks the structural invariants against the owning corpus.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let rels: HashSet<&str> = self.relations.iter().map(String::as_str).collect();
        let bad = |m: String| Error::Input(format!("invalid episode: {m}"));
        if self.support.len() != self.setting.support_docs() || self.query.len() != self.setting.query_docs() {
            return Err(bad(format!(
                "{} support / {} query documents for setting {}",
                self.support.len(),
                self.query.len(),
                self.setting
            )));
        }
        let mut ids = HashSet::new();
        for d in self.support.iter().chain(&self.query) {
            if !ids.insert(d.doc_id.as_str()) {
                return Err(bad(format!("document `{}` used twice", d.doc_id)));
            }
            let doc = corpus
                .documents
                .get(d.doc_index)
                .filter(|doc| doc.doc_id == d.doc_id)
                .ok_or_else(|| bad(format!("document `{}` not found at index {}", d.doc_id, d.doc_index)))?;
            for f in &d.facts {
                if !rels.contains(f.r.as_str()) {
                    return Err(bad(format!("fact relation `{}` outside the episode", f.r)));
                }
                if !doc.facts.iter().any(|g| EpisodeFact::from(g) == *f) {
                    return Err(bad(format!("fact {f:?} not in document `{}`", d.doc_id)));
                }
            }
        }
        let support_rels: BTreeSet<&str> = self.support.iter().flat_map(|d| d.facts.iter().map(|f| f.r.as_str())).collect();
        if support_rels.len() != self.relations.len() {
            return Err(bad("episode relations differ from the support relations".into()));
        }
        Ok(())
    }

    /// Re-attaches an episode loaded from disk to its corpus by doc id.
    pub fn resolve(mut self, corpus: &Corpus) -> Result<Self> {
        for d in self.support.iter_mut().chain(self.query.iter_mut()) {
            if corpus.documents.get(d.doc_index).map(|x| &x.doc_id) != Some(&d.doc_id) {
                d.doc_index = corpus
                    .documents
                    .iter()
                    .position(|x| x.doc_id == d.doc_id)
                    .ok_or_else(|| Error::Input(format!("episode references unknown document `{}`", d.doc_id)))?;
            }
        }
        self.validate(corpus)?;
        Ok(self)
    }
}

fn restricted_facts(doc: &Document, rels: &BTreeSet<String>) -> Vec<EpisodeFact> {
    let mut facts: Vec<EpisodeFact> = doc
        .facts
        .iter()
        .filter(|f| rels.contains(&f.relation))
        .map(EpisodeFact::from)
        .collect();
    facts.sort();
    facts
}

/// Samples one episode.
///
/// Support and query documents are drawn uniformly from documents that hold
/// at least one fact of an allowed relation. `Single` fixes one relation
/// and draws support documents expressing it; `Hard` redraws up to
/// [`MAX_SAMPLING_RETRIES`] times until the support documents span at
/// least two relation types and otherwise keeps the most diverse draw.
pub fn sample_episode<R: Rng>(
    corpus: &Corpus,
    allowed: &[String],
    setting: TaskSetting,
    strategy: SamplingStrategy,
    rng: &mut R,
) -> Result<Episode> {
    let allowed: BTreeSet<&str> = allowed.iter().map(String::as_str).collect();
    let types: Vec<BTreeSet<String>> = corpus
        .documents
        .iter()
        .map(|d| {
            d.facts
                .iter()
                .filter(|f| allowed.contains(f.relation.as_str()))
                .map(|f| f.relation.clone())
                .collect()
        })
        .collect();
    let eligible: Vec<usize> = (0..corpus.len()).filter(|&i| !types[i].is_empty()).collect();
    let (s_m, q_m) = (setting.support_docs(), setting.query_docs());
    if eligible.len() < s_m + q_m {
        return Err(Error::SamplingExhausted {
            attempts: 0,
            message: format!(
                "{} documents express an allowed relation, {} needed",
                eligible.len(),
                s_m + q_m
            ),
        });
    }

    let (support, relations) = match strategy {
        SamplingStrategy::Single => {
            let mut by_rel: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for &i in &eligible {
                for r in &types[i] {
                    by_rel.entry(r.as_str()).or_default().push(i);
                }
            }
            let candidates: Vec<(&str, &Vec<usize>)> =
                by_rel.iter().filter(|(_, docs)| docs.len() >= s_m).map(|(r, d)| (*r, d)).collect();
            let Some(&(rel, docs)) = candidates.choose(rng) else {
                return Err(Error::SamplingExhausted {
                    attempts: 0,
                    message: format!("no allowed relation appears in {s_m} documents"),
                });
            };
            let support: Vec<usize> = index::sample(rng, docs.len(), s_m).into_iter().map(|k| docs[k]).collect();
            (support, BTreeSet::from([rel.to_string()]))
        }
        SamplingStrategy::Hard => {
            let mut best: Option<(Vec<usize>, BTreeSet<String>)> = None;
            for _ in 0..MAX_SAMPLING_RETRIES {
                let support: Vec<usize> =
                    index::sample(rng, eligible.len(), s_m).into_iter().map(|k| eligible[k]).collect();
                let rels: BTreeSet<String> = support.iter().flat_map(|&i| types[i].iter().cloned()).collect();
                let better = best.as_ref().map_or(true, |(_, b)| rels.len() > b.len());
                if better {
                    best = Some((support, rels));
                }
                if best.as_ref().is_some_and(|(_, b)| b.len() >= 2) {
                    break;
                }
            }
            let (support, rels) = best.expect("at least one draw");
            if rels.len() < 2 {
                log::warn!(
                    "hard sampling found no multi-relation support set in {MAX_SAMPLING_RETRIES} draws; using a single relation"
                );
            }
            (support, rels)
        }
    };

    let rest: Vec<usize> = eligible.iter().copied().filter(|i| !support.contains(i)).collect();
    let query: Vec<usize> = index::sample(rng, rest.len(), q_m).into_iter().map(|k| rest[k]).collect();

    let make = |i: usize| EpisodeDoc {
        doc_id: corpus.documents[i].doc_id.clone(),
        doc_index: i,
        facts: restricted_facts(&corpus.documents[i], &relations),
    };
    Ok(Episode {
        setting,
        relations: relations.iter().cloned().collect(),
        support: support.into_iter().map(make).collect(),
        query: query.into_iter().map(make).collect(),
    })
}

/// One ordered entity pair with one label (`None` = NOTA).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidatePair {
    pub doc_index: usize,
    pub head: usize,
    pub tail: usize,
    pub label: Option<String>,
}

/// Ordered pairs of `doc` labelled against `relations`: one pair per
/// in-scope fact, plus a NOTA pair for every ordered pair without one.
pub fn enumerate_pairs(doc_index: usize, doc: &Document, relations: &[String]) -> Vec<CandidatePair> {
    let rels: HashSet<&str> = relations.iter().map(String::as_str).collect();
    let n = doc.entities.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1));
    for head in 0..n {
        for tail in 0..n {
            if head == tail {
                continue;
            }
            let mut labels: Vec<&str> = doc
                .facts
                .iter()
                .filter(|f| f.head == head && f.tail == tail && rels.contains(f.relation.as_str()))
                .map(|f| f.relation.as_str())
                .collect();
            labels.sort_unstable();
            if labels.is_empty() {
                out.push(CandidatePair {
                    doc_index,
                    head,
                    tail,
                    label: None,
                });
            } else {
                out.extend(labels.into_iter().map(|r| CandidatePair {
                    doc_index,
                    head,
                    tail,
                    label: Some(r.to_string()),
                }));
            }
        }
    }
    out
}

/// An ordered pair with all of its gold relations (empty = NOTA).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub head: usize,
    pub tail: usize,
    pub gold: Vec<String>,
}

/// Collapses per-fact candidate pairs into one entry per ordered pair.
pub fn group_pairs(pairs: &[CandidatePair]) -> Vec<LabeledPair> {
    let mut grouped: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
    for p in pairs {
        let entry = grouped.entry((p.head, p.tail)).or_default();
        if let Some(r) = &p.label {
            entry.push(r.clone());
        }
    }
    grouped
        .into_iter()
        .map(|((head, tail), gold)| LabeledPair { head, tail, gold })
        .collect()
}

/// NOTA pairs of the support documents, at most `cap_per_doc` per
/// document (uniform subsample, original order kept).
pub fn nota_pool<R: Rng>(episode: &Episode, corpus: &Corpus, cap_per_doc: usize, rng: &mut R) -> Result<Vec<CandidatePair>> {
    let mut pool = Vec::new();
    for d in &episode.support {
        let doc = &corpus.documents[d.doc_index];
        let nota: Vec<CandidatePair> = enumerate_pairs(d.doc_index, doc, &episode.relations)
            .into_iter()
            .filter(|p| p.label.is_none())
            .collect();
        if nota.len() <= cap_per_doc {
            pool.extend(nota);
        } else {
            let mut keep = index::sample(rng, nota.len(), cap_per_doc).into_vec();
            keep.sort_unstable();
            pool.extend(keep.into_iter().map(|k| nota[k].clone()));
        }
    }
    if pool.is_empty() {
        return Err(Error::Input("episode support documents contain no NOTA pairs".into()));
    }
    Ok(pool)
}
