//! Seeded synthetic corpora with planted relation triggers.
//!
//! Every fact `(h, r, t)` is expressed by a sentence `... h trigger(r) t ...`
//! where `trigger(r)` is one token unique to `r`. Entities outside facts
//! appear in look-alike sentences `... a ctx b ...` whose middle token is
//! drawn from a context pool; the domain-shift switch swaps that pool for
//! a disjoint one while consuming the random stream identically, so two
//! corpora generated with and without the switch differ only in those
//! context tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Document, Entity, Mention, RelationFact};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub documents: usize,
    pub relations: usize,
    /// Relation ids are `P{first_relation + k}`; offsetting keeps corpora
    /// for disjoint relation sets apart.
    pub first_relation: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub entities_per_doc: usize,
    /// Target fraction of ordered entity pairs without a fact.
    pub nota_fraction: f64,
    pub domain_shift: bool,
    /// Number of distinct context tokens in unlabeled-pair sentences.
    pub context_pool: usize,
    pub extra_mention_prob: f64,
    pub max_filler: usize,
    /// Number of distinct entity names; each document draws its entities'
    /// names from this pool without replacement.
    pub name_pool: usize,
    pub doc_prefix: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            documents: 200,
            relations: 4,
            first_relation: 0,
            vocab_size: 40,
            entities_per_doc: 4,
            nota_fraction: 0.964,
            domain_shift: false,
            context_pool: 8,
            extra_mention_prob: 0.1,
            max_filler: 2,
            name_pool: 64,
            doc_prefix: "syn".to_string(),
        }
    }
}

impl GeneratorConfig {
    pub fn relation_id(&self, k: usize) -> String {
        format!("P{}", self.first_relation + k)
    }

    fn trigger(&self, k: usize) -> String {
        format!("t{}", self.first_relation + k)
    }

    fn total_pairs(&self) -> usize {
        self.documents * self.entities_per_doc * (self.entities_per_doc - 1)
    }

    /// Number of facts needed to hit the target NOTA fraction.
    fn fact_budget(&self) -> Result<usize> {
        if self.documents == 0 || self.relations == 0 || self.context_pool == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "documents, relations, context_pool and vocab_size must be positive".into(),
            ));
        }
        if self.entities_per_doc < 2 || self.entities_per_doc > self.name_pool {
            return Err(Error::Config(format!(
                "entities_per_doc must lie in [2, name_pool = {}], got {}",
                self.name_pool, self.entities_per_doc
            )));
        }
        if !(self.nota_fraction > 0.0 && self.nota_fraction < 1.0) {
            return Err(Error::Config(format!(
                "nota_fraction must lie in (0, 1), got {}",
                self.nota_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.extra_mention_prob) {
            return Err(Error::Config("extra_mention_prob must lie in [0, 1]".into()));
        }
        let total = self.total_pairs();
        let facts = (total as f64 * (1.0 - self.nota_fraction)).round() as usize;
        // facts sit on disjoint entity pairs, at most n/2 per document
        let capacity = self.documents * (self.entities_per_doc / 2);
        if facts == 0 {
            return Err(Error::Config(format!(
                "nota_fraction {} leaves no facts over {total} pairs",
                self.nota_fraction
            )));
        }
        if facts > capacity {
            return Err(Error::Config(format!(
                "nota_fraction {} needs {facts} facts but {} documents with {} entities hold at most {capacity}",
                self.nota_fraction, self.documents, self.entities_per_doc
            )));
        }
        Ok(facts)
    }
}

/// Generates a deterministic corpus for `(config, seed)`.
pub fn generate_synthetic_corpus(config: &GeneratorConfig, seed: u64) -> Result<Corpus> {
    let budget = config.fact_budget()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_docs = config.documents;
    let mut per_doc = vec![budget / n_docs; n_docs];
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut rng);
    for &d in order.iter().take(budget % n_docs) {
        per_doc[d] += 1;
    }

    let documents = per_doc
        .iter()
        .enumerate()
        .map(|(i, &k)| generate_document(config, &mut rng, format!("{}-{i:04}", config.doc_prefix), k))
        .collect();
    let inventory = (0..config.relations).map(|k| config.relation_id(k)).collect();
    Corpus::new(documents, inventory)
}

struct Sentence {
    tokens: Vec<String>,
    /// (entity, start, end) within the sentence
    mentions: Vec<(usize, usize, usize)>,
}

fn generate_document(config: &GeneratorConfig, rng: &mut ChaCha8Rng, doc_id: String, n_facts: usize) -> Document {
    let n = config.entities_per_doc;
    let names: Vec<Vec<String>> = rand::seq::index::sample(rng, config.name_pool, n)
        .into_iter()
        .map(|k| {
            if rng.gen_bool(0.3) {
                vec![format!("e{k}"), format!("e{k}x")]
            } else {
                vec![format!("e{k}")]
            }
        })
        .collect();

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut facts = Vec::with_capacity(n_facts);
    let mut sentences = Vec::new();
    for i in 0..n_facts {
        let (h, t) = (perm[2 * i], perm[2 * i + 1]);
        let r = rng.gen_range(0..config.relations);
        facts.push(RelationFact {
            head: h,
            relation: config.relation_id(r),
            tail: t,
        });
        sentences.push(pair_sentence(config, rng, &names, h, config.trigger(r), Some(t)));
    }
    let related = |a: usize, b: usize| facts.iter().any(|f| (f.head, f.tail) == (a, b) || (f.head, f.tail) == (b, a));

    let rest = &perm[2 * n_facts..];
    for chunk in rest.chunks(2) {
        let ctx = context_token(config, rng);
        sentences.push(pair_sentence(config, rng, &names, chunk[0], ctx, chunk.get(1).copied()));
    }
    for e in 0..n {
        if rng.gen_bool(config.extra_mention_prob) {
            let partners: Vec<usize> = (0..n).filter(|&k| k != e && !related(e, k)).collect();
            let partner = partners.choose(rng).copied();
            let ctx = context_token(config, rng);
            sentences.push(pair_sentence(config, rng, &names, e, ctx, partner));
        }
    }
    sentences.shuffle(rng);

    let mut entities = vec![Entity { mentions: Vec::new() }; n];
    for (sid, s) in sentences.iter().enumerate() {
        for &(e, start, end) in &s.mentions {
            entities[e].mentions.push(Mention {
                sent_id: sid,
                start,
                end,
                surface: names[e].join(" "),
            });
        }
    }
    facts.sort();
    Document {
        doc_id,
        sentences: sentences.into_iter().map(|s| s.tokens).collect(),
        entities,
        facts,
    }
}

fn context_token(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> String {
    let k = rng.gen_range(0..config.context_pool);
    if config.domain_shift {
        format!("s{k}")
    } else {
        format!("c{k}")
    }
}

fn filler(config: &GeneratorConfig, rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
    let count = rng.gen_range(0..=config.max_filler);
    for _ in 0..count {
        out.push(format!("w{}", rng.gen_range(0..config.vocab_size)));
    }
}

fn pair_sentence(
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    names: &[Vec<String>],
    first: usize,
    middle: String,
    second: Option<usize>,
) -> Sentence {
    let mut tokens = Vec::new();
    let mut mentions = Vec::new();
    filler(config, rng, &mut tokens);
    let start = tokens.len();
    tokens.extend(names[first].iter().cloned());
    mentions.push((first, start, tokens.len()));
    tokens.push(middle);
    if let Some(second) = second {
        let start = tokens.len();
        tokens.extend(names[second].iter().cloned());
        mentions.push((second, start, tokens.len()));
    }
    filler(config, rng, &mut tokens);
    tokens.push(".".to_string());
    Sentence { tokens, mentions }
}
