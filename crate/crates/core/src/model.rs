//! The full episode model: encoder, pair representations, relation and
//! NOTA prototypes, and the calibrated loss.
//!
//! All random choices of an episode (prototype subsampling, NOTA instance
//! selection, query NOTA subsampling for the loss) are fixed up front in an
//! [`EpisodePlan`], so the forward pass is a pure function of the
//! parameters and the optional embedding perturbations.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::calib::{pair_loss, relation_logit, PairScores, Supervision};
use crate::corpus::{Corpus, Vocab};
use crate::diffcore::{Bindings, GradMap, Graph, ParamSet, Tensor, Var};
use crate::encoder::{encode, init_encoder, EncoderConfig, EncoderOutput};
use crate::episode::{enumerate_pairs, group_pairs, nota_pool, Episode};
use crate::error::{Error, Result};
use crate::hybrid::{
    entity_features, init_hybrid, instance_repr, relation_prototype, DegeneratePolicy, EntityFeatures, MentionPooling,
};
use crate::nota::{init_global_nota, init_proto_learner, nota_prototype, select_nota_instances, GLOBAL_NOTA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Max support instances per relation prototype.
    pub omega: usize,
    /// NOTA instances fed to the proto-learner.
    pub beta: usize,
    pub alpha: f64,
    /// Proto-learner hidden width; 0 means twice the encoder width.
    pub tpl_hidden: usize,
    pub use_he: bool,
    pub use_tpl: bool,
    pub use_dwc: bool,
    pub supervision: Supervision,
    pub pooling: MentionPooling,
    /// Support NOTA pairs kept per document before selection.
    pub nota_cap: usize,
    /// Gold-NOTA query pairs kept per positive pair in the loss; 0 keeps all.
    pub query_nota_ratio: usize,
    /// Fail on degenerate localized attention instead of falling back to
    /// uniform weights.
    pub strict_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            omega: 10,
            beta: 10,
            alpha: 1.0,
            tpl_hidden: 0,
            use_he: true,
            use_tpl: true,
            use_dwc: true,
            supervision: Supervision::Gold,
            pooling: MentionPooling::Token,
            nota_cap: crate::episode::DEFAULT_NOTA_CAP,
            query_nota_ratio: 0,
            strict_attention: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.omega == 0 || self.beta == 0 || self.nota_cap == 0 {
            return Err(Error::Config("omega, beta and nota_cap must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a nonnegative number, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Width of a pair vector.
    pub fn pair_dim(&self) -> usize {
        2 * self.encoder.hidden
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.use_dwc {
            self.alpha
        } else {
            0.0
        }
    }

    fn degenerate_policy(&self) -> DegeneratePolicy {
        if self.strict_attention {
            DegeneratePolicy::Error
        } else {
            DegeneratePolicy::Uniform
        }
    }
}

/// Initializes every parameter group in a fixed order, whether or not the
/// ablation flags use it, so ablated and full models share their initial
/// weights.
pub fn init_model(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    config.validate()?;
    let d = config.encoder.hidden;
    let hidden = if config.tpl_hidden == 0 { 2 * d } else { config.tpl_hidden };
    let mut p = init_encoder(&config.encoder, rng)?;
    p.extend(init_hybrid(d, rng)?)?;
    p.extend(init_proto_learner(2 * d, hidden, rng)?)?;
    p.extend(init_global_nota(2 * d, rng)?)?;
    Ok(p)
}

/// A document as token ids plus entity token spans.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDoc {
    pub tokens: Vec<usize>,
    pub entity_spans: Vec<Vec<(usize, usize)>>,
}

/// Token ids for every document, aligned with `corpus.documents`.
pub fn prepare_corpus(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Result<Vec<PreparedDoc>> {
    corpus
        .documents
        .iter()
        .map(|d| {
            let flat = d.flatten_tokens(max_len)?;
            Ok(PreparedDoc {
                tokens: vocab.ids(&flat.tokens),
                entity_spans: flat.entity_spans,
            })
        })
        .collect()
}

/// An ordered entity pair inside one plan document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlannedPair {
    /// Position in [`EpisodePlan::docs`].
    pub doc: usize,
    pub head: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPair {
    pub pair: PlannedPair,
    /// Indices into [`EpisodePlan::relations`]; empty for NOTA.
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodePlan {
    pub relations: Vec<String>,
    /// Corpus indices of the support documents followed by the query ones.
    pub docs: Vec<usize>,
    pub num_support: usize,
    /// Selected support instances per relation.
    pub prototypes: Vec<Vec<PlannedPair>>,
    /// Selected support NOTA instances.
    pub nota: Vec<PlannedPair>,
    /// Every ordered pair of every query document.
    pub query: Vec<QueryPair>,
    /// Indices into `query` that enter the loss.
    pub loss_pairs: Vec<usize>,
}

impl EpisodePlan {
    pub fn support_docs(&self) -> &[usize] {
        &self.docs[..self.num_support]
    }

    pub fn query_docs(&self) -> &[usize] {
        &self.docs[self.num_support..]
    }
}

/// Fixes every random choice of `episode`.
pub fn plan_episode(episode: &Episode, corpus: &Corpus, config: &ModelConfig, rng: &mut impl Rng) -> Result<EpisodePlan> {
    let docs: Vec<usize> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|d| d.doc_index)
        .collect();
    let num_support = episode.support.len();
    let position = |doc_index: usize| docs[..num_support].iter().position(|&d| d == doc_index);

    let mut prototypes = Vec::with_capacity(episode.relations.len());
    for r in &episode.relations {
        let instances: Vec<PlannedPair> = episode
            .support
            .iter()
            .enumerate()
            .flat_map(|(k, d)| {
                d.facts.iter().filter(|f| &f.r == r).map(move |f| PlannedPair {
                    doc: k,
                    head: f.h,
                    tail: f.t,
                })
            })
            .collect();
        prototypes.push(relation_prototype(r, instances, config.omega, rng)?.vectors);
    }

    let pool: Vec<PlannedPair> = nota_pool(episode, corpus, config.nota_cap, rng)?
        .into_iter()
        .map(|p| PlannedPair {
            doc: position(p.doc_index).expect("NOTA pool comes from support documents"),
            head: p.head,
            tail: p.tail,
        })
        .collect();
    let nota = select_nota_instances(&pool, config.beta, rng)?;

    let mut query = Vec::new();
    let mut loss_pairs = Vec::new();
    for (k, d) in episode.query.iter().enumerate() {
        let doc = &corpus.documents[d.doc_index];
        let grouped = group_pairs(&enumerate_pairs(d.doc_index, doc, &episode.relations));
        let base = query.len();
        let mut positive = Vec::new();
        let mut negative = Vec::new();
        for (i, p) in grouped.into_iter().enumerate() {
            let gold: Vec<usize> = p
                .gold
                .iter()
                .map(|r| episode.relations.binary_search(r).expect("labels come from the episode relations"))
                .collect();
            if gold.is_empty() {
                negative.push(base + i);
            } else {
                positive.push(base + i);
            }
            query.push(QueryPair {
                pair: PlannedPair {
                    doc: num_support + k,
                    head: p.head,
                    tail: p.tail,
                },
                gold,
            });
        }
        let keep = config.query_nota_ratio * positive.len().max(1);
        if config.query_nota_ratio > 0 && negative.len() > keep {
            let mut pick = index::sample(rng, negative.len(), keep).into_vec();
            pick.sort_unstable();
            negative = pick.into_iter().map(|i| negative[i]).collect();
        }
        let mut here: Vec<usize> = positive.into_iter().chain(negative).collect();
        here.sort_unstable();
        loss_pairs.extend(here);
    }
    if loss_pairs.is_empty() {
        return Err(Error::Input("episode has no query pairs".into()));
    }
    Ok(EpisodePlan {
        relations: episode.relations.clone(),
        docs,
        num_support,
        prototypes,
        nota,
        query,
        loss_pairs,
    })
}

/// Logit nodes for one query pair.
#[derive(Debug, Clone)]
pub struct PairLogits {
    pub relations: Vec<Var>,
    pub nota: Var,
}

struct Forward<'a> {
    config: &'a ModelConfig,
    params: &'a Bindings,
    outputs: Vec<EncoderOutput>,
    spans: Vec<&'a [Vec<(usize, usize)>]>,
    features: HashMap<(usize, usize), EntityFeatures>,
}

impl Forward<'_> {
    fn features(&mut self, g: &mut Graph, doc: usize, entity: usize) -> Result<EntityFeatures> {
        if let Some(f) = self.features.get(&(doc, entity)) {
            return Ok(*f);
        }
        let spans = self.spans[doc]
            .get(entity)
            .ok_or_else(|| Error::Input(format!("entity {entity} out of range")))?;
        let f = entity_features(g, &self.outputs[doc], spans, self.config.pooling)?;
        self.features.insert((doc, entity), f);
        Ok(f)
    }

    fn pair_vector(&mut self, g: &mut Graph, p: PlannedPair) -> Result<Var> {
        let s = self.features(g, p.doc, p.head)?;
        let o = self.features(g, p.doc, p.tail)?;
        if self.config.use_he {
            let policy = self.config.degenerate_policy();
            Ok(instance_repr(g, &self.outputs[p.doc], &s, &o, self.params, policy)?.concat)
        } else {
            Ok(g.concat_cols(&[s.embedding, o.embedding]))
        }
    }

    fn stack(&mut self, g: &mut Graph, pairs: &[PlannedPair]) -> Result<Var> {
        let rows = pairs.iter().map(|&p| self.pair_vector(g, p)).collect::<Result<Vec<_>>>()?;
        Ok(g.concat_rows(&rows))
    }
}

/// Builds logits for the query pairs `which` (indices into `plan.query`).
/// `perturbations`, when nonempty, holds one `l x d` node per plan document.
pub fn forward_logits(
    g: &mut Graph,
    config: &ModelConfig,
    params: &Bindings,
    docs: &[PreparedDoc],
    plan: &EpisodePlan,
    perturbations: &[Var],
    which: &[usize],
) -> Result<Vec<PairLogits>> {
    if !perturbations.is_empty() && perturbations.len() != plan.docs.len() {
        return Err(Error::Input(format!(
            "{} perturbations for {} documents",
            perturbations.len(),
            plan.docs.len()
        )));
    }
    let mut outputs = Vec::with_capacity(plan.docs.len());
    let mut spans = Vec::with_capacity(plan.docs.len());
    for (k, &d) in plan.docs.iter().enumerate() {
        let doc = docs
            .get(d)
            .ok_or_else(|| Error::Input(format!("document index {d} out of range")))?;
        outputs.push(encode(g, &config.encoder, params, &doc.tokens, perturbations.get(k).copied())?);
        spans.push(doc.entity_spans.as_slice());
    }
    let mut fwd = Forward {
        config,
        params,
        outputs,
        spans,
        features: HashMap::new(),
    };

    let protos = plan
        .prototypes
        .iter()
        .map(|p| fwd.stack(g, p))
        .collect::<Result<Vec<_>>>()?;
    let nota_proto = if config.use_tpl {
        let selected = fwd.stack(g, &plan.nota)?;
        nota_prototype(g, selected, params)?
    } else {
        params.var(GLOBAL_NOTA)
    };

    let mut out = Vec::with_capacity(which.len());
    for &i in which {
        let qp = plan
            .query
            .get(i)
            .ok_or_else(|| Error::Input(format!("query pair {i} out of range")))?;
        let q = fwd.pair_vector(g, qp.pair)?;
        let relations = protos
            .iter()
            .map(|&p| relation_logit(g, q, p))
            .collect::<Result<Vec<_>>>()?;
        let nota = relation_logit(g, q, nota_proto)?;
        out.push(PairLogits { relations, nota });
    }
    Ok(out)
}

/// Mean pair loss over `plan.loss_pairs`.
pub fn episode_loss(
    g: &mut Graph,
    config: &ModelConfig,
    params: &Bindings,
    docs: &[PreparedDoc],
    plan: &EpisodePlan,
    perturbations: &[Var],
) -> Result<Var> {
    let logits = forward_logits(g, config, params, docs, plan, perturbations, &plan.loss_pairs)?;
    let alpha = config.effective_alpha();
    let losses = logits
        .iter()
        .zip(&plan.loss_pairs)
        .map(|(l, &i)| pair_loss(g, &l.relations, l.nota, &plan.query[i].gold, alpha, config.supervision))
        .collect::<Result<Vec<_>>>()?;
    let row = g.concat_cols(&losses);
    let loss = g.mean_all(row);
    g.check_finite()?;
    Ok(loss)
}

/// Loss and gradients for every parameter, without perturbation.
pub fn episode_gradients(config: &ModelConfig, params: &ParamSet, docs: &[PreparedDoc], plan: &EpisodePlan) -> Result<(f64, GradMap)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = episode_loss(&mut g, config, &b, docs, plan, &[])?;
    let grads = g.backward(loss)?;
    Ok((g.scalar(loss), b.collect(&g, &grads)))
}

/// Scores for every query pair of the plan.
pub fn episode_scores(config: &ModelConfig, params: &ParamSet, docs: &[PreparedDoc], plan: &EpisodePlan) -> Result<Vec<PairScores>> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let all: Vec<usize> = (0..plan.query.len()).collect();
    let logits = forward_logits(&mut g, config, &b, docs, plan, &[], &all)?;
    g.check_finite()?;
    Ok(logits
        .iter()
        .map(|l| PairScores {
            relation_logits: l.relations.iter().map(|&v| g.scalar(v)).collect(),
            nota_logit: g.scalar(l.nota),
        })
        .collect())
}

/// Relation-instance vectors of the plan's support prototypes and NOTA
/// prototype, for export.
pub fn prototype_vectors(config: &ModelConfig, params: &ParamSet, docs: &[PreparedDoc], plan: &EpisodePlan) -> Result<Vec<(String, Tensor)>> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let mut outputs = Vec::new();
    let mut spans = Vec::new();
    for &d in &plan.docs {
        outputs.push(encode(&mut g, &config.encoder, &b, &docs[d].tokens, None)?);
        spans.push(docs[d].entity_spans.as_slice());
    }
    let mut fwd = Forward {
        config,
        params: &b,
        outputs,
        spans,
        features: HashMap::new(),
    };
    let mut out = Vec::new();
    for (r, pairs) in plan.relations.iter().zip(&plan.prototypes) {
        let v = fwd.stack(&mut g, pairs)?;
        out.push((r.clone(), g.value(v).clone()));
    }
    let nota = if config.use_tpl {
        let selected = fwd.stack(&mut g, &plan.nota)?;
        nota_prototype(&mut g, selected, &b)?
    } else {
        b.var(GLOBAL_NOTA)
    };
    out.push(("NOTA".to_string(), g.value(nota).clone()));
    Ok(out)
}
