//! Entity-pair representations from token states and attention.
//!
//! For an ordered pair `(s, o)`:
//!
//! ```text
//! h_e      = mean of the token states covered by e's mentions
//! A_e      = mean of e's attention rows, per head            (H x l)
//! a        = (1/H) * sum_heads A_s * A_o                     (l)
//! c        = states^T (a / sum(a))                           (d)
//! z_s      = tanh(W_s [h_s; c] + b_s),  z_o likewise with W_o, b_o
//! instance = [z_s; z_o]                                      (2d)
//! ```
//!
//! A relation prototype is the set of (at most `omega`) support instance
//! vectors of that relation; nothing is averaged.

use rand::seq::index;
use rand::Rng;

use crate::diffcore::{uniform, Bindings, Graph, ParamSet, Tensor, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};

/// Sum of localized attention below which context pooling is undefined.
pub const DEGENERATE_ATTENTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MentionPooling {
    /// Mean over every token of every mention.
    #[default]
    Token,
    /// Mean of per-mention means.
    Mention,
}

/// What to do when the localized attention of a pair sums to ~0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Fall back to uniform weights over all tokens.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Subject,
    Object,
}

impl Side {
    fn prefix(self) -> &'static str {
        match self {
            Side::Subject => "he.subject",
            Side::Object => "he.object",
        }
    }
}

fn span_weights(spans: &[(usize, usize)], l: usize, pooling: MentionPooling) -> Result<Vec<(usize, f64)>> {
    if spans.is_empty() {
        return Err(Error::Input("entity has no mentions".into()));
    }
    if let Some(&(s, e)) = spans.iter().find(|&&(s, e)| s >= e || e > l) {
        return Err(Error::Input(format!("mention span [{s}, {e}) invalid for length {l}")));
    }
    Ok(match pooling {
        MentionPooling::Token => {
            let total: usize = spans.iter().map(|(s, e)| e - s).sum();
            let w = 1.0 / total as f64;
            spans.iter().flat_map(|&(s, e)| (s..e).map(move |t| (t, w))).collect()
        }
        MentionPooling::Mention => {
            let m = spans.len() as f64;
            spans
                .iter()
                .flat_map(|&(s, e)| {
                    let w = 1.0 / (m * (e - s) as f64);
                    (s..e).map(move |t| (t, w))
                })
                .collect()
        }
    })
}

/// Global entity embedding (`1 x d`).
pub fn entity_embedding(g: &mut Graph, out: &EncoderOutput, spans: &[(usize, usize)], pooling: MentionPooling) -> Result<Var> {
    let w = span_weights(spans, out.len(g), pooling)?;
    Ok(g.weighted_row_sum(out.states, w))
}

/// Entity-level attention (`H x l`): per head, the pooled attention rows of
/// the entity's mention tokens.
pub fn entity_attention(g: &mut Graph, out: &EncoderOutput, spans: &[(usize, usize)], pooling: MentionPooling) -> Result<Var> {
    let w = span_weights(spans, out.len(g), pooling)?;
    let rows: Vec<Var> = out
        .attention
        .iter()
        .map(|&a| g.weighted_row_sum(a, w.clone()))
        .collect();
    Ok(g.concat_rows(&rows))
}

/// Head-averaged elementwise product of two entity attentions (`1 x l`).
pub fn localized_attention(g: &mut Graph, a_s: Var, a_o: Var) -> Result<Var> {
    let shape = g.shape(a_s);
    if shape != g.shape(a_o) {
        return Err(Error::Input(format!(
            "entity attention shapes differ: {shape:?} vs {:?}",
            g.shape(a_o)
        )));
    }
    let heads = shape.0;
    let prod = g.mul(a_s, a_o);
    let w = 1.0 / heads as f64;
    Ok(g.weighted_row_sum(prod, (0..heads).map(|h| (h, w)).collect()))
}

/// Attention-weighted token context (`1 x d`).
pub fn local_context(g: &mut Graph, out: &EncoderOutput, a: Var, policy: DegeneratePolicy) -> Result<Var> {
    let l = out.len(g);
    if g.shape(a) != (1, l) {
        return Err(Error::Input(format!("attention vector shape {:?}, expected (1, {l})", g.shape(a))));
    }
    let weights = context_weights(g, a, policy)?;
    Ok(g.matmul(weights, out.states))
}

/// Localized attention rescaled to sum to one, or uniform weights when its
/// mass is degenerate and the policy allows it.
pub fn context_weights(g: &mut Graph, a: Var, policy: DegeneratePolicy) -> Result<Var> {
    let l = g.shape(a).1;
    let sum = g.value(a).sum();
    let weights = if sum > DEGENERATE_ATTENTION_EPS {
        g.normalize_sum(a)
    } else {
        match policy {
            DegeneratePolicy::Error => return Err(Error::DegenerateAttention { sum }),
            DegeneratePolicy::Uniform => {
                log::debug!("localized attention sums to {sum:e}; using uniform weights");
                g.constant(Tensor::full(&[1, l], 1.0 / l as f64))
            }
        }
    };
    Ok(weights)
}

/// `tanh(W [h; c] + b)` with the subject or object block.
pub fn fuse(g: &mut Graph, h: Var, c: Var, side: Side, params: &Bindings) -> Result<Var> {
    let w = params.var(&format!("{}.w", side.prefix()));
    let b = params.var(&format!("{}.b", side.prefix()));
    let (d, two_d) = g.shape(w);
    if g.shape(h) != (1, d) || g.shape(c) != (1, d) || two_d != 2 * d {
        return Err(Error::Input(format!(
            "fuse shapes: h {:?}, c {:?}, W {:?}",
            g.shape(h),
            g.shape(c),
            (d, two_d)
        )));
    }
    let x = g.concat_cols(&[h, c]);
    let y = g.matmul_nt(x, w);
    let y = g.add_row(y, b);
    Ok(g.tanh(y))
}

/// Per-entity quantities shared by every pair the entity takes part in.
#[derive(Debug, Clone, Copy)]
pub struct EntityFeatures {
    pub embedding: Var,
    pub attention: Var,
}

pub fn entity_features(g: &mut Graph, out: &EncoderOutput, spans: &[(usize, usize)], pooling: MentionPooling) -> Result<EntityFeatures> {
    Ok(EntityFeatures {
        embedding: entity_embedding(g, out, spans, pooling)?,
        attention: entity_attention(g, out, spans, pooling)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PairRepr {
    pub z_s: Var,
    pub z_o: Var,
    pub context: Var,
    /// `[z_s; z_o]`, the relation-instance vector.
    pub concat: Var,
}

/// Hybrid representation of the ordered pair `(subject, object)`.
pub fn instance_repr(
    g: &mut Graph,
    out: &EncoderOutput,
    subject: &EntityFeatures,
    object: &EntityFeatures,
    params: &Bindings,
    policy: DegeneratePolicy,
) -> Result<PairRepr> {
    let a = localized_attention(g, subject.attention, object.attention)?;
    let context = local_context(g, out, a, policy)?;
    let z_s = fuse(g, subject.embedding, context, Side::Subject, params)?;
    let z_o = fuse(g, object.embedding, context, Side::Object, params)?;
    let concat = g.concat_cols(&[z_s, z_o]);
    Ok(PairRepr { z_s, z_o, context, concat })
}

/// Subject and object fusion blocks.
pub fn init_hybrid(hidden: usize, rng: &mut impl Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let s = 1.0 / ((2 * hidden) as f64).sqrt();
    for side in [Side::Subject, Side::Object] {
        p.insert(format!("{}.w", side.prefix()), uniform(rng, &[hidden, 2 * hidden], s))?;
        p.insert(format!("{}.b", side.prefix()), Tensor::zeros(&[1, hidden]))?;
    }
    Ok(p)
}

/// Multi-vector prototype of one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype<T> {
    pub relation: String,
    pub vectors: Vec<T>,
}

/// Keeps `min(|instances|, omega)` instances; larger sets are subsampled
/// uniformly without replacement, preserving their order.
pub fn relation_prototype<T>(relation: &str, instances: Vec<T>, omega: usize, rng: &mut impl Rng) -> Result<Prototype<T>> {
    if instances.is_empty() {
        return Err(Error::Input(format!("relation `{relation}` has no support instances")));
    }
    if omega == 0 {
        return Err(Error::Config("omega must be positive".into()));
    }
    let vectors = if instances.len() <= omega {
        instances
    } else {
        let mut keep = index::sample(rng, instances.len(), omega).into_vec();
        keep.sort_unstable();
        let mut slots: Vec<Option<T>> = instances.into_iter().map(Some).collect();
        keep.into_iter()
            .map(|k| slots[k].take().expect("indices are distinct"))
            .collect()
    };
    Ok(Prototype {
        relation: relation.to_string(),
        vectors,
    })
}
