//! Calibrated scoring of entity pairs against multi-vector prototypes.
//!
//! For a pair vector `q`:
//!
//! ```text
//! l_r  = max_i q . p^r_i          l_N = max_i q . p^N_i
//! positives = { r : l_r > l_N },  negatives = the rest
//! P(r) = exp(l_r) / (exp(l_r) + exp(l_N))
//! P(N) = exp(l_N) / sum_{x in negatives + NOTA} exp(l_x)
//! L    = -[ sum_{r in gold} (1 - P(r))^alpha log P(r) + [gold empty] log P(N) ]
//! ```
//!
//! Prediction returns the positive set; an empty set means NOTA. Under gold
//! supervision the loss partitions by the labels instead of the logits:
//! every non-gold relation is a negative, so a gold-NOTA pair is pushed
//! below `l_N` on all relations, including ones currently above it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::{log_sigmoid, sigmoid, Graph, Var};
use crate::error::{Error, Result};

/// Which relations the positive terms of the loss run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Gold relations of the pair; the NOTA term only for gold-NOTA pairs.
    #[default]
    Gold,
    /// The model's own positive set, with the NOTA term on every pair.
    Literal,
}

impl FromStr for Supervision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(Self::Gold),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!("unknown supervision `{s}` (expected gold or literal)"))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gold => "gold",
            Self::Literal => "literal",
        })
    }
}

/// Max dot product of `q` (`1 x k`) with the rows of `proto` (`n x k`).
/// The gradient flows to the first maximizing row only.
pub fn relation_logit(g: &mut Graph, q: Var, proto: Var) -> Result<Var> {
    let (rows, k) = g.shape(proto);
    if rows == 0 {
        return Err(Error::Input("prototype has no vectors".into()));
    }
    if g.shape(q) != (1, k) {
        return Err(Error::Input(format!(
            "pair vector shape {:?} does not match prototype width {k}",
            g.shape(q)
        )));
    }
    let dots = g.matmul_nt(q, proto);
    Ok(g.max_all(dots))
}

/// Indices of relations strictly above the NOTA logit, and the rest.
pub fn partition(relation_logits: &[f64], nota_logit: f64) -> (Vec<usize>, Vec<usize>) {
    (0..relation_logits.len()).partition(|&r| relation_logits[r] > nota_logit)
}

pub fn prob_positive(l_r: f64, l_n: f64) -> f64 {
    sigmoid(l_r - l_n)
}

pub fn prob_nota(l_n: f64, negatives: &[f64]) -> f64 {
    let max = negatives.iter().copied().fold(l_n, f64::max);
    let z: f64 = negatives.iter().map(|l| (l - max).exp()).sum::<f64>() + (l_n - max).exp();
    (l_n - max).exp() / z
}

pub fn predict(relation_logits: &[f64], nota_logit: f64) -> Vec<usize> {
    partition(relation_logits, nota_logit).0
}

/// Logits of one pair against every episode relation plus NOTA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub relation_logits: Vec<f64>,
    pub nota_logit: f64,
}

impl PairScores {
    pub fn positives(&self) -> Vec<usize> {
        predict(&self.relation_logits, self.nota_logit)
    }

    pub fn negatives(&self) -> Vec<usize> {
        partition(&self.relation_logits, self.nota_logit).1
    }

    pub fn prob_positive(&self, r: usize) -> f64 {
        prob_positive(self.relation_logits[r], self.nota_logit)
    }

    pub fn prob_nota(&self) -> f64 {
        let neg: Vec<f64> = self.negatives().iter().map(|&r| self.relation_logits[r]).collect();
        prob_nota(self.nota_logit, &neg)
    }
}

/// Loss of one pair. `gold` holds indices into `relation_logits`.
pub fn pair_loss(
    g: &mut Graph,
    relation_logits: &[Var],
    nota_logit: Var,
    gold: &[usize],
    alpha: f64,
    supervision: Supervision,
) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be nonnegative, got {alpha}")));
    }
    if let Some(&bad) = gold.iter().find(|&&r| r >= relation_logits.len()) {
        return Err(Error::Input(format!("gold relation index {bad} out of range")));
    }
    let (terms, negatives, nota_term) = match supervision {
        Supervision::Gold => {
            let rest = (0..relation_logits.len()).filter(|r| !gold.contains(r)).collect();
            (gold.to_vec(), rest, gold.is_empty())
        }
        Supervision::Literal => {
            let values: Vec<f64> = relation_logits.iter().map(|&v| g.scalar(v)).collect();
            let (pos, neg) = partition(&values, g.scalar(nota_logit));
            (pos, neg, true)
        }
    };

    let mut parts = Vec::with_capacity(terms.len() + 1);
    for &r in &terms {
        let diff = g.sub(relation_logits[r], nota_logit);
        let log_p = g.log_sigmoid(diff);
        let term = if alpha == 0.0 {
            log_p
        } else {
            // (1 - P(r))^alpha = exp(alpha * ln sigmoid(l_N - l_r))
            let rev = g.neg(diff);
            let log_q = g.log_sigmoid(rev);
            let scaled = g.scale(log_q, alpha);
            let w = g.exp(scaled);
            g.mul(w, log_p)
        };
        parts.push(term);
    }
    if nota_term {
        let mut family = vec![nota_logit];
        family.extend(negatives.iter().map(|&r| relation_logits[r]));
        let row = g.concat_cols(&family);
        let lse = g.log_sum_exp(row);
        parts.push(g.sub(nota_logit, lse));
    }
    if parts.is_empty() {
        return Ok(g.constant(crate::diffcore::Tensor::scalar(0.0)));
    }
    let all = g.concat_cols(&parts);
    let total = g.sum_all(all);
    Ok(g.neg(total))
}

/// `ln P(r)` on plain numbers; kept beside `pair_loss` for oracles.
pub fn log_prob_positive(l_r: f64, l_n: f64) -> f64 {
    log_sigmoid(l_r - l_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.input(Tensor::scalar(v))
    }

    #[test]
    fn relation_logit_examples() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![1.0, 2.0]));
        let l = relation_logit(&mut g, q, q).unwrap();
        assert_eq!(g.scalar(l), 5.0);

        let v = [0.5, 0.25];
        let p = g.constant(Tensor::from_rows(&[v.to_vec(), vec![1.0, 0.5]]));
        let l = relation_logit(&mut g, q, p).unwrap();
        assert_eq!(g.scalar(l), 2.0 * (0.5 + 0.5));

        let q = g.constant(Tensor::row(vec![1.0, 0.0]));
        let p = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]));
        let l = relation_logit(&mut g, q, p).unwrap();
        assert_eq!(g.scalar(l), 0.5);

        let empty = g.constant(Tensor::zeros(&[0, 2]));
        assert!(relation_logit(&mut g, q, empty).is_err());
    }

    #[test]
    fn relation_logit_routes_gradient_to_first_argmax() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::row(vec![1.0, 1.0]));
        let p = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.0]]));
        let l = relation_logit(&mut g, q, p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn partition_examples() {
        assert_eq!(partition(&[1.0], 1.0), (vec![], vec![0]));
        assert_eq!(partition(&[1.1], 1.0), (vec![0], vec![]));
        assert_eq!(partition(&[2.0, 0.0, -1.0], 1.0), (vec![0], vec![1, 2]));
    }

    #[test]
    fn probability_examples() {
        assert_eq!(prob_positive(0.3, 0.3), 0.5);
        assert_abs_diff_eq!(prob_positive(1.0, 0.0), 0.731_06, epsilon = 1e-5);
        let p = prob_positive(30.0, 0.0);
        assert!(p < 1.0 && p > 1.0 - 1e-12);
        assert!(prob_positive(800.0, 0.0).is_finite());
        assert_eq!(prob_nota(0.7, &[]), 1.0);
        assert_eq!(prob_nota(0.7, &[0.7]), 0.5);
        assert_abs_diff_eq!(prob_nota(0.0, &[0.0, 0.0]), 1.0 / 3.0, epsilon = 1e-15);
        assert!(prob_nota(1000.0, &[999.0]).is_finite());
    }

    #[test]
    fn predict_examples() {
        assert!(predict(&[0.1, 0.2], 0.5).is_empty());
        assert_eq!(predict(&[0.9, 0.2], 0.5), vec![0]);
        assert_eq!(predict(&[2.0, 1.5], 1.0), vec![0, 1]);
    }

    fn loss_value(logits: &[f64], l_n: f64, gold: &[usize], alpha: f64, sup: Supervision) -> f64 {
        let mut g = Graph::new();
        let rs: Vec<Var> = logits.iter().map(|&v| scalar(&mut g, v)).collect();
        let n = scalar(&mut g, l_n);
        let l = pair_loss(&mut g, &rs, n, gold, alpha, sup).unwrap();
        g.scalar(l)
    }

    #[test]
    fn pair_loss_examples() {
        // NOTA pair with one negative at the same logit: P(N) = 0.5
        let v = loss_value(&[0.4], 0.4, &[], 1.0, Supervision::Gold);
        assert_abs_diff_eq!(v, 0.693_15, epsilon = 1e-5);
        // a false positive still counts against a gold-NOTA pair
        let v = loss_value(&[3.0, -1.0], 0.0, &[], 1.0, Supervision::Gold);
        assert_abs_diff_eq!(v, -prob_nota(0.0, &[3.0, -1.0]).ln(), epsilon = 1e-12);
        // alpha = 0 is plain cross-entropy on each gold relation
        let v = loss_value(&[1.0, -0.5], 0.2, &[0, 1], 0.0, Supervision::Gold);
        let expect = -(log_prob_positive(1.0, 0.2) + log_prob_positive(-0.5, 0.2));
        assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
        // focal weight on top
        let v = loss_value(&[1.0], 0.2, &[0], 2.0, Supervision::Gold);
        let p = prob_positive(1.0, 0.2);
        assert_abs_diff_eq!(v, -(1.0 - p).powi(2) * p.ln(), epsilon = 1e-12);
        // confident gold relations drive the loss to zero
        assert!(loss_value(&[60.0, 50.0], 0.0, &[0, 1], 1.0, Supervision::Gold) < 1e-20);
        // literal reading adds the NOTA term and uses the model's positives
        let v = loss_value(&[1.0, -1.0], 0.0, &[1], 0.0, Supervision::Literal);
        let expect = -(log_prob_positive(1.0, 0.0) + prob_nota(0.0, &[-1.0]).ln());
        assert_abs_diff_eq!(v, expect, epsilon = 1e-12);
    }

    #[test]
    fn pair_loss_rejects_bad_input() {
        let mut g = Graph::new();
        let r = scalar(&mut g, 0.0);
        let n = scalar(&mut g, 0.0);
        assert!(matches!(
            pair_loss(&mut g, &[r], n, &[], -0.5, Supervision::Gold),
            Err(Error::Config(_))
        ));
        assert!(pair_loss(&mut g, &[r], n, &[3], 1.0, Supervision::Gold).is_err());
    }

    fn grads(logits: &[f64], l_n: f64, gold: &[usize], alpha: f64) -> Vec<f64> {
        let mut g = Graph::new();
        let rs: Vec<Var> = logits.iter().map(|&v| scalar(&mut g, v)).collect();
        let n = scalar(&mut g, l_n);
        let l = pair_loss(&mut g, &rs, n, gold, alpha, Supervision::Gold).unwrap();
        let gr = g.backward(l).unwrap();
        rs.iter().map(|&v| gr.get(v).map_or(0.0, |t| t.item())).collect()
    }

    #[test]
    fn pair_loss_gradient_matches_fd() {
        let logits = [0.3, -1.2, 0.9];
        for (gold, l_n) in [(vec![0usize, 2], 0.1), (vec![], 0.5), (vec![1], 2.0)] {
            let an = grads(&logits, l_n, &gold, 1.3);
            for r in 0..3 {
                let h = 1e-6;
                let mut up = logits;
                let mut dn = logits;
                up[r] += h;
                dn[r] -= h;
                let fd = (loss_value(&up, l_n, &gold, 1.3, Supervision::Gold)
                    - loss_value(&dn, l_n, &gold, 1.3, Supervision::Gold))
                    / (2.0 * h);
                assert_abs_diff_eq!(an[r], fd, epsilon = 1e-7);
            }
        }
    }

    proptest! {
        #[test]
        fn pairwise_normalization(a in -50.0..50.0f64, b in -50.0..50.0f64) {
            prop_assert!((prob_positive(a, b) + prob_positive(b, a) - 1.0).abs() < 1e-9);
        }

        #[test]
        fn softmax_mass_sums_to_one(l_n in -20.0..20.0f64, neg in prop::collection::vec(-20.0..20.0f64, 0..6)) {
            let max = neg.iter().copied().fold(l_n, f64::max);
            let z: f64 = neg.iter().map(|l| (l - max).exp()).sum::<f64>() + (l_n - max).exp();
            let masses: f64 = neg.iter().map(|l| (l - max).exp() / z).sum();
            prop_assert!((prob_nota(l_n, &neg) + masses - 1.0).abs() < 1e-9);
        }

        #[test]
        fn shift_invariance(l_r in -20.0..20.0f64, l_n in -20.0..20.0f64,
                            neg in prop::collection::vec(-20.0..20.0f64, 0..6), c in -100.0..100.0f64) {
            prop_assert!((prob_positive(l_r + c, l_n + c) - prob_positive(l_r, l_n)).abs() < 1e-9);
            let shifted: Vec<f64> = neg.iter().map(|l| l + c).collect();
            prop_assert!((prob_nota(l_n + c, &shifted) - prob_nota(l_n, &neg)).abs() < 1e-9);
        }

        #[test]
        fn nota_loss_decreases_in_nota_logit(logits in prop::collection::vec(-5.0..5.0f64, 1..5),
                                             l_n in -5.0..5.0f64, step in 0.01..1.0f64) {
            let a = loss_value(&logits, l_n, &[], 1.0, Supervision::Gold);
            let b = loss_value(&logits, l_n + step, &[], 1.0, Supervision::Gold);
            prop_assert!(b < a, "{a} -> {b}");
        }

        #[test]
        fn prediction_is_scale_covariant(q in prop::collection::vec(-3.0..3.0f64, 4),
                                         protos in prop::collection::vec(-3.0..3.0f64, 20),
                                         c in 0.01..100.0f64) {
            // five single-vector prototypes, the last one playing NOTA
            let dot = |scale: f64, k: usize| (0..4).map(|i| scale * q[i] * protos[4 * k + i]).sum::<f64>();
            let base: Vec<f64> = (0..4).map(|k| dot(1.0, k)).collect();
            let scaled: Vec<f64> = (0..4).map(|k| dot(c, k)).collect();
            let gap = base.iter().map(|l| (l - dot(1.0, 4)).abs()).fold(f64::INFINITY, f64::min);
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(predict(&base, dot(1.0, 4)), predict(&scaled, dot(c, 4)));
        }

        #[test]
        fn focal_weight_favors_low_confidence(d1 in -2.5..6.0f64, d2 in -2.5..6.0f64, alpha in 0.1..3.0f64) {
            // below P ~ 0.06 the exact gradient of the weighted term is no
            // longer monotone in P
            prop_assume!((d1 - d2).abs() > 1e-3);
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            let g = grads(&[lo, hi], 0.0, &[0, 1], alpha);
            prop_assert!(g[0].abs() > g[1].abs());
        }
    }
}
