//! Per-pair predictions and Macro/Micro-F1 over relation types.
//!
//! Facts are matched exactly as `(episode, doc, head, relation, tail)`.
//! NOTA is never a scored class, so correctly rejected pairs add nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::ParamSet;
use crate::error::{Error, Result};
use crate::model::{episode_scores, EpisodePlan, ModelConfig, PreparedDoc};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FactKey {
    pub episode: usize,
    /// Corpus index of the query document.
    pub doc: usize,
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

/// Predicted facts of one episode's query documents.
pub fn score_episode(
    config: &ModelConfig,
    params: &ParamSet,
    docs: &[PreparedDoc],
    plan: &EpisodePlan,
    episode: usize,
) -> Result<Vec<FactKey>> {
    let scores = episode_scores(config, params, docs, plan)?;
    let mut out = Vec::new();
    for (qp, s) in plan.query.iter().zip(&scores) {
        for r in s.positives() {
            out.push(key(plan, episode, qp.pair.doc, qp.pair.head, r, qp.pair.tail));
        }
    }
    Ok(out)
}

/// Gold facts of one episode's query documents.
pub fn gold_facts(plan: &EpisodePlan, episode: usize) -> Vec<FactKey> {
    plan.query
        .iter()
        .flat_map(|qp| {
            qp.gold
                .iter()
                .map(move |&r| key(plan, episode, qp.pair.doc, qp.pair.head, r, qp.pair.tail))
        })
        .collect()
}

fn key(plan: &EpisodePlan, episode: usize, doc: usize, head: usize, r: usize, tail: usize) -> FactKey {
    FactKey {
        episode,
        doc: plan.docs[doc],
        head,
        relation: plan.relations[r].clone(),
        tail,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Counts pooled across episodes per relation.
    #[default]
    Pooled,
    /// F1 computed per episode, then averaged.
    PerEpisode,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Self::Pooled),
            "per_episode" => Ok(Self::PerEpisode),
            _ => Err(Error::Config(format!("unknown aggregation `{s}` (pooled or per_episode)"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pooled => "pooled",
            Self::PerEpisode => "per_episode",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Macro,
    Micro,
    Both,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Self::Macro),
            "micro" => Ok(Self::Micro),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown metric `{s}` (macro, micro or both)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub relation: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RelationRow {
    fn new(relation: String, tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall, f1) = prf(tp, fp, fn_);
        Self {
            relation,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn is_active(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Precision, recall and F1, with zero for any zero denominator.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = ratio(2 * tp, 2 * tp + fp + fn_);
    (p, r, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_relation: Vec<RelationRow>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub episodes: usize,
    pub aggregation: Aggregation,
}

impl F1Report {
    /// The requested metrics as a JSON object.
    pub fn to_json(&self, metric: Metric) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        let obj = v.as_object_mut().expect("report is an object");
        match metric {
            Metric::Macro => {
                obj.remove("micro_f1");
            }
            Metric::Micro => {
                obj.remove("macro_f1");
            }
            Metric::Both => {}
        }
        v
    }
}

/// Per-relation counts over `golds` and `preds`, rows for every relation of
/// `universe` plus any other relation that occurs.
fn rows(golds: &BTreeSet<&FactKey>, preds: &BTreeSet<&FactKey>, universe: &[String]) -> Vec<RelationRow> {
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = universe.iter().map(|r| (r.as_str(), (0, 0, 0))).collect();
    for p in preds {
        let c = counts.entry(p.relation.as_str()).or_default();
        if golds.contains(p) {
            c.0 += 1;
        } else {
            c.1 += 1;
        }
    }
    for g in golds {
        if !preds.contains(g) {
            counts.entry(g.relation.as_str()).or_default().2 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(r, (tp, fp, fn_))| RelationRow::new(r.to_string(), tp, fp, fn_))
        .collect()
}

fn summarize(rows: &[RelationRow]) -> (f64, f64) {
    let active: Vec<&RelationRow> = rows.iter().filter(|r| r.is_active()).collect();
    let macro_f1 = if active.is_empty() {
        0.0
    } else {
        active.iter().map(|r| r.f1).sum::<f64>() / active.len() as f64
    };
    let (tp, fp, fn_) = rows
        .iter()
        .fold((0, 0, 0), |(a, b, c), r| (a + r.tp, b + r.fp, c + r.fn_));
    (macro_f1, prf(tp, fp, fn_).2)
}

/// Exact-match F1 report. Duplicated facts count once.
pub fn aggregate(golds: &[FactKey], preds: &[FactKey], universe: &[String], aggregation: Aggregation) -> F1Report {
    let gold_set: BTreeSet<&FactKey> = golds.iter().collect();
    let pred_set: BTreeSet<&FactKey> = preds.iter().collect();
    let per_relation = rows(&gold_set, &pred_set, universe);
    let episodes: BTreeSet<usize> = golds.iter().chain(preds).map(|f| f.episode).collect();
    let (macro_f1, micro_f1) = match aggregation {
        Aggregation::Pooled => summarize(&per_relation),
        Aggregation::PerEpisode => {
            let mut sums = (0.0, 0.0);
            for &e in &episodes {
                let g = gold_set.iter().copied().filter(|f| f.episode == e).collect();
                let p = pred_set.iter().copied().filter(|f| f.episode == e).collect();
                let (m, u) = summarize(&rows(&g, &p, universe));
                sums.0 += m;
                sums.1 += u;
            }
            let n = episodes.len().max(1) as f64;
            (sums.0 / n, sums.1 / n)
        }
    };
    F1Report {
        per_relation,
        macro_f1,
        micro_f1,
        episodes: episodes.len(),
        aggregation,
    }
}

/// Scores a batch of planned episodes on `jobs` threads. Results are
/// combined in episode order, so the report does not depend on `jobs`.
pub fn evaluate_plans(
    config: &ModelConfig,
    params: &ParamSet,
    docs: &[PreparedDoc],
    plans: &[EpisodePlan],
    aggregation: Aggregation,
    jobs: usize,
) -> Result<F1Report> {
    let jobs = jobs.max(1).min(plans.len().max(1));
    let chunk = plans.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<(Vec<FactKey>, Vec<FactKey>)>>> = std::thread::scope(|s| {
        let handles: Vec<_> = plans
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, plan)| {
                            let e = c * chunk + i;
                            Ok((gold_facts(plan, e), score_episode(config, params, docs, plan, e)?))
                        })
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("evaluation worker panicked".into()))))
            .collect()
    });
    let mut golds = Vec::new();
    let mut preds = Vec::new();
    let mut universe = BTreeSet::new();
    for plan in plans {
        universe.extend(plan.relations.iter().cloned());
    }
    for r in results {
        for (g, p) in r? {
            golds.extend(g);
            preds.extend(p);
        }
    }
    let universe: Vec<String> = universe.into_iter().collect();
    let mut report = aggregate(&golds, &preds, &universe, aggregation);
    report.episodes = plans.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn fact(e: usize, h: usize, r: &str, t: usize) -> FactKey {
        FactKey {
            episode: e,
            doc: 0,
            head: h,
            relation: r.into(),
            tail: t,
        }
    }

    fn rels() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![fact(0, 0, "A", 1), fact(0, 1, "B", 2)];
        let r = aggregate(&g, &g, &rels(), Aggregation::Pooled);
        assert_eq!((r.macro_f1, r.micro_f1), (1.0, 1.0));
    }

    #[test]
    fn single_relation_counts() {
        let g = vec![fact(0, 0, "A", 1)];
        let p = vec![fact(0, 0, "A", 1), fact(0, 2, "A", 1)];
        let r = aggregate(&g, &p, &["A".to_string()], Aggregation::Pooled);
        let row = &r.per_relation[0];
        assert_eq!((row.tp, row.fp, row.fn_), (1, 1, 0));
        assert_eq!((row.precision, row.recall), (0.5, 1.0));
        assert_abs_diff_eq!(row.f1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn macro_and_micro_differ() {
        // A: 3 gold, all found; B: 1 gold, missed with one wrong guess
        let g = vec![fact(0, 0, "A", 1), fact(0, 1, "A", 2), fact(0, 2, "A", 3), fact(0, 3, "B", 4)];
        let p = vec![fact(0, 0, "A", 1), fact(0, 1, "A", 2), fact(0, 2, "A", 3), fact(0, 4, "B", 3)];
        let r = aggregate(&g, &p, &rels(), Aggregation::Pooled);
        assert_eq!(r.macro_f1, 0.5);
        assert_abs_diff_eq!(r.micro_f1, 6.0 / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn inactive_relations_are_excluded() {
        let g = vec![fact(0, 0, "A", 1)];
        let r = aggregate(&g, &g, &rels(), Aggregation::Pooled);
        assert_eq!(r.per_relation.len(), 2);
        assert!(!r.per_relation[1].is_active());
        assert_eq!(r.macro_f1, 1.0);
        let empty = aggregate(&[], &[], &rels(), Aggregation::Pooled);
        assert_eq!((empty.macro_f1, empty.micro_f1), (0.0, 0.0));
    }

    #[test]
    fn per_episode_mode_averages() {
        let g = vec![fact(0, 0, "A", 1), fact(1, 0, "A", 1)];
        let p = vec![fact(0, 0, "A", 1)];
        let r = aggregate(&g, &p, &rels(), Aggregation::PerEpisode);
        assert_eq!(r.macro_f1, 0.5);
        let pooled = aggregate(&g, &p, &rels(), Aggregation::Pooled);
        assert_abs_diff_eq!(pooled.macro_f1, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn metric_selection() {
        let g = vec![fact(0, 0, "A", 1)];
        let r = aggregate(&g, &g, &rels(), Aggregation::Pooled);
        let v = r.to_json(Metric::Macro);
        assert!(v.get("macro_f1").is_some() && v.get("micro_f1").is_none());
        assert_eq!(r.to_json(Metric::Both)["micro_f1"], 1.0);
        assert!("weighted".parse::<Metric>().is_err());
    }

    pub(crate) fn random_case(rng: &mut impl Rng) -> (Vec<FactKey>, Vec<FactKey>, Vec<String>) {
        let universe: Vec<String> = (0..rng.gen_range(1..5)).map(|k| format!("R{k}")).collect();
        let draw = |n: usize, rng: &mut dyn rand::RngCore| -> Vec<FactKey> {
            (0..n)
                .map(|_| FactKey {
                    episode: rng.gen_range(0..3),
                    doc: rng.gen_range(0..2),
                    head: rng.gen_range(0..3),
                    relation: universe[rng.gen_range(0..universe.len())].clone(),
                    tail: rng.gen_range(0..3),
                })
                .collect()
        };
        let g = draw(rng.gen_range(0..12), rng);
        let p = draw(rng.gen_range(0..12), rng);
        (g, p, universe)
    }

    /// Nested-loop counting with no sets.
    pub(crate) fn brute_force(golds: &[FactKey], preds: &[FactKey], universe: &[String]) -> (f64, f64) {
        let dedup = |v: &[FactKey]| {
            let mut out: Vec<FactKey> = Vec::new();
            for f in v {
                if !out.iter().any(|o| o == f) {
                    out.push(f.clone());
                }
            }
            out
        };
        let (g, p) = (dedup(golds), dedup(preds));
        let (mut f1s, mut tp_all, mut fp_all, mut fn_all) = (Vec::new(), 0, 0, 0);
        for r in universe {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for x in p.iter().filter(|x| &x.relation == r) {
                if g.iter().any(|y| y == x) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            for y in g.iter().filter(|y| &y.relation == r) {
                if !p.iter().any(|x| x == y) {
                    fn_ += 1;
                }
            }
            if tp + fp + fn_ > 0 {
                f1s.push(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 });
            }
            tp_all += tp;
            fp_all += fp;
            fn_all += fn_;
        }
        let macro_f1 = if f1s.is_empty() { 0.0 } else { f1s.iter().sum::<f64>() / f1s.len() as f64 };
        let micro = if tp_all == 0 { 0.0 } else { 2.0 * tp_all as f64 / (2 * tp_all + fp_all + fn_all) as f64 };
        (macro_f1, micro)
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = crate::rng::stream(77, 0);
        for _ in 0..1000 {
            let (g, p, u) = random_case(&mut rng);
            let r = aggregate(&g, &p, &u, Aggregation::Pooled);
            assert_eq!((r.macro_f1, r.micro_f1), brute_force(&g, &p, &u));
        }
    }

    #[test]
    fn scaling_counts_keeps_f1() {
        // duplicate the facts of relation A into a fresh episode
        let g = vec![fact(0, 0, "A", 1), fact(0, 1, "A", 2), fact(0, 0, "B", 2)];
        let p = vec![fact(0, 0, "A", 1), fact(0, 2, "A", 0)];
        let base = aggregate(&g, &p, &rels(), Aggregation::Pooled);
        let twice = |v: &[FactKey]| {
            let mut out = v.to_vec();
            out.extend(v.iter().filter(|f| f.relation == "A").map(|f| FactKey {
                episode: 9,
                ..f.clone()
            }));
            out
        };
        let scaled = aggregate(&twice(&g), &twice(&p), &rels(), Aggregation::Pooled);
        assert_eq!(base.per_relation[0].f1, scaled.per_relation[0].f1);
        assert_eq!(base.macro_f1, scaled.macro_f1);
    }

    #[test]
    fn micro_is_invariant_to_episode_order() {
        let mut rng = crate::rng::stream(78, 0);
        for _ in 0..100 {
            let (g, p, u) = random_case(&mut rng);
            let relabel = |v: &[FactKey]| -> Vec<FactKey> {
                v.iter()
                    .map(|f| FactKey {
                        episode: 2 - f.episode,
                        ..f.clone()
                    })
                    .collect()
            };
            let a = aggregate(&g, &p, &u, Aggregation::Pooled);
            let b = aggregate(&relabel(&g), &relabel(&p), &u, Aggregation::Pooled);
            assert_eq!(a.micro_f1, b.micro_f1);
        }
    }

    #[test]
    fn scoring_follows_the_logits() {
        use crate::model::tests::{tiny_plan, tiny_world};
        use crate::model::{episode_scores, init_model};
        let (corpus, docs, config) = tiny_world(2);
        let mut params = init_model(&config, &mut crate::rng::stream(2, 1)).unwrap();
        let plan = tiny_plan(&corpus, &config, 3);
        let scores = episode_scores(&config, &params, &docs, &plan).unwrap();
        let preds = score_episode(&config, &params, &docs, &plan, 0).unwrap();
        let expected: usize = scores.iter().map(|s| s.positives().len()).sum();
        assert_eq!(preds.len(), expected);
        assert!(preds.iter().all(|f| plan.query_docs().contains(&f.doc)));
        assert!(!gold_facts(&plan, 0).is_empty());
        // with the fusion block zeroed every pair vector is 0, all logits
        // tie and nothing is strictly above NOTA
        for name in ["he.subject.w", "he.object.w", "he.subject.b", "he.object.b"] {
            params.get_mut(name).unwrap().scale_inplace(0.0);
        }
        assert!(score_episode(&config, &params, &docs, &plan, 0).unwrap().is_empty());
    }
}
