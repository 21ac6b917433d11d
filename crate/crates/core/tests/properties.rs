use std::collections::HashSet;

use proptest::prelude::*;

use tpn::corpus::{generate_synthetic_corpus, parse_corpus_with_inventory, CorpusFormat, GeneratorConfig};
use tpn::diffcore::{clip_global_norm, global_norm, GradMap, Graph, Tensor};
use tpn::episode::{enumerate_pairs, nota_pool, sample_episode, SamplingStrategy, TaskSetting};
use tpn::eval::{aggregate, Aggregation, FactKey};
use tpn::hybrid::relation_prototype;
use tpn::rng;
use tpn::vat::project;

/// Generator settings that always admit the requested fact density.
fn generator() -> impl Strategy<Value = (GeneratorConfig, u64)> {
    (10usize..40, 1usize..5, 2usize..7, 0.2..0.9f64, any::<bool>(), 0u64..1000).prop_map(
        |(documents, relations, n, fill, domain_shift, seed)| {
            let capacity = (n / 2) as f64 / (n * (n - 1)) as f64;
            let cfg = GeneratorConfig {
                documents,
                relations,
                entities_per_doc: n,
                nota_fraction: 1.0 - capacity * fill,
                domain_shift,
                ..GeneratorConfig::default()
            };
            (cfg, seed)
        },
    )
}

fn setting() -> impl Strategy<Value = TaskSetting> {
    prop_oneof![Just(TaskSetting::OneDoc), Just(TaskSetting::ThreeDoc)]
}

fn strategy() -> impl Strategy<Value = SamplingStrategy> {
    prop_oneof![Just(SamplingStrategy::Single), Just(SamplingStrategy::Hard)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_corpora_are_valid_and_round_trip((cfg, seed) in generator()) {
        let corpus = generate_synthetic_corpus(&cfg, seed).unwrap();
        prop_assert_eq!(&corpus, &generate_synthetic_corpus(&cfg, seed).unwrap());
        prop_assert_eq!(corpus.to_json(), generate_synthetic_corpus(&cfg, seed).unwrap().to_json());
        // relations without facts survive only through the inventory
        let parsed = parse_corpus_with_inventory(corpus.to_json().as_bytes(), CorpusFormat::DocRed, corpus.relation_inventory.clone()).unwrap();
        prop_assert_eq!(&parsed, &corpus);

        let total = cfg.documents * cfg.entities_per_doc * (cfg.entities_per_doc - 1);
        prop_assert!((corpus.nota_fraction() - cfg.nota_fraction).abs() <= 1.0 / total as f64);
        for doc in &corpus.documents {
            let flat = doc.flatten_tokens(512).unwrap();
            prop_assert_eq!(flat.len(), doc.sentences.iter().map(Vec::len).sum::<usize>());
            for f in &doc.facts {
                prop_assert!(f.head < doc.entities.len() && f.tail < doc.entities.len() && f.head != f.tail);
                prop_assert!(corpus.relation_inventory.contains(&f.relation));
            }
            let pairs = enumerate_pairs(0, doc, &corpus.relation_inventory);
            let n = doc.entities.len();
            prop_assert!(pairs.len() >= n * (n - 1));
            for p in &pairs {
                let has_fact = doc.facts.iter().any(|f| f.head == p.head && f.tail == p.tail);
                prop_assert_eq!(p.label.is_none(), !has_fact);
            }
        }
    }

    #[test]
    fn sampled_episodes_respect_their_constraints(seed in 0u64..500, setting in setting(), strategy in strategy(),
                                                  allowed in 1usize..5) {
        let corpus = generate_synthetic_corpus(
            &GeneratorConfig { entities_per_doc: 6, nota_fraction: 0.92, ..GeneratorConfig::default() },
            seed,
        ).unwrap();
        let relations = corpus.relation_inventory[..allowed].to_vec();
        let draw = |s| sample_episode(&corpus, &relations, setting, strategy, &mut rng::stream(s, 2)).unwrap();
        let ep = draw(seed);
        prop_assert_eq!(&ep, &draw(seed));
        ep.validate(&corpus).unwrap();
        prop_assert_eq!(ep.support.len(), setting.support_docs());
        prop_assert_eq!(ep.query.len(), setting.query_docs());

        let support_rels: HashSet<&String> = ep.support.iter().flat_map(|d| d.facts.iter().map(|f| &f.r)).collect();
        prop_assert!(support_rels.iter().all(|r| relations.contains(r)));
        let mut episode_rels: Vec<&String> = support_rels.into_iter().collect();
        episode_rels.sort();
        prop_assert_eq!(episode_rels, ep.relations.iter().collect::<Vec<_>>());
        if strategy == SamplingStrategy::Single {
            prop_assert_eq!(ep.relations.len(), 1);
        }
        let support_ids: HashSet<&str> = ep.support.iter().map(|d| d.doc_id.as_str()).collect();
        prop_assert!(ep.query.iter().all(|d| !support_ids.contains(d.doc_id.as_str())));

        // facts outside the episode's relations count as NOTA
        for p in nota_pool(&ep, &corpus, 64, &mut rng::stream(seed, 5)).unwrap() {
            let doc = ep.support.iter().find(|d| d.doc_index == p.doc_index).expect("pool draws from support documents");
            prop_assert!(!doc.facts.iter().any(|f| f.h == p.head && f.t == p.tail));
        }
    }

    #[test]
    fn softmax_rows_are_shift_invariant_distributions(rows in 1usize..5, cols in 1usize..8,
                                                      values in prop::collection::vec(-40.0..40.0f64, 40),
                                                      c in -100.0..100.0f64) {
        let data: Vec<f64> = values[..rows * cols].to_vec();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![rows, cols], data.clone()));
        let shifted = g.input(Tensor::new(vec![rows, cols], data.iter().map(|v| v + c).collect()));
        let a = g.softmax_rows(x);
        let b = g.softmax_rows(shifted);
        for row in g.value(a).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-9);
    }

    #[test]
    fn clipping_and_projection_bound_norms(values in prop::collection::vec(-1e3..1e3f64, 1..30),
                                           max_norm in 1e-3..10.0f64) {
        let mut grads = GradMap::new();
        let half = values.len() / 2;
        grads.insert("a".into(), Tensor::new(vec![half], values[..half].to_vec()));
        grads.insert("b".into(), Tensor::new(vec![values.len() - half], values[half..].to_vec()));
        let before = global_norm(&grads);
        let reported = clip_global_norm(&mut grads, max_norm).unwrap();
        prop_assert!((reported - before).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(global_norm(&grads) <= max_norm + 1e-9);

        let mut xi = Tensor::new(vec![values.len()], values.clone());
        project(&mut xi, max_norm);
        prop_assert!(xi.norm() <= max_norm + 1e-9);
    }

    #[test]
    fn prototypes_hold_at_most_omega_vectors(n in 1usize..20, omega in 1usize..8, seed in 0u64..100) {
        let items: Vec<usize> = (0..n).collect();
        let p = relation_prototype("r", items.clone(), omega, &mut rng::stream(seed, 0)).unwrap();
        prop_assert_eq!(p.vectors.len(), n.min(omega));
        if n <= omega {
            prop_assert_eq!(p.vectors, items);
        } else {
            prop_assert!(p.vectors.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn scores_lie_in_the_unit_interval_and_ignore_episode_order(
        facts in prop::collection::vec((0usize..4, 0usize..3, 0usize..3, 0usize..3, any::<bool>(), any::<bool>()), 0..30),
    ) {
        let universe: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let key = |e: usize, h, r: usize, t| FactKey { episode: e, doc: 0, head: h, relation: universe[r].clone(), tail: t };
        let golds: Vec<FactKey> = facts.iter().filter(|f| f.4).map(|f| key(f.0, f.1, f.2, f.3)).collect();
        let preds: Vec<FactKey> = facts.iter().filter(|f| f.5).map(|f| key(f.0, f.1, f.2, f.3)).collect();
        let report = aggregate(&golds, &preds, &universe, Aggregation::Pooled);
        for r in [report.macro_f1, report.micro_f1] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        for row in &report.per_relation {
            prop_assert!(row.relation != "NOTA");
            prop_assert!((0.0..=1.0).contains(&row.precision) && (0.0..=1.0).contains(&row.recall));
        }
        let flip = |v: &[FactKey]| -> Vec<FactKey> { v.iter().map(|f| FactKey { episode: 3 - f.episode, ..f.clone() }).collect() };
        let flipped = aggregate(&flip(&golds), &flip(&preds), &universe, Aggregation::Pooled);
        prop_assert_eq!(flipped.micro_f1, report.micro_f1);
    }
}
