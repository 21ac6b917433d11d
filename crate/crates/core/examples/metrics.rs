//! Macro and Micro F1 over predicted and gold facts, pooled across episodes
//! or averaged per episode.
//!
//! cargo run --example metrics

use tpn::eval::{aggregate, Aggregation, FactKey, Metric};

fn fact(episode: usize, head: usize, relation: &str, tail: usize) -> FactKey {
    FactKey {
        episode,
        doc: 0,
        head,
        relation: relation.into(),
        tail,
    }
}

fn main() {
    let universe = vec!["born_in".to_string(), "works_for".to_string(), "rare".to_string()];
    let golds = vec![
        fact(0, 0, "born_in", 1),
        fact(0, 2, "works_for", 3),
        fact(1, 0, "works_for", 1),
        fact(1, 1, "works_for", 2),
        fact(1, 3, "rare", 0),
    ];
    let preds = vec![
        fact(0, 0, "born_in", 1),
        fact(0, 1, "born_in", 0),
        fact(1, 0, "works_for", 1),
        fact(1, 1, "works_for", 2),
        fact(1, 2, "works_for", 3),
    ];
    for aggregation in [Aggregation::Pooled, Aggregation::PerEpisode] {
        let report = aggregate(&golds, &preds, &universe, aggregation);
        println!("{aggregation}:");
        for row in &report.per_relation {
            println!("  {:10} tp {} fp {} fn {}  f1 {:.3}", row.relation, row.tp, row.fp, row.fn_, row.f1);
        }
        println!("  {}", report.to_json(Metric::Both));
    }
}
