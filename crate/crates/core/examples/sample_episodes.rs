//! Draw episodes under each setting and sampling strategy and show which
//! documents and facts they contain.
//!
//! cargo run --example sample_episodes -- seed=3

use tpn::corpus::{generate_synthetic_corpus, GeneratorConfig};
use tpn::episode::{sample_episode, SamplingStrategy, TaskSetting};
use tpn::rng::{self, streams};

fn main() -> tpn::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|a| a.strip_prefix("seed=").and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    let gen = GeneratorConfig {
        entities_per_doc: 6,
        nota_fraction: 0.92,
        ..GeneratorConfig::default()
    };
    let corpus = generate_synthetic_corpus(&gen, seed)?;
    let mut rng = rng::stream(seed, streams::TRAIN_EPISODES);
    for setting in [TaskSetting::OneDoc, TaskSetting::ThreeDoc] {
        for strategy in [SamplingStrategy::Single, SamplingStrategy::Hard] {
            let ep = sample_episode(&corpus, &corpus.relation_inventory, setting, strategy, &mut rng)?;
            println!("{setting} / {strategy}: relations {:?}", ep.relations);
            for (role, docs) in [("support", &ep.support), ("query", &ep.query)] {
                for d in docs {
                    let facts: Vec<String> = d.facts.iter().map(|f| format!("({} {} {})", f.h, f.r, f.t)).collect();
                    println!("  {role:7} {}  {}", d.doc_id, facts.join(" "));
                }
            }
        }
    }
    Ok(())
}
