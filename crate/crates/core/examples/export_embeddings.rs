//! Train briefly, then print the prototype vectors of one test episode:
//! their norms and how close each relation's vectors sit to NOTA.
//!
//! cargo run --release --example export_embeddings -- episodes=1000

use tpn::corpus::{generate_synthetic_corpus, GeneratorConfig, Vocab};
use tpn::diffcore::Tensor;
use tpn::model::{prepare_corpus, prototype_vectors};
use tpn::rng::{self, streams};
use tpn::trainer::{sample_plans, train, EpisodeSource, TrainConfig};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    t.data().chunks(t.shape()[1]).collect()
}

fn main() -> tpn::Result<()> {
    let mut cfg = TrainConfig {
        episodes: 1000,
        dev_episodes: 0,
        ..TrainConfig::desk()
    };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        cfg.set(k, v)?;
    }
    let corpus = generate_synthetic_corpus(&GeneratorConfig::default(), cfg.seed)?;
    let vocab = Vocab::build([&corpus]);
    let docs = prepare_corpus(&corpus, &vocab, cfg.max_len)?;
    let src = EpisodeSource {
        corpus: &corpus,
        relations: &corpus.relation_inventory,
        docs: &docs,
    };
    let out = train(&cfg, &vocab, &src, None, &mut |_| Ok(()))?;
    let plan = sample_plans(&src, &out.model, cfg.setting, cfg.eval_strategy, 1, &mut rng::stream(cfg.seed, streams::EVAL_EPISODES))?
        .remove(0);
    let protos = prototype_vectors(&out.model, &out.params, &docs, &plan)?;
    let nota = protos
        .iter()
        .find(|(name, _)| name == "NOTA")
        .map(|(_, t)| t.clone())
        .expect("NOTA prototype is always exported");
    for (name, t) in &protos {
        for (i, v) in rows(t).into_iter().enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let closest = rows(&nota).into_iter().map(|n| cosine(v, n)).fold(f64::NEG_INFINITY, f64::max);
            println!("{name:5} vector {i}: norm {norm:7.3}  max cosine to NOTA {closest:+.3}");
        }
    }
    Ok(())
}
