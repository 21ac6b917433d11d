//! Split the relations of one corpus into train, dev and test, train with
//! dev-based model selection, save a checkpoint, reload it and score the
//! unseen test relations.
//!
//! cargo run --release --example train_and_eval -- episodes=2000

use tpn::corpus::{generate_synthetic_corpus, GeneratorConfig};
use tpn::model::prepare_corpus;
use tpn::trainer::{evaluate_source, fit, load_checkpoint, save_checkpoint, Dataset, EpisodeSource, TrainConfig};

fn main() -> tpn::Result<()> {
    let mut cfg = TrainConfig {
        episodes: 2000,
        eval_interval: 250,
        episode_relations: 2,
        dev_episodes: 30,
        ..TrainConfig::desk()
    };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        cfg.set(k, v)?;
    }
    let gen = GeneratorConfig {
        relations: 24,
        documents: 1200,
        ..GeneratorConfig::default()
    };
    let data = Dataset::new(generate_synthetic_corpus(&gen, cfg.seed)?, None, None, &cfg)?;
    println!("train {:?}\ndev   {:?}\ntest  {:?}", data.split.train, data.split.dev, data.split.test);

    let fitted = fit(&cfg, &data, &mut |r| {
        if let Some(f1) = r.dev_macro_f1 {
            println!("step {:5}  loss {:.4}  dev Macro-F1 {f1:.4}", r.step, r.loss);
        }
        Ok(())
    })?;
    let path = std::env::temp_dir().join("tpn-example.ckpt");
    save_checkpoint(&path, &fitted.outcome.params, &fitted.meta)?;
    let (params, meta) = load_checkpoint(&path)?;
    println!("checkpoint {} after {} steps, best dev {:?}", path.display(), meta.steps, meta.best_dev_macro_f1);

    let docs = prepare_corpus(data.test_corpus(), &meta.vocab, cfg.max_len)?;
    let src = EpisodeSource {
        corpus: data.test_corpus(),
        relations: &meta.test_relations,
        docs: &docs,
    };
    let report = evaluate_source(&meta.model, &params, &src, cfg.setting, cfg.eval_strategy, cfg.test_episodes, cfg.seed, cfg.aggregation)?;
    println!("test Macro-F1 {:.4}  Micro-F1 {:.4}", report.macro_f1, report.micro_f1);
    Ok(())
}
