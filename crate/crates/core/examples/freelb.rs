//! One FreeLB episode in detail, then short training runs with and without
//! adversarial perturbations.
//!
//! cargo run --release --example freelb -- episodes=600

use tpn::corpus::{generate_synthetic_corpus, GeneratorConfig, Vocab};
use tpn::model::{init_model, plan_episode, prepare_corpus};
use tpn::rng::{self, streams};
use tpn::trainer::{evaluate_source, train, EpisodeSource, TrainConfig, VatMode};
use tpn::vat::{freelb_episode, PerturbationInit};

fn main() -> tpn::Result<()> {
    let mut cfg = TrainConfig {
        episodes: 1000,
        dev_episodes: 0,
        init_mode: PerturbationInit::UniformBall,
        ..TrainConfig::desk()
    };
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').unwrap_or((&arg, ""));
        cfg.set(k, v)?;
    }
    let corpus = generate_synthetic_corpus(&GeneratorConfig::default(), cfg.seed)?;
    let vocab = Vocab::build([&corpus]);
    let docs = prepare_corpus(&corpus, &vocab, cfg.max_len)?;
    let model = cfg.model_config(vocab.len());
    let params = init_model(&model, &mut rng::stream(cfg.seed, streams::INIT))?;
    let mut sampler = rng::stream(cfg.seed, streams::TRAIN_EPISODES);
    let ep = tpn::episode::sample_episode(&corpus, &corpus.relation_inventory, cfg.setting, cfg.strategy, &mut sampler)?;
    let plan = plan_episode(&ep, &corpus, &model, &mut sampler)?;
    let vat = cfg.vat_config();
    let out = freelb_episode(&model, &params, &docs, &plan, &vat, &mut rng::stream(cfg.seed, streams::PERTURBATION))?;
    println!("rho {}, gamma {}, epsilon {}, init {}", vat.rho, vat.gamma, vat.epsilon, vat.init);
    for (t, (loss, norms)) in out.step_losses.iter().zip(&out.xi_norms).enumerate() {
        let norms: Vec<String> = norms.iter().map(|n| format!("{n:.3}")).collect();
        println!("  step {t}: loss {loss:.5}  |xi| per document [{}]", norms.join(", "));
    }

    let src = EpisodeSource {
        corpus: &corpus,
        relations: &corpus.relation_inventory,
        docs: &docs,
    };
    for vat in [VatMode::Off, VatMode::Freelb] {
        let run = TrainConfig { vat, ..cfg.clone() };
        let trained = train(&run, &vocab, &src, None, &mut |_| Ok(()))?;
        let report = evaluate_source(&trained.model, &trained.params, &src, run.setting, run.eval_strategy, 50, run.seed, run.aggregation)?;
        println!("vat {vat}: {} steps, Macro-F1 {:.4}", trained.state.step, report.macro_f1);
    }
    Ok(())
}
