//! Acceptance suite. Runs every criterion, prints one line each and exits
//! nonzero when any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::Rng;

use tpn::bench::{HardVsSingle, Overfit, Transfer};
use tpn::calib::{pair_loss, prob_nota, prob_positive, Supervision};
use tpn::corpus::{generate_synthetic_corpus, GeneratorConfig};
use tpn::diffcore::{Graph, Tensor};
use tpn::encoder::{encode, init_encoder, EncoderConfig};
use tpn::episode::{sample_episode, SamplingStrategy, TaskSetting};
use tpn::eval::{aggregate, Aggregation, FactKey};
use tpn::gradcheck;
use tpn::hybrid::{context_weights, entity_attention, localized_attention, DegeneratePolicy, MentionPooling};
use tpn::model::{episode_gradients, init_model, plan_episode};
use tpn::rng::{self, streams};
use tpn::trainer::{EpisodeSource, TrainConfig, VatMode};
use tpn::vat::{freelb_episode, PerturbationInit, VatConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let fixture = gradcheck::tiny_fixture(1).map_err(|e| e.to_string())?;
    let report = gradcheck::run(&fixture, gradcheck::DEFAULT_STEP, 1e-4).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "{} tensors, worst relative error {:.2e}, {:.1}s",
        report.tensors.len(),
        report.worst(),
        elapsed.as_secs_f64()
    );
    let has_xi = report.tensors.iter().any(|t| t.name.starts_with("xi."));
    check(report.passed() && has_xi && elapsed < Duration::from_secs(120), detail)
}

fn normalization() -> Outcome {
    let start = Instant::now();
    let mut rng = rng::stream(2024, 0);
    let (mut attn_err, mut weight_err, mut pair_err, mut mass_err, mut shift_err) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for case in 0..1000 {
        let heads = [1, 2, 4][case % 3];
        let cfg = EncoderConfig {
            vocab_size: 20,
            hidden: 8,
            heads,
            layers: 1 + case % 2,
            max_len: 24,
            ff_dim: 8,
            ..EncoderConfig::default()
        };
        let params = init_encoder(&cfg, &mut rng).map_err(|e| e.to_string())?;
        let l = rng.gen_range(2..=24);
        let tokens: Vec<usize> = (0..l).map(|_| rng.gen_range(0..20)).collect();
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let out = encode(&mut g, &cfg, &b, &tokens, None).map_err(|e| e.to_string())?;
        for row in out.attention_tensor(&g).data().chunks(l) {
            attn_err = attn_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let span = |rng: &mut rng::Rng| {
            let s = rng.gen_range(0..l);
            (s, rng.gen_range(s + 1..=l))
        };
        let subject = vec![span(&mut rng)];
        let object = vec![span(&mut rng), span(&mut rng)];
        let a_s = entity_attention(&mut g, &out, &subject, MentionPooling::Token).map_err(|e| e.to_string())?;
        let a_o = entity_attention(&mut g, &out, &object, MentionPooling::Token).map_err(|e| e.to_string())?;
        let a = localized_attention(&mut g, a_s, a_o).map_err(|e| e.to_string())?;
        let w = context_weights(&mut g, a, DegeneratePolicy::Error).map_err(|e| e.to_string())?;
        weight_err = weight_err.max((g.value(w).sum() - 1.0).abs());

        let l_r = rng.gen_range(-30.0..30.0);
        let l_n = rng.gen_range(-30.0..30.0);
        pair_err = pair_err.max((prob_positive(l_r, l_n) + prob_positive(l_n, l_r) - 1.0).abs());
        let neg: Vec<f64> = (0..rng.gen_range(0..6)).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let top = neg.iter().copied().fold(l_n, f64::max);
        let z = (l_n - top).exp() + neg.iter().map(|x| (x - top).exp()).sum::<f64>();
        let others: f64 = neg.iter().map(|x| (x - top).exp() / z).sum();
        mass_err = mass_err.max((prob_nota(l_n, &neg) + others - 1.0).abs());
        let c = rng.gen_range(-100.0..100.0);
        let shifted: Vec<f64> = neg.iter().map(|x| x + c).collect();
        shift_err = shift_err
            .max((prob_positive(l_r + c, l_n + c) - prob_positive(l_r, l_n)).abs())
            .max((prob_nota(l_n + c, &shifted) - prob_nota(l_n, &neg)).abs());
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "1000 cases, attention rows {attn_err:.1e}, context weights {weight_err:.1e}, pairwise {pair_err:.1e}, softmax mass {mass_err:.1e}, shift {shift_err:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    );
    check(
        attn_err <= 1e-6
            && weight_err <= 1e-9
            && pair_err <= 1e-9
            && mass_err <= 1e-9
            && shift_err <= 1e-9
            && elapsed < Duration::from_secs(30),
        detail,
    )
}

fn freelb() -> Outcome {
    let f = gradcheck::tiny_fixture(3).map_err(|e| e.to_string())?;
    let params = init_model(&f.config, &mut rng::stream(3, streams::INIT)).map_err(|e| e.to_string())?;
    let mut sampler = rng::stream(3, streams::TRAIN_EPISODES);
    let mut perturb = rng::stream(3, streams::PERTURBATION);
    let relations = f.corpus.relation_inventory.clone();
    let (mut done, mut skipped, mut worst_norm, mut worst_diff) = (0, 0, 0f64, 0f64);
    let mut attempts = 0;
    while done < 500 {
        attempts += 1;
        if attempts > 2000 {
            return Err(format!("only {done} usable episodes in {attempts} draws"));
        }
        let setting = if attempts % 2 == 0 { TaskSetting::OneDoc } else { TaskSetting::ThreeDoc };
        let ep = sample_episode(&f.corpus, &relations, setting, SamplingStrategy::Hard, &mut sampler).map_err(|e| e.to_string())?;
        let plan = plan_episode(&ep, &f.corpus, &f.config, &mut sampler).map_err(|e| e.to_string())?;
        // alternate inits so that the projection is exercised from the rim
        let vat = VatConfig {
            rho: 3,
            gamma: 0.15,
            epsilon: 0.45,
            init: if done % 2 == 0 { PerturbationInit::Zeros } else { PerturbationInit::UniformBall },
        };
        match freelb_episode(&f.config, &params, &f.docs, &plan, &vat, &mut perturb) {
            Ok(out) => {
                worst_norm = out.xi_norms.iter().flatten().copied().fold(worst_norm, f64::max);
                done += 1;
            }
            Err(tpn::Error::ZeroGradient { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.to_string()),
        }
        if done <= 100 {
            let one = VatConfig {
                rho: 1,
                init: PerturbationInit::Zeros,
                ..vat
            };
            let adv = freelb_episode(&f.config, &params, &f.docs, &plan, &one, &mut perturb).map_err(|e| e.to_string())?;
            let (loss, plain) = episode_gradients(&f.config, &params, &f.docs, &plan).map_err(|e| e.to_string())?;
            worst_diff = worst_diff.max((adv.loss - loss).abs());
            for (name, g) in &plain {
                let other = adv.grads.get(name).ok_or_else(|| format!("FreeLB lacks gradient `{name}`"))?;
                worst_diff = worst_diff.max(g.max_abs_diff(other));
            }
        }
    }
    let detail = format!(
        "500 episodes ({skipped} zero-gradient draws skipped), max |xi|_F {worst_norm:.6}, rho=1 vs plain {worst_diff:.1e} over 100 episodes"
    );
    check(worst_norm <= 0.45 + 1e-9 && worst_diff <= 1e-12, detail)
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let bench = Overfit::default();
    let report = bench.run(&mut |_| Ok(())).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!(
        "{} episodes on {} documents, Macro-F1 {:.4} on {} episodes, {:.1}s",
        bench.config.episodes,
        bench.generator.documents,
        report.macro_f1,
        bench.eval_episodes,
        elapsed.as_secs_f64()
    );
    check(
        report.macro_f1 >= 0.90 && bench.config.episodes == 2000 && elapsed < Duration::from_secs(900),
        detail,
    )
}

fn transfer() -> Outcome {
    let bench = Transfer::default();
    let mut detail = String::new();
    let (mut learned, mut global) = (0.0, 0.0);
    for seed in 1..=5 {
        let s = bench.run(seed).map_err(|e| e.to_string())?;
        detail.push_str(&format!("seed {seed} {:.3}/{:.3}; ", s.learned, s.global));
        learned += s.learned / 5.0;
        global += s.global / 5.0;
    }
    let gap = learned - global;
    detail.push_str(&format!("mean learned {learned:.4}, global {global:.4}, gap {gap:+.4}"));
    check(gap > 0.0, detail)
}

fn calibrator() -> Outcome {
    let mut rng = rng::stream(606, 0);
    let share = |lo: f64, hi: f64, extra: &[f64], alpha: f64| -> Result<f64, String> {
        let mut g = Graph::new();
        let mut logits = vec![g.input(Tensor::scalar(lo)), g.input(Tensor::scalar(hi))];
        logits.extend(extra.iter().map(|&x| g.input(Tensor::scalar(x))));
        let nota = g.input(Tensor::scalar(0.0));
        let loss = pair_loss(&mut g, &logits, nota, &[0, 1], alpha, Supervision::Gold).map_err(|e| e.to_string())?;
        let grads = g.backward(loss).map_err(|e| e.to_string())?;
        let mag = |k: usize| grads.get(logits[k]).map_or(0.0, |t| t.data()[0].abs());
        Ok(mag(0) / (mag(0) + mag(1)))
    };
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        // P(r) in (0.06, 0.5) for the weak gold relation, (0.5, 0.998) for
        // the strong one; non-gold relations make the fixture imbalanced
        let lo = rng.gen_range(-2.7..-0.05);
        let hi = rng.gen_range(0.05..6.0);
        let extra: Vec<f64> = (0..rng.gen_range(0..4)).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let focal = share(lo, hi, &extra, 1.0)?;
        let plain = share(lo, hi, &extra, 0.0)?;
        worst = worst.min(focal - plain);
    }
    check(
        worst > 0.0,
        format!("100 fixtures, smallest gain in the weak relation's gradient share {worst:.4}"),
    )
}

fn brute_force(golds: &[FactKey], preds: &[FactKey], universe: &[String]) -> (f64, f64) {
    let unique = |v: &[FactKey]| {
        let mut out: Vec<FactKey> = Vec::new();
        for f in v {
            if !out.contains(f) {
                out.push(f.clone());
            }
        }
        out
    };
    let (g, p) = (unique(golds), unique(preds));
    let (mut f1s, mut tp_all, mut fp_all, mut fn_all) = (Vec::new(), 0, 0, 0);
    for r in universe {
        let tp = p.iter().filter(|x| &x.relation == r && g.contains(x)).count();
        let fp = p.iter().filter(|x| &x.relation == r && !g.contains(x)).count();
        let fn_ = g.iter().filter(|y| &y.relation == r && !p.contains(y)).count();
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

fn metrics() -> Outcome {
    let mut rng = rng::stream(707, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let universe: Vec<String> = (0..rng.gen_range(1..6)).map(|k| format!("P{k}")).collect();
        let n_g = rng.gen_range(0..15);
        let n_p = rng.gen_range(0..15);
        let mut draw = |n: usize| -> Vec<FactKey> {
            (0..n)
                .map(|_| FactKey {
                    episode: rng.gen_range(0..3),
                    doc: rng.gen_range(0..3),
                    head: rng.gen_range(0..4),
                    relation: universe[rng.gen_range(0..universe.len())].clone(),
                    tail: rng.gen_range(0..4),
                })
                .collect()
        };
        let golds = draw(n_g);
        let preds = draw(n_p);
        let report = aggregate(&golds, &preds, &universe, Aggregation::Pooled);
        if (report.macro_f1, report.micro_f1) != brute_force(&golds, &preds, &universe) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("1000 random sets, {mismatches} mismatches"))
}

fn determinism() -> Outcome {
    let corpus = generate_synthetic_corpus(&GeneratorConfig::default(), 8).map_err(|e| e.to_string())?;
    let vocab = tpn::corpus::Vocab::build([&corpus]);
    let cfg = TrainConfig {
        seed: 8,
        episodes: 60,
        dev_episodes: 0,
        vat: VatMode::Freelb,
        init_mode: PerturbationInit::UniformBall,
        setting: TaskSetting::ThreeDoc,
        strategy: SamplingStrategy::Hard,
        ..TrainConfig::desk()
    };
    let docs = tpn::model::prepare_corpus(&corpus, &vocab, cfg.max_len).map_err(|e| e.to_string())?;
    let src = EpisodeSource {
        corpus: &corpus,
        relations: &corpus.relation_inventory,
        docs: &docs,
    };
    let trace = || -> Result<Vec<f64>, String> {
        let mut losses = Vec::new();
        tpn::trainer::train(&cfg, &vocab, &src, None, &mut |r| {
            losses.push(r.loss);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        Ok(losses)
    };
    let (a, b) = (trace()?, trace()?);
    let divergence = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let episodes = || -> Result<Vec<tpn::episode::Episode>, String> {
        let mut r = rng::stream(8, streams::TRAIN_EPISODES);
        (0..200)
            .map(|i| {
                let strategy = if i % 2 == 0 { SamplingStrategy::Single } else { SamplingStrategy::Hard };
                sample_episode(&corpus, &corpus.relation_inventory, TaskSetting::OneDoc, strategy, &mut r).map_err(|e| e.to_string())
            })
            .collect()
    };
    let same_episodes = episodes()? == episodes()?;
    check(
        a.len() == b.len() && !a.is_empty() && divergence <= 1e-10 && same_episodes,
        format!(
            "{} FreeLB steps, loss divergence {divergence:.1e}, 200 sampled episodes identical: {same_episodes}",
            a.len()
        ),
    )
}

fn hard_vs_single() -> Outcome {
    let bench = HardVsSingle::default();
    let mut detail = String::new();
    let mut delta = 0.0;
    for seed in 1..=3 {
        let s = bench.run(seed).map_err(|e| e.to_string())?;
        detail.push_str(&format!("seed {seed} single {:.3} hard {:.3}; ", s.single, s.hard));
        delta += s.delta() / 3.0;
    }
    detail.push_str(&format!("mean delta {delta:+.4} (reported)"));
    check(delta.is_finite(), detail)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient check", gradients),
        ("normalization", normalization),
        ("FreeLB", freelb),
        ("overfit", overfit),
        ("NOTA transfer", transfer),
        ("calibrator", calibrator),
        ("metric oracle", metrics),
        ("determinism", determinism),
        ("hard vs single", hard_vs_single),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {name}: {status}: {detail}", k + 1);
    }
    println!("acceptance: {} of {} passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
