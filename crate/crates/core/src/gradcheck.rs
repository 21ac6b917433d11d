//! Finite-difference check of the full episode loss on a tiny model, with
//! respect to every parameter and the per-document embedding perturbations.

use std::fmt;

use serde::Serialize;

use crate::corpus::{generate_synthetic_corpus, Corpus, GeneratorConfig, Vocab};
use crate::diffcore::{fd_grad, grad, max_relative_error, ParamSet};
use crate::encoder::EncoderConfig;
use crate::episode::{sample_episode, SamplingStrategy, TaskSetting};
use crate::error::{Error, Result};
use crate::model::{episode_loss, init_model, plan_episode, prepare_corpus, EpisodePlan, ModelConfig, PreparedDoc};
use crate::rng::{self, streams};
use crate::vat::{init_perturbation, PerturbationInit};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_FLOOR: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
pub const TINY_MAX_LEN: usize = 32;

/// Everything needed to evaluate one episode loss.
pub struct Fixture {
    pub corpus: Corpus,
    pub docs: Vec<PreparedDoc>,
    pub config: ModelConfig,
    pub plan: EpisodePlan,
    /// Model parameters plus `xi.{k}` for each plan document.
    pub params: ParamSet,
}

/// d=8, two heads, two layers, three relations, beta = omega = 4, documents
/// of at most 32 tokens, a 3-Doc episode and nonzero perturbations.
pub fn tiny_fixture(seed: u64) -> Result<Fixture> {
    let gen = GeneratorConfig {
        documents: 10,
        relations: 3,
        entities_per_doc: 4,
        nota_fraction: 0.85,
        vocab_size: 8,
        context_pool: 4,
        max_filler: 1,
        extra_mention_prob: 0.2,
        ..GeneratorConfig::default()
    };
    let corpus = generate_synthetic_corpus(&gen, seed)?;
    let vocab = Vocab::build([&corpus]);
    let config = ModelConfig {
        encoder: EncoderConfig {
            vocab_size: vocab.len(),
            hidden: 8,
            heads: 2,
            layers: 2,
            max_len: TINY_MAX_LEN,
            ff_dim: 8,
            ..EncoderConfig::default()
        },
        omega: 4,
        beta: 4,
        strict_attention: true,
        ..ModelConfig::default()
    };
    let docs = prepare_corpus(&corpus, &vocab, TINY_MAX_LEN)?;
    let mut sampler = rng::stream(seed, streams::TRAIN_EPISODES);
    let ep = sample_episode(&corpus, &corpus.relation_inventory, TaskSetting::ThreeDoc, SamplingStrategy::Hard, &mut sampler)?;
    let plan = plan_episode(&ep, &corpus, &config, &mut sampler)?;

    let mut params = init_model(&config, &mut rng::stream(seed, streams::INIT))?;
    let mut perturb = rng::stream(seed, streams::PERTURBATION);
    for (k, &d) in plan.docs.iter().enumerate() {
        let xi = init_perturbation(docs[d].tokens.len(), config.encoder.hidden, 0.45, PerturbationInit::UniformBall, &mut perturb);
        params.insert(format!("xi.{k}"), xi)?;
    }
    Ok(Fixture {
        corpus,
        docs,
        config,
        plan,
        params,
    })
}

fn loss_of(f: &Fixture, params: &ParamSet) -> Result<f64> {
    let mut g = crate::diffcore::Graph::new();
    let b = params.bind(&mut g);
    let xis: Vec<_> = (0..f.plan.docs.len()).map(|k| b.var(&format!("xi.{k}"))).collect();
    let loss = episode_loss(&mut g, &f.config, &b, &f.docs, &f.plan, &xis)?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub values: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: f64,
    pub step: f64,
    pub threshold: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        !self.tensors.is_empty() && self.worst() < self.threshold
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        writeln!(f, "{:<width$}  {:>7}  {:>12}", "tensor", "values", "max rel err")?;
        for t in &self.tensors {
            let flag = if t.max_rel_error < self.threshold { "" } else { "  FAIL" };
            writeln!(f, "{:<width$}  {:>7}  {:>12.3e}{flag}", t.name, t.values, t.max_rel_error)?;
        }
        write!(
            f,
            "loss {:.6}, worst {:.3e}, threshold {:.0e}: {}",
            self.loss,
            self.worst(),
            self.threshold,
            if self.passed() { "ok" } else { "FAILED" }
        )
    }
}

/// Compares analytic gradients with central differences for every tensor in
/// `fixture.params`.
pub fn run(fixture: &Fixture, step: f64, threshold: f64) -> Result<GradcheckReport> {
    let names: Vec<String> = fixture.params.names().map(str::to_string).collect();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let (loss, analytic) = grad(&fixture.params, &wrt, |g, b| {
        let xis: Vec<_> = (0..fixture.plan.docs.len()).map(|k| b.var(&format!("xi.{k}"))).collect();
        episode_loss(g, &fixture.config, b, &fixture.docs, &fixture.plan, &xis)
    })?;
    let mut tensors = Vec::with_capacity(names.len());
    for name in &names {
        let numeric = fd_grad(|p| loss_of(fixture, p), &fixture.params, name, step)?;
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::Internal(format!("no analytic gradient for `{name}`")))?;
        tensors.push(TensorCheck {
            name: name.clone(),
            values: a.len(),
            max_rel_error: max_relative_error(a, &numeric, DEFAULT_FLOOR),
        });
    }
    Ok(GradcheckReport {
        loss,
        step,
        threshold,
        tensors,
    })
}
