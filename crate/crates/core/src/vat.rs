//! FreeLB adversarial training on word embeddings.
//!
//! Each document gets its own perturbation `xi` (`l x d`). For `rho` steps
//! the episode loss is evaluated at `x + xi_t`, parameter gradients are
//! accumulated, and `xi` takes a normalized ascent step projected back onto
//! the Frobenius ball of radius `epsilon`. The caller then takes one
//! optimizer step along the averaged gradients.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{GradMap, Graph, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::model::{episode_loss, EpisodePlan, ModelConfig, PreparedDoc};

/// Gradient norm below which the ascent direction is undefined.
pub const ZERO_GRADIENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationInit {
    #[default]
    Zeros,
    UniformBall,
}

impl FromStr for PerturbationInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "uniform_ball" => Ok(Self::UniformBall),
            _ => Err(Error::Config(format!("unknown init mode `{s}` (zeros or uniform_ball)"))),
        }
    }
}

impl fmt::Display for PerturbationInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zeros => "zeros",
            Self::UniformBall => "uniform_ball",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    pub rho: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub init: PerturbationInit,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            rho: 3,
            gamma: 0.15,
            epsilon: 0.45,
            init: PerturbationInit::Zeros,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho == 0 || !(self.gamma > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "FreeLB needs rho >= 1, gamma > 0 and epsilon > 0 (got {}, {}, {})",
                self.rho, self.gamma, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Rescales `xi` onto the ball of radius `epsilon` when it lies outside.
pub fn project(xi: &mut Tensor, epsilon: f64) {
    let n = xi.norm();
    if n > epsilon {
        xi.scale_inplace(epsilon / n);
    }
}

pub fn init_perturbation(rows: usize, cols: usize, epsilon: f64, mode: PerturbationInit, rng: &mut impl Rng) -> Tensor {
    match mode {
        PerturbationInit::Zeros => Tensor::zeros(&[rows, cols]),
        PerturbationInit::UniformBall => {
            let scale = epsilon / ((rows * cols) as f64).sqrt();
            let mut xi = crate::diffcore::uniform(rng, &[rows, cols], 1.0);
            xi.scale_inplace(scale);
            project(&mut xi, epsilon);
            xi
        }
    }
}

/// `Pi(xi + gamma * g / |g|_F)`.
pub fn perturbation_step(xi: &Tensor, g_adv: &Tensor, gamma: f64, epsilon: f64) -> Result<Tensor> {
    let norm = g_adv.norm();
    if !(norm > ZERO_GRADIENT_EPS) {
        return Err(Error::ZeroGradient { norm });
    }
    let mut next = xi.clone();
    next.add_scaled_inplace(g_adv, gamma / norm);
    project(&mut next, epsilon);
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct FreeLbOutcome {
    /// Mean loss over the ascent steps.
    pub loss: f64,
    /// Parameter gradients averaged over the ascent steps.
    pub grads: GradMap,
    pub step_losses: Vec<f64>,
    /// `|xi_t|_F` per step and document.
    pub xi_norms: Vec<Vec<f64>>,
}

pub fn freelb_episode(
    config: &ModelConfig,
    params: &ParamSet,
    docs: &[PreparedDoc],
    plan: &EpisodePlan,
    vat: &VatConfig,
    rng: &mut impl Rng,
) -> Result<FreeLbOutcome> {
    vat.validate()?;
    let d = config.encoder.hidden;
    let mut xis: Vec<Tensor> = plan
        .docs
        .iter()
        .map(|&k| init_perturbation(docs[k].tokens.len(), d, vat.epsilon, vat.init, rng))
        .collect();

    let mut sum: Option<GradMap> = None;
    let mut step_losses = Vec::with_capacity(vat.rho);
    let mut xi_norms = Vec::with_capacity(vat.rho);
    for t in 0..vat.rho {
        xi_norms.push(xis.iter().map(Tensor::norm).collect());
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let xi_vars: Vec<_> = xis.iter().map(|x| g.input(x.clone())).collect();
        let loss = episode_loss(&mut g, config, &b, docs, plan, &xi_vars)?;
        let mut grads = g.backward(loss)?;
        step_losses.push(g.scalar(loss));
        let step = b.collect(&g, &grads);
        match &mut sum {
            None => sum = Some(step),
            Some(acc) => {
                for (name, gr) in acc.iter_mut() {
                    gr.add_inplace(&step[name]);
                }
            }
        }
        if t + 1 < vat.rho {
            let adv: Vec<Option<Tensor>> = xi_vars.iter().map(|v| grads.take(*v)).collect();
            let usable = |g: &Option<Tensor>| g.as_ref().is_some_and(|g| g.norm() > ZERO_GRADIENT_EPS);
            if !adv.iter().any(usable) {
                let norm = adv.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
                return Err(Error::ZeroGradient { norm });
            }
            for (xi, g_adv) in xis.iter_mut().zip(&adv) {
                // a document whose perturbation does not reach the loss
                // (e.g. no prototype argmax in it) keeps its xi
                if usable(g_adv) {
                    *xi = perturbation_step(xi, g_adv.as_ref().expect("checked"), vat.gamma, vat.epsilon)?;
                } else {
                    log::debug!("step {t}: zero adversarial gradient for one document, xi kept");
                }
            }
        }
    }
    let mut grads = sum.expect("rho >= 1");
    let inv = 1.0 / vat.rho as f64;
    for gr in grads.values_mut() {
        gr.scale_inplace(inv);
    }
    Ok(FreeLbOutcome {
        loss: step_losses.iter().sum::<f64>() * inv,
        grads,
        step_losses,
        xi_norms,
    })
}
