//! Learned none-of-the-above prototype.
//!
//! `beta` NOTA instances are drawn from the support pool and each is mapped
//! independently through two stacked MLPs (`2d -> h -> 2d`, tanh in the
//! middle). The resulting rows form the NOTA prototype. The block only sees
//! instance vectors, so it can wrap any embedding source.

use rand::seq::index;
use rand::Rng;

use crate::diffcore::{uniform, Bindings, Graph, ParamSet, Tensor, Var};
use crate::encoder::linear;
use crate::error::{Error, Result};

pub const GLOBAL_NOTA: &str = "nota.global";

/// Picks exactly `beta` items: a uniform sample without replacement, or
/// the whole pool padded by draws with replacement when it is too small.
pub fn select_nota_instances<T: Clone>(pool: &[T], beta: usize, rng: &mut impl Rng) -> Result<Vec<T>> {
    if pool.is_empty() {
        return Err(Error::Input("NOTA pool is empty".into()));
    }
    if beta == 0 {
        return Err(Error::Config("beta must be positive".into()));
    }
    if pool.len() >= beta {
        let mut keep = index::sample(rng, pool.len(), beta).into_vec();
        keep.sort_unstable();
        return Ok(keep.into_iter().map(|k| pool[k].clone()).collect());
    }
    log::debug!("NOTA pool of {} padded to {beta} with replacement", pool.len());
    let mut out = pool.to_vec();
    while out.len() < beta {
        out.push(pool[rng.gen_range(0..pool.len())].clone());
    }
    Ok(out)
}

/// Parameters of both MLPs under `tpl.`.
pub fn init_proto_learner(dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<ParamSet> {
    if dim == 0 || hidden == 0 {
        return Err(Error::Config("proto-learner dimensions must be positive".into()));
    }
    let mut p = ParamSet::new();
    for mlp in ["tpl.mlp1", "tpl.mlp2"] {
        p.insert(format!("{mlp}.l1.w"), uniform(rng, &[hidden, dim], 1.0 / (dim as f64).sqrt()))?;
        p.insert(format!("{mlp}.l1.b"), Tensor::zeros(&[1, hidden]))?;
        p.insert(format!("{mlp}.l2.w"), uniform(rng, &[dim, hidden], 1.0 / (hidden as f64).sqrt()))?;
        p.insert(format!("{mlp}.l2.b"), Tensor::zeros(&[1, dim]))?;
    }
    Ok(p)
}

/// The single learnable vector that replaces the proto-learner in the
/// fixed-NOTA ablation.
pub fn init_global_nota(dim: usize, rng: &mut impl Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    p.insert(GLOBAL_NOTA, uniform(rng, &[1, dim], 1.0 / (dim as f64).sqrt()))?;
    Ok(p)
}

/// Applies `f_theta` row-wise to `selected` (`beta x 2d`).
pub fn nota_prototype(g: &mut Graph, selected: Var, params: &Bindings) -> Result<Var> {
    let (rows, dim) = g.shape(selected);
    let expect = g.shape(params.var("tpl.mlp1.l1.w")).1;
    if rows == 0 || dim != expect {
        return Err(Error::Input(format!(
            "NOTA instances have shape ({rows}, {dim}), proto-learner expects width {expect}"
        )));
    }
    let mut x = selected;
    for mlp in ["tpl.mlp1", "tpl.mlp2"] {
        let h = linear(g, params, x, &format!("{mlp}.l1"));
        let h = g.tanh(h);
        x = linear(g, params, h, &format!("{mlp}.l2"));
    }
    Ok(x)
}
