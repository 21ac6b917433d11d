//! Gradient entry points, the central-difference oracle and global-norm
//! clipping.

use super::graph::{Graph, Var};
use super::params::{Bindings, GradMap, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Runs `loss_fn` on a fresh graph and returns `d loss / d tensor` for every
/// name in `wrt`, together with the loss value.
pub fn grad<F>(params: &ParamSet, wrt: &[&str], loss_fn: F) -> Result<(f64, GradMap)>
where
    F: FnOnce(&mut Graph, &Bindings) -> Result<Var>,
{
    let mut g = Graph::new();
    let binds = params.bind(&mut g);
    let loss = loss_fn(&mut g, &binds)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    let all = binds.collect(&g, &grads);
    let mut out = GradMap::new();
    for name in wrt {
        let t = all
            .get(*name)
            .ok_or_else(|| Error::Input(format!("unknown tensor `{name}`")))?;
        out.insert(name.to_string(), t.clone());
    }
    Ok((value, out))
}

/// Central differences `(f(x+h) - f(x-h)) / 2h` for each coordinate of the
/// named tensor.
pub fn fd_grad<F>(loss_fn: F, params: &ParamSet, name: &str, h: f64) -> Result<Tensor>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let base = params
        .get(name)
        .ok_or_else(|| Error::Input(format!("unknown tensor `{name}`")))?;
    let mut out = Tensor::zeros(base.shape());
    let mut probe = params.clone();
    for i in 0..base.len() {
        let x = base.data()[i];
        probe.get_mut(name).expect("present").data_mut()[i] = x + h;
        let plus = loss_fn(&probe)?;
        probe.get_mut(name).expect("present").data_mut()[i] = x - h;
        let minus = loss_fn(&probe)?;
        probe.get_mut(name).expect("present").data_mut()[i] = x;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, floor)`, maximized
/// over all entries.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|t| t.scale_inplace(s));
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t).unwrap();
        p
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let p = single("x", Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 4.0, 5.0, -6.0]));
        let (_, gm) = grad(&p, &["x"], |g, b| Ok(g.sum_all(b.var("x")))).unwrap();
        assert!(gm["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn grad_through_tanh_of_zero() {
        let mut p = single("w", Tensor::scalar(2.5));
        p.insert("x", Tensor::scalar(0.0)).unwrap();
        let (v, gm) = grad(&p, &["w"], |g, b| {
            let t = g.tanh(b.var("x"));
            Ok(g.mul(t, b.var("w")))
        })
        .unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(gm["w"].item(), 0.0);
    }

    #[test]
    fn fd_square_at_three() {
        let p = single("x", Tensor::scalar(3.0));
        let d = fd_grad(|p| Ok(p.get("x").unwrap().item().powi(2)), &p, "x", 1e-5).unwrap();
        assert_abs_diff_eq!(d.item(), 6.0, epsilon = 1e-6);
    }

    #[test]
    fn fd_constant_and_tanh() {
        let p = single("x", Tensor::row(vec![0.0, 1.0, 2.0]));
        let d = fd_grad(|_| Ok(4.0), &p, "x", 1e-5).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let p = single("x", Tensor::scalar(0.0));
        let d = fd_grad(|p| Ok(p.get("x").unwrap().item().tanh()), &p, "x", 1e-5).unwrap();
        assert_abs_diff_eq!(d.item(), 1.0, epsilon = 1e-8);
        assert!(fd_grad(|_| Ok(0.0), &p, "x", 0.0).is_err());
    }

    #[test]
    fn quadratic_matches_fd() {
        // loss = x^T M x + c.x for a fixed 8x8 M
        let xs: Vec<f64> = (0..8).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let m: Vec<f64> = (0..64).map(|i| ((i * 13 % 17) as f64 - 8.0) / 7.0).collect();
        let c: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 2.0).collect();
        let p = single("x", Tensor::row(xs));
        let mt = Tensor::new(vec![8, 8], m);
        let ct = Tensor::row(c);
        let f = |g: &mut Graph, b: &Bindings| {
            let mv = g.constant(mt.clone());
            let cv = g.constant(ct.clone());
            let x = b.var("x");
            let mx = g.matmul_nt(x, mv); // x M^T
            let quad = g.mul(mx, x);
            let lin = g.mul(cv, x);
            let s = g.add(quad, lin);
            Ok(g.sum_all(s))
        };
        let (_, gm) = grad(&p, &["x"], f).unwrap();
        let fd = fd_grad(
            |p| {
                let mut g = Graph::new();
                let b = p.bind(&mut g);
                let l = f(&mut g, &b)?;
                Ok(g.scalar(l))
            },
            &p,
            "x",
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&gm["x"], &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn clipping() {
        let mut gm = GradMap::new();
        gm.insert("a".into(), Tensor::row(vec![3.0, 4.0]));
        let n = clip_global_norm(&mut gm, 1.0).unwrap();
        assert_eq!(n, 5.0);
        assert_abs_diff_eq!(gm["a"].data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(gm["a"].data()[1], 0.8, epsilon = 1e-15);

        let mut small = GradMap::new();
        small.insert("a".into(), Tensor::row(vec![0.3, 0.4]));
        let before = small.clone();
        clip_global_norm(&mut small, 1.0).unwrap();
        assert_eq!(small, before);

        let mut zero = GradMap::new();
        zero.insert("a".into(), Tensor::zeros(&[2, 2]));
        clip_global_norm(&mut zero, 1.0).unwrap();
        assert!(zero["a"].data().iter().all(|&v| v == 0.0));
    }
}
