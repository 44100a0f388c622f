//! Parameterised controls `u_θ(x,t)` and their derivative services.

mod mlp;

use std::fmt;
use std::sync::Arc;

pub use mlp::{Activation, Mlp};

use crate::error::{check_len, Error, Result};
use crate::linalg;
use crate::problem::GroundTruth;

/// A control `ℝᵈ × [0,T] → ℝᵈ` with parameter and input derivative products.
pub trait ControlFunction: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);

    /// Accumulates `(∂u/∂θ)ᵀ cot` into `param_grad` and overwrites `input_grad` with `(∂u/∂x)ᵀ cot`.
    fn backward(&self, x: &[f64], t: f64, cot: &[f64], param_grad: Option<&mut [f64]>, input_grad: Option<&mut [f64]>);

    /// Evaluates `u`, derives the cotangent from it, and runs the reverse pass once.
    fn eval_backward(
        &self,
        x: &[f64],
        t: f64,
        out: &mut [f64],
        cot_fn: &mut dyn FnMut(&[f64], &mut [f64]),
        param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        self.eval(x, t, out);
        let mut cot = vec![0.0; out.len()];
        cot_fn(out, &mut cot);
        self.backward(x, t, &cot, param_grad, input_grad);
    }

    fn clone_box(&self) -> Box<dyn ControlFunction>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn accumulate_param_grad(&self, x: &[f64], t: f64, cot: &[f64], grad: &mut [f64]) {
        self.backward(x, t, cot, Some(grad), None);
    }

    fn input_vjp(&self, x: &[f64], t: f64, cot: &[f64], out: &mut [f64]) {
        self.backward(x, t, cot, None, Some(out));
    }

    /// Read-only snapshot whose evaluations are bit-identical to `self` at this instant.
    fn freeze(&self) -> FrozenControl {
        FrozenControl { inner: Arc::from(self.clone_box()) }
    }
}

impl Clone for Box<dyn ControlFunction> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Shape-checked evaluation.
pub fn eval_checked(ctrl: &dyn ControlFunction, x: &[f64], t: f64) -> Result<Vec<f64>> {
    check_len("state", ctrl.dim(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) || !t.is_finite() {
        return Err(Error::NonFinite("control input".into()));
    }
    let mut out = vec![0.0; ctrl.dim()];
    ctrl.eval(x, t, &mut out);
    Ok(out)
}

/// Shape-checked parameter gradient accumulation.
pub fn accumulate_param_grad_checked(
    ctrl: &dyn ControlFunction,
    x: &[f64],
    t: f64,
    cot: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    check_len("state", ctrl.dim(), x.len())?;
    check_len("cotangent", ctrl.dim(), cot.len())?;
    check_len("gradient buffer", ctrl.num_params(), grad.len())?;
    ctrl.accumulate_param_grad(x, t, cot, grad);
    Ok(())
}

/// Frozen copy of a control: evaluation and input derivatives only.
#[derive(Debug, Clone)]
pub struct FrozenControl {
    inner: Arc<dyn ControlFunction>,
}

impl FrozenControl {
    pub fn dim(&self) -> usize {
        self.inner.dim()
    }
    pub fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.inner.eval(x, t, out)
    }
    pub fn input_vjp(&self, x: &[f64], t: f64, cot: &[f64], out: &mut [f64]) {
        self.inner.input_vjp(x, t, cot, out)
    }
    pub fn params(&self) -> &[f64] {
        self.inner.params()
    }
    /// Whether the snapshot still matches `ctrl`'s parameters.
    pub fn matches(&self, ctrl: &dyn ControlFunction) -> bool {
        self.inner.params() == ctrl.params()
    }
}

/// `u ≡ 0`.
#[derive(Debug, Clone)]
pub struct ZeroControl {
    pub dim: usize,
}

impl ControlFunction for ZeroControl {
    fn dim(&self) -> usize {
        self.dim
    }
    fn params(&self) -> &[f64] {
        &[]
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn backward(&self, _x: &[f64], _t: f64, _cot: &[f64], _pg: Option<&mut [f64]>, ig: Option<&mut [f64]>) {
        if let Some(ig) = ig {
            ig.iter_mut().for_each(|o| *o = 0.0);
        }
    }
    fn clone_box(&self) -> Box<dyn ControlFunction> {
        Box::new(self.clone())
    }
}

/// Neural control `u_θ(x,t) = MLP([x, t])`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpControl {
    pub net: Mlp,
    dim: usize,
}

thread_local! {
    static INPUT: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

fn with_input<R>(x: &[f64], t: f64, f: impl FnOnce(&[f64]) -> R) -> R {
    INPUT.with(|b| {
        let mut b = b.borrow_mut();
        b.clear();
        b.extend_from_slice(x);
        b.push(t);
        f(&b)
    })
}

impl MlpControl {
    /// Hidden widths `hidden`, default initialisation (zero output layer).
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let mut widths = vec![dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        MlpControl { net: Mlp::new(widths, activation, seed), dim }
    }

    /// Fully random initialisation, useful for gradient tests away from `u = 0`.
    pub fn new_random(dim: usize, hidden: &[usize], activation: Activation, seed: u64, out_scale: f64) -> Self {
        let mut widths = vec![dim + 1];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        MlpControl { net: Mlp::new_random(widths, activation, seed, out_scale), dim }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        let dim = net.output_dim();
        check_len("network input", dim + 1, net.input_dim())?;
        Ok(MlpControl { net, dim })
    }
}

impl ControlFunction for MlpControl {
    fn dim(&self) -> usize {
        self.dim
    }
    fn params(&self) -> &[f64] {
        &self.net.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.net.params
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        with_input(x, t, |inp| self.net.forward(inp, out))
    }
    fn backward(&self, x: &[f64], t: f64, cot: &[f64], pg: Option<&mut [f64]>, ig: Option<&mut [f64]>) {
        with_input(x, t, |inp| self.net.backward(inp, cot, pg, ig))
    }
    fn eval_backward(
        &self,
        x: &[f64],
        t: f64,
        out: &mut [f64],
        cot_fn: &mut dyn FnMut(&[f64], &mut [f64]),
        pg: Option<&mut [f64]>,
        ig: Option<&mut [f64]>,
    ) {
        with_input(x, t, |inp| self.net.forward_backward(inp, out, cot_fn, pg, ig))
    }
    fn clone_box(&self) -> Box<dyn ControlFunction> {
        Box::new(self.clone())
    }
}

/// Time-varying linear feedback `u = K(t)x + k(t)`, with `K`, `k` piecewise linear
/// between uniformly spaced nodes on `[0,T]`. A single node gives a constant gain.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearControl {
    dim: usize,
    horizon: f64,
    nodes: usize,
    /// Per node: `K` (row-major d²) then `k` (d).
    params: Vec<f64>,
}

impl LinearControl {
    pub fn constant(gain: Vec<f64>, dim: usize) -> Result<Self> {
        check_len("gain", dim * dim, gain.len())?;
        let mut params = gain;
        params.extend(std::iter::repeat_n(0.0, dim));
        Ok(LinearControl { dim, horizon: 1.0, nodes: 1, params })
    }

    pub fn zeros(dim: usize, horizon: f64, nodes: usize) -> Self {
        assert!(nodes >= 1);
        LinearControl { dim, horizon, nodes, params: vec![0.0; nodes * (dim * dim + dim)] }
    }

    /// `u*` of an LQ problem sampled at `nodes` uniform times.
    pub fn from_ground_truth(gt: &GroundTruth, horizon: f64, nodes: usize) -> Result<Self> {
        let GroundTruth::Riccati(q) = gt else {
            return Err(Error::Unsupported("linear feedback needs a Riccati ground truth".into()));
        };
        let d = q.dim;
        let mut c = Self::zeros(d, horizon, nodes);
        let stride = d * d + d;
        for j in 0..nodes {
            let t = if nodes == 1 { 0.0 } else { horizon * j as f64 / (nodes - 1) as f64 };
            let f = q.matrix_at(t);
            let h = q.linear_at(t);
            let block = &mut c.params[j * stride..(j + 1) * stride];
            // K = -2σᵀF, k = -σᵀh.
            for r in 0..d {
                for col in 0..d {
                    block[r * d + col] = -2.0 * (0..d).map(|m| q.sigma[m * d + r] * f[m * d + col]).sum::<f64>();
                }
                block[d * d + r] = -(0..d).map(|m| q.sigma[m * d + r] * h[m]).sum::<f64>();
            }
        }
        Ok(c)
    }

    #[inline]
    fn weights(&self, t: f64) -> (usize, f64) {
        if self.nodes == 1 {
            return (0, 0.0);
        }
        let s = (t / self.horizon).clamp(0.0, 1.0) * (self.nodes - 1) as f64;
        let j = (s.floor() as usize).min(self.nodes - 2);
        (j, s - j as f64)
    }

    /// Gain and offset at time `t`.
    pub fn gain_at(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        let stride = d * d + d;
        let (j, w) = self.weights(t);
        let mut out = self.params[j * stride..(j + 1) * stride].to_vec();
        if w > 0.0 {
            for (o, n) in out.iter_mut().zip(&self.params[(j + 1) * stride..(j + 2) * stride]) {
                *o = *o * (1.0 - w) + n * w;
            }
        }
        let k = out.split_off(d * d);
        (out, k)
    }
}

impl ControlFunction for LinearControl {
    fn dim(&self) -> usize {
        self.dim
    }
    fn params(&self) -> &[f64] {
        &self.params
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let d = self.dim;
        let stride = d * d + d;
        let (j, w) = self.weights(t);
        let a = &self.params[j * stride..(j + 1) * stride];
        linalg::matvec(&a[..d * d], x, out);
        linalg::axpy(1.0, &a[d * d..], out);
        if w > 0.0 {
            let b = &self.params[(j + 1) * stride..(j + 2) * stride];
            for r in 0..d {
                let ub = linalg::dot(&b[r * d..(r + 1) * d], x) + b[d * d + r];
                out[r] = out[r] * (1.0 - w) + ub * w;
            }
        }
    }
    fn backward(&self, x: &[f64], t: f64, cot: &[f64], pg: Option<&mut [f64]>, ig: Option<&mut [f64]>) {
        let d = self.dim;
        let stride = d * d + d;
        let (j, w) = self.weights(t);
        if let Some(g) = pg {
            for (node, wt) in [(j, 1.0 - w), (j + 1, w)] {
                if wt == 0.0 {
                    continue;
                }
                let blk = &mut g[node * stride..(node + 1) * stride];
                for r in 0..d {
                    let c = wt * cot[r];
                    linalg::axpy(c, x, &mut blk[r * d..(r + 1) * d]);
                    blk[d * d + r] += c;
                }
            }
        }
        if let Some(ig) = ig {
            let (k, _) = self.gain_at(t);
            linalg::matvec_t(&k, cot, ig);
        }
    }
    fn clone_box(&self) -> Box<dyn ControlFunction> {
        Box::new(self.clone())
    }
}

/// The optimal control of a ground-truth oracle, exposed as a parameter-free control.
#[derive(Debug, Clone)]
pub struct OptimalControl {
    pub gt: Arc<GroundTruth>,
}

impl ControlFunction for OptimalControl {
    fn dim(&self) -> usize {
        self.gt.dim()
    }
    fn params(&self) -> &[f64] {
        &[]
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self.gt.optimal_control(x, t, out)
    }
    fn backward(&self, x: &[f64], t: f64, cot: &[f64], _pg: Option<&mut [f64]>, ig: Option<&mut [f64]>) {
        if let Some(ig) = ig {
            self.gt.optimal_control_vjp(x, t, cot, ig);
        }
    }
    fn clone_box(&self) -> Box<dyn ControlFunction> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_setting, Setting, SettingConfig};

    #[test]
    fn linear_control_matches_worked_example() {
        let c = LinearControl::constant(vec![-0.5, 0.0, 0.0, -0.5], 2).unwrap();
        assert_eq!(eval_checked(&c, &[1.0, 0.0], 0.3).unwrap(), vec![-0.5, 0.0]);
        // Scalar u = θx: gradient buffer gains c·x.
        let s = LinearControl::constant(vec![0.7], 1).unwrap();
        let mut g = vec![0.0; s.num_params()];
        accumulate_param_grad_checked(&s, &[2.0], 0.0, &[3.0], &mut g).unwrap();
        assert_eq!(g, vec![6.0, 3.0]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let c = ZeroControl { dim: 2 };
        assert!(eval_checked(&c, &[1.0], 0.0).is_err());
        assert!(eval_checked(&c, &[f64::NAN, 0.0], 0.0).is_err());
        let mut g = vec![0.0; 3];
        assert!(accumulate_param_grad_checked(&c, &[0.0, 0.0], 0.0, &[1.0, 1.0], &mut g).is_err());
    }

    #[test]
    fn frozen_snapshot_is_bit_identical_and_detached() {
        let mut c = MlpControl::new_random(2, &[8, 8], Activation::Silu, 3, 1.0);
        let frozen = c.freeze();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        c.eval(&[0.2, -0.4], 0.5, &mut a);
        frozen.eval(&[0.2, -0.4], 0.5, &mut b);
        assert_eq!(a, b);
        c.params_mut()[0] += 1.0;
        assert!(!frozen.matches(&c));
        frozen.eval(&[0.2, -0.4], 0.5, &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn optimal_linear_feedback_agrees_with_oracle() {
        let (_, gt) = make_setting(&SettingConfig::named(Setting::Lq2d)).unwrap();
        let lin = LinearControl::from_ground_truth(&gt, 1.0, 11).unwrap();
        let oc = OptimalControl { gt: Arc::new(gt) };
        let x = [0.4, -0.9];
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        lin.eval(&x, 0.3, &mut a);
        oc.eval(&x, 0.3, &mut b);
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        let (mut va, mut vb) = ([0.0; 2], [0.0; 2]);
        lin.input_vjp(&x, 0.3, &[1.0, -2.0], &mut va);
        oc.input_vjp(&x, 0.3, &[1.0, -2.0], &mut vb);
        assert!((va[0] - vb[0]).abs() < 1e-12 && (va[1] - vb[1]).abs() < 1e-12);
    }
}
