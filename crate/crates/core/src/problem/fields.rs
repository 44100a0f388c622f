//! Drift, cost and diffusion building blocks.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// A time-dependent vector field `ℝᵈ × [0,T] → ℝᵈ` with a transposed Jacobian product.
pub trait VectorField: Send + Sync + fmt::Debug {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]);
    /// `out = J(x,t)ᵀ v`.
    fn vjp(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]);
    fn is_zero(&self) -> bool {
        false
    }
}

/// A time-dependent scalar field with its gradient.
pub trait ScalarField: Send + Sync + fmt::Debug {
    fn value(&self, x: &[f64], t: f64) -> f64;
    fn grad(&self, x: &[f64], t: f64, out: &mut [f64]);
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Zero;

impl VectorField for Zero {
    fn eval(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn vjp(&self, _x: &[f64], _t: f64, _v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn is_zero(&self) -> bool {
        true
    }
}

impl ScalarField for Zero {
    fn value(&self, _x: &[f64], _t: f64) -> f64 {
        0.0
    }
    fn grad(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn is_zero(&self) -> bool {
        true
    }
}

/// `b(x) = A x`.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    pub a: Vec<f64>,
}

impl VectorField for LinearDrift {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        linalg::matvec(&self.a, x, out);
    }
    fn vjp(&self, _x: &[f64], _t: f64, v: &[f64], out: &mut [f64]) {
        linalg::matvec_t(&self.a, v, out);
    }
}

/// `b = -∇Ψ` with `Ψ(x) = Σ κᵢ (xᵢ² - 1)²`.
#[derive(Debug, Clone)]
pub struct DoubleWellDrift {
    pub kappa: Vec<f64>,
}

impl VectorField for DoubleWellDrift {
    fn eval(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for ((o, &xi), &k) in out.iter_mut().zip(x).zip(&self.kappa) {
            *o = -4.0 * k * xi * (xi * xi - 1.0);
        }
    }
    fn vjp(&self, x: &[f64], _t: f64, v: &[f64], out: &mut [f64]) {
        for (((o, &xi), &k), &vi) in out.iter_mut().zip(x).zip(&self.kappa).zip(v) {
            *o = -4.0 * k * (3.0 * xi * xi - 1.0) * vi;
        }
    }
}

/// `c(x) = xᵀ P x + γᵀ x`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    pub p: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
}

impl ScalarField for QuadraticCost {
    fn value(&self, x: &[f64], _t: f64) -> f64 {
        let n = x.len();
        let mut v = 0.0;
        for i in 0..n {
            v += x[i] * linalg::dot(&self.p[i * n..(i + 1) * n], x);
        }
        if let Some(g) = &self.gamma {
            v += linalg::dot(g, x);
        }
        v
    }
    fn grad(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += (self.p[i * n + j] + self.p[j * n + i]) * x[j];
            }
            out[i] = s;
        }
        if let Some(g) = &self.gamma {
            linalg::axpy(1.0, g, out);
        }
    }
}

/// `c(x) = Σ νᵢ (xᵢ² - 1)²`.
#[derive(Debug, Clone)]
pub struct DoubleWellCost {
    pub nu: Vec<f64>,
}

impl ScalarField for DoubleWellCost {
    fn value(&self, x: &[f64], _t: f64) -> f64 {
        x.iter()
            .zip(&self.nu)
            .map(|(&xi, &n)| n * (xi * xi - 1.0).powi(2))
            .sum()
    }
    fn grad(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        for ((o, &xi), &n) in out.iter_mut().zip(x).zip(&self.nu) {
            *o = 4.0 * n * xi * (xi * xi - 1.0);
        }
    }
}

type EvalFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;
type VjpFn = dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync;
type ValueFn = dyn Fn(&[f64], f64) -> f64 + Send + Sync;

/// Vector field from closures; the caller supplies the transposed Jacobian product.
#[derive(Clone)]
pub struct FnVectorField {
    pub eval: Arc<EvalFn>,
    pub vjp: Arc<VjpFn>,
}

impl fmt::Debug for FnVectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnVectorField")
    }
}

impl VectorField for FnVectorField {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.eval)(x, t, out)
    }
    fn vjp(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        (self.vjp)(x, t, v, out)
    }
}

/// Scalar field from closures.
#[derive(Clone)]
pub struct FnScalarField {
    pub value: Arc<ValueFn>,
    pub grad: Arc<EvalFn>,
}

impl fmt::Debug for FnScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnScalarField")
    }
}

impl ScalarField for FnScalarField {
    fn value(&self, x: &[f64], t: f64) -> f64 {
        (self.value)(x, t)
    }
    fn grad(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (self.grad)(x, t, out)
    }
}

type MatFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

/// Diffusion coefficient `σ(t)`, constant or time-varying.
#[derive(Clone)]
pub enum Diffusion {
    Constant {
        sigma: Vec<f64>,
        /// `σ⁻ᵀ`, absent if σ is singular.
        inv_t: Option<Vec<f64>>,
        identity: bool,
    },
    TimeVarying(Arc<MatFn>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Constant { sigma, .. } => f.debug_struct("Constant").field("sigma", sigma).finish(),
            Diffusion::TimeVarying(_) => f.write_str("TimeVarying"),
        }
    }
}

impl Diffusion {
    pub fn identity(d: usize) -> Self {
        Self::constant(linalg::identity(d), d).expect("identity is invertible")
    }

    pub fn constant(sigma: Vec<f64>, d: usize) -> Result<Self> {
        if sigma.len() != d * d {
            return Err(Error::Shape { what: "sigma", expected: d * d, got: sigma.len() });
        }
        let m = linalg::to_dmatrix(&sigma, d);
        let inv_t = m.clone().try_inverse().map(|inv| linalg::from_dmatrix(&inv.transpose()));
        let identity = sigma == linalg::identity(d);
        Ok(Diffusion::Constant { sigma, inv_t, identity })
    }

    pub fn time_varying(f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Diffusion::TimeVarying(Arc::new(f))
    }

    /// Row-major σ(t).
    pub fn matrix(&self, t: f64) -> Vec<f64> {
        match self {
            Diffusion::Constant { sigma, .. } => sigma.clone(),
            Diffusion::TimeVarying(f) => linalg::from_dmatrix(&f(t)),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Diffusion::Constant { identity: true, .. })
    }

    /// Whether σ(t) is invertible at every `t` in `times`.
    pub fn invertible_on(&self, times: &[f64]) -> bool {
        match self {
            Diffusion::Constant { inv_t, .. } => inv_t.is_some(),
            Diffusion::TimeVarying(f) => times.iter().all(|&t| f(t).try_inverse().is_some()),
        }
    }

    /// `out = σ(t) v`.
    pub fn apply(&self, t: f64, v: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Constant { identity: true, .. } => out.copy_from_slice(v),
            Diffusion::Constant { sigma, .. } => linalg::matvec(sigma, v, out),
            Diffusion::TimeVarying(f) => linalg::matvec(&linalg::from_dmatrix(&f(t)), v, out),
        }
    }

    /// `out = σ(t)ᵀ v`.
    pub fn apply_t(&self, t: f64, v: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Constant { identity: true, .. } => out.copy_from_slice(v),
            Diffusion::Constant { sigma, .. } => linalg::matvec_t(sigma, v, out),
            Diffusion::TimeVarying(f) => linalg::matvec_t(&linalg::from_dmatrix(&f(t)), v, out),
        }
    }

    /// `out = σ(t)⁻ᵀ v`. Panics if σ is singular; losses check invertibility up front.
    pub fn inv_t_apply(&self, t: f64, v: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Constant { identity: true, .. } => out.copy_from_slice(v),
            Diffusion::Constant { inv_t, .. } => {
                linalg::matvec(inv_t.as_ref().expect("singular diffusion"), v, out)
            }
            Diffusion::TimeVarying(f) => {
                let inv = f(t).try_inverse().expect("singular diffusion").transpose();
                linalg::matvec(&linalg::from_dmatrix(&inv), v, out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check_vjp(field: &dyn VectorField, x: &[f64], v: &[f64]) {
        let d = x.len();
        let mut got = vec![0.0; d];
        field.vjp(x, 0.3, v, &mut got);
        let h = 1e-6;
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let mut bp = vec![0.0; d];
            let mut bm = vec![0.0; d];
            field.eval(&xp, 0.3, &mut bp);
            field.eval(&xm, 0.3, &mut bm);
            let fd: f64 = (0..d).map(|i| v[i] * (bp[i] - bm[i]) / (2.0 * h)).sum();
            assert!((fd - got[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", got[j]);
        }
    }

    fn fd_check_grad(field: &dyn ScalarField, x: &[f64]) {
        let d = x.len();
        let mut got = vec![0.0; d];
        field.grad(x, 0.0, &mut got);
        let h = 1e-6;
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (field.value(&xp, 0.0) - field.value(&xm, 0.0)) / (2.0 * h);
            assert!((fd - got[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn jacobian_products_match_finite_differences() {
        let x = [0.7, -1.3, 0.2];
        let v = [0.3, 0.9, -0.4];
        fd_check_vjp(&DoubleWellDrift { kappa: vec![5.0, 1.0, 2.0] }, &x, &v);
        fd_check_vjp(
            &LinearDrift { a: vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9] },
            &x,
            &v,
        );
        fd_check_grad(&DoubleWellCost { nu: vec![3.0, 1.0, 6.0] }, &x);
        fd_check_grad(
            &QuadraticCost {
                p: vec![1.0, 0.5, 0.0, 0.1, 2.0, 0.3, 0.0, 0.0, 1.0],
                gamma: Some(vec![0.1, -0.2, 0.3]),
            },
            &x,
        );
    }

    #[test]
    fn inverse_transpose_round_trips() {
        let s = Diffusion::constant(vec![1.0, 0.0, 0.3, 0.8], 2).unwrap();
        let v = [0.4, -1.1];
        let mut w = [0.0; 2];
        let mut back = [0.0; 2];
        s.inv_t_apply(0.0, &v, &mut w);
        s.apply_t(0.0, &w, &mut back);
        assert!((back[0] - v[0]).abs() < 1e-14 && (back[1] - v[1]).abs() < 1e-14);
    }

    #[test]
    fn singular_sigma_is_flagged() {
        let s = Diffusion::constant(vec![1.0, 2.0, 2.0, 4.0], 2).unwrap();
        assert!(!s.invertible_on(&[0.0]));
    }
}
