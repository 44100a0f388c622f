//! Control-affine SOC problems, benchmark settings and ground-truth oracles.
//!
//! A problem is `dX = (b(X,t) + σ(t)u) dt + σ(t) dB` with running cost
//! `½|u|² + f(X,t)` and terminal cost `g(X_T)`. The temperature is fixed to 1.

mod fields;
mod fk;
mod riccati;
mod settings;
mod well;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

pub use fields::{
    Diffusion, DoubleWellCost, DoubleWellDrift, FnScalarField, FnVectorField, LinearDrift,
    QuadraticCost, ScalarField, VectorField, Zero,
};
pub use fk::{feynman_kac_extrapolated, feynman_kac_value, FkEstimate};
pub use riccati::{evaluate_linear_policy, solve_riccati, LqParams, QuadraticValue};
pub use settings::{lq_params, make_setting, GridSpec, MatrixSpec, Setting, SettingConfig, VectorSpec};
pub use well::{solve_well_1d, WellSolution, WellTable};

use crate::error::{Error, Result};

/// Law of the initial state.
#[derive(Debug, Clone)]
pub enum InitialLaw {
    Point(Vec<f64>),
    /// Gaussian with mean and lower Cholesky factor of the covariance (row-major).
    Gaussian { mean: Vec<f64>, chol: Vec<f64> },
}

impl InitialLaw {
    pub fn sample<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialLaw::Point(x) => out.copy_from_slice(x),
            InitialLaw::Gaussian { mean, chol } => {
                let d = mean.len();
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                for i in 0..d {
                    out[i] = mean[i] + crate::linalg::dot(&chol[i * d..i * d + i + 1], &z[..i + 1]);
                }
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            InitialLaw::Point(x) => x.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }
}

/// A stochastic optimal control problem.
#[derive(Debug, Clone)]
pub struct SocProblem {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub drift: Arc<dyn VectorField>,
    pub diffusion: Diffusion,
    pub state_cost: Arc<dyn ScalarField>,
    pub terminal_cost: Arc<dyn ScalarField>,
    pub initial: InitialLaw,
}

impl SocProblem {
    pub fn builder(dim: usize, horizon: f64) -> ProblemBuilder {
        ProblemBuilder {
            name: "custom".into(),
            dim,
            horizon,
            lambda: 1.0,
            drift: Arc::new(Zero),
            diffusion: Diffusion::identity(dim),
            state_cost: Arc::new(Zero),
            terminal_cost: Arc::new(Zero),
            initial: InitialLaw::Point(vec![0.0; dim]),
        }
    }

    /// Same problem with a different terminal cost.
    pub fn with_terminal_cost(&self, g: Arc<dyn ScalarField>) -> Self {
        SocProblem { terminal_cost: g, ..self.clone() }
    }

    /// Same problem started from a fixed point.
    pub fn with_initial_point(&self, x0: Vec<f64>) -> Self {
        SocProblem { initial: InitialLaw::Point(x0), ..self.clone() }
    }
}

pub struct ProblemBuilder {
    name: String,
    dim: usize,
    horizon: f64,
    lambda: f64,
    drift: Arc<dyn VectorField>,
    diffusion: Diffusion,
    state_cost: Arc<dyn ScalarField>,
    terminal_cost: Arc<dyn ScalarField>,
    initial: InitialLaw,
}

impl ProblemBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
    pub fn lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
    pub fn drift(mut self, b: Arc<dyn VectorField>) -> Self {
        self.drift = b;
        self
    }
    pub fn diffusion(mut self, s: Diffusion) -> Self {
        self.diffusion = s;
        self
    }
    pub fn state_cost(mut self, f: Arc<dyn ScalarField>) -> Self {
        self.state_cost = f;
        self
    }
    pub fn terminal_cost(mut self, g: Arc<dyn ScalarField>) -> Self {
        self.terminal_cost = g;
        self
    }
    pub fn initial(mut self, init: InitialLaw) -> Self {
        self.initial = init;
        self
    }

    pub fn build(self) -> Result<SocProblem> {
        if self.lambda != 1.0 {
            return Err(Error::Unsupported(format!(
                "temperature λ = {} (only λ = 1 is implemented)",
                self.lambda
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidProblem("dimension must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidProblem(format!("horizon {} must be positive", self.horizon)));
        }
        if self.initial.dim() != self.dim {
            return Err(Error::Shape { what: "initial state", expected: self.dim, got: self.initial.dim() });
        }
        if let Diffusion::Constant { sigma, .. } = &self.diffusion {
            if sigma.len() != self.dim * self.dim {
                return Err(Error::Shape { what: "sigma", expected: self.dim * self.dim, got: sigma.len() });
            }
        }
        Ok(SocProblem {
            name: self.name,
            dim: self.dim,
            horizon: self.horizon,
            drift: self.drift,
            diffusion: self.diffusion,
            state_cost: self.state_cost,
            terminal_cost: self.terminal_cost,
            initial: self.initial,
        })
    }
}

/// Ground-truth value function and optimal control.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Riccati(QuadraticValue),
    Grid(WellSolution),
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        match self {
            GroundTruth::Riccati(q) => q.dim,
            GroundTruth::Grid(w) => w.components.len(),
        }
    }

    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        match self {
            GroundTruth::Riccati(q) => q.value(x, t),
            GroundTruth::Grid(w) => w.value(x, t),
        }
    }

    pub fn grad_value(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            GroundTruth::Riccati(q) => q.grad(x, t, out),
            GroundTruth::Grid(w) => w.grad(x, t, out),
        }
    }

    /// `u*(x,t) = -σᵀ ∇V(x,t)`.
    pub fn optimal_control(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match self {
            GroundTruth::Riccati(q) => {
                let mut g = vec![0.0; q.dim];
                q.grad(x, t, &mut g);
                crate::linalg::matvec_t(&q.sigma, &g, out);
                out.iter_mut().for_each(|o| *o = -*o);
            }
            GroundTruth::Grid(w) => {
                w.grad(x, t, out);
                out.iter_mut().for_each(|o| *o = -*o);
            }
        }
    }

    /// `out = (∂ₓu*)ᵀ v`.
    pub fn optimal_control_vjp(&self, x: &[f64], t: f64, v: &[f64], out: &mut [f64]) {
        match self {
            GroundTruth::Riccati(q) => {
                // u* = -σᵀ(2F x + h) with F symmetric, so (∂ₓu*)ᵀ v = -2F σ v.
                let d = q.dim;
                let f = q.matrix_at(t);
                let mut sv = vec![0.0; d];
                crate::linalg::matvec(&q.sigma, v, &mut sv);
                crate::linalg::matvec(&f, &sv, out);
                out.iter_mut().for_each(|o| *o *= -2.0);
            }
            GroundTruth::Grid(w) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = -w.second_derivative(i, x[i], t) * v[i];
                }
            }
        }
    }

    /// HJB residual `∂ₜV + ½tr(σσᵀ∇²V) + bᵀ∇V - ½|σᵀ∇V|² + f` by central differences.
    pub fn hjb_residual(&self, problem: &SocProblem, x: &[f64], t: f64, h: f64, ht: f64) -> f64 {
        let d = x.len();
        let v0 = self.value(x, t);
        let dt = (self.value(x, t + ht) - self.value(x, t - ht)) / (2.0 * ht);
        let sigma = problem.diffusion.matrix(t);
        let mut ss = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                ss[i * d + j] = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
            }
        }
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut xp = x.to_vec();
        for i in 0..d {
            xp[i] = x[i] + h;
            let vp = self.value(&xp, t);
            xp[i] = x[i] - h;
            let vm = self.value(&xp, t);
            xp[i] = x[i];
            grad[i] = (vp - vm) / (2.0 * h);
            hess[i * d + i] = (vp - 2.0 * v0 + vm) / (h * h);
            for j in 0..i {
                let mut e = |si: f64, sj: f64| {
                    xp[i] = x[i] + si * h;
                    xp[j] = x[j] + sj * h;
                    let v = self.value(&xp, t);
                    xp[i] = x[i];
                    xp[j] = x[j];
                    v
                };
                let c = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h * h);
                hess[i * d + j] = c;
                hess[j * d + i] = c;
            }
        }
        let trace: f64 = (0..d * d).map(|k| ss[k] * hess[k]).sum::<f64>() * 0.5;
        let mut b = vec![0.0; d];
        problem.drift.eval(x, t, &mut b);
        let mut st = vec![0.0; d];
        crate::linalg::matvec_t(&sigma, &grad, &mut st);
        dt + trace + crate::linalg::dot(&b, &grad) - 0.5 * crate::linalg::norm_sq(&st)
            + problem.state_cost.value(x, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_rejects_non_unit_temperature() {
        let err = SocProblem::builder(2, 1.0).lambda(0.5).build().unwrap_err();
        assert!(matches!(err, Error::Unsupported(_)));
    }

    #[test]
    fn builder_checks_shapes() {
        let err = SocProblem::builder(2, 1.0)
            .initial(InitialLaw::Point(vec![0.0; 3]))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(SocProblem::builder(2, -1.0).build().is_err());
    }
}
