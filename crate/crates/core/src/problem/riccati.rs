//! Riccati and Lyapunov solvers for linear-quadratic problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// `b = A x`, `f = xᵀ P x`, `g = xᵀ Q x + γᵀ x`, constant σ₀.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LqParams {
    pub dim: usize,
    pub horizon: f64,
    pub a: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
    pub sigma: Vec<f64>,
}

impl LqParams {
    fn validate(&self) -> Result<()> {
        let n2 = self.dim * self.dim;
        for (what, m) in [("A", &self.a), ("P", &self.p), ("Q", &self.q), ("sigma", &self.sigma)] {
            if m.len() != n2 {
                return Err(Error::InvalidProblem(format!("{what} has {} entries, expected {n2}", m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(what.into()));
            }
        }
        if let Some(g) = &self.gamma {
            if g.len() != self.dim {
                return Err(Error::Shape { what: "gamma", expected: self.dim, got: g.len() });
            }
        }
        Ok(())
    }
}

/// Quadratic function of `x`, `V(x,t) = xᵀF(t)x + h(t)ᵀx + c(t)`, tabulated on a uniform
/// time grid and interpolated with cubic Hermite polynomials.
#[derive(Debug, Clone)]
pub struct QuadraticValue {
    pub dim: usize,
    pub horizon: f64,
    pub sigma: Vec<f64>,
    steps: usize,
    /// Per node: F (d²), h (d), c (1).
    states: Vec<Vec<f64>>,
    rates: Vec<Vec<f64>>,
}

impl QuadraticValue {
    fn interp(&self, t: f64) -> Vec<f64> {
        let t = t.clamp(0.0, self.horizon);
        let dt = self.horizon / self.steps as f64;
        let i = ((t / dt).floor() as usize).min(self.steps - 1);
        let tau = (t - i as f64 * dt) / dt;
        let (t2, t3) = (tau * tau, tau * tau * tau);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + tau;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let (y0, y1, r0, r1) = (&self.states[i], &self.states[i + 1], &self.rates[i], &self.rates[i + 1]);
        (0..y0.len())
            .map(|k| h00 * y0[k] + h10 * dt * r0[k] + h01 * y1[k] + h11 * dt * r1[k])
            .collect()
    }

    /// The quadratic coefficient `F(t)` (row-major, symmetric).
    pub fn matrix_at(&self, t: f64) -> Vec<f64> {
        let mut y = self.interp(t);
        y.truncate(self.dim * self.dim);
        y
    }

    pub fn linear_at(&self, t: f64) -> Vec<f64> {
        let n2 = self.dim * self.dim;
        self.interp(t)[n2..n2 + self.dim].to_vec()
    }

    pub fn offset_at(&self, t: f64) -> f64 {
        *self.interp(t).last().unwrap()
    }

    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        let y = self.interp(t);
        let d = self.dim;
        let mut v = y[d * d + d];
        for i in 0..d {
            v += x[i] * (linalg::dot(&y[i * d..(i + 1) * d], x) + y[d * d + i]);
        }
        v
    }

    pub fn grad(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let y = self.interp(t);
        let d = self.dim;
        linalg::matvec(&y[..d * d], x, out);
        for i in 0..d {
            out[i] = 2.0 * out[i] + y[d * d + i];
        }
    }
}

fn sym(m: &[f64], d: usize) -> DMatrix<f64> {
    let a = linalg::to_dmatrix(m, d);
    (&a + a.transpose()) * 0.5
}

fn pack(f: &DMatrix<f64>, h: &DVector<f64>, c: f64) -> Vec<f64> {
    let mut y = linalg::from_dmatrix(f);
    y.extend(h.iter());
    y.push(c);
    y
}

fn unpack(y: &[f64], d: usize) -> (DMatrix<f64>, DVector<f64>, f64) {
    (
        DMatrix::from_row_slice(d, d, &y[..d * d]),
        DVector::from_row_slice(&y[d * d..d * d + d]),
        y[d * d + d],
    )
}

/// Integrates `dy/dt = rhs(t, y)` backward from `y(T)` with classical RK4.
fn integrate_backward(
    d: usize,
    horizon: f64,
    steps: usize,
    terminal: Vec<f64>,
    sigma: Vec<f64>,
    rhs: impl Fn(f64, &[f64]) -> Vec<f64>,
) -> Result<QuadraticValue> {
    if steps < 1 {
        return Err(Error::Solver("at least one time step is required".into()));
    }
    let dt = horizon / steps as f64;
    let mut states = vec![Vec::new(); steps + 1];
    let mut y = terminal;
    states[steps] = y.clone();
    let add = |a: &[f64], b: &[f64], s: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * y).collect() };
    for i in (0..steps).rev() {
        let t = (i + 1) as f64 * dt;
        let k1 = rhs(t, &y);
        let k2 = rhs(t - 0.5 * dt, &add(&y, &k1, -0.5 * dt));
        let k3 = rhs(t - 0.5 * dt, &add(&y, &k2, -0.5 * dt));
        let k4 = rhs(t - dt, &add(&y, &k3, -dt));
        for j in 0..y.len() {
            y[j] -= dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("Riccati solution blew up at t = {}", i as f64 * dt)));
        }
        states[i] = y.clone();
    }
    let rates = (0..=steps).map(|i| rhs(i as f64 * dt, &states[i])).collect();
    Ok(QuadraticValue { dim: d, horizon, sigma, steps, states, rates })
}

/// Solves `dF/dt = 2FσσᵀF - AᵀF - FA - P`, `F(T) = Q`, together with the linear
/// and constant parts of the value function.
pub fn solve_riccati(lq: &LqParams, steps: usize) -> Result<QuadraticValue> {
    lq.validate()?;
    let d = lq.dim;
    let a = linalg::to_dmatrix(&lq.a, d);
    let p = sym(&lq.p, d);
    let q = sym(&lq.q, d);
    let s = linalg::to_dmatrix(&lq.sigma, d);
    let ss = &s * s.transpose();
    let gamma = DVector::from_vec(lq.gamma.clone().unwrap_or_else(|| vec![0.0; d]));
    let rhs = |_t: f64, y: &[f64]| {
        let (f, h, _) = unpack(y, d);
        let fss = &f * &ss;
        let df = &fss * &f * 2.0 - a.transpose() * &f - &f * &a - &p;
        let dh = &fss * &h * 2.0 - a.transpose() * &h;
        let dc = 0.5 * h.dot(&(&ss * &h)) - (&ss * &f).trace();
        pack(&df, &dh, dc)
    };
    integrate_backward(d, lq.horizon, steps, pack(&q, &gamma, 0.0), lq.sigma.clone(), rhs)
}

/// Cost-to-go of the linear feedback `u = K(t) x` (Lyapunov equation).
pub fn evaluate_linear_policy(
    lq: &LqParams,
    gain: &dyn Fn(f64) -> Vec<f64>,
    steps: usize,
) -> Result<QuadraticValue> {
    lq.validate()?;
    let d = lq.dim;
    let a = linalg::to_dmatrix(&lq.a, d);
    let p = sym(&lq.p, d);
    let q = sym(&lq.q, d);
    let s = linalg::to_dmatrix(&lq.sigma, d);
    let ss = &s * s.transpose();
    let gamma = DVector::from_vec(lq.gamma.clone().unwrap_or_else(|| vec![0.0; d]));
    let rhs = |t: f64, y: &[f64]| {
        let (g, h, _) = unpack(y, d);
        let k = linalg::to_dmatrix(&gain(t), d);
        let at = &a + &s * &k;
        let dg = -(at.transpose() * &g + &g * &at + &p + k.transpose() * &k * 0.5);
        let dh = -(at.transpose() * &h);
        let dc = -(&ss * &g).trace();
        pack(&dg, &dh, dc)
    };
    integrate_backward(d, lq.horizon, steps, pack(&q, &gamma, 0.0), lq.sigma.clone(), rhs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(q: f64) -> LqParams {
        LqParams {
            dim: 1,
            horizon: 1.0,
            a: vec![0.0],
            p: vec![0.0],
            q: vec![q],
            gamma: None,
            sigma: vec![1.0],
        }
    }

    #[test]
    fn scalar_closed_form() {
        let sol = solve_riccati(&scalar(0.5), 1000).unwrap();
        for &t in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            let exact = 0.5 / (1.0 + 2.0 * 0.5 * (1.0 - t));
            assert!((sol.matrix_at(t)[0] - exact).abs() < 1e-9, "t={t}");
        }
        assert!((sol.matrix_at(0.0)[0] - 0.25).abs() < 1e-12);
        let mut g = [0.0];
        sol.grad(&[1.0], 0.0, &mut g);
        assert!((-g[0] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn scalar_offset_matches_log_formula() {
        // c(t) = ½ log(1 + 2Q(T-t)) for A = P = 0, σ = 1.
        let sol = solve_riccati(&scalar(0.5), 400).unwrap();
        assert!((sol.offset_at(0.0) - 0.5 * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn policy_evaluation_at_the_optimum_equals_riccati() {
        let lq = LqParams {
            dim: 2,
            horizon: 1.0,
            a: vec![0.2, 0.1, -0.1, 0.3],
            p: vec![0.5, 0.1, 0.1, 0.2],
            q: vec![0.4, 0.0, 0.0, 0.6],
            gamma: Some(vec![0.1, -0.2]),
            sigma: vec![1.0, 0.0, 0.3, 0.8],
        };
        let s = linalg::to_dmatrix(&lq.sigma, 2);
        // With γ ≠ 0 the optimum is affine, so compare on the purely quadratic problem.
        let mut lq0 = lq.clone();
        lq0.gamma = None;
        let v0 = solve_riccati(&lq0, 2000).unwrap();
        let gain = move |t: f64| {
            let f = linalg::to_dmatrix(&v0.matrix_at(t), 2);
            linalg::from_dmatrix(&(-(s.transpose() * f) * 2.0))
        };
        let j = evaluate_linear_policy(&lq0, &gain, 2000).unwrap();
        let v0 = solve_riccati(&lq0, 2000).unwrap();
        for &x in &[[0.3, -0.7], [1.0, 0.5]] {
            assert!((j.value(&x, 0.0) - v0.value(&x, 0.0)).abs() < 1e-8);
        }
    }
}
