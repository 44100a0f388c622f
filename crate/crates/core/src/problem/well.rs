//! One-dimensional grid oracle for separable double-well problems.
//!
//! Solves the backward Kolmogorov equation `∂ₜφ + ½φ'' + bφ' = 0`, `φ(T) = e^{-g}`
//! by Crank–Nicolson, then `V = -log φ`. The convection term uses exponential
//! fitting so the scheme stays monotone where the drift is steep.

use super::settings::GridSpec;
use crate::error::{Error, Result};

/// Tabulated `V` and `∂ₓV` for one coordinate, indexed `[time][space]`.
#[derive(Debug, Clone)]
pub struct WellTable {
    pub kappa: f64,
    pub nu: f64,
    pub horizon: f64,
    pub grid: GridSpec,
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
    /// True if `φ` underflowed somewhere and was clamped.
    pub clamped: bool,
}

impl WellTable {
    fn dx(&self) -> f64 {
        (self.grid.x_max - self.grid.x_min) / (self.grid.n - 1) as f64
    }

    fn locate(&self, x: f64, t: f64) -> (usize, f64, usize, f64) {
        let n = self.grid.n;
        let s = ((x.clamp(self.grid.x_min, self.grid.x_max) - self.grid.x_min) / self.dx()).min((n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let dt = self.horizon / self.grid.t_steps as f64;
        let r = (t.clamp(0.0, self.horizon) / dt).min(self.grid.t_steps as f64);
        let k = (r.floor() as usize).min(self.grid.t_steps - 1);
        (i, s - i as f64, k, r - k as f64)
    }

    fn bilinear(&self, table: &[f64], x: f64, t: f64) -> f64 {
        let n = self.grid.n;
        let (i, a, k, b) = self.locate(x, t);
        let at = |k: usize| table[k * n + i] * (1.0 - a) + table[k * n + i + 1] * a;
        at(k) * (1.0 - b) + at(k + 1) * b
    }

    pub fn value(&self, x: f64, t: f64) -> f64 {
        self.bilinear(&self.v, x, t)
    }

    pub fn derivative(&self, x: f64, t: f64) -> f64 {
        self.bilinear(&self.dv, x, t)
    }

    /// `∂ₓₓV`, from the slope of the tabulated `∂ₓV` on the bracketing cell.
    pub fn second_derivative(&self, x: f64, t: f64) -> f64 {
        let n = self.grid.n;
        let (i, _, k, b) = self.locate(x, t);
        let slope = |k: usize| (self.dv[k * n + i + 1] - self.dv[k * n + i]) / self.dx();
        slope(k) * (1.0 - b) + slope(k + 1) * b
    }
}

/// Separable grid solution: coordinate `i` uses `tables[components[i]]`.
#[derive(Debug, Clone)]
pub struct WellSolution {
    pub components: Vec<usize>,
    pub tables: Vec<WellTable>,
}

impl WellSolution {
    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        x.iter().zip(&self.components).map(|(&xi, &c)| self.tables[c].value(xi, t)).sum()
    }

    pub fn grad(&self, x: &[f64], t: f64, out: &mut [f64]) {
        for ((o, &xi), &c) in out.iter_mut().zip(x).zip(&self.components) {
            *o = self.tables[c].derivative(xi, t);
        }
    }

    pub fn second_derivative(&self, i: usize, x: f64, t: f64) -> f64 {
        self.tables[self.components[i]].second_derivative(x, t)
    }

    /// Builds one table per distinct `(κᵢ, νᵢ)` pair.
    pub fn solve(kappa: &[f64], nu: &[f64], horizon: f64, grid: &GridSpec) -> Result<Self> {
        if kappa.len() != nu.len() {
            return Err(Error::Shape { what: "nu", expected: kappa.len(), got: nu.len() });
        }
        let mut tables: Vec<WellTable> = Vec::new();
        let mut components = Vec::with_capacity(kappa.len());
        for (&k, &n) in kappa.iter().zip(nu) {
            let idx = match tables.iter().position(|t| t.kappa == k && t.nu == n) {
                Some(i) => i,
                None => {
                    tables.push(solve_well_1d(k, n, horizon, grid)?);
                    tables.len() - 1
                }
            };
            components.push(idx);
        }
        Ok(WellSolution { components, tables })
    }
}

/// `Pe coth Pe`, the exponential-fitting factor for the diffusion coefficient.
fn fitting(pe: f64) -> f64 {
    if pe.abs() < 1e-4 {
        1.0 + pe * pe / 3.0
    } else {
        pe / pe.tanh()
    }
}

/// Thomas algorithm for `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64], scratch: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut beta = diag[0];
    if beta == 0.0 {
        return Err(Error::Solver("singular tridiagonal system".into()));
    }
    rhs[0] /= beta;
    for i in 1..n {
        scratch[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * scratch[i];
        if beta == 0.0 {
            return Err(Error::Solver("singular tridiagonal system".into()));
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / beta;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Ok(())
}

/// Solves the 1-D problem with drift `-4κx(x²-1)`, unit diffusion and terminal cost `ν(x²-1)²`.
pub fn solve_well_1d(kappa: f64, nu: f64, horizon: f64, grid: &GridSpec) -> Result<WellTable> {
    let n = grid.n;
    if n < 5 || grid.t_steps < 4 || !(grid.x_max > grid.x_min) {
        return Err(Error::Solver(format!("degenerate grid {grid:?}")));
    }
    let dx = (grid.x_max - grid.x_min) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| grid.x_min + i as f64 * dx).collect();
    let b: Vec<f64> = xs.iter().map(|&x| -4.0 * kappa * x * (x * x - 1.0)).collect();

    // Spatial operator L as three diagonals.
    let (mut lo, mut di, mut up) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 1..n - 1 {
        let diff = 0.5 * fitting(b[i] * dx) / (dx * dx);
        let conv = b[i] / (2.0 * dx);
        lo[i] = diff - conv;
        di[i] = -2.0 * diff;
        up[i] = diff + conv;
    }
    // Boundaries: the drift points inward, so use one-sided upwind transport only.
    di[0] = -b[0].max(0.0) / dx;
    up[0] = b[0].max(0.0) / dx;
    di[n - 1] = (b[n - 1]).min(0.0) / dx;
    lo[n - 1] = -(b[n - 1]).min(0.0) / dx;

    let mut clamped = false;
    let mut phi: Vec<f64> = xs.iter().map(|&x| (-nu * (x * x - 1.0).powi(2)).exp()).collect();
    let mut phis = vec![Vec::new(); grid.t_steps + 1];
    phis[grid.t_steps] = phi.clone();

    let dt = horizon / grid.t_steps as f64;
    let mut rhs = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let apply = |phi: &[f64], out: &mut [f64], scale: f64| {
        for i in 0..n {
            let mut s = di[i] * phi[i];
            if i > 0 {
                s += lo[i] * phi[i - 1];
            }
            if i + 1 < n {
                s += up[i] * phi[i + 1];
            }
            out[i] = phi[i] + scale * s;
        }
    };
    // `I - ½Δt L` serves both the implicit half-steps and the Crank–Nicolson solve.
    let h = 0.5 * dt;
    let ilo: Vec<f64> = lo.iter().map(|v| -h * v).collect();
    let idi: Vec<f64> = di.iter().map(|v| 1.0 - h * v).collect();
    let iup: Vec<f64> = up.iter().map(|v| -h * v).collect();
    // Rannacher start: four implicit half-steps, then Crank–Nicolson.
    for step in (0..grid.t_steps).rev() {
        let since_start = grid.t_steps - 1 - step;
        if since_start < 2 {
            for _ in 0..2 {
                rhs.copy_from_slice(&phi);
                solve_tridiagonal(&ilo, &idi, &iup, &mut rhs, &mut scratch)?;
                phi.copy_from_slice(&rhs);
            }
        } else {
            apply(&phi, &mut rhs, 0.5 * dt);
            solve_tridiagonal(&ilo, &idi, &iup, &mut rhs, &mut scratch)?;
            phi.copy_from_slice(&rhs);
        }
        for p in phi.iter_mut() {
            if !p.is_finite() {
                return Err(Error::Solver("non-finite φ".into()));
            }
            if *p < f64::MIN_POSITIVE {
                *p = f64::MIN_POSITIVE;
                clamped = true;
            }
        }
        phis[step] = phi.clone();
    }
    if phis[grid.t_steps].iter().any(|&p| p == 0.0) {
        clamped = true;
    }

    let mut v = Vec::with_capacity((grid.t_steps + 1) * n);
    let mut dv = Vec::with_capacity((grid.t_steps + 1) * n);
    for p in &phis {
        let row: Vec<f64> = p.iter().map(|&q| -q.max(f64::MIN_POSITIVE).ln()).collect();
        for i in 0..n {
            let d = if i == 0 {
                (row[1] - row[0]) / dx
            } else if i == n - 1 {
                (row[n - 1] - row[n - 2]) / dx
            } else {
                (row[i + 1] - row[i - 1]) / (2.0 * dx)
            };
            dv.push(d);
        }
        v.extend(row);
    }
    if clamped {
        log::warn!("double-well oracle: φ underflow clamped (κ = {kappa}, ν = {nu})");
    }
    Ok(WellTable { kappa, nu, horizon, grid: grid.clone(), v, dv, clamped })
}
