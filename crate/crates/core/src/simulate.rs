//! Euler–Maruyama simulation, stored noise and path functionals.
//!
//! Brownian increments are a pure function of `(seed, trajectory, step)`: each
//! trajectory draws from its own ChaCha stream, so batches replay exactly and
//! can be regenerated under a different control with common random numbers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::control::FrozenControl;
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::SocProblem;

/// Divergence threshold on the state norm.
pub const DIVERGENCE_NORM: f64 = 1e6;
/// Clamp applied to log importance weights before exponentiation.
pub const LOG_WEIGHT_CLAMP: f64 = 30.0;

/// Time nodes `0 = t₀ < … < t_K = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Self {
        assert!(steps >= 1, "need at least one step");
        let times = (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect();
        TimeGrid { times }
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidProblem("time grid must start at 0 and increase strictly".into()));
        }
        Ok(TimeGrid { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    #[inline]
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// Simulated trajectories with their noise and the generating control's values.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub m: usize,
    pub dim: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// `m × (K+1) × d`.
    pub states: Vec<f64>,
    /// `m × K × d`.
    pub increments: Vec<f64>,
    /// `ū(X_k, t_k)`, `m × (K+1) × d`.
    pub controls: Vec<f64>,
    /// The control that generated the batch; no parameter gradients flow through it.
    pub generator: FrozenControl,
}

impl TrajectoryBatch {
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    #[inline]
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let s = (self.steps() + 1) * self.dim;
        &self.states[i * s + k * self.dim..i * s + (k + 1) * self.dim]
    }

    #[inline]
    pub fn increment(&self, i: usize, k: usize) -> &[f64] {
        let s = self.steps() * self.dim;
        &self.increments[i * s + k * self.dim..i * s + (k + 1) * self.dim]
    }

    #[inline]
    pub fn control(&self, i: usize, k: usize) -> &[f64] {
        let s = (self.steps() + 1) * self.dim;
        &self.controls[i * s + k * self.dim..i * s + (k + 1) * self.dim]
    }

    pub fn initial_states(&self) -> Vec<f64> {
        (0..self.m).flat_map(|i| self.state(i, 0).to_vec()).collect()
    }

    /// Per-trajectory work, control energy and noise integral.
    pub fn functionals(&self, problem: &SocProblem) -> Vec<PathFunctionals> {
        (0..self.m)
            .into_par_iter()
            .map(|i| {
                let mut f = PathFunctionals::default();
                for k in 0..self.steps() {
                    let dt = self.grid.dt(k);
                    let x = self.state(i, k);
                    let u = self.control(i, k);
                    f.running += problem.state_cost.value(x, self.grid.times[k]) * dt;
                    f.energy += 0.5 * linalg::norm_sq(u) * dt;
                    f.noise += linalg::dot(u, self.increment(i, k));
                }
                f.terminal = problem.terminal_cost.value(self.state(i, self.steps()), self.grid.horizon());
                f
            })
            .collect()
    }
}

/// Path functionals of one trajectory under its generating control ū.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PathFunctionals {
    /// `∫ f dt`.
    pub running: f64,
    /// `g(X_T)`.
    pub terminal: f64,
    /// `½∫|ū|² dt`.
    pub energy: f64,
    /// `∫⟨ū, dB⟩`.
    pub noise: f64,
}

impl PathFunctionals {
    /// `W = ∫ f dt + g(X_T)`.
    pub fn work(&self) -> f64 {
        self.running + self.terminal
    }

    /// Control objective sample `∫(½|ū|² + f) dt + g(X_T)`.
    pub fn cost(&self) -> f64 {
        self.energy + self.work()
    }

    /// The same sample plus the zero-mean term `∫⟨ū, dB⟩` (sticking-the-landing form).
    pub fn cost_stl(&self) -> f64 {
        self.cost() + self.noise
    }

    /// `log α = -(W + ∫⟨ū,dB⟩ + ½∫|ū|²)`, the log density of the uncontrolled path
    /// measure reweighted by `e^{-W}` against the controlled one.
    pub fn log_weight(&self) -> f64 {
        -(self.work() + self.noise + self.energy)
    }
}

/// Importance weights with diagnostics.
#[derive(Debug, Clone)]
pub struct ImportanceWeights {
    pub log_alpha: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Number of log weights that hit the clamp.
    pub clamped: usize,
    pub ess: f64,
}

pub fn importance_weights(functionals: &[PathFunctionals], self_normalize: bool) -> ImportanceWeights {
    let log_alpha: Vec<f64> = functionals.iter().map(|f| f.log_weight()).collect();
    let mut clamped = 0;
    let mut alpha: Vec<f64> = log_alpha
        .iter()
        .map(|&l| {
            if l.abs() > LOG_WEIGHT_CLAMP {
                clamped += 1;
            }
            l.clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP).exp()
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} log importance weights clamped to ±{LOG_WEIGHT_CLAMP}");
    }
    let ess = effective_sample_size(&log_alpha);
    if self_normalize {
        let mean = alpha.iter().sum::<f64>() / alpha.len() as f64;
        alpha.iter_mut().for_each(|a| *a /= mean);
    }
    ImportanceWeights { log_alpha, alpha, clamped, ess }
}

/// `(Σα)² / Σα²`, computed from log weights without overflow.
pub fn effective_sample_size(log_alpha: &[f64]) -> f64 {
    let shift = log_alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s1, mut s2) = (0.0, 0.0);
    for &l in log_alpha {
        let w = (l - shift).exp();
        s1 += w;
        s2 += w * w;
    }
    s1 * s1 / s2
}

/// `exp(∫⟨v,dB⟩ - ½∫|v|² dt)` per trajectory, with `v` evaluated along the stored paths
/// and `dB` the stored increments.
pub fn girsanov_rnd(batch: &TrajectoryBatch, v: &(dyn Fn(&[f64], f64, &mut [f64]) + Sync)) -> Vec<f64> {
    (0..batch.m)
        .into_par_iter()
        .map(|i| {
            let mut vk = vec![0.0; batch.dim];
            let mut l = 0.0;
            for k in 0..batch.steps() {
                v(batch.state(i, k), batch.grid.times[k], &mut vk);
                l += linalg::dot(&vk, batch.increment(i, k)) - 0.5 * linalg::norm_sq(&vk) * batch.grid.dt(k);
            }
            l.exp()
        })
        .collect()
}

/// Draws the increments and initial states a seed determines.
pub fn draw_noise(problem: &SocProblem, grid: &TimeGrid, m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let d = problem.dim;
    let k = grid.steps();
    let mut x0 = vec![0.0; m * d];
    let mut inc = vec![0.0; m * k * d];
    x0.par_chunks_mut(d).zip(inc.par_chunks_mut(k * d)).enumerate().for_each(|(i, (x, db))| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * i as u64);
        for s in 0..k {
            let sq = grid.dt(s).sqrt();
            for v in &mut db[s * d..(s + 1) * d] {
                *v = rng.sample::<f64, _>(StandardNormal) * sq;
            }
        }
        rng.set_stream(2 * i as u64 + 1);
        rng.set_word_pos(0);
        problem.initial.sample(&mut rng, x);
    });
    (x0, inc)
}

/// Simulates `m` trajectories of `dX = (b + σū)dt + σdB`.
pub fn simulate(
    problem: &SocProblem,
    ctrl: &FrozenControl,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let (x0, inc) = draw_noise(problem, grid, m, seed);
    simulate_with_noise(problem, ctrl, grid, x0, inc, seed)
}

/// Simulation driven by explicit initial states and increments.
pub fn simulate_with_noise(
    problem: &SocProblem,
    ctrl: &FrozenControl,
    grid: &TimeGrid,
    x0: Vec<f64>,
    increments: Vec<f64>,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let d = problem.dim;
    if ctrl.dim() != d {
        return Err(Error::Shape { what: "control dimension", expected: d, got: ctrl.dim() });
    }
    let steps = grid.steps();
    if x0.len() % d != 0 || increments.len() != (x0.len() / d) * steps * d {
        return Err(Error::Shape { what: "noise", expected: (x0.len() / d) * steps * d, got: increments.len() });
    }
    let m = x0.len() / d;
    let mut states = vec![0.0; m * (steps + 1) * d];
    let mut controls = vec![0.0; m * (steps + 1) * d];
    let failures: Vec<Option<usize>> = states
        .par_chunks_mut((steps + 1) * d)
        .zip(controls.par_chunks_mut((steps + 1) * d))
        .enumerate()
        .map(|(i, (xs, us))| {
            xs[..d].copy_from_slice(&x0[i * d..(i + 1) * d]);
            let db = &increments[i * steps * d..(i + 1) * steps * d];
            let mut drift = vec![0.0; d];
            let mut push = vec![0.0; d];
            let mut kick = vec![0.0; d];
            for k in 0..steps {
                let t = grid.times[k];
                let dt = grid.dt(k);
                let (cur, next) = xs.split_at_mut((k + 1) * d);
                let x = &cur[k * d..];
                ctrl.eval(x, t, &mut us[k * d..(k + 1) * d]);
                problem.drift.eval(x, t, &mut drift);
                for j in 0..d {
                    push[j] = us[k * d + j] * dt + db[k * d + j];
                }
                problem.diffusion.apply(t, &push, &mut kick);
                let mut norm = 0.0;
                for j in 0..d {
                    let v = x[j] + drift[j] * dt + kick[j];
                    next[j] = v;
                    norm += v * v;
                }
                if !norm.is_finite() || norm.sqrt() > DIVERGENCE_NORM {
                    return Some(k + 1);
                }
            }
            let t = grid.horizon();
            let (cur, _) = xs.split_at((steps + 1) * d);
            ctrl.eval(&cur[steps * d..], t, &mut us[steps * d..]);
            None
        })
        .collect();
    if let Some((i, step)) = failures.iter().enumerate().find_map(|(i, f)| f.map(|s| (i, s))) {
        return Err(Error::Diverged { trajectory: i, step });
    }
    Ok(TrajectoryBatch { m, dim: d, grid: grid.clone(), seed, states, increments, controls, generator: ctrl.clone() })
}

/// Sums consecutive groups of `factor` increments: the coarse-grid noise driven by the
/// same Brownian path.
pub fn coarsen_increments(increments: &[f64], m: usize, steps: usize, d: usize, factor: usize) -> Vec<f64> {
    assert!(steps % factor == 0);
    let coarse = steps / factor;
    let mut out = vec![0.0; m * coarse * d];
    for i in 0..m {
        for c in 0..coarse {
            for f in 0..factor {
                let s = c * factor + f;
                for j in 0..d {
                    out[(i * coarse + c) * d + j] += increments[(i * steps + s) * d + j];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{ControlFunction, LinearControl, ZeroControl};
    use crate::problem::{Diffusion, LinearDrift, QuadraticCost};
    use std::sync::Arc;

    fn ou(d: usize) -> SocProblem {
        SocProblem::builder(d, 1.0)
            .drift(Arc::new(LinearDrift { a: crate::linalg::identity(d).iter().map(|v| -0.5 * v).collect() }))
            .terminal_cost(Arc::new(QuadraticCost { p: crate::linalg::identity(d), gamma: None }))
            .build()
            .unwrap()
    }

    #[test]
    fn zero_drift_zero_control_reproduces_brownian_motion() {
        let p = SocProblem::builder(2, 1.0).build().unwrap();
        let grid = TimeGrid::uniform(1.0, 10);
        let b = simulate(&p, &ZeroControl { dim: 2 }.freeze(), &grid, 5, 11).unwrap();
        for i in 0..5 {
            let mut acc = [0.0; 2];
            for k in 0..10 {
                acc[0] += b.increment(i, k)[0];
                acc[1] += b.increment(i, k)[1];
                let x = b.state(i, k + 1);
                assert!((x[0] - acc[0]).abs() < 1e-14 && (x[1] - acc[1]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn replay_is_deterministic_and_noise_is_control_independent() {
        let p = ou(2);
        let grid = TimeGrid::uniform(1.0, 20);
        let c = LinearControl::constant(vec![-0.3, 0.1, 0.0, -0.2], 2).unwrap();
        let a = simulate(&p, &c.freeze(), &grid, 16, 4).unwrap();
        let b = simulate(&p, &c.freeze(), &grid, 16, 4).unwrap();
        assert_eq!(a.states, b.states);
        let z = simulate(&p, &ZeroControl { dim: 2 }.freeze(), &grid, 16, 4).unwrap();
        assert_eq!(a.increments, z.increments);
        let other = simulate(&p, &c.freeze(), &grid, 16, 5).unwrap();
        assert_ne!(a.increments, other.increments);
        // Trajectory i only depends on (seed, i): a larger batch shares its prefix.
        let big = simulate(&p, &c.freeze(), &grid, 32, 4).unwrap();
        assert_eq!(&big.states[..a.states.len()], &a.states[..]);
    }

    #[test]
    fn divergence_is_reported() {
        let p = SocProblem::builder(1, 1.0)
            .drift(Arc::new(LinearDrift { a: vec![200.0] }))
            .initial(crate::problem::InitialLaw::Point(vec![1.0]))
            .build()
            .unwrap();
        let err = simulate(&p, &ZeroControl { dim: 1 }.freeze(), &TimeGrid::uniform(1.0, 10), 3, 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { trajectory: 0, .. }));
    }

    #[test]
    fn girsanov_weight_identity_is_exact() {
        let p = ou(1);
        let grid = TimeGrid::uniform(1.0, 25);
        let c = LinearControl::constant(vec![-0.8], 1).unwrap();
        let batch = simulate(&p, &c.freeze(), &grid, 50, 2).unwrap();
        let funcs = batch.functionals(&p);
        let frozen = batch.generator.clone();
        let neg = move |x: &[f64], t: f64, out: &mut [f64]| {
            frozen.eval(x, t, out);
            out.iter_mut().for_each(|o| *o = -*o);
        };
        let rnd = girsanov_rnd(&batch, &neg);
        for (f, r) in funcs.iter().zip(rnd) {
            assert!((f.log_weight() - r.ln() + f.work()).abs() < 1e-12);
        }
    }

    #[test]
    fn ess_bounds() {
        assert!((effective_sample_size(&[0.0; 8]) - 8.0).abs() < 1e-12);
        assert!((effective_sample_size(&[0.0, -1000.0, -1000.0]) - 1.0).abs() < 1e-12);
        let w = importance_weights(&[PathFunctionals { terminal: 40.0, ..Default::default() }], false);
        assert_eq!(w.clamped, 1);
        assert!((w.alpha[0] - (-30f64).exp()).abs() < 1e-30);
    }

    #[test]
    fn coarsening_sums_increments() {
        let inc: Vec<f64> = (0..8).map(|v| v as f64).collect();
        assert_eq!(coarsen_increments(&inc, 1, 4, 2, 2), vec![2.0, 4.0, 10.0, 12.0]);
    }

    #[test]
    fn time_varying_diffusion_is_used() {
        let p = SocProblem::builder(1, 1.0)
            .diffusion(Diffusion::time_varying(|t| nalgebra::DMatrix::from_element(1, 1, 1.0 + t)))
            .build()
            .unwrap();
        let grid = TimeGrid::uniform(1.0, 4);
        let b = simulate(&p, &ZeroControl { dim: 1 }.freeze(), &grid, 1, 0).unwrap();
        let expect: f64 = (0..4).map(|k| (1.0 + grid.times[k]) * b.increment(0, k)[0]).sum();
        assert!((b.state(0, 4)[0] - expect).abs() < 1e-14);
    }
}
