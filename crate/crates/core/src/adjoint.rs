//! Backward adjoint solvers along stored trajectories and the discrete adjoint gradient.

use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{Diagnostics, GradEstimate};
use crate::parallel::sum_over;
use crate::problem::SocProblem;
use crate::simulate::{simulate, TimeGrid, TrajectoryBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointKind {
    /// Gradient of the remaining cost including the control's dependence on the state.
    Continuous,
    /// Drops every term that involves ū.
    Lean,
}

/// Adjoint states `a[i][k]` along every trajectory of a batch.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub kind: AdjointKind,
    pub stl: bool,
    pub m: usize,
    pub dim: usize,
    pub steps: usize,
    /// Seed of the batch the path was solved on.
    pub seed: u64,
    /// `m × (K+1) × d`.
    pub values: Vec<f64>,
}

impl AdjointPath {
    #[inline]
    pub fn at(&self, i: usize, k: usize) -> &[f64] {
        let s = (self.steps + 1) * self.dim;
        &self.values[i * s + k * self.dim..i * s + (k + 1) * self.dim]
    }
}

/// Solves the adjoint backward along trajectory `i` into `out` (`(K+1) × d`). On a
/// non-finite value returns the offending step.
pub(crate) fn adjoint_trajectory(
    problem: &SocProblem,
    batch: &TrajectoryBatch,
    i: usize,
    kind: AdjointKind,
    stl: bool,
    out: &mut [f64],
) -> std::result::Result<(), usize> {
    let d = batch.dim;
    let steps = batch.steps();
    let grid = &batch.grid;
    let gen = &batch.generator;
    problem.terminal_cost.grad(batch.state(i, steps), grid.horizon(), &mut out[steps * d..]);
    let mut jb = vec![0.0; d];
    let mut gf = vec![0.0; d];
    let mut v = vec![0.0; d];
    let mut ju = vec![0.0; d];
    let with_u = kind == AdjointKind::Continuous;
    for k in (0..steps).rev() {
        let (head, tail) = out.split_at_mut((k + 1) * d);
        let next = &tail[..d];
        let cur = &mut head[k * d..];
        let x = batch.state(i, k);
        let t = grid.times[k];
        let dt = grid.dt(k);
        problem.drift.vjp(x, t, next, &mut jb);
        problem.state_cost.grad(x, t, &mut gf);
        for j in 0..d {
            cur[j] = next[j] + dt * (jb[j] + gf[j]);
        }
        if with_u || stl {
            v.iter_mut().for_each(|e| *e = 0.0);
            if with_u {
                problem.diffusion.apply_t(t, next, &mut v);
                let ub = batch.control(i, k);
                for j in 0..d {
                    v[j] = dt * (v[j] + ub[j]);
                }
            }
            if stl {
                linalg::axpy(1.0, batch.increment(i, k), &mut v);
            }
            gen.input_vjp(x, t, &v, &mut ju);
            linalg::axpy(1.0, &ju, cur);
        }
        if cur.iter().any(|e| !e.is_finite()) {
            return Err(k);
        }
    }
    Ok(())
}

fn solve(problem: &SocProblem, batch: &TrajectoryBatch, kind: AdjointKind, stl: bool) -> Result<AdjointPath> {
    use rayon::prelude::*;
    let d = batch.dim;
    let steps = batch.steps();
    let mut values = vec![0.0; batch.m * (steps + 1) * d];
    let failures: Vec<Option<usize>> = values
        .par_chunks_mut((steps + 1) * d)
        .enumerate()
        .map(|(i, out)| adjoint_trajectory(problem, batch, i, kind, stl, out).err())
        .collect();
    if let Some((i, k)) = failures.iter().enumerate().find_map(|(i, f)| f.map(|k| (i, k))) {
        return Err(Error::NonFinite(format!("adjoint of trajectory {i} at step {k}")));
    }
    Ok(AdjointPath { kind, stl, m: batch.m, dim: d, steps, seed: batch.seed, values })
}

/// `a_k = a_{k+1} + [(∇ₓ(b + σū))ᵀa_{k+1} + ∇ₓ(f + ½|ū|²)]Δt`, `a_K = ∇g(X_K)`; with `stl`
/// the cotangent `(∇ₓū)ᵀΔB_k` of the zero-mean term `⟨ū, ΔB_k⟩` is added.
pub fn solve_continuous_adjoint(problem: &SocProblem, batch: &TrajectoryBatch, stl: bool) -> Result<AdjointPath> {
    solve(problem, batch, AdjointKind::Continuous, stl)
}

/// `ã_k = ã_{k+1} + [(∇ₓb)ᵀã_{k+1} + ∇ₓf]Δt`, `ã_K = ∇g(X_K)`, with the same optional STL term.
pub fn solve_lean_adjoint(problem: &SocProblem, batch: &TrajectoryBatch, stl: bool) -> Result<AdjointPath> {
    solve(problem, batch, AdjointKind::Lean, stl)
}

/// Exact gradient of the Monte Carlo objective `mean Σ(½|u|² + f)Δt + g(X_K)` with respect
/// to the control parameters, back-propagated through the Euler recursion.
pub fn discrete_adjoint_gradient(
    problem: &SocProblem,
    ctrl: &dyn ControlFunction,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<GradEstimate> {
    let batch = simulate(problem, &ctrl.freeze(), grid, m, seed)?;
    discrete_adjoint_on_batch(problem, ctrl, &batch)
}

/// Same as [`discrete_adjoint_gradient`] on a batch that `ctrl` generated.
pub fn discrete_adjoint_on_batch(
    problem: &SocProblem,
    ctrl: &dyn ControlFunction,
    batch: &TrajectoryBatch,
) -> Result<GradEstimate> {
    if !batch.generator.matches(ctrl) {
        return Err(Error::InvalidProblem("discrete adjoint needs trajectories generated by the control itself".into()));
    }
    let d = batch.dim;
    let steps = batch.steps();
    let grid = &batch.grid;
    let np = ctrl.num_params();
    let (grad, total) = sum_over(batch.m, np, |i, acc| {
        let mut lam = vec![0.0; d];
        let mut next = vec![0.0; d];
        let mut jb = vec![0.0; d];
        let mut gf = vec![0.0; d];
        let mut st = vec![0.0; d];
        let mut u = vec![0.0; d];
        let mut ig = vec![0.0; d];
        problem.terminal_cost.grad(batch.state(i, steps), grid.horizon(), &mut lam);
        let mut cost = problem.terminal_cost.value(batch.state(i, steps), grid.horizon());
        for k in (0..steps).rev() {
            let x = batch.state(i, k);
            let t = grid.times[k];
            let dt = grid.dt(k);
            next.copy_from_slice(&lam);
            problem.diffusion.apply_t(t, &next, &mut st);
            ctrl.eval_backward(
                x,
                t,
                &mut u,
                &mut |u, cot| {
                    for j in 0..d {
                        cot[j] = dt * (u[j] + st[j]);
                    }
                },
                Some(acc),
                Some(&mut ig),
            );
            problem.drift.vjp(x, t, &next, &mut jb);
            problem.state_cost.grad(x, t, &mut gf);
            for j in 0..d {
                lam[j] = next[j] + dt * (jb[j] + gf[j]) + ig[j];
            }
            cost += (0.5 * linalg::norm_sq(&u) + problem.state_cost.value(x, t)) * dt;
        }
        cost
    });
    GradEstimate::finish(grad, None, None, total, batch.m, Diagnostics::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{Activation, MlpControl, ZeroControl};
    use crate::problem::{Diffusion, LinearDrift, QuadraticCost, ScalarField, Zero};
    use std::sync::Arc;

    fn small_problem(g: Arc<dyn ScalarField>) -> SocProblem {
        SocProblem::builder(2, 1.0)
            .drift(Arc::new(LinearDrift { a: vec![-0.3, 0.2, 0.1, -0.5] }))
            .diffusion(Diffusion::constant(vec![1.0, 0.0, 0.3, 0.8], 2).unwrap())
            .state_cost(Arc::new(QuadraticCost { p: vec![0.5, 0.1, 0.1, 0.2], gamma: None }))
            .terminal_cost(g)
            .initial(crate::problem::InitialLaw::Point(vec![0.5, -0.3]))
            .build()
            .unwrap()
    }

    #[test]
    fn linear_terminal_cost_gives_constant_adjoint() {
        let w = vec![0.7, -1.1];
        let p = SocProblem::builder(2, 1.0)
            .terminal_cost(Arc::new(QuadraticCost { p: vec![0.0; 4], gamma: Some(w.clone()) }))
            .build()
            .unwrap();
        let batch = simulate(&p, &ZeroControl { dim: 2 }.freeze(), &TimeGrid::uniform(1.0, 10), 4, 1).unwrap();
        for stl in [false, true] {
            for path in [solve_continuous_adjoint(&p, &batch, stl).unwrap(), solve_lean_adjoint(&p, &batch, stl).unwrap()] {
                for i in 0..4 {
                    for k in 0..=10 {
                        assert_eq!(path.at(i, k), &w[..]);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_control_makes_adjoints_coincide() {
        let p = small_problem(Arc::new(QuadraticCost { p: vec![0.5, 0.1, 0.1, 0.3], gamma: None }));
        let batch = simulate(&p, &ZeroControl { dim: 2 }.freeze(), &TimeGrid::uniform(1.0, 16), 8, 2).unwrap();
        let a = solve_continuous_adjoint(&p, &batch, false).unwrap();
        let b = solve_lean_adjoint(&p, &batch, false).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn terminal_condition_is_exact() {
        let p = small_problem(Arc::new(QuadraticCost { p: vec![0.5, 0.1, 0.1, 0.3], gamma: None }));
        let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 3, 1.0);
        let batch = simulate(&p, &ctrl.freeze(), &TimeGrid::uniform(1.0, 12), 5, 4).unwrap();
        let a = solve_continuous_adjoint(&p, &batch, true).unwrap();
        let mut g = vec![0.0; 2];
        for i in 0..5 {
            p.terminal_cost.grad(batch.state(i, 12), 1.0, &mut g);
            assert_eq!(a.at(i, 12), &g[..]);
        }
    }

    #[test]
    fn discrete_gradient_matches_finite_differences() {
        let p = small_problem(Arc::new(QuadraticCost { p: vec![0.5, 0.1, 0.1, 0.3], gamma: Some(vec![0.2, -0.4]) }));
        let ctrl = MlpControl::new_random(2, &[6, 6], Activation::Silu, 5, 1.0);
        let grid = TimeGrid::uniform(1.0, 20);
        let est = discrete_adjoint_gradient(&p, &ctrl, &grid, 16, 9).unwrap();
        let objective = |c: &MlpControl| {
            let b = simulate(&p, &c.freeze(), &grid, 16, 9).unwrap();
            let f = b.functionals(&p);
            f.iter().map(|f| f.cost()).sum::<f64>() / 16.0
        };
        assert!((objective(&ctrl) - est.loss).abs() < 1e-12);
        for q in [0, 7, 20, ctrl.num_params() - 1] {
            let h = 1e-5;
            let mut a = ctrl.clone();
            a.params_mut()[q] += h;
            let mut b = ctrl.clone();
            b.params_mut()[q] -= h;
            let fd = (objective(&a) - objective(&b)) / (2.0 * h);
            assert!((fd - est.theta[q]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {q}: {fd} vs {}", est.theta[q]);
        }
    }

    #[test]
    fn zero_costs_leave_only_the_energy_gradient() {
        let p = SocProblem::builder(2, 1.0).terminal_cost(Arc::new(Zero)).build().unwrap();
        let ctrl = MlpControl::new_random(2, &[5], Activation::Tanh, 8, 1.0);
        let grid = TimeGrid::uniform(1.0, 10);
        let est = discrete_adjoint_gradient(&p, &ctrl, &grid, 1, 3).unwrap();
        // With b = 0, f = g = 0 the state is X + ∫u dt + B, so the energy still depends on θ
        // through the path; check against finite differences of the energy alone.
        let energy = |c: &MlpControl| {
            let b = simulate(&p, &c.freeze(), &grid, 1, 3).unwrap();
            b.functionals(&p)[0].energy
        };
        for q in [0, 3, ctrl.num_params() - 1] {
            let mut a = ctrl.clone();
            a.params_mut()[q] += 1e-6;
            let mut b = ctrl.clone();
            b.params_mut()[q] -= 1e-6;
            let fd = (energy(&a) - energy(&b)) / 2e-6;
            assert!((fd - est.theta[q]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
    }
}
