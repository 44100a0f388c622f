//! Score-function losses: REINFORCE, cross-entropy and the variance family.

use rayon::prelude::*;

use super::{weight_diagnostics, weights, Diagnostics, GradEstimate, LossInput, LossKind, LossOptions};
use crate::linalg;
use crate::parallel::sum_over;
use crate::simulate::LOG_WEIGHT_CLAMP;

/// Runs `u` along trajectory `i` and back-propagates `cot_k = coef(k)·(u_k Δt) + noise(k)`,
/// returning `Σ_k value(k, u_k)`.
fn score_pass(
    input: &LossInput,
    i: usize,
    acc: &mut [f64],
    mut cot_of: impl FnMut(usize, f64, &[f64], &[f64], &[f64], &mut [f64]) -> f64,
) -> f64 {
    let batch = input.batch;
    let mut u = vec![0.0; batch.dim];
    let mut total = 0.0;
    for k in 0..batch.steps() {
        let dt = batch.grid.dt(k);
        let (ub, db) = (batch.control(i, k), batch.increment(i, k));
        input.ctrl.eval_backward(
            batch.state(i, k),
            batch.grid.times[k],
            &mut u,
            &mut |u, cot| total += cot_of(k, dt, u, ub, db, cot),
            Some(&mut *acc),
            None,
        );
    }
    total
}

/// `½Σ|u|²Δt + C Σ⟨u, ΔB⟩` with `C` the (total or future) sampled cost under ū.
pub(crate) fn reinforce(input: &LossInput, future: bool) -> crate::Result<GradEstimate> {
    let batch = input.batch;
    let p = input.problem;
    let steps = batch.steps();
    let (grad, total) = sum_over(batch.m, input.ctrl.num_params(), |i, acc| {
        let mut c = vec![0.0; steps + 1];
        c[steps] = p.terminal_cost.value(batch.state(i, steps), batch.grid.horizon());
        for k in (0..steps).rev() {
            let dt = batch.grid.dt(k);
            let x = batch.state(i, k);
            c[k] = c[k + 1] + (p.state_cost.value(x, batch.grid.times[k]) + 0.5 * linalg::norm_sq(batch.control(i, k))) * dt;
        }
        score_pass(input, i, acc, |k, dt, u, _, db, cot| {
            let ck = if future { c[k] } else { c[0] };
            let mut v = 0.0;
            for j in 0..u.len() {
                cot[j] = u[j] * dt + ck * db[j];
                v += 0.5 * u[j] * u[j] * dt + ck * u[j] * db[j];
            }
            v
        })
    });
    GradEstimate::finish(grad, None, None, total, batch.m, Diagnostics::default())
}

/// Weighted score form of the relative entropy from the tilted path measure:
/// `α Σ(½|u|²Δt - ⟨u, ūΔt + ΔB⟩)`.
pub(crate) fn cross_entropy(input: &LossInput, opts: &LossOptions) -> crate::Result<GradEstimate> {
    let batch = input.batch;
    let w = weights(input, opts);
    let diag = weight_diagnostics(&w);
    let (grad, total) = sum_over(batch.m, input.ctrl.num_params(), |i, acc| {
        let a = w.alpha[i];
        score_pass(input, i, acc, |_, dt, u, ub, db, cot| {
            let mut v = 0.0;
            for j in 0..u.len() {
                let shift = ub[j] * dt + db[j];
                cot[j] = a * (u[j] * dt - shift);
                v += a * (0.5 * u[j] * u[j] * dt - u[j] * shift);
            }
            v
        })
    });
    GradEstimate::finish(grad, None, None, total, batch.m, diag)
}

/// `Z = -Σ⟨u,ū⟩Δt - Σ f Δt - Σ⟨u,ΔB⟩ + ½Σ|u|²Δt - g(X_K)`, equal to `log α` when `u = ū`.
fn log_ratio(input: &LossInput, i: usize) -> f64 {
    let batch = input.batch;
    let p = input.problem;
    let steps = batch.steps();
    let mut u = vec![0.0; batch.dim];
    let mut z = -p.terminal_cost.value(batch.state(i, steps), batch.grid.horizon());
    for k in 0..steps {
        let (x, t, dt) = (batch.state(i, k), batch.grid.times[k], batch.grid.dt(k));
        input.ctrl.eval(x, t, &mut u);
        let (ub, db) = (batch.control(i, k), batch.increment(i, k));
        z -= p.state_cost.value(x, t) * dt;
        for j in 0..u.len() {
            z += -u[j] * ub[j] * dt - u[j] * db[j] + 0.5 * u[j] * u[j] * dt;
        }
    }
    z
}

/// Variance, log-variance and moment losses on `Z`.
pub(crate) fn variance_family(input: &LossInput, kind: LossKind) -> crate::Result<GradEstimate> {
    let batch = input.batch;
    let m = batch.m as f64;
    let z: Vec<f64> = (0..batch.m).into_par_iter().map(|i| log_ratio(input, i)).collect();
    let mut diag = Diagnostics::default();
    let mut dy0 = None;
    // Per-trajectory multiplier of ∂Z and the batch loss value.
    let (coef, loss): (Vec<f64>, f64) = match kind {
        LossKind::LogVariance => {
            let mean = z.iter().sum::<f64>() / m;
            (z.iter().map(|z| 2.0 * (z - mean)).collect(), z.iter().map(|z| (z - mean).powi(2)).sum::<f64>())
        }
        LossKind::Moment => {
            let y0 = input.y0.unwrap_or_else(|| -z.iter().sum::<f64>() / m);
            dy0 = Some(2.0 * z.iter().map(|z| z + y0).sum::<f64>() / m);
            (z.iter().map(|z| 2.0 * (z + y0)).collect(), z.iter().map(|z| (z + y0).powi(2)).sum::<f64>())
        }
        _ => {
            let e: Vec<f64> = z.iter().map(|z| z.clamp(-LOG_WEIGHT_CLAMP, LOG_WEIGHT_CLAMP).exp()).collect();
            diag.clamped = z.iter().filter(|z| z.abs() > LOG_WEIGHT_CLAMP).count();
            if diag.clamped > 0 {
                log::warn!("variance loss: {} exponents clamped to ±{LOG_WEIGHT_CLAMP}", diag.clamped);
            }
            let mean = e.iter().sum::<f64>() / m;
            let coef = e
                .iter()
                .zip(&z)
                .map(|(e, z)| if z.abs() > LOG_WEIGHT_CLAMP { 0.0 } else { 2.0 * (e - mean) * e })
                .collect();
            (coef, e.iter().map(|e| (e - mean).powi(2)).sum::<f64>())
        }
    };
    let (grad, _) = sum_over(batch.m, input.ctrl.num_params(), |i, acc| {
        let c = coef[i];
        score_pass(input, i, acc, |_, dt, u, ub, db, cot| {
            for j in 0..u.len() {
                cot[j] = c * ((u[j] - ub[j]) * dt - db[j]);
            }
            0.0
        })
    });
    GradEstimate::finish(grad, None, dy0, loss, batch.m, diag)
}
