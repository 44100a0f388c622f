//! Matching losses `ρ w Σ_k |u(X_k,t_k) + σᵀ target_k|² Δt` with detached targets.
//!
//! Targets come either from an adjoint solve or from a matching vector field written as
//! `target_k = Σ_{j≥k} [M_kj(α_j + C_k β_j) + ∂M_kj(γ_j + C_k δ_j)] + M_kK ∇g(X_K)`.

use super::{weight_diagnostics, weights, Diagnostics, GradEstimate, LossInput, LossOptions};
use crate::adjoint::{adjoint_trajectory, AdjointKind};
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel::sum_over;
use crate::reparam::{block_apply_add, block_outer_add, MTable, ReparamFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Field {
    /// SOCM's ω.
    Omega,
    /// ξ̃, whose conditional mean is the lean adjoint.
    Work,
    /// ξ, whose conditional mean is the gradient of the cost functional.
    Cost { stl: bool },
}

/// Residual pass shared by every matching loss. Accumulates `θ` gradients and returns
/// the trajectory's loss; writes `c_k = σ cot_k` (the target cotangents) into `cots` if given.
fn match_trajectory(
    input: &LossInput,
    i: usize,
    targets: &[f64],
    scale: f64,
    acc: &mut [f64],
    mut cots: Option<&mut [f64]>,
) -> f64 {
    let batch = input.batch;
    let d = batch.dim;
    let mut st = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut cot_k = vec![0.0; d];
    let mut loss = 0.0;
    for k in 0..batch.steps() {
        let x = batch.state(i, k);
        let t = batch.grid.times[k];
        let dt = batch.grid.dt(k);
        input.problem.diffusion.apply_t(t, &targets[k * d..(k + 1) * d], &mut st);
        let mut r2 = 0.0;
        input.ctrl.eval_backward(
            x,
            t,
            &mut u,
            &mut |u, cot| {
                for j in 0..d {
                    let r = u[j] + st[j];
                    r2 += r * r;
                    cot[j] = 2.0 * scale * dt * r;
                }
                cot_k.copy_from_slice(cot);
            },
            Some(&mut *acc),
            None,
        );
        loss += scale * dt * r2;
        if let Some(c) = cots.as_deref_mut() {
            input.problem.diffusion.apply(t, &cot_k, &mut c[k * d..(k + 1) * d]);
        }
    }
    loss
}

/// Continuous-adjoint, adjoint-matching and SOCM-adjoint losses (`ρ = ½`).
pub(crate) fn adjoint_loss(
    input: &LossInput,
    kind: AdjointKind,
    stl: bool,
    weighted: bool,
    opts: &LossOptions,
) -> Result<GradEstimate> {
    let batch = input.batch;
    let d = batch.dim;
    let steps = batch.steps();
    let np = input.ctrl.num_params();
    let (w, diag) = if weighted {
        let w = weights(input, opts);
        let diag = weight_diagnostics(&w);
        (Some(w.alpha), diag)
    } else {
        (None, Diagnostics::default())
    };
    let failed = std::sync::atomic::AtomicBool::new(false);
    let (grad, total) = sum_over(batch.m, np, |i, acc| {
        let mut a = vec![0.0; (steps + 1) * d];
        if adjoint_trajectory(input.problem, batch, i, kind, stl, &mut a).is_err() {
            failed.store(true, std::sync::atomic::Ordering::Relaxed);
            return 0.0;
        }
        let wi = w.as_ref().map_or(1.0, |w| w[i]);
        match_trajectory(input, i, &a, 0.5 * wi, acc, None)
    });
    if failed.into_inner() {
        return Err(Error::NonFinite("adjoint state".into()));
    }
    GradEstimate::finish(grad, None, None, total, batch.m, diag)
}

/// Per-step ingredients of a matching field along one trajectory.
struct FieldTerms {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    delta: Vec<f64>,
    /// `C_k`, the scalar multiplying β and δ from step k on.
    c: Vec<f64>,
    grad_g: Vec<f64>,
}

fn field_terms(input: &LossInput, i: usize, field: Field, opts: &LossOptions) -> FieldTerms {
    let batch = input.batch;
    let p = input.problem;
    let d = batch.dim;
    let steps = batch.steps();
    let gen = &batch.generator;
    let mut ft = FieldTerms {
        alpha: vec![0.0; steps * d],
        beta: vec![0.0; steps * d],
        gamma: vec![0.0; steps * d],
        delta: vec![0.0; steps * d],
        c: vec![0.0; steps],
        grad_g: vec![0.0; d],
    };
    let x_t = batch.state(i, steps);
    p.terminal_cost.grad(x_t, batch.grid.horizon(), &mut ft.grad_g);
    let mut run = p.terminal_cost.value(x_t, batch.grid.horizon());
    let mut v = vec![0.0; d];
    let mut s = vec![0.0; d];
    let mut jv = vec![0.0; d];
    let mut gf = vec![0.0; d];
    let compensated = opts.stl_compensated;
    for k in (0..steps).rev() {
        let x = batch.state(i, k);
        let t = batch.grid.times[k];
        let dt = batch.grid.dt(k);
        let ub = batch.control(i, k);
        let db = batch.increment(i, k);
        let r = k * d..(k + 1) * d;
        p.state_cost.grad(x, t, &mut gf);
        match field {
            Field::Omega => {
                for j in 0..d {
                    v[j] = ub[j] * dt + db[j];
                }
                p.diffusion.inv_t_apply(t, &v, &mut s);
                p.drift.vjp(x, t, &s, &mut jv);
                for j in 0..d {
                    ft.alpha[r.start + j] = gf[j] * dt - jv[j];
                }
                ft.gamma[r.clone()].copy_from_slice(&s);
            }
            Field::Work => {
                run += p.state_cost.value(x, t) * dt;
                p.diffusion.inv_t_apply(t, db, &mut s);
                p.drift.vjp(x, t, &s, &mut jv);
                for j in 0..d {
                    ft.alpha[r.start + j] = gf[j] * dt;
                    ft.delta[r.start + j] = -s[j];
                }
                ft.beta[r.clone()].copy_from_slice(&jv);
            }
            Field::Cost { stl } => {
                run += (p.state_cost.value(x, t) + 0.5 * linalg::norm_sq(ub)) * dt;
                if stl {
                    run += linalg::dot(ub, db);
                }
                p.diffusion.inv_t_apply(t, db, &mut s);
                p.drift.vjp(x, t, &s, &mut jv);
                for j in 0..d {
                    ft.beta[r.start + j] = jv[j];
                    ft.delta[r.start + j] = -s[j];
                }
                // J_ūᵀ ΔB enters β (multiplied by C) and, with STL, α.
                gen.input_vjp(x, t, db, &mut jv);
                linalg::axpy(1.0, &jv, &mut ft.beta[r.clone()]);
                ft.alpha[r.clone()].copy_from_slice(&gf);
                ft.alpha[r.clone()].iter_mut().for_each(|a| *a *= dt);
                if stl && compensated {
                    linalg::axpy(1.0, &jv, &mut ft.alpha[r.clone()]);
                    p.diffusion.inv_t_apply(t, ub, &mut s);
                    p.drift.vjp(x, t, &s, &mut jv);
                    linalg::axpy(-dt, &jv, &mut ft.alpha[r.clone()]);
                    for j in 0..d {
                        ft.gamma[r.start + j] = s[j] * dt;
                    }
                } else {
                    if stl {
                        linalg::axpy(1.0, &jv, &mut ft.alpha[r.clone()]);
                    }
                    gen.input_vjp(x, t, ub, &mut jv);
                    linalg::axpy(dt, &jv, &mut ft.alpha[r.clone()]);
                }
            }
        }
        ft.c[k] = run;
    }
    ft
}

fn targets(ft: &FieldTerms, tab: &MTable, d: usize) -> Vec<f64> {
    let steps = tab.steps;
    let mut out = vec![0.0; steps * d];
    let mut v = vec![0.0; d];
    if tab.identity {
        // Suffix sums: target_k = Σ_{j≥k} α_j + C_k Σ_{j≥k} β_j + ∇g.
        let mut sa = ft.grad_g.clone();
        let mut sb = vec![0.0; d];
        for k in (0..steps).rev() {
            linalg::axpy(1.0, &ft.alpha[k * d..(k + 1) * d], &mut sa);
            linalg::axpy(1.0, &ft.beta[k * d..(k + 1) * d], &mut sb);
            for j in 0..d {
                out[k * d + j] = sa[j] + ft.c[k] * sb[j];
            }
        }
        return out;
    }
    for k in 0..steps {
        let o = &mut out[k * d..(k + 1) * d];
        let ck = ft.c[k];
        for j in k..steps {
            let r = j * d..(j + 1) * d;
            for q in 0..d {
                v[q] = ft.alpha[r.start + q] + ck * ft.beta[r.start + q];
            }
            block_apply_add(tab.m(k, j), &v, o);
            for q in 0..d {
                v[q] = ft.gamma[r.start + q] + ck * ft.delta[r.start + q];
            }
            block_apply_add(tab.dm(k, j), &v, o);
        }
        block_apply_add(tab.m(k, steps), &ft.grad_g, o);
    }
    out
}

/// Losses against ω, ξ̃ or ξ (`ρ = 1`), with gradients for a learned `M`.
pub(crate) fn field_loss(input: &LossInput, field: Field, weighted: bool, opts: &LossOptions) -> Result<GradEstimate> {
    let batch = input.batch;
    let d = batch.dim;
    let steps = batch.steps();
    let default_family;
    let family = match input.family {
        Some(f) => f,
        None => {
            default_family = ReparamFamily::identity(d, batch.grid.horizon(), false);
            &default_family
        }
    };
    if family.dim != d {
        return Err(Error::Shape { what: "reparameterization dimension", expected: d, got: family.dim });
    }
    let tab = family.tabulate(&batch.grid);
    let np = input.ctrl.num_params();
    let learn_m = family.num_params() > 0;
    let nm = if learn_m { tab.m.len() } else { 0 };
    let (w, diag) = if weighted {
        let w = weights(input, opts);
        let diag = weight_diagnostics(&w);
        (Some(w.alpha), diag)
    } else {
        (None, Diagnostics::default())
    };
    let block = tab.block;
    let (acc, total) = sum_over(batch.m, np + 2 * nm, |i, acc| {
        let ft = field_terms(input, i, field, opts);
        let tg = targets(&ft, &tab, d);
        let wi = w.as_ref().map_or(1.0, |w| w[i]);
        let (theta, rest) = acc.split_at_mut(np);
        if !learn_m {
            return match_trajectory(input, i, &tg, wi, theta, None);
        }
        let mut c = vec![0.0; steps * d];
        let loss = match_trajectory(input, i, &tg, wi, theta, Some(&mut c));
        let (gm, gd) = rest.split_at_mut(nm);
        let mut v = vec![0.0; d];
        for k in 0..steps {
            let ck = &c[k * d..(k + 1) * d];
            let base = k * (steps + 1);
            for j in k..steps {
                let r = j * d..(j + 1) * d;
                let at = (base + j) * block;
                for q in 0..d {
                    v[q] = ft.alpha[r.start + q] + ft.c[k] * ft.beta[r.start + q];
                }
                block_outer_add(&mut gm[at..at + block], ck, &v);
                for q in 0..d {
                    v[q] = ft.gamma[r.start + q] + ft.c[k] * ft.delta[r.start + q];
                }
                block_outer_add(&mut gd[at..at + block], ck, &v);
            }
            let at = (base + steps) * block;
            block_outer_add(&mut gm[at..at + block], ck, &ft.grad_g);
        }
        loss
    });
    let mut theta = acc;
    let reparam = if learn_m {
        let tables = theta.split_off(np);
        let mut g = vec![0.0; family.num_params()];
        family.backprop(&batch.grid, &tables[..nm], &tables[nm..], &mut g)?;
        Some(g)
    } else {
        None
    };
    GradEstimate::finish(theta, reparam, None, total, batch.m, diag)
}

/// Per-trajectory targets `m × K × d` of a field under the input's family (or `M = I`).
pub(crate) fn all_targets(input: &LossInput, field: Field, opts: &LossOptions) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let batch = input.batch;
    let d = batch.dim;
    let identity;
    let family = match input.family {
        Some(f) => f,
        None => {
            identity = ReparamFamily::identity(d, batch.grid.horizon(), false);
            &identity
        }
    };
    let tab = family.tabulate(&batch.grid);
    let per: Vec<Vec<f64>> =
        (0..batch.m).into_par_iter().map(|i| targets(&field_terms(input, i, field, opts), &tab, d)).collect();
    Ok(per.concat())
}
