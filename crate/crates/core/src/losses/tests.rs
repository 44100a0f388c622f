use std::sync::Arc;

use super::*;
use crate::control::{Activation, MlpControl};
use crate::problem::{Diffusion, InitialLaw, LinearDrift, QuadraticCost, ScalarField, SocProblem, Zero};
use crate::reparam::{ReparamFamily, ReparamForm};
use crate::simulate::{simulate, simulate_with_noise, TimeGrid};

fn problem(g: Arc<dyn ScalarField>) -> SocProblem {
    SocProblem::builder(2, 1.0)
        .drift(Arc::new(LinearDrift { a: vec![-0.3, 0.2, 0.1, -0.5] }))
        .diffusion(Diffusion::constant(vec![1.0, 0.0, 0.3, 0.8], 2).unwrap())
        .state_cost(Arc::new(QuadraticCost { p: vec![0.5, 0.1, 0.1, 0.2], gamma: None }))
        .terminal_cost(g)
        .initial(InitialLaw::Point(vec![0.5, -0.3]))
        .build()
        .unwrap()
}

fn quadratic_g() -> Arc<dyn ScalarField> {
    Arc::new(QuadraticCost { p: vec![0.5, 0.1, 0.1, 0.3], gamma: Some(vec![0.2, -0.1]) })
}

#[test]
fn names_round_trip_and_classes_partition() {
    for k in LossKind::ALL {
        assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(json, format!("\"{}\"", k.name()));
    }
    let sizes: Vec<usize> = TaxonomyClass::ALL.iter().map(|c| c.members().len()).collect();
    assert_eq!(sizes, vec![7, 3, 3, 2, 1, 1]);
    assert!("nope".parse::<LossKind>().is_err());
    assert!(LossKind::ALL.iter().filter(|k| k.needs_graph()).count() == 1);
}

/// With the batch held fixed, every detached loss is an explicit function of θ and the
/// reported gradient must match its finite differences.
#[test]
fn detached_gradients_match_finite_differences() {
    let p = problem(quadratic_g());
    let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 4, 1.0);
    let grid = TimeGrid::uniform(1.0, 6);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 8, 21).unwrap();
    let fam = ReparamFamily::learned_with_scale(ReparamForm::Full, 2, 1.0, true, &[4], 2, 0.5);
    let opts = LossOptions::default();
    for kind in LossKind::ALL.into_iter().filter(|k| !k.needs_graph()) {
        let family = kind.needs_reparam().then_some(&fam);
        let y0 = (kind == LossKind::Moment).then_some(0.3);
        let eval = |c: &MlpControl| {
            compute(kind, &LossInput { problem: &p, batch: &batch, ctrl: c, family, y0 }, &opts).unwrap()
        };
        let est = eval(&ctrl);
        let h = 1e-6;
        for q in [0, 5, 17, ctrl.num_params() - 1] {
            let mut a = ctrl.clone();
            a.params_mut()[q] += h;
            let mut b = ctrl.clone();
            b.params_mut()[q] -= h;
            let fd = (eval(&a).loss - eval(&b).loss) / (2.0 * h);
            assert!((fd - est.theta[q]).abs() <= 1e-5 * (1.0 + fd.abs()), "{kind} θ{q}: {fd} vs {}", est.theta[q]);
        }
    }
}

#[test]
fn reparam_gradients_match_finite_differences() {
    let p = problem(quadratic_g());
    let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 4, 1.0);
    let grid = TimeGrid::uniform(1.0, 5);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 6, 3).unwrap();
    let opts = LossOptions::default();
    for form in [ReparamForm::Scalar, ReparamForm::Diagonal, ReparamForm::Full] {
        let fam = ReparamFamily::learned_with_scale(form, 2, 1.0, false, &[4], 9, 0.7);
        for kind in LossKind::ALL.into_iter().filter(|k| k.needs_reparam()) {
            let eval = |f: &ReparamFamily| {
                compute(kind, &LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: Some(f), y0: None }, &opts)
                    .unwrap()
            };
            let est = eval(&fam);
            let g = est.reparam.as_ref().unwrap();
            for q in [0, 3, fam.num_params() - 1] {
                let mut a = fam.clone();
                a.params_mut()[q] += 1e-6;
                let mut b = fam.clone();
                b.params_mut()[q] -= 1e-6;
                let fd = (eval(&a).loss - eval(&b).loss) / 2e-6;
                assert!((fd - g[q]).abs() <= 1e-5 * (1.0 + fd.abs()), "{kind} {form:?} M{q}: {fd} vs {}", g[q]);
            }
        }
    }
}

#[test]
fn lean_adjoint_vanishes_without_costs() {
    let p = SocProblem::builder(2, 1.0).terminal_cost(Arc::new(Zero)).build().unwrap();
    let ctrl = MlpControl::new_random(2, &[8], Activation::Tanh, 6, 1.0);
    let grid = TimeGrid::uniform(1.0, 8);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 10, 2).unwrap();
    let input = LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: None, y0: None };
    let opts = LossOptions::default();
    let am = compute(LossKind::AdjointMatching, &input, &opts).unwrap();
    let energy = batch.functionals(&p).iter().map(|f| f.energy).sum::<f64>() / 10.0;
    assert!((am.loss - energy).abs() < 1e-12);
    // Work-SOCM's target is identically zero too; its loss carries no ½.
    let ws = compute(LossKind::WorkSocm, &input, &opts).unwrap();
    assert!((ws.loss - 2.0 * energy).abs() < 1e-12);
    for (a, b) in am.theta.iter().zip(&ws.theta) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn unit_weights_reduce_socm_adjoint_to_adjoint_matching() {
    // ū = 0 and no costs give α ≡ 1.
    let p = SocProblem::builder(2, 1.0).terminal_cost(Arc::new(Zero)).build().unwrap();
    let ctrl = MlpControl::new(2, &[8], Activation::Silu, 6);
    let grid = TimeGrid::uniform(1.0, 8);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 10, 2).unwrap();
    let input = LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: None, y0: None };
    let opts = LossOptions::default();
    let a = compute(LossKind::AdjointMatching, &input, &opts).unwrap();
    let b = compute(LossKind::SocmAdjoint, &input, &opts).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.loss, b.loss);
    assert_eq!(b.diagnostics.ess, Some(10.0));
}

#[test]
fn vanishing_family_hides_the_terminal_cost_from_unweighted_socm() {
    let p1 = problem(quadratic_g());
    let p2 = problem(Arc::new(QuadraticCost { p: vec![3.0, 0.0, 0.0, 1.0], gamma: Some(vec![-1.0, 2.0]) }));
    let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 4, 1.0);
    let grid = TimeGrid::uniform(1.0, 10);
    let batch = simulate(&p1, &ctrl.freeze(), &grid, 16, 5).unwrap();
    let opts = LossOptions::default();
    let run = |p: &SocProblem, fam: &ReparamFamily| {
        compute(
            LossKind::UnweightedSocm,
            &LossInput { problem: p, batch: &batch, ctrl: &ctrl, family: Some(fam), y0: None },
            &opts,
        )
        .unwrap()
    };
    let vanishing = ReparamFamily::learned_with_scale(ReparamForm::Diagonal, 2, 1.0, true, &[4], 1, 0.5);
    let (a, b) = (run(&p1, &vanishing), run(&p2, &vanishing));
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.theta, b.theta);
    let plain = ReparamFamily::identity(2, 1.0, false);
    assert_ne!(run(&p1, &plain).loss, run(&p2, &plain).loss);
}

#[test]
fn identical_trajectories_have_zero_variance_losses() {
    let p = problem(quadratic_g());
    let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 4, 1.0);
    let grid = TimeGrid::uniform(1.0, 1);
    let batch = simulate_with_noise(&p, &ctrl.freeze(), &grid, vec![0.5, -0.3].repeat(6), vec![0.0; 12], 0).unwrap();
    let opts = LossOptions::default();
    for kind in [LossKind::Variance, LossKind::LogVariance, LossKind::Moment] {
        let est = compute(kind, &LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: None, y0: None }, &opts)
            .unwrap();
        assert!(est.loss.abs() < 1e-24, "{kind}: {}", est.loss);
        assert!(est.theta.iter().all(|g| g.abs() < 1e-12));
    }
}

#[test]
fn moment_at_optimal_offset_equals_log_variance() {
    let p = problem(quadratic_g());
    let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 4, 1.0);
    let grid = TimeGrid::uniform(1.0, 10);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 32, 8).unwrap();
    let opts = LossOptions::default();
    let input = LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: None, y0: None };
    let lv = compute(LossKind::LogVariance, &input, &opts).unwrap();
    let mo = compute(LossKind::Moment, &input, &opts).unwrap();
    assert!((lv.loss - mo.loss).abs() < 1e-12);
    assert!(mo.y0.unwrap().abs() < 1e-12);
    for (a, b) in lv.theta.iter().zip(&mo.theta) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn singular_diffusion_is_rejected_for_field_losses() {
    let p = SocProblem::builder(2, 1.0)
        .diffusion(Diffusion::constant(vec![1.0, 0.0, 0.0, 0.0], 2).unwrap())
        .terminal_cost(quadratic_g())
        .build()
        .unwrap();
    let ctrl = MlpControl::new(2, &[4], Activation::Silu, 1);
    let batch = simulate(&p, &ctrl.freeze(), &TimeGrid::uniform(1.0, 4), 4, 1).unwrap();
    let input = LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: None, y0: None };
    let err = compute(LossKind::Socm, &input, &LossOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Unsupported(_)));
    assert!(compute(LossKind::AdjointMatching, &input, &LossOptions::default()).is_ok());
}

#[test]
fn targets_under_identity_reproduce_the_matching_losses() {
    let p = problem(quadratic_g());
    let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 4, 1.0);
    let grid = TimeGrid::uniform(1.0, 6);
    let batch = simulate(&p, &ctrl.freeze(), &grid, 5, 2).unwrap();
    let input = LossInput { problem: &p, batch: &batch, ctrl: &ctrl, family: None, y0: None };
    let opts = LossOptions::default();
    let t = field_targets(&input, TargetField::Work, &opts).unwrap();
    assert_eq!(t.len(), 5 * 6 * 2);
    // Rebuild the Work-SOCM loss value from the exported targets.
    let mut loss = 0.0;
    let (mut u, mut st) = (vec![0.0; 2], vec![0.0; 2]);
    for i in 0..5 {
        for k in 0..6 {
            let tk = grid.times[k];
            ctrl.eval(batch.state(i, k), tk, &mut u);
            p.diffusion.apply_t(tk, &t[(i * 6 + k) * 2..(i * 6 + k + 1) * 2], &mut st);
            loss += grid.dt(k) * ((u[0] + st[0]).powi(2) + (u[1] + st[1]).powi(2)) / 5.0;
        }
    }
    let ws = compute(LossKind::WorkSocm, &input, &opts).unwrap();
    assert!((ws.loss - loss).abs() < 1e-12 * (1.0 + loss));
}
