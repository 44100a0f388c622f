//! Control error, gradient-equivalence and gradient-variance estimators.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{ControlFunction, OptimalControl};
use crate::error::{Error, Result};
use crate::linalg;
use crate::losses::{compute, LossInput, LossKind, LossOptions, TaxonomyClass};
use crate::problem::{GroundTruth, SocProblem};
use crate::reparam::ReparamFamily;
use crate::simulate::{simulate, TimeGrid};

/// Which process the control error is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMeasure {
    /// Trajectories of the learned control.
    #[default]
    Learned,
    /// Trajectories of the optimal control.
    Optimal,
}

impl std::str::FromStr for EvalMeasure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(EvalMeasure::Learned),
            "optimal" => Ok(EvalMeasure::Optimal),
            _ => Err(Error::Config(format!("unknown eval measure `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Error {
    pub value: f64,
    pub se: f64,
}

/// Estimates `E[Σ_k |u(X_k,t_k) - u*(X_k,t_k)|² Δt]`.
pub fn control_l2_error(
    ctrl: &dyn ControlFunction,
    gt: &GroundTruth,
    problem: &SocProblem,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    measure: EvalMeasure,
) -> Result<L2Error> {
    use rayon::prelude::*;
    if gt.dim() != problem.dim {
        return Err(Error::Shape { what: "ground truth dimension", expected: problem.dim, got: gt.dim() });
    }
    let gen = match measure {
        EvalMeasure::Learned => ctrl.freeze(),
        EvalMeasure::Optimal => OptimalControl { gt: Arc::new(gt.clone()) }.freeze(),
    };
    let batch = simulate(problem, &gen, grid, m, seed)?;
    let d = problem.dim;
    let per: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut u = vec![0.0; d];
            let mut us = vec![0.0; d];
            let mut e = 0.0;
            for k in 0..grid.steps() {
                let (x, t) = (batch.state(i, k), grid.times[k]);
                match measure {
                    EvalMeasure::Learned => u.copy_from_slice(batch.control(i, k)),
                    EvalMeasure::Optimal => ctrl.eval(x, t, &mut u),
                }
                gt.optimal_control(x, t, &mut us);
                e += u.iter().zip(&us).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * grid.dt(k);
            }
            e
        })
        .collect();
    let (value, se) = linalg::mean_se(&per);
    Ok(L2Error { value, se })
}

/// Shared inputs of the gradient studies.
#[derive(Clone, Copy)]
pub struct GradientProbe<'a> {
    pub problem: &'a SocProblem,
    pub ctrl: &'a dyn ControlFunction,
    /// Family for losses that need one; the identity family is used otherwise.
    pub family: Option<&'a ReparamFamily>,
    pub grid: &'a TimeGrid,
    pub options: LossOptions,
}

/// Mean of `n_chunks` independent gradient estimates, divided by the loss's scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientStats {
    pub kind: LossKind,
    pub m: usize,
    pub chunks: usize,
    pub mean: Vec<f64>,
    /// Per-coordinate variance of `mean`.
    pub var_of_mean: Vec<f64>,
    /// Per-coordinate sample variance of one chunk estimate.
    pub chunk_var: Vec<f64>,
}

impl GradientStats {
    /// Standard error of the mean vector in the Euclidean norm.
    pub fn se(&self) -> f64 {
        self.var_of_mean.iter().sum::<f64>().sqrt()
    }
}

/// Splits `m` trajectories into `chunks` independent batches and aggregates the estimates.
pub fn expected_gradient(probe: &GradientProbe, kind: LossKind, m: usize, chunks: usize, seed: u64) -> Result<GradientStats> {
    if chunks < 2 || m < chunks {
        return Err(Error::Config("need at least two chunks with one trajectory each".into()));
    }
    let per = m / chunks;
    let frozen = probe.ctrl.freeze();
    let mut samples = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let s = crate::train::derive_seed(seed, c as u64);
        let batch = simulate(probe.problem, &frozen, probe.grid, per, s)?;
        let input = LossInput { problem: probe.problem, batch: &batch, ctrl: probe.ctrl, family: probe.family, y0: None };
        let est = compute(kind, &input, &probe.options)?;
        samples.push(est.theta.into_iter().map(|g| g / kind.scale()).collect::<Vec<f64>>());
    }
    let n = samples[0].len();
    let mut mean = vec![0.0; n];
    let mut chunk_var = vec![0.0; n];
    for j in 0..n {
        let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
        mean[j] = col.iter().sum::<f64>() / chunks as f64;
        chunk_var[j] = linalg::sample_var(&col);
    }
    let var_of_mean = chunk_var.iter().map(|v| v / chunks as f64).collect();
    Ok(GradientStats { kind, m: per * chunks, chunks, mean, var_of_mean, chunk_var })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    /// The shared class, if both losses belong to one.
    pub class: Option<TaxonomyClass>,
    pub a: LossKind,
    pub b: LossKind,
    pub m: usize,
    /// `|ḡ_a/s_a - ḡ_b/s_b|`.
    pub difference: f64,
    /// `sqrt(Σ_j se_a,j² + se_b,j²)`, the expected size of the difference under equality.
    pub pooled_se: f64,
    /// Difference relative to the norm of the first mean.
    pub relative: f64,
    pub multiplier: f64,
    pub pass: bool,
}

impl EquivalenceReport {
    pub fn ratio(&self) -> f64 {
        self.difference / self.pooled_se
    }
}

pub fn compare(a: &GradientStats, b: &GradientStats, multiplier: f64) -> EquivalenceReport {
    let difference = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let pooled_se = a.var_of_mean.iter().zip(&b.var_of_mean).map(|(x, y)| x + y).sum::<f64>().sqrt();
    EquivalenceReport {
        class: (a.kind.class() == b.kind.class()).then(|| a.kind.class()),
        a: a.kind,
        b: b.kind,
        m: a.m.min(b.m),
        difference,
        pooled_se,
        relative: difference / linalg::norm(&a.mean).max(f64::MIN_POSITIVE),
        multiplier,
        pass: difference <= multiplier * pooled_se,
    }
}

/// Estimates both expected gradients on independent noise and compares them.
pub fn gradient_equivalence_test(
    probe: &GradientProbe,
    a: LossKind,
    b: LossKind,
    m: usize,
    chunks: usize,
    seed: u64,
    multiplier: f64,
) -> Result<EquivalenceReport> {
    let sa = expected_gradient(probe, a, m, chunks, seed)?;
    let sb = expected_gradient(probe, b, m, chunks, seed ^ 0x5bd1_e995_0000_0001)?;
    Ok(compare(&sa, &sb, multiplier))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub kind: LossKind,
    pub m_per_sample: usize,
    pub n_samples: usize,
    pub mean: Vec<f64>,
    /// Trace of the covariance of one estimate at batch size `m_per_sample`.
    pub trace: f64,
}

/// Spread of single-batch gradient estimates at a fixed control.
pub fn gradient_variance(
    probe: &GradientProbe,
    kind: LossKind,
    m_per_sample: usize,
    n_samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    let stats = expected_gradient(probe, kind, m_per_sample * n_samples, n_samples, seed)?;
    let s = kind.scale();
    Ok(VarianceReport {
        kind,
        m_per_sample,
        n_samples,
        mean: stats.mean.iter().map(|g| g * s).collect(),
        trace: stats.chunk_var.iter().sum::<f64>() * s * s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{Activation, LinearControl, MlpControl, ZeroControl};
    use crate::problem::{make_setting, Setting, SettingConfig};

    #[test]
    fn optimal_control_has_no_error() {
        let (p, gt) = make_setting(&SettingConfig::named(Setting::Lq2d)).unwrap();
        let c = OptimalControl { gt: Arc::new(gt.clone()) };
        let e = control_l2_error(&c, &gt, &p, &TimeGrid::uniform(1.0, 40), 64, 1, EvalMeasure::Learned).unwrap();
        assert_eq!(e.value, 0.0);
        let lin = LinearControl::from_ground_truth(&gt, 1.0, 201).unwrap();
        let e = control_l2_error(&lin, &gt, &p, &TimeGrid::uniform(1.0, 400), 64, 1, EvalMeasure::Optimal).unwrap();
        assert!(e.value < 1e-4, "{}", e.value);
    }

    #[test]
    fn zero_control_error_matches_the_gaussian_moment_integral() {
        // X = B under u = 0, so E∫(2F(t)X_t)² dt = ∫ 4F(t)² t dt with F(t) = Q/(1 + 2Q(1-t)).
        let (p, gt) = make_setting(&SettingConfig::named(Setting::Lq1d)).unwrap();
        let n = 20000;
        let exact: f64 = (0..n)
            .map(|i| {
                let t = (i as f64 + 0.5) / n as f64;
                let f = 0.5 / (1.0 + (1.0 - t));
                4.0 * f * f * t / n as f64
            })
            .sum();
        let e = control_l2_error(&ZeroControl { dim: 1 }, &gt, &p, &TimeGrid::uniform(1.0, 400), 20000, 3, EvalMeasure::Learned)
            .unwrap();
        assert!((e.value - exact).abs() < 3.0 * e.se + 2e-3, "{} ± {} vs {exact}", e.value, e.se);
    }

    #[test]
    fn a_loss_is_equivalent_to_itself() {
        let (p, _) = make_setting(&SettingConfig::named(Setting::Lq2d)).unwrap();
        let ctrl = MlpControl::new_random(2, &[8], Activation::Silu, 1, 1.0);
        let grid = TimeGrid::uniform(1.0, 10);
        let probe = GradientProbe { problem: &p, ctrl: &ctrl, family: None, grid: &grid, options: LossOptions::default() };
        let r = gradient_equivalence_test(&probe, LossKind::AdjointMatching, LossKind::AdjointMatching, 4000, 10, 2, 3.0)
            .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.class, Some(TaxonomyClass::II));
    }

    #[test]
    fn deterministic_gradients_have_zero_variance() {
        // Zero control and no noise dependence in the adjoint-matching residual.
        let p = SocProblem::builder(1, 1.0).terminal_cost(Arc::new(crate::problem::Zero)).build().unwrap();
        let ctrl = MlpControl::new(1, &[4], Activation::Silu, 0);
        let grid = TimeGrid::uniform(1.0, 5);
        let probe = GradientProbe { problem: &p, ctrl: &ctrl, family: None, grid: &grid, options: LossOptions::default() };
        let r = gradient_variance(&probe, LossKind::AdjointMatching, 16, 4, 0).unwrap();
        assert_eq!(r.trace, 0.0);
    }
}
