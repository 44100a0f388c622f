//! The loss functions of iterative diffusion optimization behind one interface.
//!
//! Every loss is evaluated on a detached batch simulated under `ū = stopgrad(u)`;
//! gradients flow only through explicit evaluations of `u`. The discrete adjoint
//! is the exception and differentiates through the Euler recursion instead.

mod matching;
mod score;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::control::ControlFunction;
use crate::error::{Error, Result};
use crate::problem::SocProblem;
use crate::reparam::ReparamFamily;
use crate::simulate::{importance_weights, ImportanceWeights, TrajectoryBatch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    DiscreteAdjoint,
    ContinuousAdjoint,
    ContinuousAdjointStl,
    AdjointMatching,
    AdjointMatchingStl,
    Reinforce,
    ReinforceFutureRewards,
    CrossEntropy,
    Variance,
    LogVariance,
    Moment,
    Socm,
    SocmAdjoint,
    WorkSocm,
    CostSocm,
    CostSocmStl,
    UnweightedSocm,
}

/// Sets of losses whose expected gradients agree up to a constant factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaxonomyClass {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl TaxonomyClass {
    pub const ALL: [TaxonomyClass; 6] =
        [TaxonomyClass::I, TaxonomyClass::II, TaxonomyClass::III, TaxonomyClass::IV, TaxonomyClass::V, TaxonomyClass::VI];

    pub fn members(self) -> Vec<LossKind> {
        LossKind::ALL.iter().copied().filter(|k| k.class() == self).collect()
    }
}

impl fmt::Display for TaxonomyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for TaxonomyClass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TaxonomyClass::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown class `{s}`")))
    }
}

impl LossKind {
    pub const ALL: [LossKind; 17] = [
        LossKind::DiscreteAdjoint,
        LossKind::ContinuousAdjoint,
        LossKind::ContinuousAdjointStl,
        LossKind::AdjointMatching,
        LossKind::AdjointMatchingStl,
        LossKind::Reinforce,
        LossKind::ReinforceFutureRewards,
        LossKind::CrossEntropy,
        LossKind::Variance,
        LossKind::LogVariance,
        LossKind::Moment,
        LossKind::Socm,
        LossKind::SocmAdjoint,
        LossKind::WorkSocm,
        LossKind::CostSocm,
        LossKind::CostSocmStl,
        LossKind::UnweightedSocm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::DiscreteAdjoint => "discrete-adjoint",
            LossKind::ContinuousAdjoint => "continuous-adjoint",
            LossKind::ContinuousAdjointStl => "continuous-adjoint-stl",
            LossKind::AdjointMatching => "adjoint-matching",
            LossKind::AdjointMatchingStl => "adjoint-matching-stl",
            LossKind::Reinforce => "reinforce",
            LossKind::ReinforceFutureRewards => "reinforce-future-rewards",
            LossKind::CrossEntropy => "cross-entropy",
            LossKind::Variance => "variance",
            LossKind::LogVariance => "log-variance",
            LossKind::Moment => "moment",
            LossKind::Socm => "socm",
            LossKind::SocmAdjoint => "socm-adjoint",
            LossKind::WorkSocm => "work-socm",
            LossKind::CostSocm => "cost-socm",
            LossKind::CostSocmStl => "cost-socm-stl",
            LossKind::UnweightedSocm => "unweighted-socm",
        }
    }

    pub fn class(self) -> TaxonomyClass {
        use LossKind::*;
        match self {
            DiscreteAdjoint | ContinuousAdjoint | ContinuousAdjointStl | Reinforce | ReinforceFutureRewards
            | CostSocm | CostSocmStl => TaxonomyClass::I,
            AdjointMatching | AdjointMatchingStl | WorkSocm => TaxonomyClass::II,
            Socm | SocmAdjoint | CrossEntropy => TaxonomyClass::III,
            LogVariance | Moment => TaxonomyClass::IV,
            Variance => TaxonomyClass::V,
            UnweightedSocm => TaxonomyClass::VI,
        }
    }

    /// Expected gradient of this loss divided by that of its class's reference member.
    pub fn scale(self) -> f64 {
        use LossKind::*;
        match self {
            CostSocm | CostSocmStl | WorkSocm | Socm => 2.0,
            _ => 1.0,
        }
    }

    /// Whether the loss uses a reparameterization family `M`.
    pub fn needs_reparam(self) -> bool {
        use LossKind::*;
        matches!(self, Socm | WorkSocm | CostSocm | CostSocmStl | UnweightedSocm)
    }

    /// Whether gradients flow through the simulated states.
    pub fn needs_graph(self) -> bool {
        self == LossKind::DiscreteAdjoint
    }

    /// Whether the loss couples trajectories of a batch.
    pub fn batch_level(self) -> bool {
        matches!(self, LossKind::Variance | LossKind::LogVariance)
    }

    /// Whether the loss multiplies by importance weights.
    pub fn uses_weights(self) -> bool {
        matches!(self, LossKind::CrossEntropy | LossKind::Socm | LossKind::SocmAdjoint)
    }

    pub fn needs_invertible_diffusion(self) -> bool {
        self.needs_reparam()
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Effective sample size of the importance weights, for losses that use them.
    pub ess: Option<f64>,
    /// Log weights (or exponents) that hit the clamp.
    pub clamped: usize,
    pub grad_norm: f64,
    /// ESS below 2: the weighted estimate rests on a single trajectory.
    pub degenerate: bool,
}

/// Gradient estimate of one loss on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub theta: Vec<f64>,
    /// Gradient with respect to the reparameterization parameters.
    pub reparam: Option<Vec<f64>>,
    /// Gradient with respect to the moment loss offset.
    pub y0: Option<f64>,
    pub loss: f64,
    pub diagnostics: Diagnostics,
}

impl GradEstimate {
    /// Divides accumulated sums by `m` and validates.
    pub(crate) fn finish(
        mut theta: Vec<f64>,
        mut reparam: Option<Vec<f64>>,
        y0: Option<f64>,
        loss_sum: f64,
        m: usize,
        mut diagnostics: Diagnostics,
    ) -> Result<Self> {
        let inv = 1.0 / m as f64;
        theta.iter_mut().for_each(|g| *g *= inv);
        if let Some(r) = reparam.as_mut() {
            r.iter_mut().for_each(|g| *g *= inv);
        }
        let loss = loss_sum * inv;
        let finite = theta.iter().chain(reparam.iter().flatten()).all(|g| g.is_finite())
            && loss.is_finite()
            && y0.is_none_or(f64::is_finite);
        if !finite {
            return Err(Error::NonFinite("loss gradient".into()));
        }
        diagnostics.grad_norm = crate::linalg::norm(&theta);
        Ok(GradEstimate { theta, reparam, y0, loss, diagnostics })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    /// Divide importance weights by their batch mean.
    pub self_normalize: bool,
    /// Remove the bias that the stochastic integral in the STL cost introduces into the
    /// Cost-SOCM target. Off reproduces the uncompensated target.
    pub stl_compensated: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { self_normalize: false, stl_compensated: true }
    }
}

/// Everything a loss evaluation reads.
#[derive(Clone, Copy)]
pub struct LossInput<'a> {
    pub problem: &'a SocProblem,
    pub batch: &'a TrajectoryBatch,
    pub ctrl: &'a dyn ControlFunction,
    pub family: Option<&'a ReparamFamily>,
    /// Moment loss offset; `None` solves for the batch-optimal value.
    pub y0: Option<f64>,
}

pub(crate) fn weights(input: &LossInput, opts: &LossOptions) -> ImportanceWeights {
    importance_weights(&input.batch.functionals(input.problem), opts.self_normalize)
}

pub(crate) fn weight_diagnostics(w: &ImportanceWeights) -> Diagnostics {
    Diagnostics { ess: Some(w.ess), clamped: w.clamped, grad_norm: 0.0, degenerate: w.ess < 2.0 }
}

/// Evaluates `kind` on a batch and returns its parameter gradients.
pub fn compute(kind: LossKind, input: &LossInput, opts: &LossOptions) -> Result<GradEstimate> {
    let batch = input.batch;
    if batch.dim != input.problem.dim || input.ctrl.dim() != batch.dim {
        return Err(Error::Shape { what: "loss input dimension", expected: batch.dim, got: input.ctrl.dim() });
    }
    if kind.needs_invertible_diffusion() && !input.problem.diffusion.invertible_on(&batch.grid.times) {
        return Err(Error::Unsupported(format!("{kind} needs an invertible diffusion coefficient")));
    }
    use LossKind::*;
    let est = match kind {
        DiscreteAdjoint => crate::adjoint::discrete_adjoint_on_batch(input.problem, input.ctrl, batch),
        ContinuousAdjoint => matching::adjoint_loss(input, crate::adjoint::AdjointKind::Continuous, false, false, opts),
        ContinuousAdjointStl => matching::adjoint_loss(input, crate::adjoint::AdjointKind::Continuous, true, false, opts),
        AdjointMatching => matching::adjoint_loss(input, crate::adjoint::AdjointKind::Lean, false, false, opts),
        AdjointMatchingStl => matching::adjoint_loss(input, crate::adjoint::AdjointKind::Lean, true, false, opts),
        SocmAdjoint => matching::adjoint_loss(input, crate::adjoint::AdjointKind::Lean, false, true, opts),
        Socm => matching::field_loss(input, matching::Field::Omega, true, opts),
        UnweightedSocm => matching::field_loss(input, matching::Field::Omega, false, opts),
        WorkSocm => matching::field_loss(input, matching::Field::Work, false, opts),
        CostSocm => matching::field_loss(input, matching::Field::Cost { stl: false }, false, opts),
        CostSocmStl => matching::field_loss(input, matching::Field::Cost { stl: true }, false, opts),
        Reinforce => score::reinforce(input, false),
        ReinforceFutureRewards => score::reinforce(input, true),
        CrossEntropy => score::cross_entropy(input, opts),
        Variance | LogVariance | Moment => score::variance_family(input, kind),
    }?;
    if est.diagnostics.degenerate {
        log::warn!("{kind}: importance weights are degenerate (ESS {:.3})", est.diagnostics.ess.unwrap_or(0.0));
    }
    Ok(est)
}

/// Matching vector fields whose samples serve as regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetField {
    /// SOCM's ω.
    Omega,
    /// ξ̃, matched by Work-SOCM.
    Work,
    /// ξ, matched by Cost-SOCM.
    Cost,
    /// ξ with the sticking-the-landing cost.
    CostStl,
}

/// Targets of `field` for every trajectory and step, laid out `[i][k][d]`.
pub fn field_targets(input: &LossInput, field: TargetField, opts: &LossOptions) -> Result<Vec<f64>> {
    if !input.problem.diffusion.invertible_on(&input.batch.grid.times) {
        return Err(Error::Unsupported("matching fields need an invertible diffusion coefficient".into()));
    }
    let f = match field {
        TargetField::Omega => matching::Field::Omega,
        TargetField::Work => matching::Field::Work,
        TargetField::Cost => matching::Field::Cost { stl: false },
        TargetField::CostStl => matching::Field::Cost { stl: true },
    };
    matching::all_targets(input, f, opts)
}

#[cfg(test)]
mod tests;
