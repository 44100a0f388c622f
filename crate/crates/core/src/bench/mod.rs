//! Evaluation metrics and the experiment harness.

mod experiment;
mod metrics;
mod oracle;

pub use experiment::{run_experiment, ControlSpec, ExperimentOutcome, ExperimentSpec, ReparamSpec, RunStatus, CSV_HEADER};
pub use metrics::{
    compare, control_l2_error, expected_gradient, gradient_equivalence_test, gradient_variance, EquivalenceReport,
    EvalMeasure, GradientProbe, GradientStats, L2Error, VarianceReport,
};
pub use oracle::{oracle_check, probe_points, OracleProbe};
