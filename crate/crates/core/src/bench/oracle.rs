//! Ground-truth oracles checked against Monte Carlo Feynman–Kac estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::problem::{feynman_kac_extrapolated, GroundTruth, InitialLaw, SocProblem};
use crate::train::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleProbe {
    pub x: Vec<f64>,
    pub t: f64,
    pub oracle: f64,
    pub monte_carlo: f64,
    pub se: f64,
    pub pass: bool,
}

/// Probe points spread around the initial state, alternating between `t = 0` and `t = T/2`.
pub fn probe_points(problem: &SocProblem, n: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    let d = problem.dim;
    let center = match &problem.initial {
        InitialLaw::Point(x) | InitialLaw::Gaussian { mean: x, .. } => x.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = if i % 2 == 0 { 0.0 } else { 0.5 * problem.horizon };
            let x = if d == 1 {
                vec![center[0] - 1.5 + 3.0 * i as f64 / (n.max(2) - 1) as f64]
            } else {
                center.iter().map(|c| c + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            (x, t)
        })
        .collect()
}

/// Compares `gt.value` with extrapolated Feynman–Kac estimates at `probes` (`steps` fine
/// steps); a probe passes within
/// `multiplier` standard errors.
pub fn oracle_check(
    problem: &SocProblem,
    gt: &GroundTruth,
    probes: &[(Vec<f64>, f64)],
    m: usize,
    steps: usize,
    seed: u64,
    multiplier: f64,
) -> Vec<OracleProbe> {
    probes
        .iter()
        .enumerate()
        .map(|(i, (x, t))| {
            let oracle = gt.value(x, *t);
            let fk = feynman_kac_extrapolated(problem, x, *t, m, steps, derive_seed(seed, i as u64));
            OracleProbe {
                x: x.clone(),
                t: *t,
                oracle,
                monte_carlo: fk.value,
                se: fk.se,
                pass: (oracle - fk.value).abs() <= multiplier * fk.se,
            }
        })
        .collect()
}
