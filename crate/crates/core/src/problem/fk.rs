//! Monte Carlo Feynman–Kac estimate of the value function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::SocProblem;

#[derive(Debug, Clone, Copy)]
pub struct FkEstimate {
    pub value: f64,
    /// Delta-method standard error of `value`.
    pub se: f64,
}

/// `V(x,t) = -log E[exp(-∫ₜᵀ f ds - g(X_T))]` along uncontrolled Euler paths from `x`.
pub fn feynman_kac_value(problem: &SocProblem, x: &[f64], t: f64, m: usize, steps: usize, seed: u64) -> FkEstimate {
    let d = problem.dim;
    let dt = (problem.horizon - t) / steps as f64;
    let sq = dt.sqrt();
    let log_w: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut xs = x.to_vec();
            let mut b = vec![0.0; d];
            let mut z = vec![0.0; d];
            let mut sz = vec![0.0; d];
            let mut work = 0.0;
            for k in 0..steps {
                let s = t + k as f64 * dt;
                work += problem.state_cost.value(&xs, s) * dt;
                problem.drift.eval(&xs, s, &mut b);
                for zi in z.iter_mut() {
                    *zi = rng.sample::<f64, _>(StandardNormal) * sq;
                }
                problem.diffusion.apply(s, &z, &mut sz);
                for j in 0..d {
                    xs[j] += b[j] * dt + sz[j];
                }
            }
            -(work + problem.terminal_cost.value(&xs, problem.horizon))
        })
        .collect();
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - shift).exp()).collect();
    let (mean, se) = crate::linalg::mean_se(&w);
    FkEstimate { value: -(mean.ln() + shift), se: se / mean }
}

/// Richardson extrapolation `2V_h - V_2h` of [`feynman_kac_value`], with the coarse path
/// driven by pairwise sums of the fine increments. `steps` is the fine step count (even).
pub fn feynman_kac_extrapolated(
    problem: &SocProblem,
    x: &[f64],
    t: f64,
    m: usize,
    steps: usize,
    seed: u64,
) -> FkEstimate {
    let d = problem.dim;
    let steps = steps + steps % 2;
    let dt = (problem.horizon - t) / steps as f64;
    let sq = dt.sqrt();
    let pairs: Vec<(f64, f64)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let (mut xf, mut xc) = (x.to_vec(), x.to_vec());
            let (mut b, mut z, mut zc, mut sz) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
            let (mut wf, mut wc) = (0.0, 0.0);
            for k in 0..steps {
                let s = t + k as f64 * dt;
                for zi in z.iter_mut() {
                    *zi = rng.sample::<f64, _>(StandardNormal) * sq;
                }
                wf += problem.state_cost.value(&xf, s) * dt;
                problem.drift.eval(&xf, s, &mut b);
                problem.diffusion.apply(s, &z, &mut sz);
                for j in 0..d {
                    xf[j] += b[j] * dt + sz[j];
                    zc[j] += z[j];
                }
                if k % 2 == 1 {
                    let s = s - dt;
                    wc += problem.state_cost.value(&xc, s) * 2.0 * dt;
                    problem.drift.eval(&xc, s, &mut b);
                    problem.diffusion.apply(s, &zc, &mut sz);
                    for j in 0..d {
                        xc[j] += b[j] * 2.0 * dt + sz[j];
                    }
                    zc.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let g = |x: &[f64]| problem.terminal_cost.value(x, problem.horizon);
            (-(wf + g(&xf)), -(wc + g(&xc)))
        })
        .collect();
    let shift = pairs.iter().map(|p| p.0.max(p.1)).fold(f64::NEG_INFINITY, f64::max);
    let wf: Vec<f64> = pairs.iter().map(|p| (p.0 - shift).exp()).collect();
    let wc: Vec<f64> = pairs.iter().map(|p| (p.1 - shift).exp()).collect();
    let (mf, mc) = (wf.iter().sum::<f64>() / m as f64, wc.iter().sum::<f64>() / m as f64);
    let value = 2.0 * -(mf.ln() + shift) - -(mc.ln() + shift);
    // Delta method on the paired influence terms.
    let infl: Vec<f64> = wf.iter().zip(&wc).map(|(f, c)| -2.0 * f / mf + c / mc).collect();
    let (_, se) = crate::linalg::mean_se(&infl);
    FkEstimate { value, se }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_setting, Setting, SettingConfig};

    #[test]
    fn scalar_lq_value_is_half_log_two() {
        // E[exp(-½B₁²)] = 2^{-1/2}, and Euler is exact for b = 0, f = 0.
        let (p, _) = make_setting(&SettingConfig::named(Setting::Lq1d)).unwrap();
        let exact = 0.5 * 2f64.ln();
        for est in [feynman_kac_value(&p, &[0.0], 0.0, 20_000, 10, 1), feynman_kac_extrapolated(&p, &[0.0], 0.0, 20_000, 10, 1)] {
            assert!((est.value - exact).abs() < 3.0 * est.se, "{} ± {} vs {exact}", est.value, est.se);
        }
    }
}
