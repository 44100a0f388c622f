//! Deterministic parallel reductions over trajectories.
//!
//! Trajectories are grouped into fixed-size blocks; each block is reduced
//! sequentially and the block results are summed in index order, so the result
//! does not depend on the number of worker threads.

use rayon::prelude::*;

const BLOCK: usize = 32;

/// Caps the global pool at `SOCBENCH_THREADS` workers if that variable is set.
pub fn init_thread_pool() {
    if let Some(n) = std::env::var("SOCBENCH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // A second initialisation attempt is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Sums `f(i, acc)` over `0..m`, where `f` adds into an `n`-vector accumulator and
/// returns a scalar contribution.
pub fn sum_over<F>(m: usize, n: usize, f: F) -> (Vec<f64>, f64)
where
    F: Fn(usize, &mut [f64]) -> f64 + Sync,
{
    let n_blocks = m.div_ceil(BLOCK);
    let wave = 4 * rayon::current_num_threads().max(1);
    let mut acc = vec![0.0; n];
    let mut s = 0.0;
    // Waves bound the number of live accumulators when `n` is large.
    for start in (0..n_blocks).step_by(wave) {
        let blocks: Vec<(Vec<f64>, f64)> = (start..(start + wave).min(n_blocks))
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![0.0; n];
                let mut s = 0.0;
                for i in b * BLOCK..((b + 1) * BLOCK).min(m) {
                    s += f(i, &mut acc);
                }
                (acc, s)
            })
            .collect();
        for (a, v) in blocks {
            for (x, y) in acc.iter_mut().zip(&a) {
                *x += y;
            }
            s += v;
        }
    }
    (acc, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocked_sum_matches_sequential() {
        let (v, s) = sum_over(100, 2, |i, acc| {
            acc[0] += i as f64;
            acc[1] += 1.0;
            0.5
        });
        assert_eq!(v, vec![4950.0, 100.0]);
        assert_eq!(s, 50.0);
    }
}
