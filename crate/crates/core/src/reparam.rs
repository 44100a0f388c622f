//! Reparameterization matrices `M_t(s)` for the path-wise derivative trick.
//!
//! Learned families have the form `M_t(s) = φ(t,s)(I + (s - t) N(t,s))` where `N`
//! is a small network on `(t, s)` and `φ = (T - s)/(T - t)` when the family must
//! vanish at the horizon (`φ = 1` otherwise). Matrices are stored compactly: one
//! number for multiples of the identity, `d` for diagonal and `d²` for full forms.

use serde::{Deserialize, Serialize};

use crate::control::{Activation, Mlp};
use crate::error::{Error, Result};
use crate::simulate::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReparamForm {
    Identity,
    Scalar,
    Diagonal,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Structure {
    /// `I` (or the linear ramp to zero when vanishing).
    Fixed,
    Learned(Mlp),
    /// `max(0, 1 - (s-t)/w(t)) I` with `w(t) = max(h(T-t), min_width)`.
    Hat { h: f64, min_width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamFamily {
    pub form: ReparamForm,
    pub vanish_at_t: bool,
    pub dim: usize,
    pub horizon: f64,
    structure: Structure,
}

/// `M` and `∂ₛM` for every pair `k ≤ j` of grid nodes, in compact form.
#[derive(Debug, Clone)]
pub struct MTable {
    pub block: usize,
    pub steps: usize,
    pub m: Vec<f64>,
    pub dm: Vec<f64>,
    pub identity: bool,
}

impl MTable {
    #[inline]
    fn idx(&self, k: usize, j: usize) -> usize {
        (k * (self.steps + 1) + j) * self.block
    }
    #[inline]
    pub fn m(&self, k: usize, j: usize) -> &[f64] {
        let i = self.idx(k, j);
        &self.m[i..i + self.block]
    }
    #[inline]
    pub fn dm(&self, k: usize, j: usize) -> &[f64] {
        let i = self.idx(k, j);
        &self.dm[i..i + self.block]
    }
    pub fn zeros_like(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.m.len()], vec![0.0; self.dm.len()])
    }
}

/// `out = B v` for a compact block.
#[inline]
pub fn block_apply(block: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    match block.len() {
        1 => out.iter_mut().zip(v).for_each(|(o, x)| *o = block[0] * x),
        n if n == d => out.iter_mut().zip(v).zip(block).for_each(|((o, x), b)| *o = b * x),
        _ => crate::linalg::matvec(block, v, out),
    }
}

/// `out += B v`.
#[inline]
pub fn block_apply_add(block: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    match block.len() {
        1 => out.iter_mut().zip(v).for_each(|(o, x)| *o += block[0] * x),
        n if n == d => out.iter_mut().zip(v).zip(block).for_each(|((o, x), b)| *o += b * x),
        _ => crate::linalg::matvec_add(block, v, out),
    }
}

/// `G += c vᵀ` projected onto the block structure.
#[inline]
pub fn block_outer_add(grad: &mut [f64], c: &[f64], v: &[f64]) {
    let d = v.len();
    match grad.len() {
        1 => grad[0] += crate::linalg::dot(c, v),
        n if n == d => grad.iter_mut().zip(c).zip(v).for_each(|((g, a), b)| *g += a * b),
        _ => {
            for (r, &cr) in c.iter().enumerate() {
                crate::linalg::axpy(cr, v, &mut grad[r * d..(r + 1) * d]);
            }
        }
    }
}

impl ReparamFamily {
    /// `M = I` (or the ramp `(T-s)/(T-t) I` when vanishing).
    pub fn identity(dim: usize, horizon: f64, vanish_at_t: bool) -> Self {
        ReparamFamily { form: ReparamForm::Identity, vanish_at_t, dim, horizon, structure: Structure::Fixed }
    }

    /// Learned family with a zero-initialised output layer, i.e. starting from the fixed one.
    pub fn learned(form: ReparamForm, dim: usize, horizon: f64, vanish_at_t: bool, hidden: &[usize], seed: u64) -> Self {
        Self::learned_with_scale(form, dim, horizon, vanish_at_t, hidden, seed, 0.0)
    }

    /// Learned family whose output layer is random with scale `out_scale`.
    pub fn learned_with_scale(
        form: ReparamForm,
        dim: usize,
        horizon: f64,
        vanish_at_t: bool,
        hidden: &[usize],
        seed: u64,
        out_scale: f64,
    ) -> Self {
        if form == ReparamForm::Identity {
            return Self::identity(dim, horizon, vanish_at_t);
        }
        let out = match form {
            ReparamForm::Scalar => 1,
            ReparamForm::Diagonal => dim,
            _ => dim * dim,
        };
        let mut widths = vec![2];
        widths.extend_from_slice(hidden);
        widths.push(out);
        let net = if out_scale == 0.0 {
            Mlp::new(widths, Activation::Silu, seed)
        } else {
            Mlp::new_random(widths, Activation::Silu, seed, out_scale)
        };
        ReparamFamily { form, vanish_at_t, dim, horizon, structure: Structure::Learned(net) }
    }

    /// Triangular kernel of relative width `h`, which degenerates to a point mass as `h → 0`.
    pub fn hat(dim: usize, horizon: f64, h: f64, min_width: f64) -> Self {
        ReparamFamily {
            form: ReparamForm::Scalar,
            vanish_at_t: false,
            dim,
            horizon,
            structure: Structure::Hat { h, min_width },
        }
    }

    pub fn block_len(&self) -> usize {
        match (&self.structure, self.form) {
            (Structure::Learned(_), ReparamForm::Diagonal) => self.dim,
            (Structure::Learned(_), ReparamForm::Full) => self.dim * self.dim,
            _ => 1,
        }
    }

    /// `M ≡ I` with `∂ₛM ≡ 0`.
    pub fn is_identity(&self) -> bool {
        matches!(self.structure, Structure::Fixed) && !self.vanish_at_t
    }

    pub fn params(&self) -> &[f64] {
        match &self.structure {
            Structure::Learned(n) => &n.params,
            _ => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match &mut self.structure {
            Structure::Learned(n) => &mut n.params,
            _ => &mut [],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    fn unit(&self) -> Vec<f64> {
        let b = self.block_len();
        if b == self.dim * self.dim && b > 1 {
            crate::linalg::identity(self.dim)
        } else {
            vec![1.0; b]
        }
    }

    fn vanish(&self, t: f64, s: f64) -> (f64, f64) {
        let rem = self.horizon - t;
        if !self.vanish_at_t || rem <= 0.0 {
            (1.0, 0.0)
        } else {
            ((self.horizon - s) / rem, -1.0 / rem)
        }
    }

    /// `M_t(s)` and `∂ₛM_t(s)` in compact form; `fd_step` is the step for `∂ₛN`.
    pub fn eval(&self, t: f64, s: f64, fd_step: f64) -> (Vec<f64>, Vec<f64>) {
        let (phi, dphi) = self.vanish(t, s);
        let unit = self.unit();
        match &self.structure {
            Structure::Fixed => (unit.iter().map(|u| u * phi).collect(), unit.iter().map(|u| u * dphi).collect()),
            Structure::Hat { h, min_width } => {
                let w = (h * (self.horizon - t)).max(*min_width);
                let r = (s - t) / w;
                if r < 1.0 {
                    (vec![1.0 - r], vec![-1.0 / w])
                } else {
                    (vec![0.0], vec![0.0])
                }
            }
            Structure::Learned(net) => {
                let b = unit.len();
                let mut n0 = vec![0.0; b];
                let mut np = vec![0.0; b];
                let mut nm = vec![0.0; b];
                net.forward(&[t, s], &mut n0);
                net.forward(&[t, s + fd_step], &mut np);
                net.forward(&[t, s - fd_step], &mut nm);
                let lag = s - t;
                let mut m = vec![0.0; b];
                let mut dm = vec![0.0; b];
                for i in 0..b {
                    let base = unit[i] + lag * n0[i];
                    let dn = (np[i] - nm[i]) / (2.0 * fd_step);
                    m[i] = phi * base;
                    dm[i] = dphi * base + phi * (n0[i] + lag * dn);
                }
                (m, dm)
            }
        }
    }

    fn fd_step(grid: &TimeGrid) -> f64 {
        (0..grid.steps()).map(|k| grid.dt(k)).fold(f64::INFINITY, f64::min) / 10.0
    }

    /// Tabulates `M_{t_k}(t_j)` and `∂ₛM` for `0 ≤ k < K`, `k ≤ j ≤ K`.
    pub fn tabulate(&self, grid: &TimeGrid) -> MTable {
        let steps = grid.steps();
        let block = self.block_len();
        let mut m = vec![0.0; steps * (steps + 1) * block];
        let mut dm = vec![0.0; steps * (steps + 1) * block];
        let h = Self::fd_step(grid);
        for k in 0..steps {
            for j in k..=steps {
                let (a, b) = self.eval(grid.times[k], grid.times[j], h);
                let i = (k * (steps + 1) + j) * block;
                m[i..i + block].copy_from_slice(&a);
                dm[i..i + block].copy_from_slice(&b);
            }
        }
        MTable { block, steps, m, dm, identity: self.is_identity() }
    }

    /// Chains gradients with respect to the tabulated `M` and `∂ₛM` into the parameters.
    pub fn backprop(&self, grid: &TimeGrid, grad_m: &[f64], grad_dm: &[f64], out: &mut [f64]) -> Result<()> {
        let Structure::Learned(net) = &self.structure else {
            return Ok(());
        };
        let steps = grid.steps();
        let block = self.block_len();
        if grad_m.len() != steps * (steps + 1) * block || grad_dm.len() != grad_m.len() {
            return Err(Error::Shape { what: "M gradient", expected: steps * (steps + 1) * block, got: grad_m.len() });
        }
        let h = Self::fd_step(grid);
        let mut c0 = vec![0.0; block];
        let mut cp = vec![0.0; block];
        for k in 0..steps {
            let t = grid.times[k];
            for j in k..=steps {
                let s = grid.times[j];
                let i = (k * (steps + 1) + j) * block;
                let (gm, gd) = (&grad_m[i..i + block], &grad_dm[i..i + block]);
                if gm.iter().chain(gd).all(|v| *v == 0.0) {
                    continue;
                }
                let (phi, dphi) = self.vanish(t, s);
                let lag = s - t;
                for b in 0..block {
                    c0[b] = gm[b] * phi * lag + gd[b] * (dphi * lag + phi);
                    cp[b] = gd[b] * phi * lag / (2.0 * h);
                }
                net.backward(&[t, s], &c0, Some(out), None);
                if lag != 0.0 {
                    net.backward(&[t, s + h], &cp, Some(out), None);
                    cp.iter_mut().for_each(|v| *v = -*v);
                    net.backward(&[t, s - h], &cp, Some(out), None);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn families() -> Vec<ReparamFamily> {
        let mut v = vec![ReparamFamily::identity(2, 1.0, false), ReparamFamily::identity(2, 1.0, true)];
        for form in [ReparamForm::Scalar, ReparamForm::Diagonal, ReparamForm::Full] {
            for vanish in [false, true] {
                v.push(ReparamFamily::learned_with_scale(form, 2, 1.0, vanish, &[6], 3, 1.0));
            }
        }
        v
    }

    proptest! {
        #[test]
        fn m_is_identity_on_the_diagonal(t in 0.0f64..0.999) {
            for f in families() {
                let (m, _) = f.eval(t, t, 1e-5);
                let unit = f.unit();
                for (a, b) in m.iter().zip(&unit) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn vanishing_families_are_zero_at_the_horizon(t in 0.0f64..0.999) {
            for f in families().into_iter().filter(|f| f.vanish_at_t) {
                let (m, _) = f.eval(t, 1.0, 1e-5);
                prop_assert!(m.iter().all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn derivative_matches_finite_differences() {
        for f in families() {
            let (t, s, h) = (0.2, 0.55, 1e-5);
            let (_, dm) = f.eval(t, s, 1e-4);
            let (mp, _) = f.eval(t, s + h, 1e-4);
            let (mm, _) = f.eval(t, s - h, 1e-4);
            for i in 0..dm.len() {
                let fd = (mp[i] - mm[i]) / (2.0 * h);
                assert!((fd - dm[i]).abs() < 1e-6, "{:?}: {fd} vs {}", f.form, dm[i]);
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let grid = TimeGrid::uniform(1.0, 4);
        for f in families().into_iter().filter(|f| f.num_params() > 0) {
            let tab = f.tabulate(&grid);
            let gm: Vec<f64> = (0..tab.m.len()).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
            let gd: Vec<f64> = (0..tab.m.len()).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
            let objective = |fam: &ReparamFamily| {
                let t = fam.tabulate(&grid);
                let mut s = 0.0;
                for k in 0..4 {
                    for j in k..=4 {
                        let i = (k * 5 + j) * t.block;
                        for b in 0..t.block {
                            s += gm[i + b] * t.m[i + b] + gd[i + b] * t.dm[i + b];
                        }
                    }
                }
                s
            };
            let mut g = vec![0.0; f.num_params()];
            f.backprop(&grid, &gm, &gd, &mut g).unwrap();
            for p in [0, 3, f.num_params() / 2, f.num_params() - 1] {
                let mut a = f.clone();
                a.params_mut()[p] += 1e-6;
                let mut b = f.clone();
                b.params_mut()[p] -= 1e-6;
                let fd = (objective(&a) - objective(&b)) / 2e-6;
                assert!((fd - g[p]).abs() < 1e-5 * (1.0 + fd.abs()), "{:?} p{p}: {fd} vs {}", f.form, g[p]);
            }
        }
    }
}
