//! Small dense helpers on row-major slices.
//!
//! Dimensions in this crate are small (tens at most), so plain loops beat any
//! allocation-heavy abstraction in the inner simulation loops.

/// `out = A x` for a row-major `n x n` matrix.
#[inline]
pub fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let row = &a[i * n..(i + 1) * n];
        *o = dot(row, x);
    }
}

/// `out = Aᵀ x` for a row-major `n x n` matrix.
#[inline]
pub fn matvec_t(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    out[..n].iter_mut().for_each(|o| *o = 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let row = &a[i * n..(i + 1) * n];
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * xi;
        }
    }
}

/// `out += A x`.
#[inline]
pub fn matvec_add(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate().take(n) {
        *o += dot(&a[i * n..(i + 1) * n], x);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

pub fn to_dmatrix(a: &[f64], n: usize) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_row_slice(n, n, a)
}

pub fn from_dmatrix(m: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Unbiased sample variance.
pub fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_product_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let x = [0.5, -1.0];
        let mut y = [0.0; 2];
        matvec_t(&a, &x, &mut y);
        assert_eq!(y, [1.0 * 0.5 - 3.0, 2.0 * 0.5 - 4.0]);
        matvec(&a, &x, &mut y);
        assert_eq!(y, [0.5 - 2.0, 1.5 - 4.0]);
    }

    #[test]
    fn mean_se_of_constant_is_zero() {
        let (m, se) = mean_se(&[2.0; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }
}
