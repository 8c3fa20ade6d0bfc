//! Thin helpers over faer for the dense kernels used throughout the crate.
//!
//! Everything runs with `Par::Seq`; independent chains provide the
//! parallelism, and sequential kernels keep results bitwise reproducible.

use faer::linalg::matmul::triangular::BlockStructure;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{Accum, Mat, MatRef, Par, Side};

/// Lower Cholesky factor, or `None` if the matrix is not numerically positive definite.
pub fn cholesky(m: MatRef<'_, f64>) -> Option<Mat<f64>> {
    let llt = m.llt(Side::Lower).ok()?;
    let l = llt.L().to_owned();
    // faer accepts tiny pivots; reject anything that would blow up later solves
    for i in 0..l.nrows() {
        let d = l[(i, i)];
        if !(d.is_finite() && d > 0.0) {
            return None;
        }
    }
    Some(l)
}

/// Cholesky with a single diagonal-jitter retry.
///
/// Returns the factor and whether jitter was needed.
pub fn cholesky_jittered(m: MatRef<'_, f64>, jitter: f64) -> Option<(Mat<f64>, bool)> {
    if let Some(l) = cholesky(m) {
        return Some((l, false));
    }
    let mut j = m.to_owned();
    for i in 0..j.nrows() {
        j[(i, i)] += jitter;
    }
    cholesky(j.as_ref()).map(|l| (l, true))
}

/// Solves `L X = B` in place.
pub fn solve_lower(l: MatRef<'_, f64>, rhs: &mut Mat<f64>) {
    solve_lower_triangular_in_place(l, rhs.as_mut(), Par::Seq);
}

/// Solves `L' X = B` in place.
pub fn solve_lower_transpose(l: MatRef<'_, f64>, rhs: &mut Mat<f64>) {
    solve_upper_triangular_in_place(l.transpose(), rhs.as_mut(), Par::Seq);
}

pub fn solve_lower_vec(l: MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    let mut m = col_mat(b);
    solve_lower(l, &mut m);
    mat_col(&m, 0)
}

pub fn solve_lower_transpose_vec(l: MatRef<'_, f64>, b: &[f64]) -> Vec<f64> {
    let mut m = col_mat(b);
    solve_lower_transpose(l, &mut m);
    mat_col(&m, 0)
}

/// `(L L')^{-1}` from a lower Cholesky factor.
pub fn spd_inverse_from_chol(l: MatRef<'_, f64>) -> Mat<f64> {
    let n = l.nrows();
    let mut x = Mat::<f64>::identity(n, n);
    solve_lower(l, &mut x);
    solve_lower_transpose(l, &mut x);
    symmetrize(&mut x);
    x
}

pub fn log_det_from_chol(l: MatRef<'_, f64>) -> f64 {
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// `W' W`, computing the lower triangle once and mirroring it.
pub fn gram(w: MatRef<'_, f64>) -> Mat<f64> {
    let k = w.ncols();
    let mut g = Mat::<f64>::zeros(k, k);
    faer::linalg::matmul::triangular::matmul(
        g.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        w.transpose(),
        BlockStructure::Rectangular,
        w,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    for j in 0..k {
        for i in 0..j {
            g[(i, j)] = g[(j, i)];
        }
    }
    g
}

/// `A B`
pub fn matmul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::<f64>::zeros(a.nrows(), b.ncols());
    faer::linalg::matmul::matmul(out.as_mut(), Accum::Replace, a, b, 1.0, Par::Seq);
    out
}

/// `A' B`
pub fn tmatmul(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> Mat<f64> {
    matmul(a.transpose(), b)
}

pub fn matvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = a.col(j);
        for (o, v) in out.iter_mut().zip(col.iter()) {
            *o += v * xj;
        }
    }
    out
}

/// `A' x`
pub fn tmatvec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.nrows(), x.len());
    (0..a.ncols())
        .map(|j| a.col(j).iter().zip(x).map(|(v, xi)| v * xi).sum())
        .collect()
}

pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn col_mat(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn mat_col(m: &Mat<f64>, j: usize) -> Vec<f64> {
    m.col(j).iter().copied().collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular matrix times vector.
pub fn lower_matvec(l: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for i in j..n {
            out[i] += l[(i, j)] * xj;
        }
    }
    out
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    m
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    let mut s = 0.0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_matches_full_product() {
        let w = Mat::from_fn(7, 3, |i, j| ((i * 3 + j * 5) % 7) as f64 - 2.5);
        let g = gram(w.as_ref());
        let full = tmatmul(w.as_ref(), w.as_ref());
        assert!(max_abs_diff(g.as_ref(), full.as_ref()) < 1e-12);
    }

    #[test]
    fn inverse_from_chol() {
        let a = Mat::from_fn(4, 4, |i, j| if i == j { 4.0 } else { 1.0 / (1.0 + (i + j) as f64) });
        let l = cholesky(a.as_ref()).unwrap();
        let inv = spd_inverse_from_chol(l.as_ref());
        let id = matmul(a.as_ref(), inv.as_ref());
        assert!(max_abs_diff(id.as_ref(), Mat::<f64>::identity(4, 4).as_ref()) < 1e-12);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let a = Mat::from_fn(3, 3, |_, _| 1.0);
        assert!(cholesky(a.as_ref()).is_none());
        let (_, jittered) = cholesky_jittered(a.as_ref(), 1e-8).unwrap();
        assert!(jittered);
    }
}
