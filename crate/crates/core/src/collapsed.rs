//! Collapsed joint likelihood with the knot effects integrated out.
//!
//! With `w = [z; y]`, `Q = blockdiag(Q_z, Q_y)`, `A = [[B_u, 0], [G, B_v]]`,
//! `J = blockdiag(C*_u, C*_v)` and `D = diag(d_z, d_y)`, the marginal model is
//! `w ~ N(Q beta, A J A' + D)`. Writing `W = D^{-1/2} A`,
//! `L = chol(J^{-1} + W'W)` and `H = L^{-1} W'`,
//!
//! ```text
//! (A J A' + D)^{-1} = D^{-1/2} (I - H'H) D^{-1/2}
//! det(I - H'H) = det(I - HH') = prod(diag T)^2,  T = chol(I - HH')
//! ```
//!
//! so no `(n + n_s)`-square matrix is ever formed.
//!
//! Knot effects are carried in whitened coordinates `g~ = L_J^{-1} g`, i.e.
//! `A` is replaced by `A L_J` and `J` by the identity. The marginal
//! covariance is unchanged, `L = chol(I + W'W)`, `I - HH' = L^{-1} L^{-T}`
//! and hence `sum log t_ii = -sum log l_ii`. No inverse of a knot covariance
//! is ever needed.

use faer::Mat;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::JointDataset;
use crate::error::{Error, Result, Stage};
use crate::linalg;
use crate::reduced_rank::ReducedRankStructure;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian prior `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Vec<f64>,
    pub precision: Mat<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, cov: &Mat<f64>) -> Result<Self> {
        let l = linalg::cholesky(cov.as_ref())
            .ok_or_else(|| Error::Config("prior covariance is not positive definite".into()))?;
        Ok(Self {
            mean,
            precision: linalg::spd_inverse_from_chol(l.as_ref()),
        })
    }

    /// `N(mean, var * I)`
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::Config(format!("prior variance {var} must be positive")));
        }
        let p = mean.len();
        Ok(Self {
            mean,
            precision: Mat::from_fn(p, p, |i, j| if i == j { 1.0 / var } else { 0.0 }),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density up to its normalizing constant.
    pub fn log_kernel(&self, x: &[f64]) -> f64 {
        let r: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        -0.5 * linalg::dot(&r, &linalg::matvec(self.precision.as_ref(), &r))
    }
}

/// Stacked data vector `[z; y]`.
pub fn stacked_response(data: &JointDataset) -> Vec<f64> {
    data.z.iter().chain(&data.y).copied().collect()
}

/// `blockdiag(Q_z, Q_y)`, columns ordered `beta_z` then `beta_y`.
pub fn stacked_design(data: &JointDataset) -> Mat<f64> {
    let (n, n_s) = (data.n(), data.n_s());
    let (pz, py) = (data.qz.ncols(), data.qy.ncols());
    let mut q = Mat::<f64>::zeros(n + n_s, pz + py);
    for j in 0..pz {
        for i in 0..n {
            q[(i, j)] = data.qz[(i, j)];
        }
    }
    for j in 0..py {
        for i in 0..n_s {
            q[(n + i, pz + j)] = data.qy[(i, j)];
        }
    }
    q
}

/// Parameter-dependent factorizations, reusable for any `beta`.
#[derive(Debug, Clone)]
pub struct CollapsedWorkspace {
    pub d: Vec<f64>,
    /// `W'` in whitened knot coordinates, knots x observations
    pub wt: Mat<f64>,
    /// `W'W`, i.e. `K^{-1}` in whitened coordinates
    pub wtw: Mat<f64>,
    /// Cholesky factors of the diagonal blocks of `J`
    pub j_factors: Vec<Mat<f64>>,
    /// `chol(I + W'W)`
    pub l: Mat<f64>,
    /// `D^{-1/2} w`
    pub x_vec: Vec<f64>,
    /// `D^{-1/2} Q`
    pub x_mat: Mat<f64>,
    /// `H D^{-1/2} w`
    pub hx_vec: Vec<f64>,
    /// `H D^{-1/2} Q`
    pub hx_mat: Mat<f64>,
    /// `-1/2 sum log d_ii + sum log t_ii - (n + n_s)/2 log 2 pi`
    pub log_det_term: f64,
}

impl CollapsedWorkspace {
    pub fn new(rr: &ReducedRankStructure, data: &JointDataset) -> Result<Self> {
        let (n, n_s) = (rr.r_u.ncols(), rr.r_v.ncols());
        let (ku, kv) = (rr.n_star(), rr.n_v_star());
        let mut wt = Mat::<f64>::zeros(ku + kv, n + n_s);
        wt.as_mut().submatrix_mut(0, 0, ku, n).copy_from(rr.r_u.as_ref());
        wt.as_mut().submatrix_mut(0, n, ku, n_s).copy_from(rr.g_w.as_ref());
        wt.as_mut().submatrix_mut(ku, n, kv, n_s).copy_from(rr.r_v.as_ref());
        Self::from_whitened(
            &stacked_response(data),
            stacked_design(data),
            wt,
            rr.noise(),
            vec![rr.u.chol.clone(), rr.v.chol.clone()],
        )
    }

    /// Builds the workspace from an explicit `A`; `j_factors` are the lower
    /// Cholesky factors of the diagonal blocks of `J`, in column order of `a`.
    pub fn from_parts(
        response: &[f64],
        design: Mat<f64>,
        a: Mat<f64>,
        d: Vec<f64>,
        j_factors: Vec<Mat<f64>>,
    ) -> Result<Self> {
        assert_eq!(j_factors.iter().map(|f| f.nrows()).sum::<usize>(), a.ncols());
        let mut wt = Mat::<f64>::zeros(a.ncols(), a.nrows());
        let mut off = 0;
        for f in &j_factors {
            let k = f.nrows();
            let block = a.as_ref().subcols(off, k);
            let prod = linalg::matmul(f.transpose(), block.transpose());
            wt.as_mut().submatrix_mut(off, 0, k, a.nrows()).copy_from(prod.as_ref());
            off += k;
        }
        Self::from_whitened(response, design, wt, d, j_factors)
    }

    /// `wt = (A L_J)'` before noise scaling.
    pub fn from_whitened(
        response: &[f64],
        design: Mat<f64>,
        mut wt: Mat<f64>,
        d: Vec<f64>,
        j_factors: Vec<Mat<f64>>,
    ) -> Result<Self> {
        let big_n = wt.ncols();
        let k = wt.nrows();
        assert_eq!(response.len(), big_n);
        assert_eq!(design.nrows(), big_n);
        assert_eq!(d.len(), big_n);
        if let Some(i) = d.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::numerical(
                Stage::PosteriorPrecision,
                format!("noise variance {} at row {i} is not positive", d[i]),
            ));
        }
        let inv_sqrt: Vec<f64> = d.iter().map(|v| 1.0 / v.sqrt()).collect();
        for (j, s) in inv_sqrt.iter().enumerate() {
            for v in wt.col_mut(j).iter_mut() {
                *v *= s;
            }
        }
        let mut x_mat = design;
        scale_rows(&mut x_mat, &inv_sqrt);
        let x_vec: Vec<f64> = response.iter().zip(&inv_sqrt).map(|(w, s)| w * s).collect();

        let wtw = linalg::gram(wt.transpose());
        let mut m = wtw.clone();
        for i in 0..k {
            m[(i, i)] += 1.0;
        }
        let l = linalg::cholesky(m.as_ref())
            .ok_or_else(|| Error::numerical(Stage::PosteriorPrecision, "chol(J^-1 + W'W) failed"))?;

        let hx_vec = linalg::solve_lower_vec(l.as_ref(), &linalg::matvec(wt.as_ref(), &x_vec));
        let mut hx_mat = linalg::matmul(wt.as_ref(), x_mat.as_ref());
        linalg::solve_lower(l.as_ref(), &mut hx_mat);

        let log_det_term = -0.5 * d.iter().map(|v| v.ln()).sum::<f64>() - 0.5 * linalg::log_det_from_chol(l.as_ref())
            - 0.5 * big_n as f64 * LN_2PI;

        Ok(Self {
            d,
            wt,
            wtw,
            j_factors,
            l,
            x_vec,
            x_mat,
            hx_vec,
            hx_mat,
            log_det_term,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.d.len()
    }

    pub fn n_knots(&self) -> usize {
        self.wt.nrows()
    }

    /// `m = D^{-1/2} (w - Q beta)`
    pub fn scaled_residual(&self, beta: &[f64]) -> Vec<f64> {
        let xb = linalg::matvec(self.x_mat.as_ref(), beta);
        self.x_vec.iter().zip(&xb).map(|(a, b)| a - b).collect()
    }

    /// `log N(w | Q beta, A J A' + D)`
    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        let m = self.scaled_residual(beta);
        let hb = linalg::matvec(self.hx_mat.as_ref(), beta);
        let n: Vec<f64> = self.hx_vec.iter().zip(&hb).map(|(a, b)| a - b).collect();
        self.log_det_term - 0.5 * (linalg::dot(&m, &m) - linalg::dot(&n, &n))
    }

    /// `H = L^{-1} W'`, only for checks on small instances.
    pub fn explicit_h(&self) -> Mat<f64> {
        let mut h = self.wt.clone();
        linalg::solve_lower(self.l.as_ref(), &mut h);
        h
    }

    /// `T = chol(I - HH')` formed explicitly, only for checks.
    pub fn schur_factor(&self) -> Result<Mat<f64>> {
        let k = self.n_knots();
        let mut s = self.wtw.clone();
        linalg::solve_lower(self.l.as_ref(), &mut s);
        let mut s = s.transpose().to_owned();
        linalg::solve_lower(self.l.as_ref(), &mut s);
        for j in 0..k {
            for i in 0..k {
                s[(i, j)] = if i == j { 1.0 } else { 0.0 } - s[(i, j)];
            }
        }
        linalg::symmetrize(&mut s);
        linalg::cholesky(s.as_ref())
            .ok_or_else(|| Error::numerical(Stage::SchurComplement, "I - HH' is not positive definite"))
    }

    /// `J` rebuilt from its factors.
    pub fn j_matrix(&self) -> Mat<f64> {
        let k = self.n_knots();
        let mut j = Mat::<f64>::zeros(k, k);
        let mut off = 0;
        for f in &self.j_factors {
            let kb = f.nrows();
            let block = linalg::matmul(f.as_ref(), f.transpose());
            j.as_mut().submatrix_mut(off, off, kb, kb).copy_from(block.as_ref());
            off += kb;
        }
        j
    }

    /// `blockdiag(L_J) x`
    fn unwhiten(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        let mut off = 0;
        for f in &self.j_factors {
            let k = f.nrows();
            out.extend(linalg::lower_matvec(f.as_ref(), &x[off..off + k]));
            off += k;
        }
        out
    }

    /// Draw from the full conditional of `beta`, `N(B b, B)` with
    /// `B^{-1} = V^{-1} + Q' V_w^{-1} Q` and `b = V^{-1} mu + Q' V_w^{-1} w`.
    pub fn sample_beta<R: Rng + ?Sized>(&self, prior: &GaussianPrior, rng: &mut R) -> Result<Vec<f64>> {
        let (prec_chol, b) = self.beta_conditional(prior)?;
        let mut mean_part = linalg::solve_lower_vec(prec_chol.as_ref(), &b);
        for v in mean_part.iter_mut() {
            *v += rng.sample::<f64, _>(StandardNormal);
        }
        Ok(linalg::solve_lower_transpose_vec(prec_chol.as_ref(), &mean_part))
    }

    /// `(chol(B^{-1}), b)` of the `beta` full conditional.
    pub fn beta_conditional(&self, prior: &GaussianPrior) -> Result<(Mat<f64>, Vec<f64>)> {
        let p = self.x_mat.ncols();
        assert_eq!(prior.dim(), p);
        let mut prec = linalg::gram(self.x_mat.as_ref());
        let tilde = linalg::gram(self.hx_mat.as_ref());
        for j in 0..p {
            for i in 0..p {
                prec[(i, j)] += prior.precision[(i, j)] - tilde[(i, j)];
            }
        }
        let xt_x = linalg::tmatvec(self.x_mat.as_ref(), &self.x_vec);
        let xt_hx = linalg::tmatvec(self.hx_mat.as_ref(), &self.hx_vec);
        let prior_part = linalg::matvec(prior.precision.as_ref(), &prior.mean);
        let b: Vec<f64> = (0..p).map(|i| prior_part[i] + xt_x[i] - xt_hx[i]).collect();
        let chol = linalg::cholesky(prec.as_ref())
            .ok_or_else(|| Error::numerical(Stage::BetaPrecision, "beta precision is not positive definite"))?;
        Ok((chol, b))
    }

    /// Exact draw of the knot effects `g = (u*, v*)` given `beta`.
    ///
    /// The conditional is `N(B b, B)` with `b = A' D^{-1} (w - Q beta)` and
    /// `B = (J^{-1} + A' D^{-1} A)^{-1}`, which stays defined when some knots
    /// have no data support.
    pub fn recover_latents<R: Rng + ?Sized>(&self, beta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let (chol_b, mean) = self.latent_conditional(beta)?;
        let z: Vec<f64> = (0..mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let noise = linalg::lower_matvec(chol_b.as_ref(), &z);
        Ok(mean.iter().zip(&noise).map(|(a, b)| a + b).collect())
    }

    /// `(chol(B), B b)` of the knot-effect conditional, original coordinates.
    pub fn latent_conditional(&self, beta: &[f64]) -> Result<(Mat<f64>, Vec<f64>)> {
        let k = self.n_knots();
        // whitened coordinates: B~ = (I + W'W)^{-1} = L^{-T} L^{-1}
        let mut bmat = linalg::spd_inverse_from_chol(self.l.as_ref());
        linalg::symmetrize(&mut bmat);
        let scale = (0..k).map(|i| bmat[(i, i)].abs()).sum::<f64>() / k as f64;
        let (chol_b, _) = linalg::cholesky_jittered(bmat.as_ref(), 1e-12 * scale.max(f64::MIN_POSITIVE)).ok_or_else(
            || Error::numerical(Stage::LatentPrecision, "latent conditional covariance is not positive definite"),
        )?;
        let m = self.scaled_residual(beta);
        let b = linalg::matvec(self.wt.as_ref(), &m);
        let mean = self.unwhiten(&linalg::matvec(bmat.as_ref(), &b));
        // blockdiag(L_J) chol(B~) stays lower triangular
        let mut chol = chol_b;
        let mut off = 0;
        for f in &self.j_factors {
            let kb = f.nrows();
            let block = chol.as_ref().subrows(off, kb).to_owned();
            let prod = linalg::matmul(f.as_ref(), block.as_ref());
            chol.as_mut().subrows_mut(off, kb).copy_from(prod.as_ref());
            off += kb;
        }
        Ok((chol, mean))
    }
}

fn scale_rows(m: &mut Mat<f64>, s: &[f64]) {
    for j in 0..m.ncols() {
        for (v, f) in m.col_mut(j).iter_mut().zip(s) {
            *v *= f;
        }
    }
}

/// `log N(w | Q beta, A J A' + D)`.
pub fn log_collapsed_likelihood(beta: &[f64], rr: &ReducedRankStructure, data: &JointDataset) -> Result<f64> {
    Ok(CollapsedWorkspace::new(rr, data)?.log_likelihood(beta))
}

/// Dense `A J A' + D` rebuilt from the workspace, for checks on small instances.
pub fn dense_marginal_covariance(ws: &CollapsedWorkspace) -> Mat<f64> {
    let sqrt_d: Vec<f64> = ws.d.iter().map(|v| v.sqrt()).collect();
    let mut aw = ws.wt.transpose().to_owned();
    scale_rows(&mut aw, &sqrt_d);
    let mut s = linalg::matmul(aw.as_ref(), aw.transpose());
    for i in 0..s.nrows() {
        s[(i, i)] += ws.d[i];
    }
    linalg::symmetrize(&mut s);
    s
}

/// Dense `A J A' + D` from explicit blocks.
pub fn dense_covariance_from_blocks(a: &Mat<f64>, j: &Mat<f64>, d: &[f64]) -> Mat<f64> {
    let aj = linalg::matmul(a.as_ref(), j.as_ref());
    let mut s = linalg::matmul(aj.as_ref(), a.transpose());
    for i in 0..s.nrows() {
        s[(i, i)] += d[i];
    }
    linalg::symmetrize(&mut s);
    s
}

/// Multivariate normal log density through a dense Cholesky factorization.
pub fn dense_mvn_logpdf(x: &[f64], mean: &[f64], cov: &Mat<f64>) -> Result<f64> {
    let l = linalg::cholesky(cov.as_ref())
        .ok_or_else(|| Error::numerical(Stage::DenseCovariance, "covariance is not positive definite"))?;
    let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let z = linalg::solve_lower_vec(l.as_ref(), &r);
    Ok(-0.5 * linalg::log_det_from_chol(l.as_ref()) - 0.5 * linalg::dot(&z, &z) - 0.5 * x.len() as f64 * LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_parts(rng: &mut ChaCha8Rng, n: usize, ku: usize, kv: usize, p: usize) -> (Vec<f64>, Mat<f64>, Mat<f64>, Vec<f64>, Vec<Mat<f64>>) {
        let mut u = || rng.random_range(-1.0..1.0);
        let w: Vec<f64> = (0..n).map(|_| 3.0 * u()).collect();
        let q = Mat::from_fn(n, p, |_, _| u());
        let a = Mat::from_fn(n, ku + kv, |_, _| u());
        let d: Vec<f64> = (0..n).map(|_| 0.2 + u().abs()).collect();
        let mut factor = |k: usize| {
            let m = Mat::from_fn(k, k, |_, _| u());
            let mut s = linalg::matmul(m.as_ref(), m.transpose());
            for i in 0..k {
                s[(i, i)] += 0.5;
            }
            linalg::cholesky(s.as_ref()).unwrap()
        };
        let f = vec![factor(ku), factor(kv)];
        (w, q, a, d, f)
    }

    #[test]
    fn matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (w, q, a, d, f) = random_parts(&mut rng, 30, 6, 4, 3);
            let ws = CollapsedWorkspace::from_parts(&w, q.clone(), a, d, f).unwrap();
            let beta = vec![0.3, -1.0, 2.0];
            let mean = linalg::matvec(q.as_ref(), &beta);
            let dense = dense_mvn_logpdf(&w, &mean, &dense_marginal_covariance(&ws)).unwrap();
            let ll = ws.log_likelihood(&beta);
            assert!(((ll - dense) / dense).abs() < 1e-10, "{ll} vs {dense}");
        }
    }

    #[test]
    fn precision_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, q, a, d, f) = random_parts(&mut rng, 25, 5, 3, 2);
        let ws = CollapsedWorkspace::from_parts(&w, q, a, d.clone(), f).unwrap();
        let h = ws.explicit_h();
        let hth = linalg::tmatmul(h.as_ref(), h.as_ref());
        let n = d.len();
        let inv = Mat::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            (id - hth[(i, j)]) / (d[i] * d[j]).sqrt()
        });
        let prod = linalg::matmul(inv.as_ref(), dense_marginal_covariance(&ws).as_ref());
        assert!(linalg::max_abs_diff(prod.as_ref(), Mat::<f64>::identity(n, n).as_ref()) < 1e-9);
    }

    #[test]
    fn schur_log_det_is_negated_posterior_log_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (w, q, a, d, f) = random_parts(&mut rng, 20, 4, 3, 1);
        let ws = CollapsedWorkspace::from_parts(&w, q, a, d, f).unwrap();
        let t = ws.schur_factor().unwrap();
        let lt: f64 = (0..7).map(|i| t[(i, i)].ln()).sum();
        let ll: f64 = (0..7).map(|i| ws.l[(i, i)].ln()).sum();
        assert!((lt + ll).abs() < 1e-10, "{lt} vs {ll}");
    }

    #[test]
    fn zero_basis_is_independent_gaussians() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, q, _, d, f) = random_parts(&mut rng, 12, 3, 2, 2);
        let a = Mat::<f64>::zeros(12, 5);
        let ws = CollapsedWorkspace::from_parts(&w, q.clone(), a, d.clone(), f).unwrap();
        let beta = [1.0, -0.5];
        let mean = linalg::matvec(q.as_ref(), &beta);
        let want: f64 = (0..12)
            .map(|i| -0.5 * (LN_2PI + d[i].ln() + (w[i] - mean[i]).powi(2) / d[i]))
            .sum();
        assert!((ws.log_likelihood(&beta) - want).abs() < 1e-12 * want.abs());
    }

    #[test]
    fn two_dimensional_closed_form() {
        // one signal, one outcome, one knot: w = [z; y], A = [b; g]
        let (b, g, j, dz, dy): (f64, f64, f64, f64, f64) = (0.8, 1.3, 0.6, 0.2, 0.5);
        let a = Mat::from_fn(2, 1, |i, _| if i == 0 { b } else { g });
        let jf = Mat::from_fn(1, 1, |_, _| j.sqrt());
        let q = Mat::<f64>::zeros(2, 0);
        let w = [0.4, -1.1];
        let ws = CollapsedWorkspace::from_parts(&w, q, a, vec![dz, dy], vec![jf]).unwrap();
        let (s11, s12, s22) = (b * b * j + dz, b * g * j, g * g * j + dy);
        let det = s11 * s22 - s12 * s12;
        let quad = (s22 * w[0] * w[0] - 2.0 * s12 * w[0] * w[1] + s11 * w[1] * w[1]) / det;
        let want = -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
        assert!((ws.log_likelihood(&[]) - want).abs() < 1e-13);
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (w, q, a, d, f) = random_parts(&mut rng, 20, 4, 3, 2);
        let ws = CollapsedWorkspace::from_parts(&w, q.clone(), a.clone(), d.clone(), f.clone()).unwrap();
        let perm: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let qp = Mat::from_fn(20, 2, |i, j| q[(perm[i], j)]);
        let ap = Mat::from_fn(20, 7, |i, j| a[(perm[i], j)]);
        let dp: Vec<f64> = perm.iter().map(|&i| d[i]).collect();
        let wsp = CollapsedWorkspace::from_parts(&wp, qp, ap, dp, f).unwrap();
        let beta = [0.2, 0.9];
        assert!((ws.log_likelihood(&beta) - wsp.log_likelihood(&beta)).abs() < 1e-10);
    }

    fn dense_beta_posterior(ws: &CollapsedWorkspace, q: &Mat<f64>, w: &[f64], prior: &GaussianPrior) -> (Vec<f64>, Mat<f64>) {
        let sigma = dense_marginal_covariance(ws);
        let l = linalg::cholesky(sigma.as_ref()).unwrap();
        let si = linalg::spd_inverse_from_chol(l.as_ref());
        let qts = linalg::tmatmul(q.as_ref(), si.as_ref());
        let mut prec = linalg::matmul(qts.as_ref(), q.as_ref());
        let p = q.ncols();
        for j in 0..p {
            for i in 0..p {
                prec[(i, j)] += prior.precision[(i, j)];
            }
        }
        let b: Vec<f64> = linalg::matvec(qts.as_ref(), w)
            .iter()
            .zip(linalg::matvec(prior.precision.as_ref(), &prior.mean))
            .map(|(a, b)| a + b)
            .collect();
        let lp = linalg::cholesky(prec.as_ref()).unwrap();
        let cov = linalg::spd_inverse_from_chol(lp.as_ref());
        (linalg::matvec(cov.as_ref(), &b), cov)
    }

    #[test]
    fn beta_conditional_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, q, a, d, f) = random_parts(&mut rng, 25, 4, 3, 3);
        let ws = CollapsedWorkspace::from_parts(&w, q.clone(), a, d, f).unwrap();
        let prior = GaussianPrior::isotropic(vec![1.0, 0.0, -1.0], 4.0).unwrap();
        let (mean, cov) = dense_beta_posterior(&ws, &q, &w, &prior);
        let (lp, b) = ws.beta_conditional(&prior).unwrap();
        let inv = linalg::spd_inverse_from_chol(lp.as_ref());
        let m2 = linalg::matvec(inv.as_ref(), &b);
        for i in 0..3 {
            assert!((m2[i] - mean[i]).abs() < 1e-9);
        }
        assert!(linalg::max_abs_diff(inv.as_ref(), cov.as_ref()) < 1e-9);

        // draws have that mean and covariance
        let draws: Vec<Vec<f64>> = (0..20000).map(|_| ws.sample_beta(&prior, &mut rng).unwrap()).collect();
        for i in 0..3 {
            let m: f64 = draws.iter().map(|d| d[i]).sum::<f64>() / draws.len() as f64;
            let se = (cov[(i, i)] / draws.len() as f64).sqrt();
            assert!((m - mean[i]).abs() < 4.0 * se, "component {i}: {m} vs {}", mean[i]);
            let v: f64 = draws.iter().map(|d| (d[i] - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
            assert!((v / cov[(i, i)] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn beta_without_data_follows_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, _, a, d, f) = random_parts(&mut rng, 10, 2, 2, 2);
        let q = Mat::<f64>::zeros(10, 2);
        let ws = CollapsedWorkspace::from_parts(&w, q, a, d, f).unwrap();
        let prior = GaussianPrior::isotropic(vec![5.0, -3.0], 0.25).unwrap();
        let (lp, b) = ws.beta_conditional(&prior).unwrap();
        let inv = linalg::spd_inverse_from_chol(lp.as_ref());
        let m = linalg::matvec(inv.as_ref(), &b);
        assert!((m[0] - 5.0).abs() < 1e-12 && (m[1] + 3.0).abs() < 1e-12);
        assert!((inv[(0, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn latent_conditional_matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (w, q, a, d, f) = random_parts(&mut rng, 30, 4, 3, 2);
        let ws = CollapsedWorkspace::from_parts(&w, q.clone(), a.clone(), d.clone(), f).unwrap();
        let beta = [0.5, -0.2];
        // posterior of g: precision J^-1 + A'D^-1 A, mean cov * A'D^-1 (w - Q beta)
        let j = ws.j_matrix();
        let jinv = linalg::spd_inverse_from_chol(linalg::cholesky(j.as_ref()).unwrap().as_ref());
        let mut prec = Mat::from_fn(7, 7, |r, c| (0..30).map(|i| a[(i, r)] * a[(i, c)] / d[i]).sum::<f64>());
        for c in 0..7 {
            for r in 0..7 {
                prec[(r, c)] += jinv[(r, c)];
            }
        }
        let cov = linalg::spd_inverse_from_chol(linalg::cholesky(prec.as_ref()).unwrap().as_ref());
        let qb = linalg::matvec(q.as_ref(), &beta);
        let rhs: Vec<f64> = (0..7).map(|r| (0..30).map(|i| a[(i, r)] * (w[i] - qb[i]) / d[i]).sum()).collect();
        let mean = linalg::matvec(cov.as_ref(), &rhs);

        let (lb, m) = ws.latent_conditional(&beta).unwrap();
        let bb = linalg::matmul(lb.as_ref(), lb.transpose());
        for i in 0..7 {
            assert!((m[i] - mean[i]).abs() < 1e-8 * (1.0 + mean[i].abs()));
        }
        assert!(linalg::max_abs_diff(bb.as_ref(), cov.as_ref()) < 1e-8);

        let n = 20000;
        let mut acc = vec![0.0; 7];
        for _ in 0..n {
            let g = ws.recover_latents(&beta, &mut rng).unwrap();
            for i in 0..7 {
                acc[i] += g[i] / n as f64;
            }
        }
        for i in 0..7 {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((acc[i] - mean[i]).abs() < 4.0 * se);
        }
    }

    #[test]
    fn unsupported_knot_keeps_its_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (w, q, mut a, d, f) = random_parts(&mut rng, 15, 2, 1, 1);
        for i in 0..15 {
            a[(i, 2)] = 0.0;
        }
        let ws = CollapsedWorkspace::from_parts(&w, q, a, d, f).unwrap();
        let (lb, m) = ws.latent_conditional(&[0.0]).unwrap();
        let bb = linalg::matmul(lb.as_ref(), lb.transpose());
        let j = ws.j_matrix();
        // the v block is a single knot, independent of u and untouched by data
        assert!(m[2].abs() < 1e-12);
        assert!((bb[(2, 2)] - j[(2, 2)]).abs() < 1e-10 * j[(2, 2)]);
    }

    #[test]
    fn draws_are_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, q, a, d, f) = random_parts(&mut rng, 15, 3, 2, 2);
        let ws = CollapsedWorkspace::from_parts(&w, q, a, d, f).unwrap();
        let prior = GaussianPrior::isotropic(vec![0.0; 2], 100.0).unwrap();
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (ws.sample_beta(&prior, &mut r).unwrap(), ws.recover_latents(&[0.1, 0.2], &mut r).unwrap())
        };
        assert_eq!(run(42), run(42));
    }
}
