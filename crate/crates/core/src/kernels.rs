//! Covariance functions for the parent processes `u(s, x)` and `v(s)`.

use std::collections::HashMap;

use faer::Mat;

use crate::domain::{Location, SpaceHeightCoord};
use crate::linalg;

/// Relative diagonal jitter (times the process variance) tried once when a
/// square covariance matrix fails to factor.
pub const COINCIDENT_JITTER: f64 = 1e-8;

pub trait CovarianceFn<P> {
    /// `C(p, p)`
    fn variance(&self) -> f64;

    fn cov(&self, a: &P, b: &P) -> f64;

    fn cov_matrix(&self, a: &[P], b: &[P]) -> Mat<f64> {
        Mat::from_fn(a.len(), b.len(), |i, j| self.cov(&a[i], &b[j]))
    }
}

/// Entry-wise covariance matrix between two coordinate lists.
pub fn cov_matrix<P, K: CovarianceFn<P>>(kernel: &K, a: &[P], b: &[P]) -> Mat<f64> {
    kernel.cov_matrix(a, b)
}

/// Cholesky factor of a square covariance matrix under the coincident-point
/// jitter policy. Returns the factor and whether jitter was applied.
pub fn factor_covariance(m: &Mat<f64>, variance: f64) -> Option<(Mat<f64>, bool)> {
    linalg::cholesky_jittered(m.as_ref(), COINCIDENT_JITTER * variance)
}

/// Nonseparable space-height covariance
///
/// `C(l, l') = s2 / (a dx^2 + 1)^gamma * exp(-c |ds| / (a dx^2 + 1)^(gamma/2))`.
///
/// At `gamma = 0` it factors into `s2 * exp(-c |ds|)` and no longer depends on
/// height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GneitingKernel {
    pub sigma2: f64,
    pub a: f64,
    pub gamma: f64,
    pub c: f64,
}

impl GneitingKernel {
    pub fn new(sigma2: f64, a: f64, gamma: f64, c: f64) -> Self {
        Self { sigma2, a, gamma, c }
    }

    pub fn is_valid(&self) -> bool {
        self.sigma2 > 0.0 && self.a > 0.0 && self.c > 0.0 && (0.0..=1.0).contains(&self.gamma)
    }

    /// Covariance as a function of planar distance and absolute height lag.
    pub fn at_lag(&self, ds: f64, dx: f64) -> f64 {
        let psi = self.a * dx * dx + 1.0;
        self.sigma2 * psi.powf(-self.gamma) * (-self.c * ds * psi.powf(-self.gamma / 2.0)).exp()
    }
}

impl CovarianceFn<SpaceHeightCoord> for GneitingKernel {
    fn variance(&self) -> f64 {
        self.sigma2
    }

    fn cov(&self, l1: &SpaceHeightCoord, l2: &SpaceHeightCoord) -> f64 {
        self.at_lag(l1.loc.dist(&l2.loc), (l1.height - l2.height).abs())
    }

    /// Height factors depend only on the pair of heights, so they are
    /// tabulated once over the distinct heights on each side. When both sides
    /// repeat a few locations over a few height lags (gridded signals), the
    /// exponentials are also tabulated per (lag, location pair).
    fn cov_matrix(&self, a: &[SpaceHeightCoord], b: &[SpaceHeightCoord]) -> Mat<f64> {
        let (ha, ia) = distinct_heights(a);
        let (hb, ib) = distinct_heights(b);
        let nb = hb.len();

        let mut lag_lookup: HashMap<u64, usize> = HashMap::new();
        let mut lags = Vec::new();
        let lag_of: Vec<usize> = ha
            .iter()
            .flat_map(|x| hb.iter().map(move |xp| (x - xp).abs()))
            .map(|d| {
                *lag_lookup.entry(d.to_bits()).or_insert_with(|| {
                    lags.push(d);
                    lags.len() - 1
                })
            })
            .collect();
        let (la, ja) = distinct_locations(a);
        let (lb, jb) = distinct_locations(b);
        if lags.len() * la.len() * lb.len() * 2 <= a.len() * b.len() {
            let npair = la.len() * lb.len();
            let mut dist = Vec::with_capacity(npair);
            for s in &la {
                for t in &lb {
                    dist.push(s.dist(t));
                }
            }
            let mut table = vec![0.0; lags.len() * npair];
            for (l, dx) in lags.iter().enumerate() {
                let f = (self.a * dx * dx + 1.0).powf(-self.gamma);
                let (scale, decay) = (self.sigma2 * f, self.c * f.sqrt());
                for (out, d) in table[l * npair..(l + 1) * npair].iter_mut().zip(&dist) {
                    *out = scale * (-decay * d).exp();
                }
            }
            let mut m = Mat::<f64>::zeros(a.len(), b.len());
            for j in 0..b.len() {
                let (q, tb) = (ib[j], jb[j]);
                let col = m.col_mut(j);
                for (i, v) in col.iter_mut().enumerate() {
                    let l = lag_of[ia[i] * nb + q];
                    *v = table[l * npair + ja[i] * lb.len() + tb];
                }
            }
            return m;
        }

        let mut scale = vec![0.0; ha.len() * nb];
        let mut decay = vec![0.0; ha.len() * nb];
        for (p, x) in ha.iter().enumerate() {
            for (q, xp) in hb.iter().enumerate() {
                let dx = x - xp;
                let f = (self.a * dx * dx + 1.0).powf(-self.gamma);
                scale[p * nb + q] = self.sigma2 * f;
                decay[p * nb + q] = self.c * f.sqrt();
            }
        }
        let mut m = Mat::<f64>::zeros(a.len(), b.len());
        for (j, lb) in b.iter().enumerate() {
            let q = ib[j];
            let col = m.col_mut(j);
            for (i, v) in col.iter_mut().enumerate() {
                let la = &a[i];
                let t = ia[i] * nb + q;
                let d = la.loc.dist(&lb.loc);
                *v = scale[t] * (-decay[t] * d).exp();
            }
        }
        m
    }
}

fn distinct_heights(coords: &[SpaceHeightCoord]) -> (Vec<f64>, Vec<usize>) {
    let mut lookup: HashMap<u64, usize> = HashMap::new();
    let mut values = Vec::new();
    let idx = coords
        .iter()
        .map(|c| {
            *lookup.entry(c.height.to_bits()).or_insert_with(|| {
                values.push(c.height);
                values.len() - 1
            })
        })
        .collect();
    (values, idx)
}

fn distinct_locations(coords: &[SpaceHeightCoord]) -> (Vec<Location>, Vec<usize>) {
    let mut lookup: HashMap<(u64, u64), usize> = HashMap::new();
    let mut values = Vec::new();
    let idx = coords
        .iter()
        .map(|c| {
            *lookup.entry(c.loc.key()).or_insert_with(|| {
                values.push(c.loc);
                values.len() - 1
            })
        })
        .collect();
    (values, idx)
}

/// `C(s, s') = s2 * exp(-phi |s - s'|)`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialKernel {
    pub sigma2: f64,
    pub phi: f64,
}

impl ExponentialKernel {
    pub fn new(sigma2: f64, phi: f64) -> Self {
        Self { sigma2, phi }
    }

    pub fn at_distance(&self, d: f64) -> f64 {
        self.sigma2 * (-self.phi * d).exp()
    }
}

impl CovarianceFn<Location> for ExponentialKernel {
    fn variance(&self) -> f64 {
        self.sigma2
    }

    fn cov(&self, a: &Location, b: &Location) -> f64 {
        self.at_distance(a.dist(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table1() -> GneitingKernel {
        GneitingKernel::new(0.2, 12.0, 0.9, 5.0)
    }

    fn shc(s1: f64, s2: f64, x: f64) -> SpaceHeightCoord {
        SpaceHeightCoord::new(Location::new(s1, s2), x)
    }

    #[test]
    fn zero_separation_gives_variance() {
        let k = table1();
        let l = shc(0.3, 1.2, 2.0);
        assert_eq!(k.cov(&l, &l), 0.2);
        let e = ExponentialKernel::new(0.5, 2.0);
        assert_eq!(e.cov(&l.loc, &l.loc), 0.5);
    }

    #[test]
    fn separable_at_gamma_zero() {
        let k = GneitingKernel::new(0.7, 3.0, 0.0, 1.5);
        for dx in [0.0, 0.4, 3.0] {
            let v = k.at_lag(0.8, dx);
            assert!((v - 0.7 * (-1.5f64 * 0.8).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn table1_reference_value() {
        // (12 * 0.25 + 1) = 4; 0.2 * 4^-0.9 * exp(-5 * 0.1 * 4^-0.45)
        // reference from a 30-digit evaluation: 0.04393490364881659937...
        let v = table1().at_lag(0.1, 0.5);
        assert!((v - 0.043_934_903_648_816_6).abs() < 1e-15, "{v}");
        assert!((v - 0.0439).abs() < 5e-5);
    }

    #[test]
    fn exponential_reference_values() {
        let e = ExponentialKernel::new(0.5, 2.0);
        assert!((e.at_distance(1.0) - 0.067_667_641_618_306_35).abs() < 1e-15);
        assert!((e.at_distance(0.5) - 0.183_939_720_585_721_17).abs() < 1e-15);
    }

    #[test]
    fn fast_builder_matches_scalar_formula() {
        let k = table1();
        let a: Vec<_> = (0..9).map(|i| shc(i as f64 * 0.3, 0.1 * i as f64, (i % 3) as f64)).collect();
        let b: Vec<_> = (0..5).map(|i| shc(0.5, i as f64 * 0.7, 0.25 * i as f64)).collect();
        let m = cov_matrix(&k, &a, &b);
        for i in 0..a.len() {
            for j in 0..b.len() {
                let want = k.cov(&a[i], &b[j]);
                assert!((m[(i, j)] - want).abs() <= 1e-14 * want.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn tabulated_grid_path_matches_scalar_formula() {
        let k = table1();
        let locs: Vec<Location> = (0..4).map(|i| Location::new(0.3 * i as f64, 1.0 - 0.2 * i as f64)).collect();
        let grid = |hs: &[f64]| -> Vec<SpaceHeightCoord> {
            locs.iter().flat_map(|l| hs.iter().map(move |&h| SpaceHeightCoord::new(*l, h))).collect()
        };
        let a = grid(&[0.0, 0.5, 1.0, 1.5, 2.0, 2.5]);
        let b = grid(&[0.0, 1.0, 2.0]);
        let m = cov_matrix(&k, &a, &b);
        for i in 0..a.len() {
            for j in 0..b.len() {
                let want = k.cov(&a[i], &b[j]);
                assert!((m[(i, j)] - want).abs() <= 1e-14 * want);
            }
        }
    }

    #[test]
    fn square_matrix_symmetric_with_variance_diagonal() {
        let k = table1();
        let a: Vec<_> = (0..6).map(|i| shc(i as f64 * 0.2, 1.0, i as f64 * 0.5)).collect();
        let m = cov_matrix(&k, &a, &a);
        for i in 0..6 {
            assert!((m[(i, i)] - 0.2).abs() < 1e-15);
            for j in 0..6 {
                assert_eq!(m[(i, j)], m[(j, i)]);
            }
        }
        let single = cov_matrix(&k, &a[..1], &a[..1]);
        assert_eq!((single.nrows(), single.ncols()), (1, 1));
    }

    #[test]
    fn twenty_random_points_positive_definite() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..20)
            .map(|_| shc(rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..5.0)))
            .collect();
        let m = cov_matrix(&table1(), &pts, &pts);
        let eig = m.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(min > 0.0, "min eigenvalue {min}");
    }

    #[test]
    fn jitter_policy_handles_duplicates() {
        let k = table1();
        let p = shc(1.0, 1.0, 1.0);
        let m = cov_matrix(&k, &[p, p], &[p, p]);
        let (_, jittered) = factor_covariance(&m, k.sigma2).unwrap();
        assert!(jittered);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cholesky_succeeds_on_distinct_points(
            pts in proptest::collection::vec((0.0f64..4.0, 0.0f64..4.0, 0.0f64..5.0), 2..50),
            s2 in 0.05f64..3.0, a in 0.01f64..30.0, gamma in 0.0f64..=1.0, c in 0.1f64..10.0,
        ) {
            let k = GneitingKernel::new(s2, a, gamma, c);
            let coords: Vec<_> = pts.iter().map(|&(x, y, h)| shc(x, y, h)).collect();
            let m = cov_matrix(&k, &coords, &coords);
            let eig = m.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(min > -1e-10 * s2);
            prop_assert!(factor_covariance(&m, s2).is_some());
        }

        #[test]
        fn monotone_and_symmetric(
            ds in 0.0f64..5.0, dx in 0.0f64..5.0, step in 0.0f64..1.0,
            a in 0.01f64..30.0, gamma in 0.0f64..=1.0, c in 0.1f64..10.0,
        ) {
            let k = GneitingKernel::new(1.0, a, gamma, c);
            prop_assert!(k.at_lag(ds + step, dx) <= k.at_lag(ds, dx));
            // in the height lag the covariance only decreases while c*|ds| <= 2
            if c * ds <= 2.0 {
                prop_assert!(k.at_lag(ds, dx + step) <= k.at_lag(ds, dx) * (1.0 + 1e-15));
            }
            let l1 = shc(0.0, 0.0, 1.0);
            let l2 = shc(ds, 0.3, 1.0 + dx);
            prop_assert_eq!(k.cov(&l1, &l2), k.cov(&l2, &l1));
            let e = ExponentialKernel::new(1.0, c);
            prop_assert!(e.at_distance(ds + step) <= e.at_distance(ds));
        }
    }
}
