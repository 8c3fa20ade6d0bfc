//! Predictive-process bases, bias-adjustment variances and knot selection.
//!
//! For knots `K` and a target `t`, the basis row solves `C(K, K) b = C(K, t)`
//! and the bias-adjustment variance is `C(t, t) - C(t, K) b`. The knot
//! covariance is factored once and reused for every target.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::domain::{JointDataset, Location, ModelParams, SpaceHeightCoord};
use crate::error::{Error, Result, Stage};
use crate::kernels::{self, CovarianceFn, ExponentialKernel, GneitingKernel};
use crate::linalg;

/// Relative tolerance (times the process variance) below which a negative
/// bias-adjustment variance is treated as round-off and clamped to zero.
pub const DELTA2_CLAMP: f64 = 1e-12;

/// Spatial knots for `u` and `v`, and height knots for `u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub spatial_u: Vec<Location>,
    pub spatial_v: Vec<Location>,
    pub heights: Vec<f64>,
}

impl KnotSet {
    pub fn new(spatial_u: Vec<Location>, spatial_v: Vec<Location>, mut heights: Vec<f64>) -> Result<Self> {
        heights.sort_by(f64::total_cmp);
        let ks = Self {
            spatial_u,
            spatial_v,
            heights,
        };
        ks.validate()?;
        Ok(ks)
    }

    /// Knots at the data: `S*_u = S*_v = S` and `X* = X`.
    pub fn at_data(data: &JointDataset) -> Self {
        Self {
            spatial_u: data.plots.clone(),
            spatial_v: data.plots.clone(),
            heights: data.heights.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial_u.is_empty() || self.spatial_v.is_empty() || self.heights.is_empty() {
            return Err(Error::Config("every knot set needs at least one knot".into()));
        }
        for (name, set) in [("u", &self.spatial_u), ("v", &self.spatial_v)] {
            for i in 0..set.len() {
                for j in 0..i {
                    if set[i] == set[j] {
                        return Err(Error::Config(format!(
                            "duplicate spatial knot ({}, {}) in the {name} set",
                            set[i].s1, set[i].s2
                        )));
                    }
                }
            }
        }
        if self.heights.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("height knots must be distinct".into()));
        }
        Ok(())
    }

    pub fn n_u(&self) -> usize {
        self.spatial_u.len()
    }

    pub fn n_v(&self) -> usize {
        self.spatial_v.len()
    }

    pub fn n_x(&self) -> usize {
        self.heights.len()
    }

    /// `n* = n*_u * n*_x`
    pub fn n_star(&self) -> usize {
        self.n_u() * self.n_x()
    }

    /// Space-height knots, spatial-knot-major: index `j * n*_x + k`.
    pub fn joint_u(&self) -> Vec<SpaceHeightCoord> {
        plot_height_coords(&self.spatial_u, &self.heights)
    }
}

/// `(s_j, x_k)` for all pairs, location-major.
pub fn plot_height_coords(locs: &[Location], heights: &[f64]) -> Vec<SpaceHeightCoord> {
    locs.iter()
        .flat_map(|s| heights.iter().map(move |&x| SpaceHeightCoord::new(*s, x)))
        .collect()
}

/// Basis rows and bias-adjustment variances for a list of targets.
#[derive(Debug, Clone)]
pub struct Basis {
    /// targets x knots
    pub matrix: Mat<f64>,
    pub delta2: Vec<f64>,
}

/// Factored knot covariance for one process.
#[derive(Debug, Clone)]
pub struct KnotFactor<P> {
    pub knots: Vec<P>,
    pub cov: Mat<f64>,
    pub chol: Mat<f64>,
    pub variance: f64,
    pub jittered: bool,
}

impl<P: Clone + std::fmt::Debug> KnotFactor<P> {
    pub fn new<K: CovarianceFn<P>>(kernel: &K, knots: &[P]) -> Result<Self> {
        let cov = kernel.cov_matrix(knots, knots);
        let variance = kernel.variance();
        match kernels::factor_covariance(&cov, variance) {
            Some((chol, jittered)) => Ok(Self {
                knots: knots.to_vec(),
                cov,
                chol,
                variance,
                jittered,
            }),
            None => {
                let (i, j) = most_correlated_pair(&cov);
                Err(Error::numerical(
                    Stage::KnotCovariance,
                    format!(
                        "knot covariance singular after jitter; offending knots #{i} {:?} and #{j} {:?}",
                        knots[i], knots[j]
                    ),
                ))
            }
        }
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    /// `L^{-1} C(K, t)` (knots x targets) and `delta2` at `targets`, where
    /// `L L' = C(K, K)`. The basis row is `L^{-T}` applied to the column.
    pub fn whiten<K: CovarianceFn<P>>(&self, kernel: &K, targets: &[P]) -> Result<Whitened> {
        let mut r = kernel.cov_matrix(&self.knots, targets);
        linalg::solve_lower(self.chol.as_ref(), &mut r);
        let mut delta2 = Vec::with_capacity(targets.len());
        for (t, target) in targets.iter().enumerate() {
            let explained: f64 = r.col(t).iter().map(|v| v * v).sum();
            let d = kernel.cov(target, target) - explained;
            delta2.push(clamp_delta2(d, self.variance, target)?);
        }
        Ok(Whitened { r, delta2 })
    }

    /// Basis rows and `delta2` at `targets`.
    pub fn basis<K: CovarianceFn<P>>(&self, kernel: &K, targets: &[P]) -> Result<Basis> {
        let Whitened { mut r, delta2 } = self.whiten(kernel, targets)?;
        linalg::solve_lower_transpose(self.chol.as_ref(), &mut r);
        Ok(Basis {
            matrix: r.transpose().to_owned(),
            delta2,
        })
    }

    /// Maps whitened knot effects `L^{-1} g` back to `g`.
    pub fn unwhiten(&self, white: &[f64]) -> Vec<f64> {
        linalg::lower_matvec(self.chol.as_ref(), white)
    }

    /// `L^{-1} g`
    pub fn whiten_effects(&self, g: &[f64]) -> Vec<f64> {
        linalg::solve_lower_vec(self.chol.as_ref(), g)
    }
}

/// Cross-covariances in whitened knot coordinates.
#[derive(Debug, Clone)]
pub struct Whitened {
    /// knots x targets, `L^{-1} C(K, T)`
    pub r: Mat<f64>,
    pub delta2: Vec<f64>,
}

fn clamp_delta2<P: std::fmt::Debug>(d: f64, variance: f64, target: &P) -> Result<f64> {
    if d >= 0.0 {
        Ok(d)
    } else if d > -DELTA2_CLAMP * variance {
        Ok(0.0)
    } else {
        Err(Error::numerical(
            Stage::KnotCovariance,
            format!("negative bias-adjustment variance {d:e} at {target:?}"),
        ))
    }
}

fn most_correlated_pair(cov: &Mat<f64>) -> (usize, usize) {
    let n = cov.nrows();
    let mut best = (0, 0);
    let mut best_r = f64::NEG_INFINITY;
    for j in 0..n {
        for i in 0..j {
            let r = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
            if r > best_r {
                best_r = r;
                best = (i, j);
            }
        }
    }
    best
}

/// Basis and bias-adjustment variances for `targets` under `kernel` and `knots`.
pub fn build_basis<P: Clone + std::fmt::Debug, K: CovarianceFn<P>>(
    kernel: &K,
    knots: &[P],
    targets: &[P],
) -> Result<Basis> {
    KnotFactor::new(kernel, knots)?.basis(kernel, targets)
}

/// All reduced-rank quantities for one parameter value.
///
/// Basis matrices are stored in whitened knot coordinates: with
/// `C*_u = L_u L_u'`, `r_u = L_u^{-1} C(L*, L)` so that `B_u = r_u' L_u^{-1}`
/// and `B_u C*_u B_u' = r_u' r_u`. The plain bases are available through the
/// accessor methods.
#[derive(Debug, Clone)]
pub struct ReducedRankStructure {
    pub u: KnotFactor<SpaceHeightCoord>,
    pub v: KnotFactor<Location>,
    pub knot_heights: Vec<f64>,
    /// n* x n
    pub r_u: Mat<f64>,
    /// n* x (n_s * n*_x), column `j * n*_x + k` for `(s_j, x*_k)`
    pub r_plot: Mat<f64>,
    /// n*_v x n_s
    pub r_v: Mat<f64>,
    /// n* x n_s, column j is `sum_k alpha_k r_plot[:, j * n*_x + k]`
    pub g_w: Mat<f64>,
    pub delta2_u: Vec<f64>,
    /// `delta2_u(s_j, x*_k)` at index `j * n*_x + k`
    pub delta2_u_plot: Vec<f64>,
    pub delta2_v: Vec<f64>,
    /// `tau2_z(x_k) + delta2_u(l_i)`
    pub d_z: Vec<f64>,
    /// `tau2_y + sum_k alpha_k^2 delta2_u(s_j, x*_k) + delta2_v(s_j)`
    pub d_y: Vec<f64>,
}

fn unwhiten_basis(chol: &Mat<f64>, r: &Mat<f64>) -> Mat<f64> {
    let mut x = r.clone();
    linalg::solve_lower_transpose(chol.as_ref(), &mut x);
    x.transpose().to_owned()
}

impl ReducedRankStructure {
    pub fn n_star(&self) -> usize {
        self.u.len()
    }

    pub fn n_v_star(&self) -> usize {
        self.v.len()
    }

    pub fn n_x_star(&self) -> usize {
        self.knot_heights.len()
    }

    /// n x n*, rows `b_u(l_i)'`
    pub fn b_u(&self) -> Mat<f64> {
        unwhiten_basis(&self.u.chol, &self.r_u)
    }

    /// (n_s * n*_x) x n*, the blocks `B(s_j)` stacked plot-major
    pub fn b_plot(&self) -> Mat<f64> {
        unwhiten_basis(&self.u.chol, &self.r_plot)
    }

    /// n_s x n*_v
    pub fn b_v(&self) -> Mat<f64> {
        unwhiten_basis(&self.v.chol, &self.r_v)
    }

    /// n_s x n*, rows `alpha' B(s_j)`
    pub fn g(&self) -> Mat<f64> {
        unwhiten_basis(&self.u.chol, &self.g_w)
    }

    /// `A = [[B_u, 0], [G, B_v]]`
    pub fn block_basis(&self) -> Mat<f64> {
        let (bu, g, bv) = (self.b_u(), self.g(), self.b_v());
        let (n, n_s) = (bu.nrows(), bv.nrows());
        let (ku, kv) = (self.n_star(), self.n_v_star());
        Mat::from_fn(n + n_s, ku + kv, |i, c| match (i < n, c < ku) {
            (true, true) => bu[(i, c)],
            (true, false) => 0.0,
            (false, true) => g[(i - n, c)],
            (false, false) => bv[(i - n, c - ku)],
        })
    }

    /// `J = blockdiag(C*_u, C*_v)` as factored (including any jitter).
    pub fn j_matrix(&self) -> Mat<f64> {
        let (ku, kv) = (self.n_star(), self.n_v_star());
        let cu = linalg::matmul(self.u.chol.as_ref(), self.u.chol.transpose());
        let cv = linalg::matmul(self.v.chol.as_ref(), self.v.chol.transpose());
        Mat::from_fn(ku + kv, ku + kv, |i, j| match (i < ku, j < ku) {
            (true, true) => cu[(i, j)],
            (false, false) => cv[(i - ku, j - ku)],
            _ => 0.0,
        })
    }

    /// `[d_z; d_y]`
    pub fn noise(&self) -> Vec<f64> {
        self.d_z.iter().chain(&self.d_y).copied().collect()
    }
}

/// Builds every basis matrix and noise variance of the reduced-rank model.
pub fn assemble_structure(
    params: &ModelParams,
    data: &JointDataset,
    knots: &KnotSet,
) -> Result<ReducedRankStructure> {
    if params.alpha.len() != knots.n_x() {
        return Err(Error::Config(format!(
            "alpha has length {} but there are {} height knots",
            params.alpha.len(),
            knots.n_x()
        )));
    }
    if params.tau2_z.len() != data.n_x() {
        return Err(Error::Config(format!(
            "tau2_z has length {} but the data have {} heights",
            params.tau2_z.len(),
            data.n_x()
        )));
    }
    let ku = params.gneiting();
    let kv = params.exponential();
    let u = KnotFactor::new(&ku, &knots.joint_u())?;
    let v = KnotFactor::new(&kv, &knots.spatial_v)?;

    let signal = u.whiten(&ku, &data.signal_coords)?;
    let plot = u.whiten(&ku, &plot_height_coords(&data.plots, &knots.heights))?;
    let bv = v.whiten(&kv, &data.plots)?;

    let n_s = data.n_s();
    let nxs = knots.n_x();
    let n_star = u.len();
    let mut g_w = Mat::<f64>::zeros(n_star, n_s);
    for j in 0..n_s {
        for (k, &a) in params.alpha.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let src = plot.r.col(j * nxs + k);
            for (dst, s) in g_w.col_mut(j).iter_mut().zip(src.iter()) {
                *dst += a * s;
            }
        }
    }

    let d_z: Vec<f64> = (0..data.n())
        .map(|i| params.tau2_z[data.height_index[i]] + signal.delta2[i])
        .collect();
    let d_y: Vec<f64> = (0..n_s)
        .map(|j| {
            let adj: f64 = params
                .alpha
                .iter()
                .enumerate()
                .map(|(k, a)| a * a * plot.delta2[j * nxs + k])
                .sum();
            params.tau2_y + adj + bv.delta2[j]
        })
        .collect();

    Ok(ReducedRankStructure {
        u,
        v,
        knot_heights: knots.heights.clone(),
        r_u: signal.r,
        r_plot: plot.r,
        r_v: bv.r,
        g_w,
        delta2_u: signal.delta2,
        delta2_u_plot: plot.delta2,
        delta2_v: bv.delta2,
        d_z,
        d_y,
    })
}

/// Fewest subsets for which the height search switches to greedy selection.
pub const EXHAUSTIVE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct HeightKnotSelection {
    pub heights: Vec<f64>,
    pub indices: Vec<usize>,
    pub objective: f64,
    /// false when the greedy fallback was used
    pub exhaustive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialKnotSelection {
    pub knots: Vec<Location>,
    pub indices: Vec<usize>,
    /// Objective before any knot and after each greedy step.
    pub objective_trace: Vec<f64>,
}

impl SpatialKnotSelection {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap()
    }
}

/// `sum_k delta2((s, x_k) | {(s, x*)})`, the height-knot criterion at a fixed location.
pub fn height_objective(kernel: &GneitingKernel, s: Location, candidates: &[f64], chosen: &[f64]) -> Result<f64> {
    let knots: Vec<SpaceHeightCoord> = chosen.iter().map(|&x| SpaceHeightCoord::new(s, x)).collect();
    let targets: Vec<SpaceHeightCoord> = candidates.iter().map(|&x| SpaceHeightCoord::new(s, x)).collect();
    Ok(build_basis(kernel, &knots, &targets)?.delta2.iter().sum())
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
        if r > u64::MAX as u128 {
            return r;
        }
    }
    r
}

/// Chooses `n_star` of the candidate heights minimizing [`height_objective`].
///
/// Exhaustive over all subsets when there are at most [`EXHAUSTIVE_LIMIT`]
/// of them, otherwise greedy forward selection. Ties keep the
/// lexicographically first subset.
pub fn select_height_knots(kernel: &GneitingKernel, candidates: &[f64], n_star: usize) -> Result<HeightKnotSelection> {
    let n = candidates.len();
    if n_star == 0 || n_star > n {
        return Err(Error::Config(format!(
            "cannot choose {n_star} height knots from {n} candidate heights"
        )));
    }
    // stationarity: any location will do
    let s = Location::new(0.0, 0.0);
    let pick = |idx: &[usize]| -> Vec<f64> { idx.iter().map(|&i| candidates[i]).collect() };

    if binomial(n, n_star) <= EXHAUSTIVE_LIMIT {
        let mut idx: Vec<usize> = (0..n_star).collect();
        let mut best_idx = idx.clone();
        let mut best = f64::INFINITY;
        loop {
            let obj = height_objective(kernel, s, candidates, &pick(&idx))?;
            if !best.is_finite() || obj < best - 1e-12 * best.abs().max(kernel.sigma2) {
                best = obj;
                best_idx = idx.clone();
            }
            // next combination in lexicographic order
            let mut i = n_star;
            while i > 0 && idx[i - 1] == n - n_star + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..n_star {
                idx[j] = idx[j - 1] + 1;
            }
        }
        return Ok(HeightKnotSelection {
            heights: pick(&best_idx),
            indices: best_idx,
            objective: best,
            exhaustive: true,
        });
    }

    let mut chosen: Vec<usize> = Vec::with_capacity(n_star);
    let mut best = f64::INFINITY;
    for _ in 0..n_star {
        let mut step_best = (usize::MAX, f64::INFINITY);
        for cand in 0..n {
            if chosen.contains(&cand) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(cand);
            trial.sort_unstable();
            let obj = height_objective(kernel, s, candidates, &pick(&trial))?;
            if !step_best.1.is_finite() || obj < step_best.1 - 1e-12 * step_best.1.abs() {
                step_best = (cand, obj);
            }
        }
        chosen.push(step_best.0);
        chosen.sort_unstable();
        best = step_best.1;
    }
    Ok(HeightKnotSelection {
        heights: pick(&chosen),
        indices: chosen,
        objective: best,
        exhaustive: false,
    })
}

/// Greedy sequential knot search.
///
/// Each candidate contributes a group of knot points; targets are the points
/// whose bias-adjustment variances are summed. Conditional quantities are
/// updated incrementally (block Cholesky extension), so a step costs
/// O(candidates * targets * group * knots).
struct GreedyState<P> {
    targets: Vec<P>,
    groups: Vec<Vec<P>>,
    /// per target: L^{-1} c_K(t)
    v_targets: Vec<Vec<f64>>,
    /// per candidate group point: L^{-1} c_K(p)
    v_groups: Vec<Vec<Vec<f64>>>,
    delta2: Vec<f64>,
}

impl<P: Clone> GreedyState<P> {
    fn new<K: CovarianceFn<P>>(kernel: &K, targets: Vec<P>, groups: Vec<Vec<P>>) -> Self {
        let delta2 = targets.iter().map(|t| kernel.cov(t, t)).collect();
        Self {
            v_targets: vec![Vec::new(); targets.len()],
            v_groups: groups.iter().map(|g| vec![Vec::new(); g.len()]).collect(),
            targets,
            groups,
            delta2,
        }
    }

    /// Residual covariance of a group given current knots, and its cross
    /// residual with every target (group x targets).
    fn residuals<K: CovarianceFn<P>>(&self, kernel: &K, c: usize) -> (Mat<f64>, Mat<f64>) {
        let g = &self.groups[c];
        let vg = &self.v_groups[c];
        let s = Mat::from_fn(g.len(), g.len(), |a, b| kernel.cov(&g[a], &g[b]) - linalg::dot(&vg[a], &vg[b]));
        let r = Mat::from_fn(g.len(), self.targets.len(), |a, t| {
            kernel.cov(&g[a], &self.targets[t]) - linalg::dot(&vg[a], &self.v_targets[t])
        });
        (s, r)
    }

    fn decrease<K: CovarianceFn<P>>(&self, kernel: &K, c: usize) -> Option<f64> {
        let (s, mut r) = self.residuals(kernel, c);
        let ls = linalg::cholesky(s.as_ref())?;
        linalg::solve_lower(ls.as_ref(), &mut r);
        Some(linalg::frobenius(r.as_ref()).powi(2))
    }

    fn add<K: CovarianceFn<P>>(&mut self, kernel: &K, c: usize) {
        let (s, mut r) = self.residuals(kernel, c);
        let ls = linalg::cholesky(s.as_ref()).expect("selected group has a positive residual");
        linalg::solve_lower(ls.as_ref(), &mut r);
        for t in 0..self.targets.len() {
            for a in 0..r.nrows() {
                let w = r[(a, t)];
                self.v_targets[t].push(w);
                self.delta2[t] -= w * w;
            }
        }
        let group = self.groups[c].clone();
        let vg_new = self.v_groups[c].clone();
        for d in 0..self.groups.len() {
            for p in 0..self.groups[d].len() {
                let point = &self.groups[d][p];
                let mut rhs: Vec<f64> = (0..group.len())
                    .map(|a| kernel.cov(&group[a], point) - linalg::dot(&vg_new[a], &self.v_groups[d][p]))
                    .collect();
                rhs = linalg::solve_lower_vec(ls.as_ref(), &rhs);
                self.v_groups[d][p].extend(rhs);
            }
        }
    }

    fn objective(&self) -> f64 {
        self.delta2.iter().map(|d| d.max(0.0)).sum()
    }
}

fn greedy_select<P: Clone, K: CovarianceFn<P>>(
    kernel: &K,
    targets: Vec<P>,
    groups: Vec<Vec<P>>,
    count: usize,
) -> (Vec<usize>, Vec<f64>) {
    let mut state = GreedyState::new(kernel, targets, groups);
    let mut chosen = Vec::with_capacity(count);
    let mut trace = vec![state.objective()];
    for _ in 0..count {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..state.groups.len() {
            if chosen.contains(&c) {
                continue;
            }
            let gain = state.decrease(kernel, c).unwrap_or(0.0);
            let better = match best {
                None => true,
                Some((_, b)) => gain > b + 1e-12 * b.abs().max(1e-300),
            };
            if better {
                best = Some((c, gain));
            }
        }
        let (c, _) = best.expect("enough candidates");
        state.add(kernel, c);
        chosen.push(c);
        trace.push(state.objective());
    }
    (chosen, trace)
}

/// Greedy selection of `count` spatial knots for `u` from `candidates`,
/// minimizing `sum_j sum_k delta2_u(s_j, x*_k)` with height knots fixed.
pub fn select_spatial_knots_u(
    kernel: &GneitingKernel,
    plots: &[Location],
    heights_star: &[f64],
    candidates: &[Location],
    count: usize,
) -> Result<SpatialKnotSelection> {
    if count == 0 || count > candidates.len() {
        return Err(Error::Config(format!(
            "cannot choose {count} spatial knots from {} candidates",
            candidates.len()
        )));
    }
    let targets = plot_height_coords(plots, heights_star);
    let groups = candidates
        .iter()
        .map(|c| plot_height_coords(std::slice::from_ref(c), heights_star))
        .collect();
    let (indices, objective_trace) = greedy_select(kernel, targets, groups, count);
    Ok(SpatialKnotSelection {
        knots: indices.iter().map(|&i| candidates[i]).collect(),
        indices,
        objective_trace,
    })
}

/// Greedy selection of `count` spatial knots for `v`, minimizing `sum_j delta2_v(s_j)`.
pub fn select_spatial_knots_v(
    kernel: &ExponentialKernel,
    plots: &[Location],
    candidates: &[Location],
    count: usize,
) -> Result<SpatialKnotSelection> {
    if count == 0 || count > candidates.len() {
        return Err(Error::Config(format!(
            "cannot choose {count} spatial knots from {} candidates",
            candidates.len()
        )));
    }
    let groups = candidates.iter().map(|c| vec![*c]).collect();
    let (indices, objective_trace) = greedy_select(kernel, plots.to_vec(), groups, count);
    Ok(SpatialKnotSelection {
        knots: indices.iter().map(|&i| candidates[i]).collect(),
        indices,
        objective_trace,
    })
}

/// Regular `resolution x resolution` grid over the bounding box of `locs`.
pub fn candidate_grid(locs: &[Location], resolution: usize) -> Vec<Location> {
    let (mut lo1, mut hi1, mut lo2, mut hi2) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for l in locs {
        lo1 = lo1.min(l.s1);
        hi1 = hi1.max(l.s1);
        lo2 = lo2.min(l.s2);
        hi2 = hi2.max(l.s2);
    }
    let step = |lo: f64, hi: f64, i: usize| {
        if resolution == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            out.push(Location::new(step(lo1, hi1, i), step(lo2, hi2, j)));
        }
    }
    out
}
