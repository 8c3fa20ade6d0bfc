//! Posterior predictive draws for signals and outcomes.
//!
//! Every draw uses one stored posterior sample `(params, u*, v*)`; bases are
//! rebuilt under that sample's covariance parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collapsed::CollapsedWorkspace;
use crate::domain::{JointDataset, Location, ModelParams, SpaceHeightCoord};
use crate::error::{Error, Result};
use crate::linalg;
use crate::metrics::{self, Summary};
use crate::reduced_rank::{assemble_structure, plot_height_coords, KnotFactor, KnotSet};
use crate::sampler::PosteriorChain;

/// How `tau2_z` and height-specific `beta_z` are read at an unobserved height.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeightRule {
    #[default]
    Nearest,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictOptions {
    pub height_rule: HeightRule,
    /// Largest number of posterior samples used, evenly spaced; 0 uses all.
    pub max_samples: usize,
    /// Targets whitened per batch.
    pub batch_size: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            height_rule: HeightRule::Nearest,
            max_samples: 0,
            batch_size: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalTarget {
    pub coord: SpaceHeightCoord,
    /// Values in the dataset's `covariate_names` order.
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeTarget {
    pub loc: Location,
    pub covariates: Vec<f64>,
}

/// Every signal coordinate of `data` as a target.
pub fn signal_targets(data: &JointDataset) -> Vec<SignalTarget> {
    (0..data.n())
        .map(|i| SignalTarget {
            coord: data.signal_coords[i],
            covariates: data.site_covariates[data.signal_site[i]].clone(),
        })
        .collect()
}

/// Every plot of `data` as a target.
pub fn outcome_targets(data: &JointDataset) -> Vec<OutcomeTarget> {
    (0..data.n_s())
        .map(|j| OutcomeTarget {
            loc: data.plots[j],
            covariates: data.plot_covariates[j].clone(),
        })
        .collect()
}

/// One stored posterior sample with its knot effects.
#[derive(Debug, Clone, Copy)]
pub struct LatentSample<'a> {
    pub params: &'a ModelParams,
    pub u_star: &'a [f64],
    pub v_star: &'a [f64],
}

/// Samples carrying knot effects, chains in order, thinned evenly to `max`.
pub fn latent_samples(chains: &[PosteriorChain], max: usize) -> Result<Vec<LatentSample<'_>>> {
    let all: Vec<LatentSample<'_>> = chains
        .iter()
        .flat_map(|c| {
            c.latent_index.iter().enumerate().map(move |(k, &i)| LatentSample {
                params: &c.draws[i],
                u_star: &c.u_star[k],
                v_star: &c.v_star[k],
            })
        })
        .collect();
    if all.is_empty() {
        return Err(Error::Data("the posterior holds no knot-effect draws".into()));
    }
    if max == 0 || all.len() <= max {
        return Ok(all);
    }
    Ok((0..max).map(|i| all[i * all.len() / max]).collect())
}

/// Draws per target (`draws[target][sample]`) and their summaries.
#[derive(Debug, Clone)]
pub struct PredictiveDraws {
    pub draws: Vec<Vec<f64>>,
    pub summaries: Vec<Summary>,
}

impl PredictiveDraws {
    pub fn from_draws(draws: Vec<Vec<f64>>) -> Self {
        let summaries = draws.iter().map(|d| Summary::of(d)).collect();
        Self { draws, summaries }
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn medians(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.median).collect()
    }

    pub fn means(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.mean).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.var).collect()
    }

    /// `[self; other]` target-wise, for joint metrics.
    pub fn stack(&self, other: &PredictiveDraws) -> PredictiveDraws {
        PredictiveDraws {
            draws: self.draws.iter().chain(&other.draws).cloned().collect(),
            summaries: self.summaries.iter().chain(&other.summaries).copied().collect(),
        }
    }
}

/// Observed heights and weights combining them at `h`.
fn height_weights(data: &JointDataset, h: f64, rule: HeightRule) -> Vec<(usize, f64)> {
    let hs = &data.heights;
    match rule {
        HeightRule::Nearest => vec![(data.nearest_height_index(h), 1.0)],
        HeightRule::Linear => {
            if h <= hs[0] {
                return vec![(0, 1.0)];
            }
            let last = hs.len() - 1;
            if h >= hs[last] {
                return vec![(last, 1.0)];
            }
            let k = hs.partition_point(|x| *x <= h) - 1;
            let w = (h - hs[k]) / (hs[k + 1] - hs[k]);
            vec![(k, 1.0 - w), (k + 1, w)]
        }
    }
}

fn check_covariates(data: &JointDataset, cov: &[f64], what: &str) -> Result<()> {
    if cov.len() != data.covariate_names.len() {
        return Err(Error::Data(format!(
            "{what} has {} covariate values, expected {} ({})",
            cov.len(),
            data.covariate_names.len(),
            data.covariate_names.join(", ")
        )));
    }
    if let Some(i) = cov.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{what} is missing covariate '{}'", data.covariate_names[i])));
    }
    Ok(())
}

/// Design row and noise-variance weights of one signal target.
struct SignalRow {
    design: Vec<f64>,
    tau: Vec<(usize, f64)>,
}

fn signal_rows(data: &JointDataset, targets: &[SignalTarget], rule: HeightRule) -> Result<Vec<SignalRow>> {
    targets
        .iter()
        .map(|t| {
            t.coord.validate(data.max_height)?;
            check_covariates(data, &t.covariates, &format!("signal target {:?}", t.coord))?;
            let tau = height_weights(data, t.coord.height, rule);
            let mut design = vec![0.0; data.p_z()];
            for &(k, w) in &tau {
                for (d, v) in design.iter_mut().zip(data.signal_design_row(k, &t.covariates)) {
                    *d += w * v;
                }
            }
            Ok(SignalRow { design, tau })
        })
        .collect()
}

fn outcome_rows(data: &JointDataset, targets: &[OutcomeTarget]) -> Result<Vec<Vec<f64>>> {
    targets
        .iter()
        .map(|t| {
            if !(t.loc.s1.is_finite() && t.loc.s2.is_finite()) {
                return Err(Error::Data(format!("non-finite outcome target {:?}", t.loc)));
            }
            check_covariates(data, &t.covariates, &format!("outcome target {:?}", t.loc))?;
            Ok(data.outcome_design_row(&t.covariates))
        })
        .collect()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn col_dot(m: &faer::Mat<f64>, j: usize, x: &[f64]) -> f64 {
    m.col(j).iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Knot factors and whitened knot effects of one posterior sample.
struct SampleState {
    u: KnotFactor<SpaceHeightCoord>,
    v: KnotFactor<Location>,
    u_white: Vec<f64>,
    v_white: Vec<f64>,
}

impl SampleState {
    fn new(p: &ModelParams, knots: &KnotSet, u_star: &[f64], v_star: &[f64]) -> Result<Self> {
        let u = KnotFactor::new(&p.gneiting(), &knots.joint_u())?;
        let v = KnotFactor::new(&p.exponential(), &knots.spatial_v)?;
        Self::from_factors(u, v, u_star, v_star)
    }

    fn from_factors(u: KnotFactor<SpaceHeightCoord>, v: KnotFactor<Location>, u_star: &[f64], v_star: &[f64]) -> Result<Self> {
        if u_star.len() != u.len() || v_star.len() != v.len() {
            return Err(Error::Data(format!(
                "knot effects have lengths ({}, {}) but the knot set has ({}, {})",
                u_star.len(),
                v_star.len(),
                u.len(),
                v.len()
            )));
        }
        let u_white = u.whiten_effects(u_star);
        let v_white = v.whiten_effects(v_star);
        Ok(Self { u, v, u_white, v_white })
    }

    /// Mean (without the fixed effects) and variance of `z` at each coordinate.
    fn signal_moments(&self, p: &ModelParams, coords: &[SpaceHeightCoord]) -> Result<Vec<(f64, f64)>> {
        let w = self.u.whiten(&p.gneiting(), coords)?;
        Ok((0..coords.len()).map(|t| (col_dot(&w.r, t, &self.u_white), w.delta2[t])).collect())
    }

    /// Mean (without the fixed effects) and variance of `y` at each location,
    /// excluding `tau2_y`.
    fn outcome_moments(&self, p: &ModelParams, knots: &KnotSet, locs: &[Location]) -> Result<Vec<(f64, f64)>> {
        let nxs = knots.n_x();
        let wu = self.u.whiten(&p.gneiting(), &plot_height_coords(locs, &knots.heights))?;
        let wv = self.v.whiten(&p.exponential(), locs)?;
        Ok((0..locs.len())
            .map(|j| {
                let mut mean = col_dot(&wv.r, j, &self.v_white);
                let mut var = wv.delta2[j];
                for (k, a) in p.alpha.iter().enumerate() {
                    mean += a * col_dot(&wu.r, j * nxs + k, &self.u_white);
                    var += a * a * wu.delta2[j * nxs + k];
                }
                (mean, var)
            })
            .collect())
    }
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let size = size.max(1);
    (0..n.div_ceil(size)).map(move |b| b * size..((b + 1) * size).min(n))
}

fn fixed_effect(design: &[f64], beta: &[f64]) -> f64 {
    linalg::dot(design, beta)
}

/// `z(l0) ~ N(q_z' beta_z + b_u(l0)' u*, tau2_z(x0) + delta2_u(l0))` per sample.
pub fn predict_signal<R: Rng + ?Sized>(
    chains: &[PosteriorChain],
    data: &JointDataset,
    knots: &KnotSet,
    targets: &[SignalTarget],
    opts: &PredictOptions,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    let rows = signal_rows(data, targets, opts.height_rule)?;
    let samples = latent_samples(chains, opts.max_samples)?;
    let coords: Vec<SpaceHeightCoord> = targets.iter().map(|t| t.coord).collect();
    let mut draws = vec![Vec::with_capacity(samples.len()); targets.len()];
    for s in &samples {
        let p = s.params;
        let state = SampleState::new(p, knots, s.u_star, s.v_star)?;
        for range in batches(coords.len(), opts.batch_size) {
            let moments = state.signal_moments(p, &coords[range.clone()])?;
            for (i, (m, d2)) in range.zip(moments) {
                let row = &rows[i];
                let tau: f64 = row.tau.iter().map(|&(k, w)| w * p.tau2_z[k]).sum();
                let mean = fixed_effect(&row.design, &p.beta_z) + m;
                draws[i].push(mean + (tau + d2).sqrt() * normal(rng));
            }
        }
    }
    Ok(PredictiveDraws::from_draws(draws))
}

fn outcome_draws<R: Rng + ?Sized>(
    state: &SampleState,
    p: &ModelParams,
    knots: &KnotSet,
    locs: &[Location],
    rows: &[Vec<f64>],
    batch_size: usize,
    draws: &mut [Vec<f64>],
    rng: &mut R,
) -> Result<()> {
    for range in batches(locs.len(), batch_size) {
        let moments = state.outcome_moments(p, knots, &locs[range.clone()])?;
        for (j, (m, var)) in range.zip(moments) {
            let mean = fixed_effect(&rows[j], &p.beta_y) + m;
            draws[j].push(mean + (p.tau2_y + var).sqrt() * normal(rng));
        }
    }
    Ok(())
}

/// `y(s0) ~ N(q_y' beta_y + alpha' B(s0) u* + b_v(s0)' v*, d_y(s0))` per sample.
pub fn predict_outcome<R: Rng + ?Sized>(
    chains: &[PosteriorChain],
    data: &JointDataset,
    knots: &KnotSet,
    targets: &[OutcomeTarget],
    opts: &PredictOptions,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    let rows = outcome_rows(data, targets)?;
    let samples = latent_samples(chains, opts.max_samples)?;
    let locs: Vec<Location> = targets.iter().map(|t| t.loc).collect();
    let mut draws = vec![Vec::with_capacity(samples.len()); targets.len()];
    for s in &samples {
        let state = SampleState::new(s.params, knots, s.u_star, s.v_star)?;
        outcome_draws(&state, s.params, knots, &locs, &rows, opts.batch_size, &mut draws, rng)?;
    }
    Ok(PredictiveDraws::from_draws(draws))
}

/// Outcome prediction given signals observed at the targets.
///
/// For each posterior sample the knot effects are redrawn from their exact
/// conditional given the training data augmented with `target_signals`, and
/// `y` is then drawn as in [`predict_outcome`].
pub fn predict_outcome_given_signal<R: Rng + ?Sized>(
    chains: &[PosteriorChain],
    train: &JointDataset,
    knots: &KnotSet,
    target_signals: &JointDataset,
    targets: &[OutcomeTarget],
    opts: &PredictOptions,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    for t in targets {
        let has_signal = target_signals.sites.iter().any(|s| s.dist(&t.loc) <= 1e-9);
        if !has_signal {
            return Err(Error::Data(format!("outcome target {:?} has no observed signal", t.loc)));
        }
    }
    let augmented = train.augment_signals(target_signals)?;
    let rows = outcome_rows(train, targets)?;
    let samples = latent_samples(chains, opts.max_samples)?;
    let locs: Vec<Location> = targets.iter().map(|t| t.loc).collect();
    let mut draws = vec![Vec::with_capacity(samples.len()); targets.len()];
    for s in &samples {
        let p = s.params;
        let rr = assemble_structure(p, &augmented, knots)?;
        let ws = CollapsedWorkspace::new(&rr, &augmented)?;
        let g = ws.recover_latents(&p.beta(), rng)?;
        let (u_star, v_star) = g.split_at(rr.n_star());
        let state = SampleState::from_factors(rr.u, rr.v, u_star, v_star)?;
        outcome_draws(&state, p, knots, &locs, &rows, opts.batch_size, &mut draws, rng)?;
    }
    Ok(PredictiveDraws::from_draws(draws))
}

/// Means and variances of the stacked `[z; y]` data model for one sample.
pub fn replicate_moments(sample: &LatentSample<'_>, data: &JointDataset, knots: &KnotSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = sample.params;
    let rr = assemble_structure(p, data, knots)?;
    let state = SampleState::from_factors(rr.u.clone(), rr.v.clone(), sample.u_star, sample.v_star)?;
    let qz = linalg::matvec(data.qz.as_ref(), &p.beta_z);
    let qy = linalg::matvec(data.qy.as_ref(), &p.beta_y);
    let uz = linalg::tmatvec(rr.r_u.as_ref(), &state.u_white);
    let uy = linalg::tmatvec(rr.g_w.as_ref(), &state.u_white);
    let vy = linalg::tmatvec(rr.r_v.as_ref(), &state.v_white);
    let mut mean: Vec<f64> = qz.iter().zip(&uz).map(|(a, b)| a + b).collect();
    mean.extend((0..data.n_s()).map(|j| qy[j] + uy[j] + vy[j]));
    Ok((mean, rr.noise()))
}

/// Posterior predictive replicates at every observation, stacked `[z; y]`.
pub fn replicate_data<R: Rng + ?Sized>(
    chains: &[PosteriorChain],
    data: &JointDataset,
    knots: &KnotSet,
    opts: &PredictOptions,
    rng: &mut R,
) -> Result<PredictiveDraws> {
    let samples = latent_samples(chains, opts.max_samples)?;
    let n = data.n() + data.n_s();
    let mut draws = vec![Vec::with_capacity(samples.len()); n];
    for s in &samples {
        let (mean, var) = replicate_moments(s, data, knots)?;
        for i in 0..n {
            draws[i].push(mean[i] + var[i].sqrt() * normal(rng));
        }
    }
    Ok(PredictiveDraws::from_draws(draws))
}

/// Deviance information criterion from the stored log-likelihoods; the
/// plug-in deviance uses back-transformed means of the sampling-scale draws.
pub fn dic(
    chains: &[PosteriorChain],
    data: &JointDataset,
    knots: &KnotSet,
    transform: &crate::sampler::Transform,
) -> Result<metrics::Dic> {
    let draws: Vec<&ModelParams> = chains.iter().flat_map(|c| c.draws.iter()).collect();
    if draws.is_empty() {
        return Err(Error::Data("the posterior holds no draws".into()));
    }
    let n = draws.len() as f64;
    let dim = transform.dim();
    let mut center = vec![0.0; dim];
    let mut beta = vec![0.0; draws[0].beta().len()];
    for p in &draws {
        for (c, v) in center.iter_mut().zip(transform.forward(p)) {
            *c += v / n;
        }
        for (b, v) in beta.iter_mut().zip(p.beta()) {
            *b += v / n;
        }
    }
    let mut at_mean = transform.inverse(&center, draws[0]);
    at_mean.set_beta(&beta);
    let rr = assemble_structure(&at_mean, data, knots)?;
    let ll = CollapsedWorkspace::new(&rr, data)?.log_likelihood(&beta);
    let deviances: Vec<f64> = chains.iter().flat_map(|c| c.loglik.iter().map(|l| -2.0 * l)).collect();
    Ok(metrics::dic_from_deviances(&deviances, -2.0 * ll))
}
