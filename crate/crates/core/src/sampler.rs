//! Priors, the blocked random-walk Metropolis update, the Gibbs step for
//! `beta`, latent recovery and chain orchestration.
//!
//! Covariance and loading parameters move jointly on an unconstrained scale:
//! logs for positive quantities and a scaled logit for `gamma`. During
//! burn-in the proposal is adapted (global scale toward 0.234 acceptance,
//! plus an empirical covariance of the burn-in draws); afterwards the kernel
//! is fixed.

use std::time::Instant;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::collapsed::{CollapsedWorkspace, GaussianPrior};
use crate::domain::{JointDataset, ModelParams};
use crate::error::{Error, Result, Stage};
use crate::linalg;
use crate::reduced_rank::{assemble_structure, KnotSet};

/// Target acceptance rate for the joint random-walk block.
pub const TARGET_ACCEPTANCE: f64 = 0.234;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub fn log_pdf(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * x.ln() - self.scale / x
    }
}

/// Open interval carrying a uniform prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if self.contains(x) {
            -(self.hi - self.lo).ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub sigma2_u: InvGamma,
    pub sigma2_v: InvGamma,
    pub tau2_y: InvGamma,
    pub tau2_z: InvGamma,
    pub a: Interval,
    pub gamma: Interval,
    pub c: Interval,
    pub phi_v: Interval,
    pub alpha_mean: f64,
    pub alpha_var: f64,
    pub beta_mean: f64,
    pub beta_var: f64,
}

impl PriorSpec {
    /// Defaults: `IG(2, s2)` variance priors, with `s2` the residual variance
    /// of the matching response after least squares on its fixed effects
    /// (`IG(2, 1)` on standardized data); the `phi_v` support is
    /// `(3 / d_max, 3 / d_min)` over plot pairs.
    pub fn default_for(data: &JointDataset) -> Self {
        let (d_min, d_max) = distance_range(data);
        let ig_z = InvGamma { shape: 2.0, scale: residual_variance(&data.qz, &data.z) };
        let ig_y = InvGamma { shape: 2.0, scale: residual_variance(&data.qy, &data.y) };
        Self {
            sigma2_u: ig_z,
            sigma2_v: ig_y,
            tau2_y: ig_y,
            tau2_z: ig_z,
            a: Interval { lo: 1e-3, hi: 1e3 },
            gamma: Interval { lo: 0.0, hi: 1.0 },
            c: Interval { lo: 1e-3, hi: 1e3 },
            phi_v: Interval {
                lo: 3.0 / d_max,
                hi: 3.0 / d_min,
            },
            alpha_mean: 0.0,
            alpha_var: 100.0,
            beta_mean: 0.0,
            beta_var: 1e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, ig) in [
            ("sigma2_u", self.sigma2_u),
            ("sigma2_v", self.sigma2_v),
            ("tau2_y", self.tau2_y),
            ("tau2_z", self.tau2_z),
        ] {
            if !(ig.shape > 0.0 && ig.scale > 0.0) {
                return Err(Error::Config(format!("{name} prior needs positive shape and scale")));
            }
        }
        for (name, iv) in [("a", self.a), ("gamma", self.gamma), ("c", self.c), ("phi_v", self.phi_v)] {
            if !(iv.lo < iv.hi) || !iv.lo.is_finite() || !iv.hi.is_finite() {
                return Err(Error::Config(format!("{name} support ({}, {}) is empty", iv.lo, iv.hi)));
            }
        }
        if self.a.lo < 0.0 || self.c.lo < 0.0 || self.phi_v.lo < 0.0 {
            return Err(Error::Config("a, c and phi_v supports must be positive".into()));
        }
        if self.gamma.lo < 0.0 || self.gamma.hi > 1.0 {
            return Err(Error::Config("gamma support must lie in [0, 1]".into()));
        }
        if !(self.alpha_var > 0.0 && self.beta_var > 0.0) {
            return Err(Error::Config("alpha and beta prior variances must be positive".into()));
        }
        Ok(())
    }

    pub fn beta_prior(&self, p: usize) -> GaussianPrior {
        GaussianPrior::isotropic(vec![self.beta_mean; p], self.beta_var).expect("validated variance")
    }

    /// Sum of log prior densities; `-inf` outside the support.
    pub fn log_density(&self, p: &ModelParams) -> f64 {
        let mut lp = self.sigma2_u.log_pdf(p.sigma2_u)
            + self.sigma2_v.log_pdf(p.sigma2_v)
            + self.tau2_y.log_pdf(p.tau2_y)
            + self.a.log_density(p.a)
            + self.gamma.log_density(p.gamma)
            + self.c.log_density(p.c)
            + self.phi_v.log_density(p.phi_v);
        lp += p.tau2_z.iter().map(|t| self.tau2_z.log_pdf(*t)).sum::<f64>();
        let gauss = |x: &[f64], m: f64, v: f64| -> f64 {
            x.iter()
                .map(|xi| -0.5 * ((xi - m) * (xi - m) / v + (2.0 * std::f64::consts::PI * v).ln()))
                .sum()
        };
        lp += gauss(&p.alpha, self.alpha_mean, self.alpha_var);
        lp += gauss(&p.beta(), self.beta_mean, self.beta_var);
        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }
}

/// Least-squares residual variance of `w` on `q`; 1 when undefined.
fn residual_variance(q: &Mat<f64>, w: &[f64]) -> f64 {
    let (n, p) = (q.nrows(), q.ncols());
    if n <= p {
        return 1.0;
    }
    let Some(l) = linalg::cholesky(linalg::tmatmul(q.as_ref(), q.as_ref()).as_ref()) else {
        return 1.0;
    };
    let b = linalg::solve_lower_transpose_vec(l.as_ref(), &linalg::solve_lower_vec(l.as_ref(), &linalg::tmatvec(q.as_ref(), w)));
    let fit = linalg::matvec(q.as_ref(), &b);
    let s2 = w.iter().zip(&fit).map(|(a, f)| (a - f).powi(2)).sum::<f64>() / (n - p) as f64;
    if s2.is_finite() && s2 > 0.0 {
        s2
    } else {
        1.0
    }
}

fn distance_range(data: &JointDataset) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for i in 0..data.plots.len() {
        for j in 0..i {
            let d = data.plots[i].dist(&data.plots[j]);
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    if !lo.is_finite() {
        (1.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Unconstrained coordinates of the Metropolis block:
/// `[ln s2_u, ln a, logit gamma, ln c, ln s2_v, ln phi_v, alpha.., ln tau2_y, ln tau2_z..]`.
#[derive(Debug, Clone, Copy)]
pub struct Transform {
    pub gamma: Interval,
    pub n_alpha: usize,
    pub n_tau: usize,
}

impl Transform {
    pub fn new(priors: &PriorSpec, n_alpha: usize, n_tau: usize) -> Self {
        Self {
            gamma: priors.gamma,
            n_alpha,
            n_tau,
        }
    }

    pub fn dim(&self) -> usize {
        7 + self.n_alpha + self.n_tau
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["ln_sigma2_u", "ln_a", "logit_gamma", "ln_c", "ln_sigma2_v", "ln_phi_v"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((1..=self.n_alpha).map(|k| format!("alpha_{k}")));
        v.push("ln_tau2_y".into());
        v.extend((1..=self.n_tau).map(|k| format!("ln_tau2_z_{k}")));
        v
    }

    pub fn forward(&self, p: &ModelParams) -> Vec<f64> {
        let g = (p.gamma - self.gamma.lo) / (self.gamma.hi - self.gamma.lo);
        let mut v = vec![
            p.sigma2_u.ln(),
            p.a.ln(),
            (g / (1.0 - g)).ln(),
            p.c.ln(),
            p.sigma2_v.ln(),
            p.phi_v.ln(),
        ];
        v.extend(&p.alpha);
        v.push(p.tau2_y.ln());
        v.extend(p.tau2_z.iter().map(|t| t.ln()));
        v
    }

    /// Inverse map; `beta` is copied from `template`.
    pub fn inverse(&self, v: &[f64], template: &ModelParams) -> ModelParams {
        let s = 1.0 / (1.0 + (-v[2]).exp());
        let na = self.n_alpha;
        ModelParams {
            sigma2_u: v[0].exp(),
            a: v[1].exp(),
            gamma: self.gamma.lo + (self.gamma.hi - self.gamma.lo) * s,
            c: v[3].exp(),
            sigma2_v: v[4].exp(),
            phi_v: v[5].exp(),
            alpha: v[6..6 + na].to_vec(),
            tau2_y: v[6 + na].exp(),
            tau2_z: v[7 + na..].iter().map(|x| x.exp()).collect(),
            beta_y: template.beta_y.clone(),
            beta_z: template.beta_z.clone(),
        }
    }

    /// `ln |d(params) / d(unconstrained)|`
    pub fn log_jacobian(&self, p: &ModelParams) -> f64 {
        let (lo, hi) = (self.gamma.lo, self.gamma.hi);
        p.sigma2_u.ln()
            + p.a.ln()
            + ((p.gamma - lo) * (hi - p.gamma) / (hi - lo)).ln()
            + p.c.ln()
            + p.sigma2_v.ln()
            + p.phi_v.ln()
            + p.tau2_y.ln()
            + p.tau2_z.iter().map(|t| t.ln()).sum::<f64>()
    }
}

/// Likelihood factorization plus target value at one parameter point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub params: ModelParams,
    pub workspace: CollapsedWorkspace,
    pub loglik: f64,
    pub log_target: f64,
}

fn out_of_support(p: &ModelParams, priors: &PriorSpec) -> bool {
    !(priors.a.contains(p.a) && priors.c.contains(p.c) && priors.gamma.contains(p.gamma) && priors.phi_v.contains(p.phi_v))
        || !(p.sigma2_u > 0.0 && p.sigma2_v > 0.0 && p.tau2_y > 0.0 && p.tau2_z.iter().all(|t| *t > 0.0))
        || !(p.sigma2_u.is_finite() && p.sigma2_v.is_finite() && p.tau2_y.is_finite() && p.tau2_z.iter().all(|t| t.is_finite()))
}

/// Builds the reduced-rank structure and collapsed workspace, returning
/// `None` when the parameters are outside the prior support.
pub fn evaluate(
    params: &ModelParams,
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    jacobian: bool,
) -> Result<Option<Evaluation>> {
    if out_of_support(params, priors) {
        return Ok(None);
    }
    let rr = assemble_structure(params, data, knots)?;
    let workspace = CollapsedWorkspace::new(&rr, data)?;
    let loglik = workspace.log_likelihood(&params.beta());
    let log_target = target_value(params, loglik, priors, jacobian, knots.n_x(), data.n_x());
    Ok(Some(Evaluation {
        params: params.clone(),
        workspace,
        loglik,
        log_target,
    }))
}

fn target_value(p: &ModelParams, loglik: f64, priors: &PriorSpec, jacobian: bool, n_alpha: usize, n_tau: usize) -> f64 {
    let mut lt = loglik + priors.log_density(p);
    if jacobian {
        lt += Transform::new(priors, n_alpha, n_tau).log_jacobian(p);
    }
    if lt.is_nan() {
        f64::NEG_INFINITY
    } else {
        lt
    }
}

/// Log-likelihood plus log priors (plus log-Jacobians of the sampling
/// transforms when `jacobian`); `-inf` outside the prior support.
pub fn log_target(
    params: &ModelParams,
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    jacobian: bool,
) -> Result<f64> {
    Ok(evaluate(params, data, knots, priors, jacobian)?.map_or(f64::NEG_INFINITY, |e| e.log_target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub n_chains: usize,
    pub thin: usize,
    /// Stride (post burn-in) at which knot effects are recovered.
    pub latent_thin: usize,
    /// Taken from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
    /// Initial proposal sds on the unconstrained scale, one per coordinate;
    /// empty selects curvature-based defaults.
    pub proposal_sd: Vec<f64>,
    pub adapt_window: usize,
    /// Learn a proposal covariance from burn-in draws.
    pub adapt_covariance: bool,
    /// Run a short coordinate search for the starting point.
    pub optimize_start: bool,
    /// Spread of chain starting points around the initial value.
    pub start_jitter: f64,
    /// When false only `beta` is updated (covariance parameters stay fixed).
    pub update_covariance: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iter: 50_000,
            n_burn: 5_000,
            n_chains: 3,
            thin: 1,
            latent_thin: 10,
            seed: 1,
            proposal_sd: Vec::new(),
            adapt_window: 100,
            adapt_covariance: true,
            optimize_start: true,
            start_jitter: 0.2,
            update_covariance: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burn >= self.n_iter {
            return Err(Error::Config(format!(
                "n_burn ({}) must be smaller than n_iter ({})",
                self.n_burn, self.n_iter
            )));
        }
        if self.n_chains == 0 || self.thin == 0 || self.latent_thin == 0 || self.adapt_window == 0 {
            return Err(Error::Config("n_chains, thin, latent_thin and adapt_window must be positive".into()));
        }
        if self.proposal_sd.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("proposal sds must be positive".into()));
        }
        Ok(())
    }
}

/// Joint Gaussian random-walk proposal `scale * L z` on the unconstrained scale.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub chol: Mat<f64>,
    pub scale: f64,
}

impl Proposal {
    pub fn diagonal(sd: &[f64]) -> Self {
        let d = sd.len();
        Self {
            chol: Mat::from_fn(d, d, |i, j| if i == j { sd[i] } else { 0.0 }),
            scale: 1.0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.chol.nrows()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        linalg::lower_matvec(self.chol.as_ref(), &z).into_iter().map(|v| v * self.scale).collect()
    }

    /// Marginal proposal sds.
    pub fn sds(&self) -> Vec<f64> {
        (0..self.chol.nrows())
            .map(|i| self.scale * (0..=i).map(|j| self.chol[(i, j)].powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Multiplies the proposal scale by `exp(rate - 0.234)`.
pub fn adapt_proposals(proposal: &mut Proposal, window_acceptance: f64) {
    proposal.scale *= (window_acceptance - TARGET_ACCEPTANCE).exp();
}

/// Current state of one chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub current: Evaluation,
    pub accepted: usize,
    pub proposed: usize,
    pub numerical_failures: usize,
    pub last_failure: Option<String>,
}

pub struct StepContext<'a> {
    pub data: &'a JointDataset,
    pub knots: &'a KnotSet,
    pub priors: &'a PriorSpec,
    pub transform: Transform,
}

/// One joint Metropolis update of `{theta_u, theta_v, alpha, tau2_y, tau2_z}`.
/// Returns whether the proposal was accepted.
pub fn metropolis_block_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    ctx: &StepContext<'_>,
    proposal: &Proposal,
    rng: &mut R,
) -> bool {
    let cur = ctx.transform.forward(&state.current.params);
    let step = proposal.draw(rng);
    let prop: Vec<f64> = cur.iter().zip(&step).map(|(a, b)| a + b).collect();
    let candidate = ctx.transform.inverse(&prop, &state.current.params);
    state.proposed += 1;
    let u: f64 = rng.random();
    let eval = match evaluate(&candidate, ctx.data, ctx.knots, ctx.priors, true) {
        Ok(Some(e)) => e,
        Ok(None) => return false,
        Err(e) => {
            state.numerical_failures += 1;
            state.last_failure = Some(e.to_string());
            return false;
        }
    };
    if u.ln() < eval.log_target - state.current.log_target {
        state.current = eval;
        state.accepted += 1;
        true
    } else {
        false
    }
}

/// Gibbs update of `beta`; refreshes the likelihood and target at the new value.
pub fn gibbs_beta<R: Rng + ?Sized>(state: &mut ChainState, ctx: &StepContext<'_>, prior: &GaussianPrior, rng: &mut R) -> Result<()> {
    let beta = state.current.workspace.sample_beta(prior, rng)?;
    let cur = &mut state.current;
    cur.params.set_beta(&beta);
    cur.loglik = cur.workspace.log_likelihood(&beta);
    cur.log_target = target_value(
        &cur.params,
        cur.loglik,
        ctx.priors,
        true,
        ctx.transform.n_alpha,
        ctx.transform.n_tau,
    );
    Ok(())
}

/// Stored output of one chain, burn-in discarded.
#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub draws: Vec<ModelParams>,
    /// Log-likelihood at each stored draw.
    pub loglik: Vec<f64>,
    pub log_target: Vec<f64>,
    /// Index into `draws` of each latent draw.
    pub latent_index: Vec<usize>,
    pub u_star: Vec<Vec<f64>>,
    pub v_star: Vec<Vec<f64>>,
    pub accepted: usize,
    pub proposed: usize,
    pub numerical_failures: usize,
    pub final_proposal_sd: Vec<f64>,
    pub seconds: f64,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    /// Column of one named parameter (see [`ModelParams::names`]).
    pub fn trace(&self, name: &str) -> Option<Vec<f64>> {
        let names = self.draws.first()?.names();
        let i = names.iter().position(|n| n == name)?;
        Some(self.draws.iter().map(|p| p.to_row()[i]).collect())
    }
}

/// Heuristic starting values: least-squares `beta`, variance splits of the
/// residuals, and ranges tied to the data extent.
pub fn initial_params(data: &JointDataset, knots: &KnotSet, priors: &PriorSpec) -> ModelParams {
    let beta_z = least_squares(&data.qz, &data.z);
    let beta_y = least_squares(&data.qy, &data.y);
    let rz: Vec<f64> = residual(&data.qz, &data.z, &beta_z);
    let ry: Vec<f64> = residual(&data.qy, &data.y, &beta_y);
    let mut by_height = vec![(0.0, 0usize); data.n_x()];
    for (i, r) in rz.iter().enumerate() {
        let e = &mut by_height[data.height_index[i]];
        e.0 += r * r;
        e.1 += 1;
    }
    let pooled = (rz.iter().map(|r| r * r).sum::<f64>() / rz.len().max(1) as f64).max(1e-8);
    let vy = (ry.iter().map(|r| r * r).sum::<f64>() / ry.len().max(1) as f64).max(1e-8);
    let tau2_z = by_height
        .iter()
        .map(|&(s, c)| (0.5 * s / c.max(1) as f64).max(0.01 * pooled))
        .collect();
    let (_, d_max) = distance_range(data);
    let x_span = data.heights.last().unwrap() - data.heights.first().unwrap();
    let a = if x_span > 0.0 { 16.0 / (x_span * x_span) } else { 1.0 };
    let clamp = |iv: &Interval, x: f64| {
        let (lo, hi) = (iv.lo, iv.hi);
        if iv.contains(x) {
            x
        } else {
            (lo.max(1e-12) * hi).sqrt().clamp(lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo))
        }
    };
    ModelParams {
        sigma2_u: 0.5 * pooled,
        a: clamp(&priors.a, a),
        gamma: clamp(&priors.gamma, 0.5 * (priors.gamma.lo + priors.gamma.hi)),
        c: clamp(&priors.c, 12.0 / d_max.max(1e-12)),
        sigma2_v: 0.3 * vy,
        phi_v: (priors.phi_v.lo * priors.phi_v.hi).sqrt(),
        tau2_y: 0.3 * vy,
        tau2_z,
        alpha: vec![0.0; knots.n_x()],
        beta_y,
        beta_z,
    }
}

fn least_squares(q: &Mat<f64>, y: &[f64]) -> Vec<f64> {
    let p = q.ncols();
    if p == 0 {
        return Vec::new();
    }
    let mut g = linalg::gram(q.as_ref());
    for i in 0..p {
        g[(i, i)] += 1e-10;
    }
    let rhs = linalg::tmatvec(q.as_ref(), y);
    match linalg::cholesky(g.as_ref()) {
        Some(l) => linalg::solve_lower_transpose_vec(l.as_ref(), &linalg::solve_lower_vec(l.as_ref(), &rhs)),
        None => vec![0.0; p],
    }
}

fn residual(q: &Mat<f64>, y: &[f64], beta: &[f64]) -> Vec<f64> {
    let fit = linalg::matvec(q.as_ref(), beta);
    y.iter().zip(&fit).map(|(a, b)| a - b).collect()
}

/// Coordinate search on the unconstrained scale, improving the target
/// from `start`. Directions: each of `theta_u`, `theta_v`, `alpha`, `tau2_y`,
/// and a common shift of all `ln tau2_z`. `beta` is reset to its
/// conditional mean after every pass.
pub fn refine_start(
    start: ModelParams,
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    passes: usize,
) -> Result<Evaluation> {
    let tr = Transform::new(priors, knots.n_x(), data.n_x());
    let prior_beta = priors.beta_prior(start.beta().len());
    let eval_at = |v: &[f64], template: &ModelParams| -> Option<Evaluation> {
        evaluate(&tr.inverse(v, template), data, knots, priors, true).ok().flatten()
    };
    let mut best = evaluate(&start, data, knots, priors, true)?.ok_or_else(|| {
        Error::Config("starting values lie outside the prior support".into())
    })?;
    let n_dirs = 6 + tr.n_alpha + 2;
    let mut step = 1.0;
    for _ in 0..passes {
        for dir in 0..n_dirs {
            for sign in [1.0, -1.0] {
                let mut v = tr.forward(&best.params);
                if dir < 6 + tr.n_alpha + 1 {
                    v[dir] += sign * step;
                } else {
                    for t in &mut v[7 + tr.n_alpha..] {
                        *t += sign * step;
                    }
                }
                if let Some(e) = eval_at(&v, &best.params) {
                    if e.log_target > best.log_target {
                        best = e;
                        break;
                    }
                }
            }
        }
        // beta at its conditional mean
        if let Ok((l, b)) = best.workspace.beta_conditional(&prior_beta) {
            let beta = linalg::solve_lower_transpose_vec(l.as_ref(), &linalg::solve_lower_vec(l.as_ref(), &b));
            best.params.set_beta(&beta);
            best.loglik = best.workspace.log_likelihood(&beta);
            best.log_target = target_value(&best.params, best.loglik, priors, true, tr.n_alpha, tr.n_tau);
        }
        step *= 0.5;
    }
    Ok(best)
}

/// Proposal sds from the curvature of the target along each coordinate.
pub fn curvature_sds(at: &Evaluation, data: &JointDataset, knots: &KnotSet, priors: &PriorSpec) -> Vec<f64> {
    let tr = Transform::new(priors, knots.n_x(), data.n_x());
    let center = tr.forward(&at.params);
    let h = 0.05;
    (0..center.len())
        .map(|i| {
            let mut f = [0.0; 2];
            for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut v = center.clone();
                v[i] += sign * h;
                f[slot] = evaluate(&tr.inverse(&v, &at.params), data, knots, priors, true)
                    .ok()
                    .flatten()
                    .map_or(f64::NEG_INFINITY, |e| e.log_target);
            }
            let curv = -(f[0] + f[1] - 2.0 * at.log_target) / (h * h);
            if curv.is_finite() && curv > 0.0 {
                (1.0 / curv.sqrt()).clamp(1e-3, 1.0)
            } else {
                0.1
            }
        })
        .collect()
}

/// Runs one chain. `rng` must be dedicated to this chain.
#[allow(clippy::too_many_arguments)]
pub fn run_chain<R: Rng + ?Sized>(
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    start: &Evaluation,
    initial_sd: &[f64],
    rng: &mut R,
) -> Result<PosteriorChain> {
    config.validate()?;
    let clock = Instant::now();
    let transform = Transform::new(priors, knots.n_x(), data.n_x());
    let ctx = StepContext {
        data,
        knots,
        priors,
        transform,
    };
    let dim = transform.dim();
    if initial_sd.len() != dim {
        return Err(Error::Config(format!(
            "expected {dim} proposal sds, got {}",
            initial_sd.len()
        )));
    }
    let beta_prior = priors.beta_prior(start.params.beta().len());
    let base_cov_chol = Proposal::diagonal(initial_sd).chol;
    let mut proposal = Proposal {
        chol: base_cov_chol.clone(),
        scale: 2.38 / (dim as f64).sqrt(),
    };

    let mut state = ChainState {
        current: start.clone(),
        accepted: 0,
        proposed: 0,
        numerical_failures: 0,
        last_failure: None,
    };
    let mut out = PosteriorChain {
        draws: Vec::new(),
        loglik: Vec::new(),
        log_target: Vec::new(),
        latent_index: Vec::new(),
        u_star: Vec::new(),
        v_star: Vec::new(),
        accepted: 0,
        proposed: 0,
        numerical_failures: 0,
        final_proposal_sd: Vec::new(),
        seconds: 0.0,
    };
    let mut history: Vec<Vec<f64>> = Vec::new();
    let (mut win_acc, mut win_fail, mut win_len) = (0usize, 0usize, 0usize);
    let mut learned = false;
    let n_star = state.current.workspace.n_knots() - knots.n_v();

    for it in 0..config.n_iter {
        if config.update_covariance {
            let fails_before = state.numerical_failures;
            if metropolis_block_step(&mut state, &ctx, &proposal, rng) {
                win_acc += 1;
            }
            win_fail += state.numerical_failures - fails_before;
            win_len += 1;
        }
        gibbs_beta(&mut state, &ctx, &beta_prior, rng)?;

        if win_len == config.adapt_window {
            if win_fail * 2 > win_len {
                return Err(Error::numerical(
                    Stage::PosteriorPrecision,
                    format!(
                        "{win_fail} of {win_len} proposals failed numerically by iteration {it}; last: {}",
                        state.last_failure.as_deref().unwrap_or("unknown")
                    ),
                ));
            }
            if it < config.n_burn {
                adapt_proposals(&mut proposal, win_acc as f64 / win_len as f64);
                if config.adapt_covariance && history.len() >= 2 * dim.max(50) {
                    let recent = &history[history.len() / 2..];
                    if let Some(chol) = learned_covariance(recent, &base_cov_chol) {
                        proposal.chol = chol;
                        if !learned {
                            proposal.scale = 2.38 / (dim as f64).sqrt();
                            learned = true;
                        }
                    }
                }
            }
            win_acc = 0;
            win_fail = 0;
            win_len = 0;
        }

        if it < config.n_burn {
            if config.adapt_covariance && config.update_covariance {
                history.push(transform.forward(&state.current.params));
            }
            continue;
        }
        let post = it - config.n_burn;
        if post % config.thin == 0 {
            out.draws.push(state.current.params.clone());
            out.loglik.push(state.current.loglik);
            out.log_target.push(state.current.log_target);
        }
        if post % config.latent_thin == 0 {
            let beta = state.current.params.beta();
            let g = state.current.workspace.recover_latents(&beta, rng)?;
            out.latent_index.push(out.draws.len() - 1);
            out.u_star.push(g[..n_star].to_vec());
            out.v_star.push(g[n_star..].to_vec());
        }
    }
    out.accepted = state.accepted;
    out.proposed = state.proposed;
    out.numerical_failures = state.numerical_failures;
    out.final_proposal_sd = proposal.sds();
    out.seconds = clock.elapsed().as_secs_f64();
    Ok(out)
}

/// Cholesky factor of `0.95 * cov(draws) + 0.05 * base`.
fn learned_covariance(draws: &[Vec<f64>], base_chol: &Mat<f64>) -> Option<Mat<f64>> {
    let n = draws.len();
    let d = draws[0].len();
    let mean: Vec<f64> = (0..d).map(|j| draws.iter().map(|x| x[j]).sum::<f64>() / n as f64).collect();
    let centered = Mat::from_fn(n, d, |i, j| draws[i][j] - mean[j]);
    let mut cov = linalg::gram(centered.as_ref());
    let base = linalg::matmul(base_chol.as_ref(), base_chol.transpose());
    for j in 0..d {
        for i in 0..d {
            cov[(i, j)] = 0.95 * cov[(i, j)] / (n - 1) as f64 + 0.05 * base[(i, j)];
        }
    }
    linalg::cholesky(cov.as_ref())
}

/// Everything needed to launch chains: the start and the initial proposal.
#[derive(Debug, Clone)]
pub struct ChainSetup {
    pub start: Evaluation,
    pub proposal_sd: Vec<f64>,
}

/// Starting point and proposal sds shared by all chains.
pub fn prepare_chains(
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    init: Option<ModelParams>,
) -> Result<ChainSetup> {
    priors.validate()?;
    config.validate()?;
    let init = init.unwrap_or_else(|| initial_params(data, knots, priors));
    init.validate()?;
    let start = if config.optimize_start && config.update_covariance {
        refine_start(init, data, knots, priors, 5)?
    } else {
        evaluate(&init, data, knots, priors, true)?
            .ok_or_else(|| Error::Config("starting values lie outside the prior support".into()))?
    };
    let dim = Transform::new(priors, knots.n_x(), data.n_x()).dim();
    let proposal_sd = if !config.proposal_sd.is_empty() {
        if config.proposal_sd.len() != dim {
            return Err(Error::Config(format!(
                "proposal_sd has {} entries, expected {dim}",
                config.proposal_sd.len()
            )));
        }
        config.proposal_sd.clone()
    } else if config.update_covariance {
        curvature_sds(&start, data, knots, priors)
    } else {
        vec![0.1; dim]
    };
    Ok(ChainSetup { start, proposal_sd })
}

/// Per-chain random number generator: the run seed with the chain index as stream.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs `config.n_chains` chains concurrently from jittered copies of the start.
pub fn run_chains(
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    setup: &ChainSetup,
) -> Result<Vec<PosteriorChain>> {
    let results: Vec<Result<PosteriorChain>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.n_chains)
            .map(|k| {
                scope.spawn(move || {
                    let mut rng = chain_rng(config.seed, k);
                    let start = jittered_start(setup, data, knots, priors, config, &mut rng)?;
                    run_chain(data, knots, priors, config, &start, &setup.proposal_sd, &mut rng)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    results.into_iter().collect()
}

fn jittered_start<R: Rng + ?Sized>(
    setup: &ChainSetup,
    data: &JointDataset,
    knots: &KnotSet,
    priors: &PriorSpec,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Evaluation> {
    if config.start_jitter <= 0.0 || !config.update_covariance {
        return Ok(setup.start.clone());
    }
    let tr = Transform::new(priors, knots.n_x(), data.n_x());
    let center = tr.forward(&setup.start.params);
    for _ in 0..20 {
        let v: Vec<f64> = center
            .iter()
            .zip(&setup.proposal_sd)
            .map(|(c, s)| c + config.start_jitter * s.max(0.05) * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if let Ok(Some(e)) = evaluate(&tr.inverse(&v, &setup.start.params), data, knots, priors, true) {
            if e.log_target.is_finite() {
                return Ok(e);
            }
        }
    }
    Ok(setup.start.clone())
}

/// Potential scale reduction factor for one scalar over several chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if chains.len() < 2 || n < 2 {
        return f64::NAN;
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = nf / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    (var_plus / w).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::*;

    pub(crate) fn toy_data(n_plots: usize, heights: &[f64], seed: u64) -> JointDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs: Vec<Location> = (0..n_plots)
            .map(|_| Location::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)))
            .collect();
        let plots = PlotTable {
            covariate_names: vec![],
            rows: locs
                .iter()
                .map(|l| PlotRow {
                    loc: *l,
                    y: Some(rng.random_range(-1.0..1.0)),
                    covariates: vec![],
                })
                .collect(),
        };
        let signals = SignalTable {
            rows: locs
                .iter()
                .flat_map(|l| heights.iter().map(move |&h| (*l, h)))
                .map(|(l, h)| SignalRow {
                    loc: l,
                    height: h,
                    z: rng.random_range(-1.0..1.0),
                })
                .collect(),
        };
        assemble_dataset(&plots, &signals, &DesignSpec::default(), Some(5.0)).unwrap()
    }

    fn toy_params(data: &JointDataset, n_alpha: usize) -> ModelParams {
        ModelParams {
            sigma2_u: 0.4,
            a: 2.0,
            gamma: 0.5,
            c: 1.5,
            sigma2_v: 0.3,
            phi_v: 2.0,
            tau2_y: 0.2,
            tau2_z: vec![0.1; data.n_x()],
            alpha: vec![0.5; n_alpha],
            beta_y: vec![0.1],
            beta_z: vec![0.0; data.n_x()],
        }
    }

    #[test]
    fn default_variance_priors_follow_data_scale() {
        let mut data = toy_data(6, &[0.0, 1.0, 2.0], 4);
        let base = PriorSpec::default_for(&data);
        for v in data.y.iter_mut() {
            *v = 10.0 + 3.0 * *v;
        }
        for v in data.z.iter_mut() {
            *v *= 0.5;
        }
        let scaled = PriorSpec::default_for(&data);
        assert!((scaled.sigma2_v.scale / base.sigma2_v.scale - 9.0).abs() < 1e-10);
        assert!((scaled.tau2_y.scale / base.tau2_y.scale - 9.0).abs() < 1e-10);
        assert!((scaled.sigma2_u.scale / base.sigma2_u.scale - 0.25).abs() < 1e-10);
        assert!((scaled.tau2_z.scale / base.tau2_z.scale - 0.25).abs() < 1e-10);
        assert_eq!(scaled.sigma2_u.shape, 2.0);
        // intercept-only: sample variance of y
        let n = data.y.len() as f64;
        let m = data.y.iter().sum::<f64>() / n;
        let var = data.y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((scaled.tau2_y.scale - var).abs() < 1e-10 * var);
    }

    #[test]
    fn transform_round_trip_and_jacobian() {
        let data = toy_data(4, &[0.0, 1.0], 1);
        let priors = PriorSpec::default_for(&data);
        let p = toy_params(&data, 2);
        let tr = Transform::new(&priors, 2, 2);
        let v = tr.forward(&p);
        assert_eq!(v.len(), tr.dim());
        let back = tr.inverse(&v, &p);
        for (a, b) in back.to_row().iter().zip(p.to_row()) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        // numerical Jacobian of gamma
        let h = 1e-6;
        let mut vp = v.clone();
        vp[2] += h;
        let dg = (tr.inverse(&vp, &p).gamma - p.gamma) / h;
        let analytic = (p.gamma * (1.0 - p.gamma)).ln();
        assert!((dg.ln() - analytic).abs() < 1e-5);
    }

    #[test]
    fn inverse_gamma_density() {
        // IG(2, 1) at x = 0.5: 1 / Gamma(2) * 0.5^-3 * exp(-2)
        let want = (8.0 * (-2.0f64).exp()).ln();
        assert!((InvGamma { shape: 2.0, scale: 1.0 }.log_pdf(0.5) - want).abs() < 1e-12);
        assert_eq!(InvGamma { shape: 2.0, scale: 1.0 }.log_pdf(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn support_violation_is_minus_infinity() {
        let data = toy_data(4, &[0.0, 1.0], 2);
        let knots = KnotSet::at_data(&data);
        let priors = PriorSpec::default_for(&data);
        let mut p = toy_params(&data, 2);
        p.gamma = 1.0 + 1e-9;
        assert_eq!(log_target(&p, &data, &knots, &priors, true).unwrap(), f64::NEG_INFINITY);
        let mut p = toy_params(&data, 2);
        p.a = 2e3;
        assert_eq!(log_target(&p, &data, &knots, &priors, false).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn target_reduces_to_likelihood_without_priors() {
        let data = toy_data(5, &[0.0, 1.0, 2.0], 3);
        let knots = KnotSet::at_data(&data);
        let priors = PriorSpec::default_for(&data);
        let p = toy_params(&data, 3);
        let e = evaluate(&p, &data, &knots, &priors, false).unwrap().unwrap();
        assert!((e.log_target - priors.log_density(&p) - e.loglik).abs() < 1e-9);
        let with_jac = log_target(&p, &data, &knots, &priors, true).unwrap();
        let jac = Transform::new(&priors, 3, 3).log_jacobian(&p);
        assert!((with_jac - e.log_target - jac).abs() < 1e-9);
    }

    #[test]
    fn adaptation_direction() {
        let mut p = Proposal::diagonal(&[1.0, 2.0]);
        adapt_proposals(&mut p, TARGET_ACCEPTANCE);
        assert_eq!(p.scale, 1.0);
        adapt_proposals(&mut p, 1.0);
        assert!(p.scale > 1.0);
        let mut q = Proposal::diagonal(&[1.0]);
        adapt_proposals(&mut q, 0.0);
        assert!(q.scale < 1.0);
        assert!((p.sds()[1] / p.sds()[0] - 2.0).abs() < 1e-12);
    }

    fn quick_config(n_iter: usize, n_burn: usize) -> SamplerConfig {
        SamplerConfig {
            n_iter,
            n_burn,
            n_chains: 2,
            latent_thin: 1,
            adapt_window: 20,
            optimize_start: false,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn minimal_chain_and_determinism() {
        let data = toy_data(4, &[0.0, 1.0], 4);
        let knots = KnotSet::at_data(&data);
        let priors = PriorSpec::default_for(&data);
        let cfg = quick_config(31, 30);
        let setup = prepare_chains(&data, &knots, &priors, &cfg, Some(toy_params(&data, 2))).unwrap();
        let a = run_chains(&data, &knots, &priors, &cfg, &setup).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].len(), 1);
        assert_eq!(a[0].u_star.len(), 1);
        assert_eq!(a[0].u_star[0].len(), knots.n_star());
        let b = run_chains(&data, &knots, &priors, &cfg, &setup).unwrap();
        assert_eq!(a[0].draws, b[0].draws);
        assert_eq!(a[1].u_star, b[1].u_star);
        assert_ne!(a[0].draws, a[1].draws);
    }

    #[test]
    fn stored_draws_respect_constraints() {
        let data = toy_data(5, &[0.0, 1.0, 2.0], 5);
        let knots = KnotSet::at_data(&data);
        let priors = PriorSpec::default_for(&data);
        let cfg = quick_config(400, 100);
        let setup = prepare_chains(&data, &knots, &priors, &cfg, Some(toy_params(&data, 3))).unwrap();
        let chains = run_chains(&data, &knots, &priors, &cfg, &setup).unwrap();
        for ch in &chains {
            assert!(ch.accepted > 0);
            for p in &ch.draws {
                assert!(p.sigma2_u > 0.0 && p.sigma2_v > 0.0 && p.tau2_y > 0.0);
                assert!(p.tau2_z.iter().all(|t| *t > 0.0));
                assert!((0.0..=1.0).contains(&p.gamma));
            }
        }
    }

    #[test]
    fn fixed_covariance_leaves_parameters() {
        let data = toy_data(4, &[0.0, 1.0], 6);
        let knots = KnotSet::at_data(&data);
        let priors = PriorSpec::default_for(&data);
        let cfg = SamplerConfig {
            update_covariance: false,
            ..quick_config(60, 10)
        };
        let p = toy_params(&data, 2);
        let setup = prepare_chains(&data, &knots, &priors, &cfg, Some(p.clone())).unwrap();
        let chains = run_chains(&data, &knots, &priors, &cfg, &setup).unwrap();
        assert!(chains[0].draws.iter().all(|d| d.sigma2_u == p.sigma2_u && d.alpha == p.alpha));
        assert_eq!(chains[0].proposed, 0);
    }

    #[test]
    fn gelman_rubin_values() {
        let same = vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]];
        assert!((gelman_rubin(&same) - (0.75f64).sqrt()).abs() < 1e-12);
        let apart = vec![vec![0.0, 0.1, -0.1, 0.05], vec![10.0, 10.1, 9.9, 10.05]];
        assert!(gelman_rubin(&apart) > 10.0);
    }
}
