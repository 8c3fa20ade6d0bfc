//! Synthetic joint datasets drawn from the full (dense) model.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    assemble_dataset, DesignSpec, JointDataset, Location, ModelParams, PlotRow, PlotTable, SignalRow, SignalTable,
    SpaceHeightCoord,
};
use crate::error::{Error, Result, Stage};
use crate::kernels::{self, CovarianceFn};
use crate::linalg;

/// Largest number of `u` coordinates simulated without an explicit override.
pub const DENSE_LIMIT: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Plots sit at the cell centers of a `grid_per_side` square grid.
    pub grid_per_side: usize,
    pub extent: f64,
    pub n_heights: usize,
    pub max_height: f64,
    /// Heights at which `alpha` applies.
    pub alpha_heights: Vec<f64>,
    /// `tau2_z` and `beta_z` are per observed height; `beta_y` is the intercept.
    pub truth: ModelParams,
    pub seed: u64,
    pub allow_large: bool,
}

/// Latent values behind a simulated dataset.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub params: ModelParams,
    pub alpha_heights: Vec<f64>,
    /// `u` at every signal coordinate, dataset order.
    pub u_signal: Vec<f64>,
    /// `u(s_j, alpha_heights[k])` at index `j * n_alpha + k`.
    pub u_alpha: Vec<f64>,
    pub v: Vec<f64>,
}

/// Smooth unimodal signal mean over height.
pub fn default_beta_z(x: f64, max_height: f64) -> f64 {
    let center = 0.4 * max_height;
    let width = 0.24 * max_height;
    0.5 + 2.5 * (-0.5 * ((x - center) / width).powi(2)).exp()
}

/// Slowly increasing signal noise variance over height.
pub fn default_tau2_z(x: f64, max_height: f64) -> f64 {
    0.05 + 0.05 * x / max_height
}

/// Outcome noise variance used when none is given.
pub const DEFAULT_TAU2_Y: f64 = 1.0;

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Simulation design of the full-size experiment with every grid dimension
/// divided by `scale`: a `20/scale` square grid on `[0, 4]^2`, `50/scale`
/// heights on `[0, 5]`, and five equally spaced loading heights.
pub fn table1_experiment(scale: usize) -> SimConfig {
    let scale = scale.max(1);
    let n_heights = (50 / scale).max(1);
    let max_height = 5.0;
    let heights = linspace(0.0, max_height, n_heights);
    SimConfig {
        grid_per_side: (20 / scale).max(1),
        extent: 4.0,
        n_heights,
        max_height,
        alpha_heights: linspace(0.0, max_height, 5),
        truth: ModelParams {
            sigma2_u: 0.2,
            a: 12.0,
            gamma: 0.9,
            c: 5.0,
            sigma2_v: 0.5,
            phi_v: 2.0,
            tau2_y: DEFAULT_TAU2_Y,
            tau2_z: heights.iter().map(|&x| default_tau2_z(x, max_height)).collect(),
            alpha: vec![-2.0, 0.0, 2.0, 1.0, 5.0],
            beta_y: vec![20.0],
            beta_z: heights.iter().map(|&x| default_beta_z(x, max_height)).collect(),
        },
        seed: 1,
        allow_large: false,
    }
}

impl SimConfig {
    pub fn plots(&self) -> Vec<Location> {
        let g = self.grid_per_side;
        let step = self.extent / g as f64;
        let mut out = Vec::with_capacity(g * g);
        for i in 0..g {
            for j in 0..g {
                out.push(Location::new((i as f64 + 0.5) * step, (j as f64 + 0.5) * step));
            }
        }
        out
    }

    pub fn heights(&self) -> Vec<f64> {
        linspace(0.0, self.max_height, self.n_heights)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_per_side == 0 || self.n_heights == 0 {
            return Err(Error::Config("simulation grid sizes must be at least 1".into()));
        }
        self.truth.validate()?;
        if self.truth.tau2_z.len() != self.n_heights || self.truth.beta_z.len() != self.n_heights {
            return Err(Error::Config(format!(
                "tau2_z and beta_z need one value per height ({})",
                self.n_heights
            )));
        }
        if self.truth.alpha.len() != self.alpha_heights.len() {
            return Err(Error::Config("alpha and alpha_heights differ in length".into()));
        }
        if self.truth.beta_y.len() != 1 {
            return Err(Error::Config("simulation uses an intercept-only outcome design".into()));
        }
        if self.alpha_heights.iter().any(|h| !(0.0..=self.max_height).contains(h)) {
            return Err(Error::Config("alpha heights must lie in [0, max_height]".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// `L z` for a zero-mean Gaussian vector with covariance `cov`.
fn correlated_draw(cov: &Mat<f64>, variance: f64, rng: &mut ChaCha8Rng, what: &str) -> Result<Vec<f64>> {
    let n = cov.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if variance == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let (l, _) = kernels::factor_covariance(cov, variance).ok_or_else(|| {
        Error::numerical(
            Stage::Simulation,
            format!("{what} covariance is not positive definite; remove coincident coordinates or raise the jitter"),
        )
    })?;
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(linalg::lower_matvec(l.as_ref(), &z))
}

/// Draws `u` and `v` from their parent processes and the data given them.
pub fn simulate_joint(config: &SimConfig) -> Result<(JointDataset, SimTruth)> {
    config.validate()?;
    let t = &config.truth;
    let plots = config.plots();
    let heights = config.heights();

    // u is needed at observed heights and at the loading heights
    let mut u_heights = heights.clone();
    let mut alpha_slot = Vec::with_capacity(config.alpha_heights.len());
    for &h in &config.alpha_heights {
        match u_heights.iter().position(|&x| (x - h).abs() <= 1e-12 * config.max_height.max(1.0)) {
            Some(k) => alpha_slot.push(k),
            None => {
                u_heights.push(h);
                alpha_slot.push(u_heights.len() - 1);
            }
        }
    }
    let nh = u_heights.len();
    let n_u = plots.len() * nh;
    if n_u > DENSE_LIMIT && !config.allow_large {
        return Err(Error::Config(format!(
            "{n_u} dense coordinates exceed the limit of {DENSE_LIMIT}; set allow_large to override"
        )));
    }
    let coords: Vec<SpaceHeightCoord> = plots
        .iter()
        .flat_map(|s| u_heights.iter().map(move |&x| SpaceHeightCoord::new(*s, x)))
        .collect();

    let ku = t.gneiting();
    let u = correlated_draw(&ku.cov_matrix(&coords, &coords), t.sigma2_u, &mut stream(config.seed, 0), "u")?;
    let kv = t.exponential();
    let v = correlated_draw(&kv.cov_matrix(&plots, &plots), t.sigma2_v, &mut stream(config.seed, 1), "v")?;

    let mut rz = stream(config.seed, 2);
    let mut ry = stream(config.seed, 3);
    let mut signal_rows = Vec::with_capacity(plots.len() * heights.len());
    let mut u_signal = Vec::with_capacity(plots.len() * heights.len());
    let mut u_alpha = Vec::with_capacity(plots.len() * alpha_slot.len());
    let mut plot_rows = Vec::with_capacity(plots.len());
    for (j, s) in plots.iter().enumerate() {
        for (k, &x) in heights.iter().enumerate() {
            let uu = u[j * nh + k];
            let e: f64 = StandardNormal.sample(&mut rz);
            signal_rows.push(SignalRow {
                loc: *s,
                height: x,
                z: t.beta_z[k] + uu + t.tau2_z[k].sqrt() * e,
            });
            u_signal.push(uu);
        }
        let mut mean = t.beta_y[0] + v[j];
        for (a, &slot) in t.alpha.iter().zip(&alpha_slot) {
            let ua = u[j * nh + slot];
            u_alpha.push(ua);
            mean += a * ua;
        }
        let e: f64 = StandardNormal.sample(&mut ry);
        plot_rows.push(PlotRow {
            loc: *s,
            y: Some(mean + t.tau2_y.sqrt() * e),
            covariates: vec![],
        });
    }
    let data = assemble_dataset(
        &PlotTable {
            covariate_names: vec![],
            rows: plot_rows,
        },
        &SignalTable { rows: signal_rows },
        &DesignSpec::default(),
        Some(config.max_height),
    )?;
    Ok((
        data,
        SimTruth {
            params: t.clone(),
            alpha_heights: config.alpha_heights.clone(),
            u_signal,
            u_alpha,
            v,
        },
    ))
}
