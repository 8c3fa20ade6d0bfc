//! TOML run configuration shared by all subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{DesignSpec, JointDataset};
use crate::error::{Error, Result};
use crate::kernels::{ExponentialKernel, GneitingKernel};
use crate::predict::{HeightRule, PredictOptions};
use crate::sampler::{Interval, InvGamma, PriorSpec, SamplerConfig};

pub const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub simulate: SimulateConfig,
    pub knots: KnotConfig,
    pub priors: PriorOverrides,
    pub sampler: SamplerConfig,
    pub predict: PredictConfig,
    pub score: ScoreConfig,
}

/// Input tables. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub plots: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    pub holdout_plots: Option<PathBuf>,
    pub holdout_signals: Option<PathBuf>,
    pub y_formula: String,
    pub z_formula: String,
    pub z_height_specific: bool,
    pub standardize_outcome: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            plots: None,
            signals: None,
            holdout_plots: None,
            holdout_signals: None,
            y_formula: "1".into(),
            z_formula: "1".into(),
            z_height_specific: true,
            standardize_outcome: false,
        }
    }
}

impl DataConfig {
    pub fn design(&self) -> Result<DesignSpec> {
        let mut d = DesignSpec::from_formulas(&self.y_formula, &self.z_formula, self.z_height_specific)?;
        d.standardize_outcome = self.standardize_outcome;
        Ok(d)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Signal values above this height are dropped.
    pub max_height: Option<f64>,
    /// Average consecutive pairs of heights.
    pub smooth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Divides the grid side and the number of heights of the reference design.
    pub scale: usize,
    pub holdout_fraction: f64,
    /// Allow designs whose dense covariance exceeds the simulation limit.
    pub allow_large: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            holdout_fraction: 0.25,
            allow_large: false,
        }
    }
}

/// Covariance parameters used only to place knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnotTheta {
    pub sigma2_u: f64,
    pub a: f64,
    pub gamma: f64,
    pub c: f64,
    pub sigma2_v: f64,
    pub phi_v: f64,
}

impl Default for KnotTheta {
    fn default() -> Self {
        Self {
            sigma2_u: 1.0,
            a: 1.0,
            gamma: 0.5,
            c: 1.0,
            sigma2_v: 1.0,
            phi_v: 1.0,
        }
    }
}

impl KnotTheta {
    pub fn gneiting(&self) -> Result<GneitingKernel> {
        let k = GneitingKernel::new(self.sigma2_u, self.a, self.gamma, self.c);
        if !k.is_valid() {
            return Err(Error::Config(format!("invalid knot theta for u: {k:?}")));
        }
        Ok(k)
    }

    pub fn exponential(&self) -> Result<ExponentialKernel> {
        if !(self.sigma2_v > 0.0 && self.phi_v > 0.0) {
            return Err(Error::Config("knot theta needs positive sigma2_v and phi_v".into()));
        }
        Ok(ExponentialKernel::new(self.sigma2_v, self.phi_v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnotConfig {
    /// Precomputed knot files (`s1,s2` and `x`); they take precedence over selection.
    pub u_file: Option<PathBuf>,
    pub v_file: Option<PathBuf>,
    pub x_file: Option<PathBuf>,
    /// Explicit height knots.
    pub heights: Option<Vec<f64>>,
    /// Spatial knot counts; 0 places one knot at every plot.
    pub n_u: usize,
    pub n_v: usize,
    pub n_x: usize,
    pub theta: KnotTheta,
    /// Side of the candidate grid for greedy spatial selection.
    pub grid_resolution: usize,
}

impl Default for KnotConfig {
    fn default() -> Self {
        Self {
            u_file: None,
            v_file: None,
            x_file: None,
            heights: None,
            n_u: 0,
            n_v: 0,
            n_x: 5,
            theta: KnotTheta::default(),
            grid_resolution: 20,
        }
    }
}

/// Replacements for individual entries of the default prior.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorOverrides {
    pub sigma2_u: Option<InvGamma>,
    pub sigma2_v: Option<InvGamma>,
    pub tau2_y: Option<InvGamma>,
    pub tau2_z: Option<InvGamma>,
    pub a: Option<Interval>,
    pub gamma: Option<Interval>,
    pub c: Option<Interval>,
    pub phi_v: Option<Interval>,
    pub alpha_mean: Option<f64>,
    pub alpha_var: Option<f64>,
    pub beta_mean: Option<f64>,
    pub beta_var: Option<f64>,
}

impl PriorOverrides {
    pub fn resolve(&self, data: &JointDataset) -> Result<PriorSpec> {
        let mut p = PriorSpec::default_for(data);
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { p.$f = v; })*};
        }
        set!(sigma2_u, sigma2_v, tau2_y, tau2_z, a, gamma, c, phi_v, alpha_mean, alpha_var, beta_mean, beta_var);
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    /// Output directory of the `fit` run to predict from.
    pub fit_dir: Option<PathBuf>,
    pub height_rule: HeightRule,
    pub max_samples: usize,
    pub batch_size: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        let o = PredictOptions::default();
        Self {
            fit_dir: None,
            height_rule: o.height_rule,
            max_samples: 1000,
            batch_size: o.batch_size,
        }
    }
}

impl PredictConfig {
    pub fn options(&self) -> PredictOptions {
        PredictOptions {
            height_rule: self.height_rule,
            max_samples: self.max_samples,
            batch_size: self.batch_size.max(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub fit_dir: Option<PathBuf>,
    pub predict_dir: Option<PathBuf>,
    /// Probability of the central interval used for coverage and width.
    pub level: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            fit_dir: None,
            predict_dir: None,
            level: 0.95,
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
        if let Ok(abs) = std::path::absolute(&*path) {
            *path = abs;
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads `path` and makes every file path in it absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.out,
            &mut self.data.plots,
            &mut self.data.signals,
            &mut self.data.holdout_plots,
            &mut self.data.holdout_signals,
            &mut self.knots.u_file,
            &mut self.knots.v_file,
            &mut self.knots.x_file,
            &mut self.predict.fit_dir,
            &mut self.score.fit_dir,
            &mut self.score.predict_dir,
        ] {
            resolve(base, p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        p.as_deref().ok_or_else(|| Error::Config(format!("{key} is required")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.seed(), DEFAULT_SEED);
        assert_eq!(c.knots.n_x, 5);
    }

    #[test]
    fn round_trip() {
        let text = r#"
            seed = 7
            out = "/tmp/run"
            [data]
            plots = "/d/p.csv"
            y_formula = "1+elev"
            [preprocess]
            max_height = 22.8
            smooth = true
            [knots]
            heights = [0.5, 2.0]
            n_u = 30
            [knots.theta]
            a = 2.0
            [priors]
            tau2_y = { shape = 3.0, scale = 2.0 }
            [sampler]
            n_iter = 200
            n_burn = 100
            [predict]
            height_rule = "linear"
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.seed, Some(7));
        assert_eq!(c.knots.theta.a, 2.0);
        assert_eq!(c.knots.theta.c, 1.0);
        assert_eq!(c.priors.tau2_y, Some(InvGamma { shape: 3.0, scale: 2.0 }));
        assert_eq!(c.predict.height_rule, HeightRule::Linear);
        assert_eq!(c.sampler.n_iter, 200);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in ["bogus = 1", "[sampler]\nn_iters = 5", "[knots.theta]\nrange = 1.0", "[nope]"] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn wrong_types_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("seed = \"x\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[sampler]\nn_iter = -1"), Err(Error::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[data]\nplots = \"sub/p.csv\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.data.plots.unwrap(), dir.path().join("sub/p.csv"));
    }

    #[test]
    fn missing_file_is_a_config_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
