//! Core data types and dataset assembly.
//!
//! A [`JointDataset`] holds plot-level outcomes `y(s_j)` and signal values
//! `z(s, x)` observed over space-height coordinates. Signals are grouped by
//! location (plots first, in plot order) and sorted by height inside each
//! location, so balanced data follow the stacking `i = j * n_x + k`.

use std::collections::{BTreeMap, HashMap};

use faer::Mat;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Planar coordinate `s = (s1, s2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub s1: f64,
    pub s2: f64,
}

impl Location {
    pub fn new(s1: f64, s2: f64) -> Self {
        Self { s1, s2 }
    }

    pub fn dist(&self, other: &Location) -> f64 {
        (self.s1 - other.s1).hypot(self.s2 - other.s2)
    }

    pub(crate) fn key(&self) -> (u64, u64) {
        (self.s1.to_bits(), self.s2.to_bits())
    }
}

/// Space-height coordinate `l = (s, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceHeightCoord {
    pub loc: Location,
    pub height: f64,
}

impl SpaceHeightCoord {
    pub fn new(loc: Location, height: f64) -> Self {
        Self { loc, height }
    }

    pub fn validate(&self, max_height: f64) -> Result<()> {
        if !(self.loc.s1.is_finite() && self.loc.s2.is_finite()) {
            return Err(Error::Data(format!("non-finite coordinate {:?}", self.loc)));
        }
        if !(self.height.is_finite() && self.height >= 0.0 && self.height <= max_height) {
            return Err(Error::Data(format!(
                "height {} outside [0, {max_height}] at ({}, {})",
                self.height, self.loc.s1, self.loc.s2
            )));
        }
        Ok(())
    }
}

/// One row of a plot file: `s1,s2,y[,covariates...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub loc: Location,
    pub y: Option<f64>,
    pub covariates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotTable {
    pub covariate_names: Vec<String>,
    pub rows: Vec<PlotRow>,
}

/// One row of a signal file: `s1,s2,x,z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalRow {
    pub loc: Location,
    pub height: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SignalTable {
    pub rows: Vec<SignalRow>,
}

/// Regression design for the outcome and the signal.
///
/// An intercept is always included. With `z_height_specific`, every signal
/// column is interacted with a height indicator, giving one coefficient per
/// (term, height) pair, ordered term-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignSpec {
    pub y_covariates: Vec<String>,
    pub z_covariates: Vec<String>,
    pub z_height_specific: bool,
    pub standardize_outcome: bool,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            y_covariates: Vec::new(),
            z_covariates: Vec::new(),
            z_height_specific: true,
            standardize_outcome: false,
        }
    }
}

impl DesignSpec {
    /// Parses formulas such as `"1"` or `"1+Elev"`.
    pub fn parse_formula(formula: &str) -> Result<Vec<String>> {
        let mut terms = Vec::new();
        let mut saw_intercept = false;
        for t in formula.split('+').map(str::trim) {
            match t {
                "" => return Err(Error::Config(format!("empty term in formula '{formula}'"))),
                "1" => saw_intercept = true,
                name => terms.push(name.to_string()),
            }
        }
        if !saw_intercept {
            return Err(Error::Config(format!(
                "formula '{formula}' must include the intercept term '1'"
            )));
        }
        Ok(terms)
    }

    pub fn from_formulas(y: &str, z: &str, z_height_specific: bool) -> Result<Self> {
        Ok(Self {
            y_covariates: Self::parse_formula(y)?,
            z_covariates: Self::parse_formula(z)?,
            z_height_specific,
            standardize_outcome: false,
        })
    }

    pub fn p_y(&self) -> usize {
        1 + self.y_covariates.len()
    }

    pub fn p_z(&self, n_x: usize) -> usize {
        let terms = 1 + self.z_covariates.len();
        if self.z_height_specific {
            terms * n_x
        } else {
            terms
        }
    }

    fn covariate_union(&self) -> Vec<String> {
        let mut names = self.y_covariates.clone();
        for n in &self.z_covariates {
            if !names.contains(n) {
                names.push(n.clone());
            }
        }
        names
    }
}

/// Misaligned joint observations with their index structure.
#[derive(Debug, Clone)]
pub struct JointDataset {
    pub plots: Vec<Location>,
    pub y: Vec<f64>,
    /// Values of `covariate_names` at each plot.
    pub plot_covariates: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    pub qy: Mat<f64>,
    /// Distinct signal locations; plots first, in plot order.
    pub sites: Vec<Location>,
    pub site_covariates: Vec<Vec<f64>>,
    pub site_plot: Vec<Option<usize>>,
    pub signal_coords: Vec<SpaceHeightCoord>,
    pub signal_site: Vec<usize>,
    pub height_index: Vec<usize>,
    pub z: Vec<f64>,
    pub qz: Mat<f64>,
    pub heights: Vec<f64>,
    pub max_height: f64,
    pub design: DesignSpec,
    /// `(mean, sd)` applied to the outcome at ingestion, if standardized.
    pub outcome_scale: Option<(f64, f64)>,
}

struct SignalEntry {
    site: usize,
    height: f64,
    z: f64,
}

impl JointDataset {
    pub fn n_s(&self) -> usize {
        self.plots.len()
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }

    pub fn n_x(&self) -> usize {
        self.heights.len()
    }

    pub fn p_y(&self) -> usize {
        self.qy.ncols()
    }

    pub fn p_z(&self) -> usize {
        self.qz.ncols()
    }

    /// Every plot observed at every height, with no extra signal sites.
    pub fn is_balanced(&self) -> bool {
        self.sites.len() == self.plots.len() && self.n() == self.n_s() * self.n_x()
    }

    /// Index of the observed height nearest to `h` (ties to the lower index).
    pub fn nearest_height_index(&self, h: f64) -> usize {
        nearest_index(&self.heights, h)
    }

    /// Design row `q_y(s)` from covariate values in `covariate_names` order.
    pub fn outcome_design_row(&self, covariates: &[f64]) -> Vec<f64> {
        let mut row = vec![1.0];
        for name in &self.design.y_covariates {
            let c = self.covariate_names.iter().position(|n| n == name).unwrap();
            row.push(covariates[c]);
        }
        row
    }

    /// Design row `q_z(s, x_k)`.
    pub fn signal_design_row(&self, height_index: usize, covariates: &[f64]) -> Vec<f64> {
        signal_design_row(
            &self.design,
            &self.covariate_names,
            self.n_x(),
            height_index,
            covariates,
        )
    }

    fn build(
        plots: Vec<Location>,
        y: Vec<f64>,
        plot_covariates: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
        sites: Vec<Location>,
        site_covariates: Vec<Vec<f64>>,
        mut signals: Vec<SignalEntry>,
        heights: Vec<f64>,
        max_height: f64,
        design: DesignSpec,
        outcome_scale: Option<(f64, f64)>,
    ) -> Result<Self> {
        let mut plot_lookup = HashMap::new();
        for (j, p) in plots.iter().enumerate() {
            plot_lookup.insert(p.key(), j);
        }
        let site_plot: Vec<Option<usize>> =
            sites.iter().map(|s| plot_lookup.get(&s.key()).copied()).collect();

        signals.sort_by(|a, b| a.site.cmp(&b.site).then(a.height.total_cmp(&b.height)));
        let n_x = heights.len();
        let mut signal_coords = Vec::with_capacity(signals.len());
        let mut signal_site = Vec::with_capacity(signals.len());
        let mut height_index = Vec::with_capacity(signals.len());
        let mut z = Vec::with_capacity(signals.len());
        for s in &signals {
            signal_coords.push(SpaceHeightCoord::new(sites[s.site], s.height));
            signal_site.push(s.site);
            let k = heights
                .iter()
                .position(|h| *h == s.height)
                .ok_or_else(|| Error::Data(format!("height {} not in height list", s.height)))?;
            height_index.push(k);
            z.push(s.z);
        }

        let p_y = design.p_y();
        let qy = Mat::from_fn(plots.len(), p_y, |j, c| {
            if c == 0 {
                1.0
            } else {
                let name = &design.y_covariates[c - 1];
                let idx = covariate_names.iter().position(|n| n == name).unwrap();
                plot_covariates[j][idx]
            }
        });
        let p_z = design.p_z(n_x);
        let mut qz = Mat::<f64>::zeros(z.len(), p_z);
        for i in 0..z.len() {
            let row = signal_design_row(
                &design,
                &covariate_names,
                n_x,
                height_index[i],
                &site_covariates[signal_site[i]],
            );
            for (c, v) in row.into_iter().enumerate() {
                qz[(i, c)] = v;
            }
        }

        let data = Self {
            plots,
            y,
            plot_covariates,
            covariate_names,
            qy,
            sites,
            site_covariates,
            site_plot,
            signal_coords,
            signal_site,
            height_index,
            z,
            qz,
            heights,
            max_height,
            design,
            outcome_scale,
        };
        Ok(data)
    }

    fn check_full_rank(&self) -> Result<()> {
        for (name, q) in [("Q_y", &self.qy), ("Q_z", &self.qz)] {
            if q.nrows() < q.ncols() {
                return Err(Error::Data(format!(
                    "{name} has fewer rows ({}) than columns ({})",
                    q.nrows(),
                    q.ncols()
                )));
            }
            let g = linalg::gram(q.as_ref());
            let scale = (0..g.nrows()).map(|i| g[(i, i)]).fold(0.0f64, f64::max).max(1.0);
            let mut gs = g.clone();
            for i in 0..gs.nrows() {
                gs[(i, i)] -= 1e-10 * scale;
            }
            if linalg::cholesky(gs.as_ref()).is_none() {
                return Err(Error::Data(format!("{name} does not have full column rank")));
            }
        }
        Ok(())
    }

    /// Keeps the listed plots (and the signals at their sites), sharing this
    /// dataset's height list. Extra non-plot sites follow when `keep_extra`.
    pub fn subset_plots(&self, keep: &[usize], keep_extra: bool) -> Result<JointDataset> {
        let plots: Vec<Location> = keep.iter().map(|&j| self.plots[j]).collect();
        let y: Vec<f64> = keep.iter().map(|&j| self.y[j]).collect();
        let plot_covariates: Vec<Vec<f64>> =
            keep.iter().map(|&j| self.plot_covariates[j].clone()).collect();
        let mut site_map = HashMap::new();
        let mut sites = Vec::new();
        let mut site_covariates = Vec::new();
        // plot sites first, in kept-plot order
        for &j in keep {
            if let Some(site) = self.site_plot.iter().position(|p| *p == Some(j)) {
                site_map.insert(site, sites.len());
                sites.push(self.sites[site]);
                site_covariates.push(self.site_covariates[site].clone());
            }
        }
        if keep_extra {
            for (site, p) in self.site_plot.iter().enumerate() {
                if p.is_none() {
                    site_map.insert(site, sites.len());
                    sites.push(self.sites[site]);
                    site_covariates.push(self.site_covariates[site].clone());
                }
            }
        }
        let signals = (0..self.n())
            .filter_map(|i| {
                site_map.get(&self.signal_site[i]).map(|&site| SignalEntry {
                    site,
                    height: self.signal_coords[i].height,
                    z: self.z[i],
                })
            })
            .collect();
        Self::build(
            plots,
            y,
            plot_covariates,
            self.covariate_names.clone(),
            sites,
            site_covariates,
            signals,
            self.heights.clone(),
            self.max_height,
            self.design.clone(),
            self.outcome_scale,
        )
    }

    /// Appends another dataset's signals (as extra sites without outcomes).
    ///
    /// Heights are mapped to the nearest height of `self`, so the result keeps
    /// this dataset's `tau2_z` and `beta_z` indexing.
    pub fn augment_signals(&self, other: &JointDataset) -> Result<JointDataset> {
        let mut sites = self.sites.clone();
        let mut site_covariates = self.site_covariates.clone();
        let mut signals: Vec<SignalEntry> = (0..self.n())
            .map(|i| SignalEntry {
                site: self.signal_site[i],
                height: self.signal_coords[i].height,
                z: self.z[i],
            })
            .collect();
        let cov_idx: Vec<usize> = self
            .covariate_names
            .iter()
            .map(|n| {
                other.covariate_names.iter().position(|m| m == n).ok_or_else(|| {
                    Error::Data(format!("augmenting dataset lacks covariate '{n}'"))
                })
            })
            .collect::<Result<_>>()?;
        let offset = sites.len();
        for (s, loc) in other.sites.iter().enumerate() {
            sites.push(*loc);
            site_covariates.push(cov_idx.iter().map(|&c| other.site_covariates[s][c]).collect());
        }
        for i in 0..other.n() {
            let k = self.nearest_height_index(other.signal_coords[i].height);
            signals.push(SignalEntry {
                site: offset + other.signal_site[i],
                height: self.heights[k],
                z: other.z[i],
            });
        }
        Self::build(
            self.plots.clone(),
            self.y.clone(),
            self.plot_covariates.clone(),
            self.covariate_names.clone(),
            sites,
            site_covariates,
            signals,
            self.heights.clone(),
            self.max_height,
            self.design.clone(),
            self.outcome_scale,
        )
    }

    /// Back to tables; outcomes are written on the ingestion scale.
    pub fn to_tables(&self) -> (PlotTable, SignalTable) {
        let unscale = |v: f64| match self.outcome_scale {
            Some((m, s)) => v * s + m,
            None => v,
        };
        let plots = PlotTable {
            covariate_names: self.covariate_names.clone(),
            rows: (0..self.n_s())
                .map(|j| PlotRow {
                    loc: self.plots[j],
                    y: Some(unscale(self.y[j])),
                    covariates: self.plot_covariates[j].iter().map(|v| Some(*v)).collect(),
                })
                .collect(),
        };
        let signals = SignalTable {
            rows: (0..self.n())
                .map(|i| SignalRow {
                    loc: self.signal_coords[i].loc,
                    height: self.signal_coords[i].height,
                    z: self.z[i],
                })
                .collect(),
        };
        (plots, signals)
    }

    /// Signals of one site, as `(height, z)` in ascending height.
    pub fn site_signal(&self, site: usize) -> Vec<(f64, f64)> {
        (0..self.n())
            .filter(|&i| self.signal_site[i] == site)
            .map(|i| (self.signal_coords[i].height, self.z[i]))
            .collect()
    }
}

pub(crate) fn nearest_index(values: &[f64], v: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, h) in values.iter().enumerate() {
        let d = (h - v).abs();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn signal_design_row(
    design: &DesignSpec,
    covariate_names: &[String],
    n_x: usize,
    height_index: usize,
    covariates: &[f64],
) -> Vec<f64> {
    let mut terms = vec![1.0];
    for name in &design.z_covariates {
        let c = covariate_names.iter().position(|n| n == name).unwrap();
        terms.push(covariates[c]);
    }
    if design.z_height_specific {
        let mut row = vec![0.0; terms.len() * n_x];
        for (t, v) in terms.iter().enumerate() {
            row[t * n_x + height_index] = *v;
        }
        row
    } else {
        terms
    }
}

/// Builds a [`JointDataset`] from plot and signal tables.
///
/// `max_height` is the declared upper end `M` of the height interval; when
/// `None` the largest observed height is used.
pub fn assemble_dataset(
    plots: &PlotTable,
    signals: &SignalTable,
    design: &DesignSpec,
    max_height: Option<f64>,
) -> Result<JointDataset> {
    if plots.rows.is_empty() {
        return Err(Error::Data("plot table is empty".into()));
    }
    let names = design.covariate_union();
    let col_of: Vec<usize> = names
        .iter()
        .map(|n| {
            plots.covariate_names.iter().position(|m| m == n).ok_or_else(|| {
                Error::Data(format!("design requires covariate '{n}' missing from plot table"))
            })
        })
        .collect::<Result<_>>()?;

    let mut plot_locs = Vec::with_capacity(plots.rows.len());
    let mut y = Vec::with_capacity(plots.rows.len());
    let mut plot_covs = Vec::with_capacity(plots.rows.len());
    let mut seen = HashMap::new();
    for (r, row) in plots.rows.iter().enumerate() {
        if !(row.loc.s1.is_finite() && row.loc.s2.is_finite()) {
            return Err(Error::Data(format!("plot row {r}: non-finite coordinate")));
        }
        if let Some(prev) = seen.insert(row.loc.key(), r) {
            return Err(Error::Data(format!(
                "duplicate plot location ({}, {}) in rows {prev} and {r}",
                row.loc.s1, row.loc.s2
            )));
        }
        let yv = row
            .y
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Data(format!("plot row {r}: missing outcome")))?;
        let covs: Vec<f64> = col_of
            .iter()
            .zip(&names)
            .map(|(&c, name)| {
                row.covariates.get(c).copied().flatten().filter(|v| v.is_finite()).ok_or_else(
                    || {
                        Error::Data(format!(
                            "plot at ({}, {}) has no value for covariate '{name}'",
                            row.loc.s1, row.loc.s2
                        ))
                    },
                )
            })
            .collect::<Result<_>>()?;
        plot_locs.push(row.loc);
        y.push(yv);
        plot_covs.push(covs);
    }

    let outcome_scale = if design.standardize_outcome {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
        if !(sd > 0.0) {
            return Err(Error::Data("cannot standardize a constant outcome".into()));
        }
        for v in y.iter_mut() {
            *v = (*v - mean) / sd;
        }
        Some((mean, sd))
    } else {
        None
    };

    let observed_max = signals.rows.iter().map(|r| r.height).fold(f64::NEG_INFINITY, f64::max);
    let m = max_height.unwrap_or(observed_max.max(0.0));

    let mut site_lookup: HashMap<(u64, u64), usize> = HashMap::new();
    let mut sites = plot_locs.clone();
    let mut site_covs = plot_covs.clone();
    for (j, p) in plot_locs.iter().enumerate() {
        site_lookup.insert(p.key(), j);
    }
    let mut coord_seen: HashMap<(u64, u64, u64), usize> = HashMap::new();
    let mut height_set = BTreeMap::new();
    let mut entries = Vec::with_capacity(signals.rows.len());
    for (r, row) in signals.rows.iter().enumerate() {
        SpaceHeightCoord::new(row.loc, row.height)
            .validate(m)
            .map_err(|e| Error::Data(format!("signal row {r}: {e}")))?;
        if !row.z.is_finite() {
            return Err(Error::Data(format!("signal row {r}: non-finite value")));
        }
        let key = (row.loc.s1.to_bits(), row.loc.s2.to_bits(), row.height.to_bits());
        if let Some(prev) = coord_seen.insert(key, r) {
            return Err(Error::Data(format!(
                "duplicate signal coordinate s=({}, {}), x={} in rows {prev} and {r}",
                row.loc.s1, row.loc.s2, row.height
            )));
        }
        let site = match site_lookup.get(&row.loc.key()) {
            Some(&s) => s,
            None => {
                if !names.is_empty() && !design.z_covariates.is_empty() {
                    return Err(Error::Data(format!(
                        "signal location ({}, {}) has no plot row supplying covariates",
                        row.loc.s1, row.loc.s2
                    )));
                }
                let s = sites.len();
                sites.push(row.loc);
                site_covs.push(vec![0.0; names.len()]);
                site_lookup.insert(row.loc.key(), s);
                s
            }
        };
        height_set.insert(row.height.to_bits(), row.height);
        entries.push(SignalEntry {
            site,
            height: row.height,
            z: row.z,
        });
    }
    if entries.is_empty() {
        return Err(Error::Data("signal table is empty".into()));
    }
    let mut heights: Vec<f64> = height_set.into_values().collect();
    heights.sort_by(f64::total_cmp);

    let data = JointDataset::build(
        plot_locs,
        y,
        plot_covs,
        names,
        sites,
        site_covs,
        entries,
        heights,
        m,
        design.clone(),
        outcome_scale,
    )?;
    data.check_full_rank()?;
    Ok(data)
}

/// Random partition of plot locations into (train, holdout).
///
/// `round(fraction * n_s)` plots are held out; each part carries the signals
/// at its own locations and both keep the parent's height list.
pub fn holdout_split(
    data: &JointDataset,
    fraction: f64,
    seed: u64,
) -> Result<(JointDataset, JointDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("holdout fraction {fraction} not in (0, 1)")));
    }
    let n_s = data.n_s();
    let n_hold = (fraction * n_s as f64).round() as usize;
    if n_hold == 0 || n_hold >= n_s {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} leaves an empty partition for {n_s} plots"
        )));
    }
    let mut idx: Vec<usize> = (0..n_s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut hold: Vec<usize> = idx[..n_hold].to_vec();
    let mut train: Vec<usize> = idx[n_hold..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    Ok((data.subset_plots(&train, true)?, data.subset_plots(&hold, false)?))
}

/// Model unknowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub sigma2_u: f64,
    pub a: f64,
    pub gamma: f64,
    pub c: f64,
    pub sigma2_v: f64,
    pub phi_v: f64,
    pub tau2_y: f64,
    pub tau2_z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta_y: Vec<f64>,
    pub beta_z: Vec<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("sigma2_u", self.sigma2_u),
            ("a", self.a),
            ("c", self.c),
            ("sigma2_v", self.sigma2_v),
            ("phi_v", self.phi_v),
            ("tau2_y", self.tau2_y),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if let Some(t) = self.tau2_z.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(Error::Config(format!("tau2_z entries must be positive, got {t}")));
        }
        Ok(())
    }

    pub fn gneiting(&self) -> crate::kernels::GneitingKernel {
        crate::kernels::GneitingKernel::new(self.sigma2_u, self.a, self.gamma, self.c)
    }

    pub fn exponential(&self) -> crate::kernels::ExponentialKernel {
        crate::kernels::ExponentialKernel::new(self.sigma2_v, self.phi_v)
    }

    /// `beta_z` stacked over `beta_y`.
    pub fn beta(&self) -> Vec<f64> {
        self.beta_z.iter().chain(&self.beta_y).copied().collect()
    }

    pub fn set_beta(&mut self, beta: &[f64]) {
        let p_z = self.beta_z.len();
        self.beta_z.copy_from_slice(&beta[..p_z]);
        self.beta_y.copy_from_slice(&beta[p_z..]);
    }

    /// Column names used for chain CSVs.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["sigma2_u", "a", "gamma", "c", "sigma2_v", "phi_v", "tau2_y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((1..=self.tau2_z.len()).map(|k| format!("tau2_z_{k}")));
        v.extend((1..=self.alpha.len()).map(|k| format!("alpha_{k}")));
        v.extend((0..self.beta_y.len()).map(|k| format!("beta_y_{k}")));
        v.extend((0..self.beta_z.len()).map(|k| format!("beta_z_{k}")));
        v
    }

    pub fn to_row(&self) -> Vec<f64> {
        let mut v = vec![
            self.sigma2_u,
            self.a,
            self.gamma,
            self.c,
            self.sigma2_v,
            self.phi_v,
            self.tau2_y,
        ];
        v.extend(&self.tau2_z);
        v.extend(&self.alpha);
        v.extend(&self.beta_y);
        v.extend(&self.beta_z);
        v
    }

    /// Inverse of [`to_row`](Self::to_row) given the vector lengths.
    pub fn from_row(row: &[f64], n_tau: usize, n_alpha: usize, p_y: usize, p_z: usize) -> Self {
        let mut it = row.iter().copied();
        let mut take = |k: usize| -> Vec<f64> { (&mut it).take(k).collect() };
        let head = take(7);
        Self {
            sigma2_u: head[0],
            a: head[1],
            gamma: head[2],
            c: head[3],
            sigma2_v: head[4],
            phi_v: head[5],
            tau2_y: head[6],
            tau2_z: take(n_tau),
            alpha: take(n_alpha),
            beta_y: take(p_y),
            beta_z: take(p_z),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot_table(locs: &[(f64, f64)], elev: bool) -> PlotTable {
        PlotTable {
            covariate_names: if elev { vec!["Elev".into()] } else { vec![] },
            rows: locs
                .iter()
                .enumerate()
                .map(|(j, &(a, b))| PlotRow {
                    loc: Location::new(a, b),
                    y: Some(j as f64 + 0.5),
                    covariates: if elev { vec![Some(100.0 + 10.0 * j as f64)] } else { vec![] },
                })
                .collect(),
        }
    }

    fn signal_table(locs: &[(f64, f64)], heights: &[f64]) -> SignalTable {
        let mut rows = Vec::new();
        // deliberately reversed so assembly has to reorder
        for &(a, b) in locs.iter().rev() {
            for &h in heights.iter().rev() {
                rows.push(SignalRow {
                    loc: Location::new(a, b),
                    height: h,
                    z: a + 10.0 * h,
                });
            }
        }
        SignalTable { rows }
    }

    #[test]
    fn two_plots_three_heights_intercept_only() {
        let locs = [(0.0, 0.0), (1.0, 0.5)];
        let d = assemble_dataset(
            &plot_table(&locs, false),
            &signal_table(&locs, &[0.0, 1.0, 2.0]),
            &DesignSpec::default(),
            None,
        )
        .unwrap();
        assert_eq!((d.n_s(), d.n_x(), d.n()), (2, 3, 6));
        assert_eq!((d.qy.nrows(), d.qy.ncols()), (2, 1));
        assert!(d.qy.col(0).iter().all(|v| *v == 1.0));
        assert!(d.is_balanced());
        for j in 0..2 {
            for k in 0..3 {
                let i = j * 3 + k;
                assert_eq!(d.signal_site[i], j);
                assert_eq!(d.height_index[i], k);
                assert_eq!(d.signal_coords[i].loc, d.plots[j]);
            }
        }
    }

    #[test]
    fn elevation_design_columns() {
        let locs = [(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)];
        let mut design = DesignSpec::from_formulas("1+Elev", "1+Elev", true).unwrap();
        design.standardize_outcome = false;
        let d = assemble_dataset(
            &plot_table(&locs, true),
            &signal_table(&locs, &[0.0, 1.0]),
            &design,
            None,
        )
        .unwrap();
        assert_eq!(d.qy.ncols(), 2);
        for j in 0..3 {
            assert_eq!(d.qy[(j, 0)], 1.0);
            assert_eq!(d.qy[(j, 1)], 100.0 + 10.0 * j as f64);
        }
        // height-specific intercepts then height-specific slopes
        assert_eq!(d.qz.ncols(), 4);
        assert_eq!(d.qz[(1, 1)], 1.0);
        assert_eq!(d.qz[(1, 3)], 100.0);
    }

    #[test]
    fn duplicate_signal_is_rejected() {
        let locs = [(0.0, 0.0)];
        let mut sig = signal_table(&locs, &[1.0, 2.0]);
        sig.rows.push(SignalRow {
            loc: Location::new(0.0, 0.0),
            height: 1.0,
            z: 3.0,
        });
        let err = assemble_dataset(&plot_table(&locs, false), &sig, &DesignSpec::default(), None)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate signal coordinate s=(0, 0), x=1"), "{msg}");
    }

    #[test]
    fn missing_covariate_is_rejected() {
        let locs = [(0.0, 0.0), (1.0, 1.0)];
        let mut plots = plot_table(&locs, true);
        plots.rows[1].covariates[0] = None;
        let design = DesignSpec::from_formulas("1+Elev", "1", true).unwrap();
        let err = assemble_dataset(&plots, &signal_table(&locs, &[0.0]), &design, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("Elev"));
    }

    #[test]
    fn unbalanced_signals_map_to_one_index_each() {
        let locs = [(0.0, 0.0), (1.0, 0.0)];
        let mut sig = signal_table(&locs, &[0.0, 1.0, 2.0]);
        sig.rows.retain(|r| !(r.loc.s1 == 1.0 && r.height == 1.0));
        let d = assemble_dataset(&plot_table(&locs, false), &sig, &DesignSpec::default(), None)
            .unwrap();
        assert_eq!(d.n(), 5);
        assert!(!d.is_balanced());
        let pairs: Vec<(usize, usize)> =
            (0..d.n()).map(|i| (d.signal_site[i], d.height_index[i])).collect();
        assert_eq!(pairs, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 2)]);
    }

    #[test]
    fn holdout_small_case() {
        let locs = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        let d = assemble_dataset(
            &plot_table(&locs, false),
            &signal_table(&locs, &[0.0, 1.0]),
            &DesignSpec::default(),
            None,
        )
        .unwrap();
        let (tr, ho) = holdout_split(&d, 0.25, 7).unwrap();
        assert_eq!((tr.n_s(), ho.n_s()), (3, 1));
        assert_eq!(tr.n() + ho.n(), d.n());
        let mut all: Vec<(f64, f64)> =
            tr.plots.iter().chain(&ho.plots).map(|p| (p.s1, p.s2)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<(f64, f64)> = locs.to_vec();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, want);
        let (tr2, ho2) = holdout_split(&d, 0.25, 7).unwrap();
        assert_eq!(tr2.plots, tr.plots);
        assert_eq!(ho2.plots, ho.plots);
    }

    #[test]
    fn holdout_rejects_empty_partition() {
        let locs = [(0.0, 0.0), (1.0, 0.0)];
        let d = assemble_dataset(
            &plot_table(&locs, false),
            &signal_table(&locs, &[0.0]),
            &DesignSpec::default(),
            None,
        )
        .unwrap();
        assert!(holdout_split(&d, 0.1, 1).is_err());
        assert!(holdout_split(&d, 1.0, 1).is_err());
    }

    #[test]
    fn params_row_round_trip() {
        let p = ModelParams {
            sigma2_u: 0.2,
            a: 12.0,
            gamma: 0.9,
            c: 5.0,
            sigma2_v: 0.5,
            phi_v: 2.0,
            tau2_y: 1.0,
            tau2_z: vec![0.1, 0.2],
            alpha: vec![-2.0, 0.0, 2.0],
            beta_y: vec![20.0],
            beta_z: vec![1.0, 2.0],
        };
        let row = p.to_row();
        assert_eq!(row.len(), p.names().len());
        assert_eq!(ModelParams::from_row(&row, 2, 3, 1, 2), p);
    }
}
