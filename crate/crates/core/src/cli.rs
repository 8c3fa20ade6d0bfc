//! Subcommands behind the `jointgp` binary.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{assemble_dataset, holdout_split, JointDataset, Location, PlotTable, SignalTable, SpaceHeightCoord};
use crate::error::{Error, Result};
use crate::io::{self, OutputSet};
use crate::metrics::{self, Summary};
use crate::predict::{self, OutcomeTarget, PredictiveDraws, SignalTarget};
use crate::reduced_rank::{candidate_grid, select_height_knots, select_spatial_knots_u, select_spatial_knots_v, KnotSet};
use crate::sampler::{gelman_rubin, prepare_chains, run_chains, PosteriorChain, PriorSpec, Transform};
use crate::simgen::{simulate_joint, table1_experiment};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    SelectKnots,
    Fit,
    Predict,
    Score,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub chains: Option<usize>,
}

pub const FIT_MANIFEST: &str = "fit.toml";
pub const PREDICT_MANIFEST: &str = "predict.toml";

/// Prediction streams, distinct from the chain streams.
const STREAM_SIGNAL: u64 = 1 << 32;
const STREAM_OUTCOME: u64 = (1 << 32) + 1;
const STREAM_CONDITIONAL: u64 = (1 << 32) + 2;
const STREAM_REPLICATE: u64 = (1 << 32) + 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Loads the config (if any), applies overrides and runs `cmd`, removing
/// the command's outputs again if it fails. Returns the written files.
pub fn run(cmd: Command, config: Option<&Path>, ov: &Overrides) -> Result<Vec<PathBuf>> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = ov.seed {
        cfg.seed = Some(s);
    }
    cfg.seed = Some(cfg.seed());
    if let Some(o) = &ov.out {
        cfg.out = Some(std::path::absolute(o)?);
    }
    if let Some(c) = ov.chains {
        cfg.sampler.n_chains = c;
    }
    let out = RunConfig::require(&cfg.out, "output directory (--out or `out`)")?.to_path_buf();
    let mut set = OutputSet::new(&out)?;
    let result = match cmd {
        Command::Simulate => simulate(&cfg, &mut set),
        Command::SelectKnots => select_knots(&cfg, &mut set),
        Command::Fit => fit(&cfg, &mut set),
        Command::Predict => predict_cmd(&cfg, &mut set),
        Command::Score => score(&cfg, &mut set),
    };
    match result {
        Ok(()) => Ok(set.files().to_vec()),
        Err(e) => {
            set.discard();
            Err(e)
        }
    }
}

fn write_text(set: &mut OutputSet, name: &str, text: &str) -> Result<()> {
    let mut w = set.create(name)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Config(e.to_string()))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {}", path.display(), e.message())))
}

/// Reads and preprocesses a plot/signal table pair.
pub fn load_tables(cfg: &RunConfig, plots: &Path, signals: &Path) -> Result<(PlotTable, SignalTable)> {
    let p = io::read_plot_table(plots)?;
    let raw = io::read_signal_table(signals)?;
    let s = match cfg.preprocess.max_height {
        Some(m) => io::preprocess_signals(&raw, m, cfg.preprocess.smooth)?.table,
        None if cfg.preprocess.smooth => io::preprocess_signals(&raw, f64::INFINITY, true)?.table,
        None => raw,
    };
    Ok((p, s))
}

/// Training data named by `[data]`.
pub fn load_training(cfg: &RunConfig) -> Result<JointDataset> {
    let plots = RunConfig::require(&cfg.data.plots, "data.plots")?;
    let signals = RunConfig::require(&cfg.data.signals, "data.signals")?;
    let (p, s) = load_tables(cfg, plots, signals)?;
    assemble_dataset(&p, &s, &cfg.data.design()?, cfg.preprocess.max_height)
}

/// Knots from files, explicit values, or selection, in that order.
pub fn resolve_knots(cfg: &RunConfig, data: &JointDataset) -> Result<(KnotSet, Vec<(String, f64)>)> {
    let k = &cfg.knots;
    let mut trace = Vec::new();
    let heights = if let Some(f) = &k.x_file {
        io::read_heights(f)?
    } else if let Some(h) = &k.heights {
        h.clone()
    } else {
        let sel = select_height_knots(&k.theta.gneiting()?, &data.heights, k.n_x)?;
        trace.push(("height".to_string(), sel.objective));
        sel.heights
    };
    let grid = || candidate_grid(&data.plots, k.grid_resolution.max(1));
    let spatial_u = if let Some(f) = &k.u_file {
        io::read_locations(f)?
    } else if k.n_u == 0 {
        data.plots.clone()
    } else {
        let sel = select_spatial_knots_u(&k.theta.gneiting()?, &data.plots, &heights, &grid(), k.n_u)?;
        trace.extend(sel.objective_trace.iter().map(|v| ("u".to_string(), *v)));
        sel.knots
    };
    let spatial_v = if let Some(f) = &k.v_file {
        io::read_locations(f)?
    } else if k.n_v == 0 {
        data.plots.clone()
    } else {
        let sel = select_spatial_knots_v(&k.theta.exponential()?, &data.plots, &grid(), k.n_v)?;
        trace.extend(sel.objective_trace.iter().map(|v| ("v".to_string(), *v)));
        sel.knots
    };
    Ok((KnotSet::new(spatial_u, spatial_v, heights)?, trace))
}

fn write_knots(set: &mut OutputSet, knots: &KnotSet) -> Result<()> {
    io::write_locations(set.create("knots_u.csv")?, &knots.spatial_u)?;
    io::write_locations(set.create("knots_v.csv")?, &knots.spatial_v)?;
    io::write_heights(set.create("knots_x.csv")?, &knots.heights)
}

fn read_knots(dir: &Path) -> Result<KnotSet> {
    KnotSet::new(
        io::read_locations(&dir.join("knots_u.csv"))?,
        io::read_locations(&dir.join("knots_v.csv"))?,
        io::read_heights(&dir.join("knots_x.csv"))?,
    )
}

fn simulate(cfg: &RunConfig, set: &mut OutputSet) -> Result<()> {
    let sc = &cfg.simulate;
    if sc.scale == 0 {
        return Err(Error::Config("simulate.scale must be at least 1".into()));
    }
    let mut sim = table1_experiment(sc.scale);
    sim.seed = cfg.seed();
    sim.allow_large = sc.allow_large;
    let (data, truth) = simulate_joint(&sim)?;
    let (plots, signals) = data.to_tables();
    io::write_plot_table(set.create("plots.csv")?, &plots)?;
    io::write_signal_table(set.create("signals.csv")?, &signals)?;
    let (train, hold) = holdout_split(&data, sc.holdout_fraction, cfg.seed())?;
    for (prefix, d) in [("train", &train), ("holdout", &hold)] {
        let (p, s) = d.to_tables();
        io::write_plot_table(set.create(&format!("{prefix}_plots.csv"))?, &p)?;
        io::write_signal_table(set.create(&format!("{prefix}_signals.csv"))?, &s)?;
    }
    let mut w = set.csv("truth.csv")?;
    w.write_record(["parameter", "value"])?;
    for (n, v) in truth.params.names().iter().zip(truth.params.to_row()) {
        w.write_record([n.clone(), v.to_string()])?;
    }
    w.flush()?;
    drop(w);
    io::write_heights(set.create("alpha_heights.csv")?, &truth.alpha_heights)?;
    write_text(set, "simulation.toml", &to_toml(&sim)?)?;
    Ok(())
}

fn select_knots(cfg: &RunConfig, set: &mut OutputSet) -> Result<()> {
    let data = load_training(cfg)?;
    let (knots, trace) = resolve_knots(cfg, &data)?;
    write_knots(set, &knots)?;
    let mut w = set.csv("knot_objective.csv")?;
    w.write_record(["kind", "step", "objective"])?;
    let mut step: HashMap<String, usize> = HashMap::new();
    for (kind, v) in &trace {
        let s = step.entry(kind.clone()).or_default();
        w.write_record([kind.clone(), s.to_string(), v.to_string()])?;
        *s += 1;
    }
    w.flush()?;
    Ok(())
}

/// What `fit` records for the commands that read its output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitManifest {
    pub config: RunConfig,
    pub priors: PriorSpec,
    pub n_chains: usize,
    pub n_plots: usize,
    pub n_signal: usize,
    pub heights: Vec<f64>,
    pub outcome_mean: Option<f64>,
    pub outcome_sd: Option<f64>,
    pub acceptance: Vec<f64>,
    pub numerical_failures: Vec<usize>,
}

fn fit(cfg: &RunConfig, set: &mut OutputSet) -> Result<()> {
    let data = load_training(cfg)?;
    let (knots, _) = resolve_knots(cfg, &data)?;
    let priors = cfg.priors.resolve(&data)?;
    let mut sc = cfg.sampler.clone();
    sc.seed = cfg.seed();
    let setup = prepare_chains(&data, &knots, &priors, &sc, None)?;
    let chains = run_chains(&data, &knots, &priors, &sc, &setup)?;
    write_knots(set, &knots)?;
    for (k, c) in chains.iter().enumerate() {
        io::write_chain(set.create(&format!("chain_{}.csv", k + 1))?, c)?;
        io::write_trace(set.create(&format!("trace_{}.csv", k + 1))?, c)?;
        io::write_latents(set.create(&format!("latents_{}.csv", k + 1))?, c)?;
    }
    write_summary(set, &chains)?;
    let manifest = FitManifest {
        config: cfg.clone(),
        priors,
        n_chains: chains.len(),
        n_plots: data.n_s(),
        n_signal: data.n(),
        heights: data.heights.clone(),
        outcome_mean: data.outcome_scale.map(|s| s.0),
        outcome_sd: data.outcome_scale.map(|s| s.1),
        acceptance: chains.iter().map(PosteriorChain::acceptance_rate).collect(),
        numerical_failures: chains.iter().map(|c| c.numerical_failures).collect(),
    };
    write_text(set, FIT_MANIFEST, &to_toml(&manifest)?)
}

fn write_summary(set: &mut OutputSet, chains: &[PosteriorChain]) -> Result<()> {
    let mut w = set.csv("summary.csv")?;
    w.write_record(["parameter", "mean", "sd", "q025", "median", "q975", "rhat"])?;
    let Some(first) = chains.iter().find_map(|c| c.draws.first()) else {
        w.flush()?;
        return Ok(());
    };
    for (i, name) in first.names().iter().enumerate() {
        let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.draws.iter().map(|p| p.to_row()[i]).collect()).collect();
        let all: Vec<f64> = per_chain.concat();
        let s = Summary::of(&all);
        let rhat = if per_chain.len() > 1 {
            gelman_rubin(&per_chain).to_string()
        } else {
            "NA".into()
        };
        w.write_record([
            name.clone(),
            s.mean.to_string(),
            s.var.sqrt().to_string(),
            s.q025.to_string(),
            s.median.to_string(),
            s.q975.to_string(),
            rhat,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// A finished fit read back from its output directory.
pub struct LoadedFit {
    pub manifest: FitManifest,
    pub data: JointDataset,
    pub knots: KnotSet,
    pub chains: Vec<PosteriorChain>,
}

pub fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let manifest: FitManifest = read_toml(&dir.join(FIT_MANIFEST))?;
    let data = load_training(&manifest.config)?;
    let knots = read_knots(dir)?;
    let n_u = knots.n_star();
    let chains = (1..=manifest.n_chains)
        .map(|k| {
            io::read_chain(
                &dir.join(format!("chain_{k}.csv")),
                &dir.join(format!("trace_{k}.csv")),
                &dir.join(format!("latents_{k}.csv")),
                n_u,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedFit {
        manifest,
        data,
        knots,
        chains,
    })
}

/// Holdout tables and the prediction targets built from them.
pub struct Holdout {
    pub plots: Option<PlotTable>,
    pub signals: Option<SignalTable>,
    pub signal_targets: Vec<SignalTarget>,
    pub outcome_targets: Vec<OutcomeTarget>,
}

fn covariates_at(train: &JointDataset, table: &PlotTable, row: usize) -> Result<Vec<f64>> {
    train
        .covariate_names
        .iter()
        .map(|name| {
            let col = table
                .covariate_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Data(format!("holdout plots lack covariate '{name}'")))?;
            let loc = table.rows[row].loc;
            table.rows[row].covariates[col]
                .ok_or_else(|| Error::Data(format!("holdout plot ({}, {}) is missing '{name}'", loc.s1, loc.s2)))
        })
        .collect()
}

pub fn load_holdout(cfg: &RunConfig, train: &JointDataset) -> Result<Holdout> {
    let plots = cfg.data.holdout_plots.as_deref().map(io::read_plot_table).transpose()?;
    let signals = match &cfg.data.holdout_signals {
        Some(path) => {
            let raw = io::read_signal_table(path)?;
            Some(match cfg.preprocess.max_height {
                Some(m) => io::preprocess_signals(&raw, m, cfg.preprocess.smooth)?.table,
                None if cfg.preprocess.smooth => io::preprocess_signals(&raw, f64::INFINITY, true)?.table,
                None => raw,
            })
        }
        None => None,
    };
    let mut outcome_targets = Vec::new();
    let mut cov_by_loc: HashMap<(u64, u64), Vec<f64>> = HashMap::new();
    if let Some(p) = &plots {
        for (j, r) in p.rows.iter().enumerate() {
            let cov = covariates_at(train, p, j)?;
            cov_by_loc.insert((r.loc.s1.to_bits(), r.loc.s2.to_bits()), cov.clone());
            outcome_targets.push(OutcomeTarget { loc: r.loc, covariates: cov });
        }
    }
    let mut signal_targets = Vec::new();
    if let Some(s) = &signals {
        for r in &s.rows {
            let covariates = match cov_by_loc.get(&(r.loc.s1.to_bits(), r.loc.s2.to_bits())) {
                Some(c) => c.clone(),
                None if train.covariate_names.is_empty() => Vec::new(),
                None => {
                    return Err(Error::Data(format!(
                        "holdout signal at ({}, {}) has no plot row with covariates",
                        r.loc.s1, r.loc.s2
                    )))
                }
            };
            signal_targets.push(SignalTarget {
                coord: SpaceHeightCoord::new(r.loc, r.height),
                covariates,
            });
        }
    }
    Ok(Holdout {
        plots,
        signals,
        signal_targets,
        outcome_targets,
    })
}

/// Signals at the holdout plots as a dataset, for conditioning. The holdout
/// outcome values are not used.
fn holdout_signal_dataset(train: &JointDataset, plots: &PlotTable, signals: &SignalTable) -> Result<JointDataset> {
    let mut p = plots.clone();
    for r in &mut p.rows {
        r.y = Some(0.0);
    }
    let mut design = train.design.clone();
    design.standardize_outcome = false;
    assemble_dataset(&p, signals, &design, Some(train.max_height))
}

fn unscale(draws: &mut PredictiveDraws, scale: Option<(f64, f64)>) {
    if let Some((m, s)) = scale {
        for d in &mut draws.draws {
            for v in d.iter_mut() {
                *v = *v * s + m;
            }
        }
        *draws = PredictiveDraws::from_draws(std::mem::take(&mut draws.draws));
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictManifest {
    pub fit_dir: PathBuf,
    pub config: RunConfig,
    pub signal: bool,
    pub outcome: bool,
    pub outcome_given_signal: bool,
}

fn predict_cmd(cfg: &RunConfig, set: &mut OutputSet) -> Result<()> {
    let fit_dir = RunConfig::require(&cfg.predict.fit_dir, "predict.fit_dir")?.to_path_buf();
    let fit = load_fit(&fit_dir)?;
    let hold = load_holdout(cfg, &fit.data)?;
    if hold.plots.is_none() && hold.signals.is_none() {
        return Err(Error::Config("predict needs data.holdout_plots and/or data.holdout_signals".into()));
    }
    let opts = cfg.predict.options();
    let seed = cfg.seed();
    let scale = fit.data.outcome_scale;
    let mut manifest = PredictManifest {
        fit_dir: fit_dir.clone(),
        config: cfg.clone(),
        signal: false,
        outcome: false,
        outcome_given_signal: false,
    };
    if !hold.signal_targets.is_empty() {
        let mut rng = stream_rng(seed, STREAM_SIGNAL);
        let z = predict::predict_signal(&fit.chains, &fit.data, &fit.knots, &hold.signal_targets, &opts, &mut rng)?;
        let coords: Vec<Vec<f64>> = hold
            .signal_targets
            .iter()
            .map(|t| vec![t.coord.loc.s1, t.coord.loc.s2, t.coord.height])
            .collect();
        io::write_predictions(set.create("pred_z.csv")?, &["s1", "s2", "x"], &coords, &z.summaries)?;
        io::write_draws(set.create("draws_z.csv")?, &z.draws)?;
        manifest.signal = true;
    }
    if !hold.outcome_targets.is_empty() {
        let coords: Vec<Vec<f64>> = hold.outcome_targets.iter().map(|t| vec![t.loc.s1, t.loc.s2]).collect();
        let mut rng = stream_rng(seed, STREAM_OUTCOME);
        let mut y = predict::predict_outcome(&fit.chains, &fit.data, &fit.knots, &hold.outcome_targets, &opts, &mut rng)?;
        unscale(&mut y, scale);
        io::write_predictions(set.create("pred_y.csv")?, &["s1", "s2"], &coords, &y.summaries)?;
        io::write_draws(set.create("draws_y.csv")?, &y.draws)?;
        manifest.outcome = true;
        if let (Some(p), Some(s)) = (&hold.plots, &hold.signals) {
            let observed = holdout_signal_dataset(&fit.data, p, s)?;
            let all_have_signal = hold
                .outcome_targets
                .iter()
                .all(|t| observed.sites.iter().any(|l: &Location| l.dist(&t.loc) <= 1e-9));
            if all_have_signal {
                let mut rng = stream_rng(seed, STREAM_CONDITIONAL);
                let mut yz = predict::predict_outcome_given_signal(
                    &fit.chains,
                    &fit.data,
                    &fit.knots,
                    &observed,
                    &hold.outcome_targets,
                    &opts,
                    &mut rng,
                )?;
                unscale(&mut yz, scale);
                io::write_predictions(set.create("pred_y_given_z.csv")?, &["s1", "s2"], &coords, &yz.summaries)?;
                io::write_draws(set.create("draws_y_given_z.csv")?, &yz.draws)?;
                manifest.outcome_given_signal = true;
            }
        }
    }
    write_text(set, PREDICT_MANIFEST, &to_toml(&manifest)?)
}

/// Holdout metrics for one set of predictive draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutScores {
    pub rmspe: f64,
    pub crps: f64,
    /// Gaussian log score from the predictive means and variances.
    pub grs: f64,
    pub coverage: f64,
    pub width: f64,
}

pub fn holdout_scores(draws: &PredictiveDraws, obs: &[f64], level: f64) -> Result<HoldoutScores> {
    if draws.len() != obs.len() {
        return Err(Error::Data(format!(
            "{} predictive targets but {} observations",
            draws.len(),
            obs.len()
        )));
    }
    let (coverage, width) = metrics::coverage_and_width(&draws.draws, obs, level);
    Ok(HoldoutScores {
        rmspe: metrics::rmspe(&draws.medians(), obs),
        crps: metrics::crps(&draws.draws, obs),
        grs: metrics::grs(&draws.means(), &draws.variances(), obs)?,
        coverage,
        width,
    })
}

fn push_scores(lines: &mut Vec<(String, f64)>, prefix: &str, s: &HoldoutScores) {
    for (k, v) in [
        ("rmspe", s.rmspe),
        ("crps", s.crps),
        ("grs", s.grs),
        ("coverage", s.coverage),
        ("width", s.width),
    ] {
        lines.push((format!("{prefix}_{k}"), v));
    }
}

fn score(cfg: &RunConfig, set: &mut OutputSet) -> Result<()> {
    let level = cfg.score.level;
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("score.level {level} not in (0, 1)")));
    }
    let fit_dir = RunConfig::require(&cfg.score.fit_dir, "score.fit_dir")?;
    let fit = load_fit(fit_dir)?;
    let mut lines: Vec<(String, f64)> = Vec::new();

    let transform = Transform::new(&fit.manifest.priors, fit.knots.n_x(), fit.data.n_x());
    let d = predict::dic(&fit.chains, &fit.data, &fit.knots, &transform)?;
    lines.push(("dic".into(), d.dic));
    lines.push(("p_d".into(), d.p_d));
    let mut rng = stream_rng(cfg.seed(), STREAM_REPLICATE);
    let reps = predict::replicate_data(&fit.chains, &fit.data, &fit.knots, &cfg.predict.options(), &mut rng)?;
    let observed: Vec<f64> = fit.data.z.iter().chain(&fit.data.y).copied().collect();
    let gg = metrics::gelfand_ghosh(&reps.draws, &observed);
    lines.push(("gg_g".into(), gg.g));
    lines.push(("gg_p".into(), gg.p));
    lines.push(("gg_d".into(), gg.d));

    if let Some(pdir) = &cfg.score.predict_dir {
        let pm: PredictManifest = read_toml(&pdir.join(PREDICT_MANIFEST))?;
        let hold = load_holdout(&pm.config, &fit.data)?;
        let z_obs: Vec<f64> = hold.signals.as_ref().map(|s| s.rows.iter().map(|r| r.z).collect()).unwrap_or_default();
        let y_obs: Option<Vec<f64>> = hold
            .plots
            .as_ref()
            .map(|p| {
                p.rows
                    .iter()
                    .map(|r| r.y.ok_or_else(|| Error::Data(format!("holdout plot ({}, {}) has no y to score", r.loc.s1, r.loc.s2))))
                    .collect::<Result<Vec<f64>>>()
            })
            .transpose()?;
        let read = |name: &str| -> Result<PredictiveDraws> { Ok(PredictiveDraws::from_draws(io::read_draws(&pdir.join(name))?)) };
        let z = if pm.signal { Some(read("draws_z.csv")?) } else { None };
        let y = if pm.outcome { Some(read("draws_y.csv")?) } else { None };
        if let Some(z) = &z {
            push_scores(&mut lines, "z", &holdout_scores(z, &z_obs, level)?);
        }
        if let (Some(y), Some(obs)) = (&y, &y_obs) {
            push_scores(&mut lines, "y", &holdout_scores(y, obs, level)?);
            if let Some(z) = &z {
                let joint: Vec<f64> = z_obs.iter().chain(obs).copied().collect();
                push_scores(&mut lines, "joint", &holdout_scores(&z.stack(y), &joint, level)?);
            }
            if pm.outcome_given_signal {
                push_scores(&mut lines, "y_given_z", &holdout_scores(&read("draws_y_given_z.csv")?, obs, level)?);
            }
        }
    }
    let text: String = lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_text(set, "metrics.txt", &text)
}
