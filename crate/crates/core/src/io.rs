//! CSV tables, signal preprocessing, and persisted run outputs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::domain::{Location, ModelParams, PlotRow, PlotTable, SignalRow, SignalTable};
use crate::error::{Error, Result};
use crate::metrics::Summary;
use crate::sampler::PosteriorChain;

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| data_err(path, format!("cannot open ({e})")))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_f64(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(data_err(path, format!("line {line}: '{field}' is not a finite number ({what})"))),
    }
}

fn parse_opt(path: &Path, line: u64, field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() || field.eq_ignore_ascii_case("na") {
        Ok(None)
    } else {
        parse_f64(path, line, field, what).map(Some)
    }
}

fn header_index(path: &Path, headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| data_err(path, format!("missing column '{name}'")))
}

/// Reads `s1,s2[,y][,covariates...]`. Empty or `NA` cells are missing values.
pub fn read_plot_table(path: &Path) -> Result<PlotTable> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let i1 = header_index(path, &headers, "s1")?;
    let i2 = header_index(path, &headers, "s2")?;
    let iy = headers.iter().position(|h| h == "y");
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != i1 && i != i2 && Some(i) != iy).collect();
    let covariate_names = cov_cols.iter().map(|&i| headers[i].to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let s1 = parse_f64(path, line, &rec[i1], "s1")?;
        let s2 = parse_f64(path, line, &rec[i2], "s2")?;
        let y = match iy {
            Some(i) => parse_opt(path, line, &rec[i], "y")?,
            None => None,
        };
        let covariates = cov_cols
            .iter()
            .map(|&i| parse_opt(path, line, &rec[i], &headers[i]))
            .collect::<Result<_>>()?;
        rows.push(PlotRow {
            loc: Location::new(s1, s2),
            y,
            covariates,
        });
    }
    Ok(PlotTable { covariate_names, rows })
}

/// Reads `s1,s2,x,z`.
pub fn read_signal_table(path: &Path) -> Result<SignalTable> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = ["s1", "s2", "x", "z"]
        .iter()
        .map(|n| header_index(path, &headers, n))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let v: Vec<f64> = idx
            .iter()
            .zip(["s1", "s2", "x", "z"])
            .map(|(&i, n)| parse_f64(path, line, &rec[i], n))
            .collect::<Result<_>>()?;
        rows.push(SignalRow {
            loc: Location::new(v[0], v[1]),
            height: v[2],
            z: v[3],
        });
    }
    Ok(SignalTable { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Files created by one command, removed again if the command fails.
#[derive(Debug, Default)]
pub struct OutputSet {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Creates `name` in the output directory and records it.
    pub fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        let file = File::create(&path)?;
        self.files.push(path);
        Ok(BufWriter::new(file))
    }

    pub fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        Ok(csv::Writer::from_writer(self.create(name)?))
    }

    /// Removes everything created so far (and the directory, if it was new and is now empty).
    pub fn discard(&mut self) {
        for f in self.files.drain(..) {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

pub fn write_plot_table<W: Write>(w: W, table: &PlotTable) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["s1".to_string(), "s2".into(), "y".into()];
    header.extend(table.covariate_names.iter().cloned());
    out.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.loc.s1.to_string(), r.loc.s2.to_string(), fmt_opt(r.y)];
        rec.extend(r.covariates.iter().map(|c| fmt_opt(*c)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_signal_table<W: Write>(w: W, table: &SignalTable) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["s1", "s2", "x", "z"])?;
    for r in &table.rows {
        out.write_record([r.loc.s1.to_string(), r.loc.s2.to_string(), r.height.to_string(), r.z.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Signals after truncation and pairwise smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub table: SignalTable,
    /// Locations whose smoothed signal ended with an unpaired value.
    pub odd_tails: Vec<Location>,
}

/// Drops heights above `max_height`; with `smooth`, averages consecutive
/// non-overlapping pairs of heights, placing each bin at the pair midpoint.
/// An unpaired last value is kept as is.
pub fn preprocess_signals(raw: &SignalTable, max_height: f64, smooth: bool) -> Result<Preprocessed> {
    let mut by_loc: BTreeMap<(u64, u64), (Location, Vec<(f64, f64)>)> = BTreeMap::new();
    let mut order = Vec::new();
    for r in &raw.rows {
        let key = (r.loc.s1.to_bits(), r.loc.s2.to_bits());
        by_loc
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                (r.loc, Vec::new())
            })
            .1
            .push((r.height, r.z));
    }
    let mut grid: Option<Vec<f64>> = None;
    let tol = 1e-9 * max_height.abs().max(1.0);
    let mut rows = Vec::new();
    let mut odd_tails = Vec::new();
    for key in order {
        let (loc, mut sig) = by_loc.remove(&key).unwrap();
        sig.sort_by(|a, b| a.0.total_cmp(&b.0));
        let heights: Vec<f64> = sig.iter().map(|p| p.0).collect();
        match &grid {
            None => grid = Some(heights),
            Some(g) if *g != heights => {
                return Err(Error::Data(format!(
                    "signal at ({}, {}) does not share the common height grid",
                    loc.s1, loc.s2
                )))
            }
            _ => {}
        }
        sig.retain(|p| p.0 <= max_height + tol);
        if sig.is_empty() {
            return Err(Error::Data(format!(
                "signal at ({}, {}) is empty after truncation at {max_height}",
                loc.s1, loc.s2
            )));
        }
        let bins: Vec<(f64, f64)> = if smooth {
            if sig.len() % 2 == 1 {
                odd_tails.push(loc);
            }
            sig.chunks(2)
                .map(|c| {
                    let n = c.len() as f64;
                    (c.iter().map(|p| p.0).sum::<f64>() / n, c.iter().map(|p| p.1).sum::<f64>() / n)
                })
                .collect()
        } else {
            sig
        };
        rows.extend(bins.into_iter().map(|(height, z)| SignalRow { loc, height, z }));
    }
    Ok(Preprocessed {
        table: SignalTable { rows },
        odd_tails,
    })
}

/// One chain's stored draws, `names` as header.
pub fn write_chain<W: Write>(w: W, chain: &PosteriorChain) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if let Some(first) = chain.draws.first() {
        out.write_record(first.names())?;
    }
    for p in &chain.draws {
        out.write_record(p.to_row().iter().map(|v| v.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// `draw,loglik,log_target`
pub fn write_trace<W: Write>(w: W, chain: &PosteriorChain) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["draw", "loglik", "log_target"])?;
    for (i, (l, t)) in chain.loglik.iter().zip(&chain.log_target).enumerate() {
        out.write_record([(i + 1).to_string(), l.to_string(), t.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// `draw,u_1..u_n*,v_1..v_n*v`, `draw` indexing the chain CSV rows from 1.
pub fn write_latents<W: Write>(w: W, chain: &PosteriorChain) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let (nu, nv) = (chain.u_star.first().map_or(0, Vec::len), chain.v_star.first().map_or(0, Vec::len));
    let mut header = vec!["draw".to_string()];
    header.extend((1..=nu).map(|k| format!("u_{k}")));
    header.extend((1..=nv).map(|k| format!("v_{k}")));
    out.write_record(&header)?;
    for (k, &i) in chain.latent_index.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(chain.u_star[k].iter().chain(&chain.v_star[k]).map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = open_csv(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(
            rec.iter()
                .zip(&headers)
                .map(|(f, h)| parse_f64(path, line, f, h))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok((headers, rows))
}

/// Shape of a parameter row: `(n_tau, n_alpha, p_y, p_z)`.
pub fn param_shape(names: &[String]) -> (usize, usize, usize, usize) {
    let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
    (count("tau2_z_"), count("alpha_"), count("beta_y_"), count("beta_z_"))
}

/// Reads a chain back from its draw, trace and latent CSVs.
pub fn read_chain(draws: &Path, trace: &Path, latents: &Path, n_u_star: usize) -> Result<PosteriorChain> {
    let (names, rows) = read_matrix(draws)?;
    let (n_tau, n_alpha, p_y, p_z) = param_shape(&names);
    if names.len() != 7 + n_tau + n_alpha + p_y + p_z {
        return Err(data_err(draws, "unrecognized parameter columns"));
    }
    let params: Vec<ModelParams> = rows
        .iter()
        .map(|r| ModelParams::from_row(r, n_tau, n_alpha, p_y, p_z))
        .collect();
    let (_, trace_rows) = read_matrix(trace)?;
    if trace_rows.len() != params.len() {
        return Err(data_err(trace, "row count differs from the chain"));
    }
    let (_, lat_rows) = read_matrix(latents)?;
    let mut latent_index = Vec::new();
    let mut u_star = Vec::new();
    let mut v_star = Vec::new();
    for r in &lat_rows {
        let i = r[0] as usize;
        if i == 0 || i > params.len() || r.len() < 1 + n_u_star {
            return Err(data_err(latents, format!("bad latent row for draw {}", r[0])));
        }
        latent_index.push(i - 1);
        u_star.push(r[1..1 + n_u_star].to_vec());
        v_star.push(r[1 + n_u_star..].to_vec());
    }
    Ok(PosteriorChain {
        loglik: trace_rows.iter().map(|r| r[1]).collect(),
        log_target: trace_rows.iter().map(|r| r[2]).collect(),
        draws: params,
        latent_index,
        u_star,
        v_star,
        accepted: 0,
        proposed: 0,
        numerical_failures: 0,
        final_proposal_sd: Vec::new(),
        seconds: 0.0,
    })
}

pub fn write_locations<W: Write>(w: W, locs: &[Location]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["s1", "s2"])?;
    for l in locs {
        out.write_record([l.s1.to_string(), l.s2.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_locations(path: &Path) -> Result<Vec<Location>> {
    let (h, rows) = read_matrix(path)?;
    let (i1, i2) = (
        h.iter().position(|x| x == "s1").ok_or_else(|| data_err(path, "missing column 's1'"))?,
        h.iter().position(|x| x == "s2").ok_or_else(|| data_err(path, "missing column 's2'"))?,
    );
    Ok(rows.iter().map(|r| Location::new(r[i1], r[i2])).collect())
}

pub fn write_heights<W: Write>(w: W, heights: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["x"])?;
    for h in heights {
        out.write_record([h.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_heights(path: &Path) -> Result<Vec<f64>> {
    let (h, rows) = read_matrix(path)?;
    let i = h.iter().position(|x| x == "x").ok_or_else(|| data_err(path, "missing column 'x'"))?;
    Ok(rows.iter().map(|r| r[i]).collect())
}

/// Summary rows `coords...,median,q025,q975,width`.
pub fn write_predictions<W: Write>(w: W, coord_names: &[&str], coords: &[Vec<f64>], summaries: &[Summary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = coord_names.to_vec();
    header.extend(["median", "q025", "q975", "width"]);
    out.write_record(&header)?;
    for (c, s) in coords.iter().zip(summaries) {
        let mut rec: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        rec.extend([s.median, s.q025, s.q975, s.width].iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per target: `target,d_1..d_m`.
pub fn write_draws<W: Write>(w: W, draws: &[Vec<f64>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let m = draws.first().map_or(0, Vec::len);
    let mut header = vec!["target".to_string()];
    header.extend((1..=m).map(|k| format!("d_{k}")));
    out.write_record(&header)?;
    for (i, d) in draws.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(d.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_draws(path: &Path) -> Result<Vec<Vec<f64>>> {
    let (_, rows) = read_matrix(path)?;
    Ok(rows.into_iter().map(|r| r[1..].to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(locs: &[(f64, f64)], heights: &[f64], f: impl Fn(usize, usize) -> f64) -> SignalTable {
        let mut rows = Vec::new();
        for (j, &(a, b)) in locs.iter().enumerate() {
            for (k, &h) in heights.iter().enumerate() {
                rows.push(SignalRow {
                    loc: Location::new(a, b),
                    height: h,
                    z: f(j, k),
                });
            }
        }
        SignalTable { rows }
    }

    #[test]
    fn truncation_then_smoothing_gives_39_values() {
        // 113 raw values on a 22.8/78 m grid: 78 fall at or below 22.8 m
        let step = 22.8 / 78.0;
        let heights: Vec<f64> = (1..=113).map(|k| k as f64 * step).collect();
        let t = raw(&[(0.0, 0.0), (1.0, 2.0)], &heights, |j, k| (j + k) as f64);
        let truncated = preprocess_signals(&t, 22.8, false).unwrap();
        assert_eq!(truncated.table.rows.len(), 2 * 78);
        let p = preprocess_signals(&t, 22.8, true).unwrap();
        assert_eq!(p.table.rows.len(), 2 * 39);
        assert!(p.odd_tails.is_empty());
    }

    #[test]
    fn pairwise_means() {
        let t = raw(&[(0.0, 0.0)], &[1.0, 2.0, 3.0, 4.0], |_, k| [1.0, 3.0, 5.0, 7.0][k]);
        let p = preprocess_signals(&t, 10.0, true).unwrap();
        let z: Vec<f64> = p.table.rows.iter().map(|r| r.z).collect();
        let h: Vec<f64> = p.table.rows.iter().map(|r| r.height).collect();
        assert_eq!(z, vec![2.0, 6.0]);
        assert_eq!(h, vec![1.5, 3.5]);
    }

    #[test]
    fn odd_tail_is_kept_and_flagged() {
        let t = raw(&[(0.0, 0.0)], &[1.0, 2.0, 3.0], |_, k| [1.0, 3.0, 9.0][k]);
        let p = preprocess_signals(&t, 10.0, true).unwrap();
        let z: Vec<f64> = p.table.rows.iter().map(|r| r.z).collect();
        assert_eq!(z, vec![2.0, 9.0]);
        assert_eq!(p.odd_tails, vec![Location::new(0.0, 0.0)]);
    }

    #[test]
    fn identity_without_smoothing_or_truncation() {
        let t = raw(&[(0.0, 0.0), (1.0, 1.0)], &[0.0, 0.5, 1.0], |j, k| (j * 10 + k) as f64);
        assert_eq!(preprocess_signals(&t, 5.0, false).unwrap().table, t);
    }

    #[test]
    fn empty_after_truncation_names_location() {
        let t = raw(&[(3.0, 4.0)], &[5.0, 6.0], |_, _| 1.0);
        let err = preprocess_signals(&t, 1.0, false).unwrap_err();
        assert!(err.to_string().contains("(3, 4)"), "{err}");
    }

    #[test]
    fn ragged_grid_is_rejected() {
        let mut t = raw(&[(0.0, 0.0), (1.0, 0.0)], &[1.0, 2.0], |_, _| 1.0);
        t.rows.pop();
        assert!(matches!(preprocess_signals(&t, 10.0, false), Err(Error::Data(_))));
    }

    #[test]
    fn tables_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let plots = PlotTable {
            covariate_names: vec!["elev".into()],
            rows: vec![
                PlotRow { loc: Location::new(0.1, 0.2), y: Some(1.5), covariates: vec![Some(3.0)] },
                PlotRow { loc: Location::new(1.0 / 3.0, 2.0), y: None, covariates: vec![None] },
            ],
        };
        let p = dir.path().join("p.csv");
        write_plot_table(File::create(&p).unwrap(), &plots).unwrap();
        assert_eq!(read_plot_table(&p).unwrap(), plots);
        let signals = raw(&[(0.1, 0.2)], &[0.0, 0.7], |_, k| k as f64 * 0.1 + 1e-17);
        let s = dir.path().join("s.csv");
        write_signal_table(File::create(&s).unwrap(), &signals).unwrap();
        assert_eq!(read_signal_table(&s).unwrap(), signals);
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        fs::write(&p, "s1,s2,x,z\n0,0,1,2\n0,0,abc,2\n").unwrap();
        let err = read_signal_table(&p).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains("line 3"), "{err}");
        fs::write(&p, "s1,s2,x,z\n0,NaN,1,2\n").unwrap();
        assert!(matches!(read_signal_table(&p), Err(Error::Data(_))));
    }

    #[test]
    fn output_set_discards() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("new");
        let mut set = OutputSet::new(&out).unwrap();
        writeln!(set.create("a.txt").unwrap(), "x").unwrap();
        assert!(out.join("a.txt").exists());
        set.discard();
        assert!(!out.exists());
    }
}
