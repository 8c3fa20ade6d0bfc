//! Scoring rules and model-choice criteria.

use serde::Serialize;

use crate::error::{Error, Result};

/// Sample quantile with linear interpolation between order statistics
/// (`sorted` ascending, `p` in `[0, 1]`).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(draws: &[f64]) -> Vec<f64> {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Per-target summary of predictive draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub var: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub width: f64,
}

impl Summary {
    pub fn of(draws: &[f64]) -> Self {
        let s = sorted(draws);
        let n = s.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = if s.len() > 1 {
            draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let (q025, q975) = (quantile(&s, 0.025), quantile(&s, 0.975));
        Self {
            mean,
            var,
            median: quantile(&s, 0.5),
            q025,
            q975,
            width: q975 - q025,
        }
    }
}

/// `sqrt(mean((pred - obs)^2))`
pub fn rmspe(pred: &[f64], obs: &[f64]) -> f64 {
    assert_eq!(pred.len(), obs.len());
    let ss: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    (ss / obs.len() as f64).sqrt()
}

/// `mean|X - y| - 1/2 mean|X - X'|` over distinct pairs, for one target.
pub fn crps_sample(draws: &[f64], y: f64) -> f64 {
    let m = draws.len();
    assert!(m > 0);
    let first = draws.iter().map(|x| (x - y).abs()).sum::<f64>() / m as f64;
    if m == 1 {
        return first;
    }
    // sum_{i != j} |x_i - x_j| = 2 sum_i (2i - m + 1) x_(i) on sorted draws
    let s = sorted(draws);
    let pair: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - m as f64 + 1.0) * x)
        .sum::<f64>()
        * 2.0
        / (m * (m - 1)) as f64;
    first - 0.5 * pair
}

/// CRPS summed over targets; smaller is better.
pub fn crps(draws: &[Vec<f64>], obs: &[f64]) -> f64 {
    assert_eq!(draws.len(), obs.len());
    draws.iter().zip(obs).map(|(d, y)| crps_sample(d, *y)).sum()
}

/// Diagonal Gaussian density score `-sum log var - sum (y - mean)^2 / var`;
/// larger is better.
pub fn grs(mean: &[f64], var: &[f64], obs: &[f64]) -> Result<f64> {
    assert!(mean.len() == var.len() && var.len() == obs.len());
    let mut score = 0.0;
    for i in 0..obs.len() {
        if !(var[i] > 0.0) {
            return Err(Error::Data(format!("predictive variance {} at target {i} is not positive", var[i])));
        }
        score -= var[i].ln() + (obs[i] - mean[i]).powi(2) / var[i];
    }
    Ok(score)
}

/// Percent of targets inside their central `level` interval, and the mean width.
pub fn coverage_and_width(draws: &[Vec<f64>], obs: &[f64], level: f64) -> (f64, f64) {
    assert_eq!(draws.len(), obs.len());
    let (lo_p, hi_p) = ((1.0 - level) / 2.0, (1.0 + level) / 2.0);
    let mut inside = 0usize;
    let mut width = 0.0;
    for (d, y) in draws.iter().zip(obs) {
        let s = sorted(d);
        let (lo, hi) = (quantile(&s, lo_p), quantile(&s, hi_p));
        if lo <= *y && *y <= hi {
            inside += 1;
        }
        width += hi - lo;
    }
    let n = obs.len() as f64;
    (100.0 * inside as f64 / n, width / n)
}

/// Posterior predictive loss `D = G + P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GgLoss {
    pub g: f64,
    pub p: f64,
    pub d: f64,
}

/// `G = sum (obs - mean(rep))^2`, `P = sum var(rep)` from replicate draws per
/// observation.
pub fn gelfand_ghosh(replicates: &[Vec<f64>], observed: &[f64]) -> GgLoss {
    assert_eq!(replicates.len(), observed.len());
    let (mut g, mut p) = (0.0, 0.0);
    for (r, o) in replicates.iter().zip(observed) {
        let s = Summary::of(r);
        g += (o - s.mean).powi(2);
        p += s.var;
    }
    GgLoss { g, p, d: g + p }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
}

pub fn dic_from_deviances(deviances: &[f64], deviance_at_mean: f64) -> Dic {
    let mean_deviance = deviances.iter().sum::<f64>() / deviances.len() as f64;
    let p_d = mean_deviance - deviance_at_mean;
    Dic {
        dic: mean_deviance + p_d,
        p_d,
        mean_deviance,
        deviance_at_mean,
    }
}
