//! Return algebra, Monte-Carlo moments, allocation and realized performance.

mod optimize;

pub use optimize::{
    optimize_balanced, optimize_min_variance, project_simplex, OptimizerOptions, MIN_EXPECTED_RETURN, SQRT_EPS,
};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::WeeklyReturnPanel;

pub const DEFAULT_Q: f64 = 2.0;
pub const TRANSACTION_THRESHOLD: f64 = 1e-6;
pub const BOOTSTRAP_RESAMPLES: usize = 10_000;
pub const MIN_BOOTSTRAP_REPLICATES: usize = 10;

/// Cumulative gross return over the window: the product of `1 + y`.
pub fn stock_return(y: &[f64]) -> Result<f64> {
    let mut r = 1.0;
    for &v in y {
        if !(v > -1.0) {
            return Err(Error::ReturnDomain(v));
        }
        r *= 1.0 + v;
    }
    Ok(r)
}

/// `N x K` matrix of simulated cumulative returns; row `i` is dataset `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedReturnMatrix {
    pub r: DMatrix<f64>,
}

impl SimulatedReturnMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if n == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("return matrix must be non-empty and rectangular".into()));
        }
        if rows.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Validation("cumulative returns must be positive and finite".into()));
        }
        Ok(Self {
            r: DMatrix::from_fn(n, k, |i, j| rows[i][j]),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ReturnMoments {
    pub fn n_assets(&self) -> usize {
        self.mean.len()
    }
}

/// Column means and sample covariance (denominator `N - 1`).
pub fn estimate_moments(m: &SimulatedReturnMatrix) -> Result<ReturnMoments> {
    let n = m.r.nrows();
    if n < 2 {
        return Err(Error::Validation("moment estimation needs at least two simulated datasets".into()));
    }
    let mean = m.r.row_mean().transpose();
    let mut centered = m.r.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    // Restore exact symmetry lost to rounding.
    let sym = (&cov + cov.transpose()) * 0.5;
    cov.copy_from(&sym);
    Ok(ReturnMoments { mean, cov })
}

/// Expected return `w . E(R)` and variance `w' V w`.
pub fn portfolio_moments(m: &ReturnMoments, w: &[f64]) -> Result<(f64, f64)> {
    if w.len() != m.n_assets() {
        return Err(Error::Validation(format!(
            "weight vector has {} entries for {} assets",
            w.len(),
            m.n_assets()
        )));
    }
    let w = DVector::from_column_slice(w);
    Ok((w.dot(&m.mean), w.dot(&(&m.cov * &w))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MinVariance,
    Balanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub w: Vec<f64>,
    pub objective: Objective,
    pub q: f64,
    /// Minimized variance, or maximized `E - q sqrt(V)`.
    pub value: f64,
    pub expected: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizedGain {
    /// Percent.
    pub total: f64,
    /// Percent contributed by each sector of the panel.
    pub by_sector: Vec<f64>,
}

/// `100 * sum_k w_k (R_k - 1)` over the test panel, matched by ticker.
pub fn realized_gain(w: &[f64], tickers: &[String], test: &WeeklyReturnPanel) -> Result<RealizedGain> {
    if w.len() != tickers.len() {
        return Err(Error::Validation("weights and tickers differ in length".into()));
    }
    let index: std::collections::HashMap<&str, usize> =
        test.tickers.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let mut by_sector = vec![0.0; test.n_sectors()];
    for (&wk, t) in w.iter().zip(tickers) {
        let &row = index.get(t.as_str()).ok_or_else(|| Error::MissingTicker(t.clone()))?;
        let gain = 100.0 * wk * (stock_return(&test.returns[row])? - 1.0);
        by_sector[test.stock_sector[row]] += gain;
    }
    Ok(RealizedGain {
        total: by_sector.iter().sum(),
        by_sector,
    })
}

pub fn transaction_count(w: &[f64]) -> usize {
    w.iter().filter(|&&v| v > TRANSACTION_THRESHOLD).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval of the mean over `resamples` bootstrap draws.
pub fn bootstrap_ci<G: Rng + ?Sized>(gains: &[f64], level: f64, resamples: usize, rng: &mut G) -> Result<BootstrapCi> {
    if gains.len() < MIN_BOOTSTRAP_REPLICATES {
        return Err(Error::Validation(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP_REPLICATES} replicates, got {}",
            gains.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::Validation("bootstrap level must lie in (0, 1)".into()));
    }
    let n = gains.len();
    let mean = gains.iter().sum::<f64>() / n as f64;
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| gains[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    // Rounding in the resample means must not push the interval off the point estimate.
    let (lo, hi) = (quantile(&stats, alpha), quantile(&stats, 1.0 - alpha));
    Ok(BootstrapCi {
        mean,
        low: lo.min(mean),
        high: hi.max(mean),
    })
}
