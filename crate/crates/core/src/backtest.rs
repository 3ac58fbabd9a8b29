//! End-to-end protocol: fit on a training window, simulate, allocate, and
//! evaluate the allocations on the following test window.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL};
use crate::ingest::{compute_weekly_returns, filter_history, load_prices, read_prices, PricePanel, SectorMap, WeeklyReturnPanel, DEFAULT_MIN_WEEKS};
use crate::lhmm::{fit_two_stage, simulate_dataset, FitMode, FitOptions, LhmmModel};
use crate::mmc::CalibrationOptions;
use crate::portfolio::{
    bootstrap_ci, estimate_moments, optimize_balanced, optimize_min_variance, realized_gain, stock_return,
    transaction_count, BootstrapCi, Objective, OptimizerOptions, PortfolioWeights, SimulatedReturnMatrix,
    BOOTSTRAP_RESAMPLES, DEFAULT_Q, MIN_BOOTSTRAP_REPLICATES,
};
use crate::seeding::{derive_seed, task_rng, STREAM_BOOTSTRAP, STREAM_DATASET, STREAM_OPTIMIZER, STREAM_REPLICATE};

pub const REPORT_VERSION: &str = "lhmm-report/1";

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").expect("valid literal date")
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// `date,ticker,close` CSV.
    pub prices: PathBuf,
    /// `ticker,sector` CSV.
    pub sectors: PathBuf,
    /// Optional `date,ticker,close` CSV holding one benchmark index series.
    pub index: Option<PathBuf>,
    pub model: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub train: Window,
    pub test: Window,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub min_weeks: usize,
    /// Simulated datasets per replicate.
    pub n_sims: usize,
    pub replicates: usize,
    /// Length of each simulated dataset in weeks.
    pub horizon_weeks: usize,
    pub q: f64,
    pub calibration: CalibrationOptions,
    pub reestimation_len: usize,
    pub optimizer: OptimizerOptions,
    pub bootstrap_resamples: usize,
    pub level: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths {
                prices: "prices.csv".into(),
                sectors: "sectors.csv".into(),
                index: None,
                model: "out/model.json".into(),
                output_dir: "out".into(),
            },
            train: Window {
                start: date("2011-10-01"),
                end: date("2016-09-30"),
            },
            test: Window {
                start: date("2016-10-01"),
                end: date("2017-09-30"),
            },
            seed: 20_111_001,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            min_weeks: DEFAULT_MIN_WEEKS,
            n_sims: 10_000,
            replicates: 100,
            horizon_weeks: 260,
            q: DEFAULT_Q,
            calibration: CalibrationOptions::default(),
            reestimation_len: crate::lhmm::REESTIMATION_LEN,
            optimizer: OptimizerOptions::default(),
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
            level: 0.95,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train.start > self.train.end || self.test.start > self.test.end {
            return bad("window start must not follow its end");
        }
        if self.train.end >= self.test.start {
            return bad("training window must precede the test window");
        }
        let counts = [
            ("restarts", self.restarts),
            ("max_iter", self.max_iter),
            ("min_weeks", self.min_weeks),
            ("replicates", self.replicates),
            ("horizon_weeks", self.horizon_weeks),
            ("bootstrap_resamples", self.bootstrap_resamples),
            ("optimizer.multistarts", self.optimizer.multistarts),
            ("calibration.sim_len", self.calibration.sim_len),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_sims < 2 {
            return bad("n_sims must be at least 2");
        }
        if !(self.q >= 0.0) || !(self.level > 0.0 && self.level < 1.0) {
            return bad("q must be nonnegative and level in (0, 1)");
        }
        if !(self.calibration.eps > 0.0) || !(self.calibration.tau > 0.0) || !(self.tol > 0.0) {
            return bad("eps, tau and tol must be positive");
        }
        Ok(())
    }

    pub fn fit_options(&self, mode: FitMode) -> FitOptions {
        FitOptions {
            restarts: self.restarts,
            seed: self.seed,
            max_iter: self.max_iter,
            tol: self.tol,
            calibration: self.calibration,
            reestimation_len: self.reestimation_len,
            mode,
        }
    }

    pub fn model_path(&self, mode: FitMode) -> PathBuf {
        match mode {
            FitMode::Lhmm => self.paths.model.clone(),
            FitMode::IndependentHmms => {
                let stem = self.paths.model.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
                self.paths.model.with_file_name(format!("{stem}_independent.json"))
            }
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.prices);
        fix(&mut self.sectors);
        fix(&mut self.model);
        fix(&mut self.output_dir);
        if let Some(p) = self.index.as_mut() {
            fix(p);
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, contents).map_err(io(path))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialization(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Training returns: the training window, restricted to tickers with at
/// least `min_weeks` complete weeks at its end.
pub fn training_panel(prices: &PricePanel, sectors: &SectorMap, cfg: &RunConfig) -> Result<WeeklyReturnPanel> {
    let window = prices.window(cfg.train.start, cfg.train.end);
    let kept = filter_history(&window, cfg.min_weeks)?;
    compute_weekly_returns(&kept, sectors)
}

/// Last price date strictly before the test window; the test return series
/// starts from this close.
fn test_anchor(dates: &[NaiveDate], test: &Window) -> Result<NaiveDate> {
    dates
        .iter()
        .rev()
        .find(|d| **d < test.start)
        .copied()
        .ok_or_else(|| Error::Validation(format!("no price observed before test start {}", test.start)))
}

/// Test-window returns for the given tickers.
pub fn test_panel(prices: &PricePanel, sectors: &SectorMap, tickers: &[String], test: &Window) -> Result<WeeklyReturnPanel> {
    let anchor = test_anchor(&prices.dates, test)?;
    let window = prices.window(anchor, test.end);
    for t in tickers {
        let Some(k) = window.tickers.iter().position(|x| x == t) else {
            return Err(Error::MissingTicker(t.clone()));
        };
        if window.closes[k].iter().any(Option::is_none) {
            return Err(Error::MissingTicker(t.clone()));
        }
    }
    compute_weekly_returns(&window.select(tickers), sectors)
}

/// Percent change of the single index series over the test window.
pub fn index_gain(index: &PricePanel, test: &Window) -> Result<f64> {
    if index.tickers.len() != 1 {
        return Err(Error::Validation("index file must hold exactly one series".into()));
    }
    let anchor = test_anchor(&index.dates, test)?;
    let w = index.window(anchor, test.end);
    let closes: Vec<f64> = w.closes[0].iter().flatten().copied().collect();
    match (closes.first(), closes.last()) {
        (Some(a), Some(b)) if closes.len() >= 2 => Ok(100.0 * (b / a - 1.0)),
        _ => Err(Error::Validation("index series has fewer than two closes in the test window".into())),
    }
}

fn load_index(cfg: &RunConfig) -> Result<Option<f64>> {
    let Some(path) = cfg.paths.index.as_ref() else { return Ok(None) };
    let file = fs::File::open(path).map_err(io(path))?;
    let panel = read_prices(file, &path.display().to_string())?;
    index_gain(&panel, &cfg.test).map(Some)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorDiagnostics {
    pub name: String,
    pub n_stocks: usize,
    pub bic: f64,
    pub stage1_bic: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restart_bics: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub mode: FitMode,
    pub sectors: Vec<SectorDiagnostics>,
    pub sigma: Vec<Vec<f64>>,
    pub rho_star: Vec<Vec<f64>>,
    pub observed_spearman: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl FitDiagnostics {
    pub fn from_model(m: &LhmmModel) -> Self {
        Self {
            mode: m.mode,
            sectors: m
                .sectors
                .iter()
                .map(|s| SectorDiagnostics {
                    name: s.name.clone(),
                    n_stocks: s.tickers.len(),
                    bic: s.bic,
                    stage1_bic: s.stage1_bic,
                    log_likelihood: s.log_likelihood,
                    iterations: s.iterations,
                    converged: s.converged,
                    restart_bics: s.restart_bics.clone(),
                })
                .collect(),
            sigma: m.copula.sigma.clone(),
            rho_star: m.copula.rho_star.clone(),
            observed_spearman: m.observed_spearman.clone(),
            warnings: m.warnings.clone(),
        }
    }
}

/// Fits a model on the configured training window and writes the model and
/// its diagnostics next to each other.
pub fn cmd_fit(cfg: &RunConfig, mode: FitMode) -> Result<(LhmmModel, PathBuf)> {
    let (prices, sectors) = load_prices(&cfg.paths.prices, &cfg.paths.sectors)?;
    let panel = training_panel(&prices, &sectors, cfg)?;
    let model = fit_two_stage(&panel, &cfg.fit_options(mode))?;
    let path = cfg.model_path(mode);
    write_file(&path, &model.to_json()?)?;
    let diag = path.with_file_name(format!(
        "{}_diagnostics.json",
        path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned())
    ));
    write_file(&diag, &to_json(&FitDiagnostics::from_model(&model))?)?;
    Ok((model, path))
}

/// `N x K` cumulative returns of `n_sims` simulated datasets; dataset `i` of
/// replicate `r` uses the stream `(seed, DATASET, r, i)`.
pub fn simulate_returns(model: &LhmmModel, n_sims: usize, horizon: usize, seed: u64, replicate: u64) -> Result<SimulatedReturnMatrix> {
    let rows: Vec<Vec<f64>> = (0..n_sims)
        .into_par_iter()
        .map(|i| {
            let mut rng = task_rng(seed, &[STREAM_DATASET, replicate, i as u64]);
            let panel = simulate_dataset(model, horizon, &mut rng)?;
            panel.returns.iter().map(|y| stock_return(y)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    SimulatedReturnMatrix::from_rows(&rows)
}

/// Both allocations of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateAllocation {
    pub min_variance: PortfolioWeights,
    pub balanced: PortfolioWeights,
}

pub fn allocate(model: &LhmmModel, cfg: &RunConfig, replicate: u64) -> Result<ReplicateAllocation> {
    let seed = derive_seed(cfg.seed, &[STREAM_REPLICATE]);
    let r = simulate_returns(model, cfg.n_sims, cfg.horizon_weeks, seed, replicate)?;
    let moments = estimate_moments(&r)?;
    let opts = OptimizerOptions {
        seed: derive_seed(cfg.seed, &[STREAM_OPTIMIZER, replicate]),
        ..cfg.optimizer
    };
    Ok(ReplicateAllocation {
        min_variance: optimize_min_variance(&moments, &opts)?,
        balanced: optimize_balanced(&moments, cfg.q, &opts)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub mean: f64,
    /// Absent when there are too few replicates to bootstrap.
    pub ci: Option<BootstrapCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountSummary {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    pub mode: FitMode,
    pub objective: Objective,
    /// One entry per sector, in `BacktestReport::sector_names` order.
    pub sectors: Vec<GainSummary>,
    pub total: GainSummary,
    pub transactions: CountSummary,
    pub replicate_totals: Vec<f64>,
    pub replicate_sector_gains: Vec<Vec<f64>>,
    pub replicate_transactions: Vec<usize>,
    /// Weights averaged over replicates, in model ticker order.
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaSummary {
    pub mode: FitMode,
    pub sigma: Vec<Vec<f64>>,
    pub rho_star: Vec<Vec<f64>>,
    pub observed_spearman: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub format_version: String,
    pub seed: u64,
    pub n_sims: usize,
    pub replicates: usize,
    pub horizon_weeks: usize,
    pub q: f64,
    pub level: f64,
    pub test_window: Option<Window>,
    pub tickers: Vec<String>,
    pub sector_names: Vec<String>,
    pub portfolios: Vec<PortfolioReport>,
    pub copulas: Vec<CopulaSummary>,
    /// Benchmark index gain over the test window, percent.
    pub index_gain: Option<f64>,
    pub reference: ReferenceResults,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

fn summarize(gains: &[f64], cfg: &RunConfig, labels: &[u64]) -> Result<GainSummary> {
    let (mean, _) = mean_sd(gains);
    let ci = if gains.len() >= MIN_BOOTSTRAP_REPLICATES {
        let mut path = vec![STREAM_BOOTSTRAP];
        path.extend_from_slice(labels);
        let mut rng = task_rng(cfg.seed, &path);
        Some(bootstrap_ci(gains, cfg.level, cfg.bootstrap_resamples, &mut rng)?)
    } else {
        None
    };
    Ok(GainSummary { mean, ci })
}

fn portfolio_report(
    mode: FitMode,
    objective: Objective,
    weights: &[&PortfolioWeights],
    model: &LhmmModel,
    test: &WeeklyReturnPanel,
    cfg: &RunConfig,
) -> Result<PortfolioReport> {
    let gains = weights
        .iter()
        .map(|w| realized_gain(&w.w, &model.tickers, test))
        .collect::<Result<Vec<_>>>()?;
    let n_sectors = test.n_sectors();
    let tag = (mode as u64) * 2 + objective as u64;
    let sectors = (0..n_sectors)
        .map(|d| {
            let g: Vec<f64> = gains.iter().map(|x| x.by_sector[d]).collect();
            summarize(&g, cfg, &[tag, d as u64 + 1])
        })
        .collect::<Result<Vec<_>>>()?;
    let totals: Vec<f64> = gains.iter().map(|g| g.total).collect();
    let counts: Vec<usize> = weights.iter().map(|w| transaction_count(&w.w)).collect();
    let (cm, csd) = mean_sd(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    let k = model.n_stocks();
    let mean_weights = (0..k)
        .map(|i| weights.iter().map(|w| w.w[i]).sum::<f64>() / weights.len() as f64)
        .collect();
    Ok(PortfolioReport {
        mode,
        objective,
        sectors,
        total: summarize(&totals, cfg, &[tag, 0])?,
        transactions: CountSummary { mean: cm, sd: csd },
        replicate_totals: totals,
        replicate_sector_gains: gains.into_iter().map(|g| g.by_sector).collect(),
        replicate_transactions: counts,
        mean_weights,
    })
}

/// Runs `cfg.replicates` independent allocations from a fitted model and
/// evaluates them on the test panel. Both objectives are returned.
pub fn backtest_model(model: &LhmmModel, test: &WeeklyReturnPanel, cfg: &RunConfig) -> Result<Vec<PortfolioReport>> {
    cfg.validate()?;
    if test.sector_names != model.sector_names() {
        return Err(Error::Validation("test panel sectors differ from the model's".into()));
    }
    let allocations: Vec<ReplicateAllocation> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let out = allocate(model, cfg, r as u64);
            log::info!("replicate {} of {} done", r + 1, cfg.replicates);
            out
        })
        .collect::<Result<_>>()?;
    let mv: Vec<&PortfolioWeights> = allocations.iter().map(|a| &a.min_variance).collect();
    let bal: Vec<&PortfolioWeights> = allocations.iter().map(|a| &a.balanced).collect();
    Ok(vec![
        portfolio_report(model.mode, Objective::MinVariance, &mv, model, test, cfg)?,
        portfolio_report(model.mode, Objective::Balanced, &bal, model, test, cfg)?,
    ])
}

pub fn assemble_report(
    models: &[&LhmmModel],
    portfolios: Vec<PortfolioReport>,
    cfg: &RunConfig,
    test_window: Option<Window>,
    index_gain: Option<f64>,
) -> Result<BacktestReport> {
    let first = models.first().ok_or_else(|| Error::Validation("no model to report".into()))?;
    let report = BacktestReport {
        format_version: REPORT_VERSION.into(),
        seed: cfg.seed,
        n_sims: cfg.n_sims,
        replicates: cfg.replicates,
        horizon_weeks: cfg.horizon_weeks,
        q: cfg.q,
        level: cfg.level,
        test_window,
        tickers: first.tickers.clone(),
        sector_names: first.sector_names(),
        portfolios,
        copulas: models
            .iter()
            .map(|m| CopulaSummary {
                mode: m.mode,
                sigma: m.copula.sigma.clone(),
                rho_star: m.copula.rho_star.clone(),
                observed_spearman: m.observed_spearman.clone(),
            })
            .collect(),
        index_gain,
        reference: ReferenceResults::published(),
    };
    report.validate()?;
    Ok(report)
}

fn load_test_inputs(cfg: &RunConfig, model: &LhmmModel) -> Result<(WeeklyReturnPanel, Option<f64>)> {
    let (prices, sectors) = load_prices(&cfg.paths.prices, &cfg.paths.sectors)?;
    let test = test_panel(&prices, &sectors, &model.tickers, &cfg.test)?;
    Ok((test, load_index(cfg)?))
}

/// Backtests the model stored at the configured path for `mode`.
pub fn cmd_backtest(cfg: &RunConfig, mode: FitMode) -> Result<BacktestReport> {
    let model = LhmmModel::load(cfg.model_path(mode))?;
    if model.mode != mode {
        return Err(Error::Validation(format!("model file holds a {:?} fit, expected {mode:?}", model.mode)));
    }
    let (test, index) = load_test_inputs(cfg, &model)?;
    let portfolios = backtest_model(&model, &test, cfg)?;
    assemble_report(&[&model], portfolios, cfg, Some(cfg.test), index)
}

/// Fits both model variants and backtests all four portfolios, ordered as
/// independent min-variance, independent balanced, linked min-variance,
/// linked balanced.
pub fn cmd_compare(cfg: &RunConfig) -> Result<BacktestReport> {
    let (indep, _) = cmd_fit(cfg, FitMode::IndependentHmms)?;
    let (linked, _) = cmd_fit(cfg, FitMode::Lhmm)?;
    let (test, index) = load_test_inputs(cfg, &linked)?;
    let mut portfolios = backtest_model(&indep, &test, cfg)?;
    portfolios.extend(backtest_model(&linked, &test, cfg)?);
    assemble_report(&[&indep, &linked], portfolios, cfg, Some(cfg.test), index)
}

impl BacktestReport {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("report: {m}")));
        if self.format_version != REPORT_VERSION {
            return bad(format!("unknown format `{}`", self.format_version));
        }
        let d = self.sector_names.len();
        if d == 0 || self.tickers.is_empty() {
            return bad("no sectors or tickers".into());
        }
        if !matches!(self.portfolios.len(), 2 | 4) {
            return bad(format!("expected 2 or 4 portfolios, found {}", self.portfolios.len()));
        }
        if self.copulas.is_empty() || self.copulas.iter().any(|c| c.sigma.len() != d) {
            return bad("copula section missing or mis-sized".into());
        }
        for p in &self.portfolios {
            let n = self.replicates;
            if p.sectors.len() != d
                || p.replicate_totals.len() != n
                || p.replicate_sector_gains.len() != n
                || p.replicate_transactions.len() != n
                || p.mean_weights.len() != self.tickers.len()
            {
                return bad(format!("{:?}/{:?}: inconsistent dimensions", p.mode, p.objective));
            }
            for (total, by_sector) in p.replicate_totals.iter().zip(&p.replicate_sector_gains) {
                let s: f64 = by_sector.iter().sum();
                if (s - total).abs() > 1e-9 * total.abs().max(1.0) || by_sector.len() != d {
                    return bad(format!("{:?}/{:?}: total {total} differs from sector sum {s}", p.mode, p.objective));
                }
            }
            let sector_mean_sum: f64 = p.sectors.iter().map(|s| s.mean).sum();
            if (sector_mean_sum - p.total.mean).abs() > 1e-9 * p.total.mean.abs().max(1.0) {
                return bad(format!("{:?}/{:?}: mean total differs from sector means", p.mode, p.objective));
            }
            let need_ci = n >= MIN_BOOTSTRAP_REPLICATES;
            for g in p.sectors.iter().chain(std::iter::once(&p.total)) {
                match (&g.ci, need_ci) {
                    (Some(ci), true) if ci.low <= g.mean && g.mean <= ci.high => {}
                    (None, false) => {}
                    _ => return bad(format!("{:?}/{:?}: confidence interval missing or inconsistent", p.mode, p.objective)),
                }
            }
            if p.mean_weights.iter().any(|w| !w.is_finite()) || (p.mean_weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad("mean weights must sum to 1".into());
            }
        }
        Ok(())
    }

    /// Plain-text table: one row per sector with the mean gain and its
    /// interval, a total row, then transaction counts.
    pub fn render_table(&self) -> String {
        let fmt_gain = |g: &GainSummary| match g.ci {
            Some(ci) => format!("{:>7.2} ({:.2}, {:.2})", g.mean, ci.low, ci.high),
            None => format!("{:>7.2}", g.mean),
        };
        let headers: Vec<String> = self
            .portfolios
            .iter()
            .map(|p| {
                let m = match p.mode {
                    FitMode::Lhmm => "LHMM",
                    FitMode::IndependentHmms => "HMMs",
                };
                let o = match p.objective {
                    Objective::MinVariance => "min V(R)",
                    Objective::Balanced => "balanced",
                };
                format!("{m} {o}")
            })
            .collect();
        let name_w = self.sector_names.iter().map(String::len).max().unwrap_or(6).max(24);
        let col_w = 26;
        let mut out = format!("{:<name_w$}", "Sector (% gain)");
        for h in &headers {
            out.push_str(&format!(" | {h:<col_w$}"));
        }
        out.push('\n');
        for (d, name) in self.sector_names.iter().enumerate() {
            out.push_str(&format!("{name:<name_w$}"));
            for p in &self.portfolios {
                out.push_str(&format!(" | {:<col_w$}", fmt_gain(&p.sectors[d])));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<name_w$}", "Total"));
        for p in &self.portfolios {
            out.push_str(&format!(" | {:<col_w$}", fmt_gain(&p.total)));
        }
        out.push('\n');
        out.push_str(&format!("{:<name_w$}", "Transactions mean (SD)"));
        for p in &self.portfolios {
            out.push_str(&format!(" | {:<col_w$}", format!("{:.2} ({:.2})", p.transactions.mean, p.transactions.sd)));
        }
        out.push('\n');
        if let Some(g) = self.index_gain {
            out.push_str(&format!("Index gain over the test window: {g:.2}%\n"));
        }
        out
    }
}

/// One published portfolio result: total gain with its interval and the
/// transaction count summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePortfolio {
    pub mode: FitMode,
    pub objective: Objective,
    pub total_gain: f64,
    pub ci: (f64, f64),
    pub transactions_mean: f64,
    pub transactions_sd: f64,
}

/// Figures of the published 2016-17 S&P 500 case study (447 stocks, 12
/// sectors). They depend on that exact data set and fit trajectory and are
/// carried for side-by-side comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceResults {
    pub n_stocks: usize,
    pub n_sectors: usize,
    pub index_gain: f64,
    pub portfolios: Vec<ReferencePortfolio>,
}

impl ReferenceResults {
    pub fn published() -> Self {
        let p = |mode, objective, total_gain, ci, transactions_mean, transactions_sd| ReferencePortfolio {
            mode,
            objective,
            total_gain,
            ci,
            transactions_mean,
            transactions_sd,
        };
        use FitMode::*;
        use Objective::*;
        Self {
            n_stocks: 447,
            n_sectors: 12,
            index_gain: 18.0,
            portfolios: vec![
                p(IndependentHmms, MinVariance, 8.97, (8.58, 9.31), 134.45, 3.44),
                p(IndependentHmms, Balanced, 12.14, (11.29, 13.23), 37.47, 1.00),
                p(Lhmm, MinVariance, 8.11, (7.57, 8.67), 48.84, 1.56),
                p(Lhmm, Balanced, 12.72, (11.60, 13.58), 33.43, 1.03),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.restarts, c.n_sims, c.replicates, c.q), (20, 10_000, 100, 2.0));
        assert_eq!(c.horizon_weeks, 260);
        assert_eq!(c.train.start, date("2011-10-01"));
        assert_eq!(c.test.end, date("2017-09-30"));
        c.validate().unwrap();
    }

    #[test]
    fn toml_overrides_and_rejects_unknown_keys() {
        let c = RunConfig::from_toml(
            "seed = 5\nreplicates = 12\n[train]\nstart = \"2010-01-01\"\nend = \"2014-12-31\"\n[calibration]\neps = 0.02\n",
        )
        .unwrap();
        assert_eq!((c.seed, c.replicates, c.calibration.eps), (5, 12, 0.02));
        assert_eq!(c.calibration.tau, 0.005);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn overlapping_windows_rejected() {
        let mut c = RunConfig::default();
        c.test.start = c.train.end;
        assert!(c.validate().is_err());
        let c = RunConfig {
            replicates: 0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn reference_figures() {
        let r = ReferenceResults::published();
        let lhmm_bal = r.portfolios.iter().find(|p| p.mode == FitMode::Lhmm && p.objective == Objective::Balanced).unwrap();
        assert_eq!((lhmm_bal.total_gain, lhmm_bal.ci), (12.72, (11.60, 13.58)));
        let means: Vec<f64> = r.portfolios.iter().map(|p| p.transactions_mean).collect();
        assert_eq!(means, vec![134.45, 37.47, 48.84, 33.43]);
        assert_eq!(r.index_gain, 18.0);
    }

    #[test]
    fn independent_model_path_is_sibling() {
        let c = RunConfig::default();
        assert_eq!(c.model_path(FitMode::IndependentHmms), PathBuf::from("out/model_independent.json"));
    }
}
