//! Two-stage estimation and simulation of linked HMMs.
//!
//! Stage 1 fits an independent two-state Gaussian HMM to the Yeo-Johnson
//! transformed returns of every sector, labels the states bull/bear and
//! decodes the most likely regime path. Stage 2 calibrates a Gaussian copula
//! to the pairwise Spearman correlations of the decoded paths and then
//! re-estimates each sector's chain from a long synthetic multivariate chain,
//! using the frequencies as Baum-Welch starting values.

use std::path::Path;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{
    baum_welch, bic, fit_with_restarts, relabel_states, simulate_emissions, viterbi, GaussianHmmParams,
    MarkovChain, RelabelOutcome, StateSequence, DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL,
};
use crate::ingest::WeeklyReturnPanel;
use crate::mmc::{
    calibrate_pair, generate_mmc, min_eigenvalue, spearman, CalibrationOptions, CopulaCorrelation, InitialLaw,
    MIN_EIGENVALUE, RHO_STAR_LIMIT,
};
use crate::seeding::{derive_seed, task_rng, STREAM_CALIBRATION, STREAM_REESTIMATION, STREAM_RESTARTS};
use crate::transforms::{fit_lambda, YeoJohnsonParams};

pub const FORMAT_VERSION: &str = "lhmm-model/1";
pub const REESTIMATION_LEN: usize = 10_000;
/// Out-of-domain redraws tolerated per simulated dataset.
pub const MAX_REDRAWS: usize = 1_000_000;
const N_STATES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Copula-coupled sectors with stage-2 re-estimation.
    #[default]
    Lhmm,
    /// Independent sector HMMs: identity copula, no stage 2.
    IndependentHmms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub calibration: CalibrationOptions,
    pub reestimation_len: usize,
    pub mode: FitMode,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            calibration: CalibrationOptions::default(),
            reestimation_len: REESTIMATION_LEN,
            mode: FitMode::Lhmm,
        }
    }
}

/// Fitted HMM of one sector plus its fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorModel {
    pub name: String,
    pub tickers: Vec<String>,
    /// Emission row `i` belongs to `tickers[i]`.
    pub hmm: GaussianHmmParams,
    pub bic: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub relabel: RelabelOutcome,
    pub stage1_bic: f64,
    pub selected_restart: usize,
    pub restart_bics: Vec<Option<f64>>,
    /// First and last entries of the final Baum-Welch log-likelihood trace.
    pub ll_trace: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub first_week: Option<NaiveDate>,
    pub last_week: Option<NaiveDate>,
    pub n_weeks: usize,
    pub seed: u64,
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LhmmModel {
    pub format_version: String,
    pub mode: FitMode,
    pub sectors: Vec<SectorModel>,
    pub copula: CopulaCorrelation,
    /// Stock order: sectors in order, tickers within each sector in order.
    pub tickers: Vec<String>,
    pub yj: Vec<YeoJohnsonParams>,
    /// Spearman correlation of the stage-1 decoded state paths.
    pub observed_spearman: Vec<Vec<f64>>,
    pub initial_law: InitialLaw,
    pub metadata: ModelMetadata,
    pub warnings: Vec<String>,
}

fn in_sector(name: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| Error::Sector {
        sector: name.to_string(),
        source: Box::new(e),
    }
}

fn warn(warnings: &mut Vec<String>, msg: String) {
    log::warn!("{msg}");
    warnings.push(msg);
}

struct Stage1 {
    fit: crate::hmm::RestartFit,
    params: GaussianHmmParams,
    relabel: RelabelOutcome,
    path: StateSequence,
}

/// Pairwise Spearman matrix of decoded paths; constant paths give 0.
fn observed_spearman(names: &[String], paths: &[&StateSequence], warnings: &mut Vec<String>) -> Result<Vec<Vec<f64>>> {
    let d = paths.len();
    let mut r = vec![vec![0.0; d]; d];
    for i in 0..d {
        r[i][i] = 1.0;
        for j in i + 1..d {
            let v = match spearman(&paths[i].0, &paths[j].0) {
                Ok(v) => v,
                Err(Error::UndefinedCorrelation) => {
                    warn(
                        warnings,
                        format!("decoded path constant for {} or {}; Spearman set to 0", names[i], names[j]),
                    );
                    0.0
                }
                Err(e) => return Err(e),
            };
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    Ok(r)
}

fn calibrate_all(
    chains: &[&MarkovChain],
    names: &[String],
    target: &[Vec<f64>],
    opts: &FitOptions,
    warnings: &mut Vec<String>,
) -> Result<Vec<Vec<f64>>> {
    let d = chains.len();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let results: Vec<Result<(f64, Option<String>)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let r = target[i][j];
            let label = format!("{}/{}", names[i], names[j]);
            if r.abs() >= 1.0 {
                let clamp = RHO_STAR_LIMIT.copysign(r);
                return Ok((clamp, Some(format!("pair {label}: observed Spearman {r} clamped to {clamp}"))));
            }
            let mut rng = task_rng(opts.seed, &[STREAM_CALIBRATION, i as u64, j as u64]);
            match calibrate_pair(chains[i], chains[j], r, &opts.calibration, &mut rng) {
                Ok(c) => Ok((c.rho_star, None)),
                Err(Error::UnreachableTarget { min, max, .. }) => {
                    let clamp = RHO_STAR_LIMIT.copysign(r);
                    Ok((
                        clamp,
                        Some(format!(
                            "pair {label}: target {r:.4} outside achievable [{min:.4}, {max:.4}]; rho* set to {clamp}"
                        )),
                    ))
                }
                Err(Error::CalibrationStalled { best, .. }) => Ok((
                    r,
                    Some(format!("pair {label}: calibration stalled (best {best:.4}); rho* set to target {r:.4}")),
                )),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut rho_star = vec![vec![0.0; d]; d];
    for i in 0..d {
        rho_star[i][i] = 1.0;
    }
    for (&(i, j), res) in pairs.iter().zip(results) {
        let (v, note) = res?;
        if let Some(note) = note {
            warn(warnings, note);
        }
        rho_star[i][j] = v;
        rho_star[j][i] = v;
    }
    Ok(rho_star)
}

fn flip_sector(m: &mut [Vec<f64>], d: usize) {
    for (i, row) in m.iter_mut().enumerate() {
        if i != d {
            row[d] = -row[d];
        }
    }
    for (j, v) in m[d].iter_mut().enumerate() {
        if j != d {
            *v = -*v;
        }
    }
}

/// Fits the linked HMM to a validated return panel.
pub fn fit_two_stage(panel: &WeeklyReturnPanel, opts: &FitOptions) -> Result<LhmmModel> {
    panel.validate()?;
    let mut warnings = Vec::new();

    let yj: Vec<YeoJohnsonParams> = panel
        .returns
        .par_iter()
        .zip(&panel.tickers)
        .map(|(row, t)| fit_lambda(row).map_err(|e| Error::Validation(format!("ticker {t}: {e}"))))
        .collect::<Result<_>>()?;
    let transformed: Vec<Vec<f64>> = panel
        .returns
        .iter()
        .zip(&yj)
        .map(|(row, p)| row.iter().map(|&y| p.transform(y)).collect())
        .collect();
    let sector_data: Vec<Vec<&[f64]>> = panel
        .sectors
        .iter()
        .map(|rows| rows.iter().map(|&k| transformed[k].as_slice()).collect())
        .collect();
    let names = &panel.sector_names;

    // Stage 1.
    let stage1: Vec<Stage1> = sector_data
        .par_iter()
        .enumerate()
        .map(|(d, data)| {
            let seed = derive_seed(opts.seed, &[STREAM_RESTARTS, d as u64]);
            let run = || -> Result<Stage1> {
                let fit = fit_with_restarts(data, N_STATES, opts.restarts, seed, opts.max_iter, opts.tol)?;
                let (params, relabel) = relabel_states(&fit.fit.params)?;
                let path = viterbi(&params, data)?;
                Ok(Stage1 {
                    fit,
                    params,
                    relabel,
                    path,
                })
            };
            run().map_err(in_sector(&names[d]))
        })
        .collect::<Result<_>>()?;
    for (d, s) in stage1.iter().enumerate() {
        if s.relabel == RelabelOutcome::Tie {
            warn(&mut warnings, format!("sector {}: bull/bear scores tie; state order kept", names[d]));
        }
    }

    let paths: Vec<&StateSequence> = stage1.iter().map(|s| &s.path).collect();
    let observed = observed_spearman(names, &paths, &mut warnings)?;
    let n_sectors = panel.n_sectors();

    let mut sectors: Vec<SectorModel> = stage1
        .iter()
        .enumerate()
        .map(|(d, s)| SectorModel {
            name: names[d].clone(),
            tickers: panel.sectors[d].iter().map(|&k| panel.tickers[k].clone()).collect(),
            hmm: s.params.clone(),
            bic: s.fit.bic,
            log_likelihood: s.fit.fit.log_likelihood,
            iterations: s.fit.fit.iterations,
            converged: s.fit.fit.converged,
            relabel: s.relabel,
            stage1_bic: s.fit.bic,
            selected_restart: s.fit.restart,
            restart_bics: s.fit.restart_bics.clone(),
            ll_trace: trace_ends(&s.fit.fit.trace, s.fit.fit.log_likelihood),
        })
        .collect();

    let copula = if opts.mode == FitMode::Lhmm && n_sectors > 1 {
        let chains: Vec<&MarkovChain> = stage1.iter().map(|s| &s.params.chain).collect();
        let rho_star = calibrate_all(&chains, names, &observed, opts, &mut warnings)?;
        let mut copula = CopulaCorrelation::from_rho_star(rho_star)?;

        // Stage 2: re-estimate each chain from a long synthetic MMC.
        let owned: Vec<MarkovChain> = chains.into_iter().cloned().collect();
        let mut rng = task_rng(opts.seed, &[STREAM_REESTIMATION]);
        let synthetic = generate_mmc(
            &owned,
            &copula.sigma,
            opts.reestimation_len,
            &mut rng,
            opts.calibration.initial_law,
        )?;
        let refits: Vec<(crate::hmm::BaumWelchFit, GaussianHmmParams, RelabelOutcome, f64)> = sector_data
            .par_iter()
            .enumerate()
            .map(|(d, data)| {
                let run = || -> Result<_> {
                    let mut init = stage1[d].params.clone();
                    init.chain = MarkovChain::from_path(&synthetic.states[d], &owned[d]);
                    let fit = baum_welch(data, &init, opts.max_iter, opts.tol)?;
                    let (params, relabel) = relabel_states(&fit.params)?;
                    let b = bic(&params, data)?;
                    Ok((fit, params, relabel, b))
                };
                run().map_err(in_sector(&names[d]))
            })
            .collect::<Result<_>>()?;
        for (d, (fit, params, relabel, b)) in refits.into_iter().enumerate() {
            let s = &mut sectors[d];
            if relabel == RelabelOutcome::Swapped {
                // Swapping bull and bear reverses the sign of this sector's dependence.
                flip_sector(&mut copula.sigma, d);
                flip_sector(&mut copula.rho_star, d);
                warn(&mut warnings, format!("sector {}: stage-2 refit swapped state labels", names[d]));
            } else if relabel == RelabelOutcome::Tie {
                warn(&mut warnings, format!("sector {}: bull/bear scores tie after stage 2", names[d]));
            }
            s.hmm = params;
            s.bic = b;
            s.log_likelihood = fit.log_likelihood;
            s.iterations = fit.iterations;
            s.converged = fit.converged;
            s.ll_trace = trace_ends(&fit.trace, fit.log_likelihood);
        }
        copula
    } else {
        CopulaCorrelation::identity(n_sectors)
    };

    let model = LhmmModel {
        format_version: FORMAT_VERSION.to_string(),
        mode: opts.mode,
        sectors,
        copula,
        tickers: panel.tickers.clone(),
        yj,
        observed_spearman: observed,
        initial_law: opts.calibration.initial_law,
        metadata: ModelMetadata {
            first_week: panel.dates.first().copied(),
            last_week: panel.dates.last().copied(),
            n_weeks: panel.n_weeks(),
            seed: opts.seed,
            restarts: opts.restarts,
        },
        warnings,
    };
    model.validate()?;
    Ok(model)
}

fn trace_ends(trace: &[f64], last: f64) -> (f64, f64) {
    (trace.first().copied().unwrap_or(last), trace.last().copied().unwrap_or(last))
}

impl LhmmModel {
    pub fn n_sectors(&self) -> usize {
        self.sectors.len()
    }

    pub fn n_stocks(&self) -> usize {
        self.tickers.len()
    }

    pub fn sector_names(&self) -> Vec<String> {
        self.sectors.iter().map(|s| s.name.clone()).collect()
    }

    /// Empty panel skeleton with this model's stock and sector layout.
    fn layout(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut stock_sector = Vec::with_capacity(self.n_stocks());
        let mut sets = Vec::with_capacity(self.n_sectors());
        let mut k = 0;
        for (d, s) in self.sectors.iter().enumerate() {
            sets.push((k..k + s.tickers.len()).collect());
            stock_sector.extend(std::iter::repeat_n(d, s.tickers.len()));
            k += s.tickers.len();
        }
        (stock_sector, sets)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Serialization(format!(
                "unsupported model format `{}` (expected `{FORMAT_VERSION}`)",
                self.format_version
            )));
        }
        let d = self.sectors.len();
        if d == 0 {
            return Err(Error::Validation("model has no sectors".into()));
        }
        let listed: Vec<&String> = self.sectors.iter().flat_map(|s| &s.tickers).collect();
        if listed.len() != self.tickers.len() || listed.iter().zip(&self.tickers).any(|(a, b)| *a != b) {
            return Err(Error::Validation("sector tickers do not match the model's stock order".into()));
        }
        if self.yj.len() != self.tickers.len() {
            return Err(Error::Validation("every stock needs a Yeo-Johnson lambda".into()));
        }
        for s in &self.sectors {
            s.hmm.validate().map_err(in_sector(&s.name))?;
            if s.hmm.n_stocks() != s.tickers.len() || s.tickers.is_empty() {
                return Err(Error::Validation(format!("sector {}: emission rows do not match tickers", s.name)));
            }
        }
        self.copula.validate()?;
        if self.copula.dim() != d {
            return Err(Error::Validation(format!("copula is {0}x{0} but model has {d} sectors", self.copula.dim())));
        }
        if min_eigenvalue(&self.copula.sigma) < MIN_EIGENVALUE * (1.0 - 1e-6) {
            return Err(Error::NotPositiveDefinite);
        }
        let r = &self.observed_spearman;
        if r.len() != d || r.iter().any(|row| row.len() != d) {
            return Err(Error::Validation("observed Spearman matrix has wrong shape".into()));
        }
        for i in 0..d {
            if r[i][i] != 1.0 {
                return Err(Error::Validation("observed Spearman diagonal must be 1".into()));
            }
            for j in 0..i {
                if r[i][j] != r[j][i] || !(r[i][j].abs() <= 1.0) {
                    return Err(Error::Validation("observed Spearman matrix must be symmetric in [-1, 1]".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: LhmmModel = serde_json::from_str(text).map_err(|e| Error::Serialization(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Draws one panel of `n_weeks` weekly changes on the original return scale.
///
/// Transformed draws that fall outside the inverse transform's range, or map
/// to a change of -100% or worse, are redrawn from the same state.
pub fn simulate_dataset<G: Rng + ?Sized>(model: &LhmmModel, n_weeks: usize, rng: &mut G) -> Result<WeeklyReturnPanel> {
    let chains: Vec<MarkovChain> = model.sectors.iter().map(|s| s.hmm.chain.clone()).collect();
    let mut states = generate_mmc(&chains, &model.copula.sigma, n_weeks, rng, model.initial_law)?;
    let mut returns = Vec::with_capacity(model.n_stocks());
    let mut redraws = 0usize;
    let mut k = 0;
    for (d, sector) in model.sectors.iter().enumerate() {
        let path = StateSequence(std::mem::take(&mut states.states[d]));
        let draws = simulate_emissions(&sector.hmm, &path, rng);
        let e = &sector.hmm.emissions;
        for (i, row) in draws.into_iter().enumerate() {
            let yj = model.yj[k + i];
            let mut out = Vec::with_capacity(n_weeks);
            for (t, mut ystar) in row.into_iter().enumerate() {
                let s = path.0[t];
                loop {
                    match yj.inverse(ystar) {
                        Ok(y) if y > -1.0 => {
                            out.push(y);
                            break;
                        }
                        _ => {
                            redraws += 1;
                            if redraws > MAX_REDRAWS {
                                return Err(Error::ResampleLimit(MAX_REDRAWS));
                            }
                            let z: f64 = rng.sample(StandardNormal);
                            ystar = e.mu[i][s] + e.sigma2[i][s].sqrt() * z;
                        }
                    }
                }
            }
            returns.push(out);
        }
        k += sector.tickers.len();
    }
    let (stock_sector, sectors) = model.layout();
    Ok(WeeklyReturnPanel {
        tickers: model.tickers.clone(),
        sector_names: model.sector_names(),
        stock_sector,
        sectors,
        dates: Vec::new(),
        returns,
    })
}
