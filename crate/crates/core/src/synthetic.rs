//! Synthetic models and price files with known ground truth.
//!
//! Used by the integration tests and the `synthetic_fixture` example to
//! exercise the pipeline without market data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use rand::Rng;

use crate::backtest::write_file;
use crate::error::{Error, Result};
use crate::hmm::{EmissionParams, GaussianHmmParams, MarkovChain, RelabelOutcome};
use crate::lhmm::{simulate_dataset, FitMode, LhmmModel, ModelMetadata, SectorModel, FORMAT_VERSION};
use crate::mmc::{calibrate_pair, CalibrationOptions, CopulaCorrelation, InitialLaw};
use crate::seeding::{task_rng, STREAM_CALIBRATION, STREAM_DATASET};
use crate::transforms::YeoJohnsonParams;

/// Per-sector specification: ticker names, per-stock `(mu_bull, mu_bear)`
/// and `(sd_bull, sd_bear)`, and the transition matrix.
#[derive(Debug, Clone)]
pub struct SectorSpec {
    pub name: String,
    pub tickers: Vec<String>,
    pub mu: Vec<(f64, f64)>,
    pub sd: Vec<(f64, f64)>,
    pub transition: [[f64; 2]; 2],
}

impl SectorSpec {
    fn params(&self) -> GaussianHmmParams {
        GaussianHmmParams {
            chain: MarkovChain {
                initial: vec![0.5, 0.5],
                transition: self.transition.iter().map(|r| r.to_vec()).collect(),
            },
            emissions: EmissionParams {
                mu: self.mu.iter().map(|&(a, b)| vec![a, b]).collect(),
                sigma2: self.sd.iter().map(|&(a, b)| vec![a * a, b * b]).collect(),
            },
        }
    }
}

/// Copula whose synthetic state paths reproduce `target[i][j]` Spearman
/// correlations between the chains.
pub fn calibrated_copula(
    chains: &[MarkovChain],
    target: &[Vec<f64>],
    opts: &CalibrationOptions,
    seed: u64,
) -> Result<CopulaCorrelation> {
    let d = chains.len();
    let mut rho_star = vec![vec![0.0; d]; d];
    for i in 0..d {
        rho_star[i][i] = 1.0;
        for j in i + 1..d {
            let mut rng = task_rng(seed, &[STREAM_CALIBRATION, i as u64, j as u64]);
            let c = calibrate_pair(&chains[i], &chains[j], target[i][j], opts, &mut rng)?;
            rho_star[i][j] = c.rho_star;
            rho_star[j][i] = c.rho_star;
        }
    }
    CopulaCorrelation::from_rho_star(rho_star)
}

/// Ground-truth model with identity Yeo-Johnson transforms.
pub fn model_from_specs(specs: &[SectorSpec], copula: CopulaCorrelation) -> Result<LhmmModel> {
    let sectors: Vec<SectorModel> = specs
        .iter()
        .map(|s| SectorModel {
            name: s.name.clone(),
            tickers: s.tickers.clone(),
            hmm: s.params(),
            bic: 0.0,
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            relabel: RelabelOutcome::Kept,
            stage1_bic: 0.0,
            selected_restart: 0,
            restart_bics: Vec::new(),
            ll_trace: (0.0, 0.0),
        })
        .collect();
    let tickers: Vec<String> = specs.iter().flat_map(|s| s.tickers.clone()).collect();
    let d = specs.len();
    let model = LhmmModel {
        format_version: FORMAT_VERSION.into(),
        mode: FitMode::Lhmm,
        yj: vec![YeoJohnsonParams { lambda: 1.0 }; tickers.len()],
        tickers,
        sectors,
        observed_spearman: CopulaCorrelation::identity(d).sigma,
        copula,
        initial_law: InitialLaw::Estimated,
        metadata: ModelMetadata {
            first_week: None,
            last_week: None,
            n_weeks: 0,
            seed: 0,
            restarts: 0,
        },
        warnings: Vec::new(),
    };
    model.validate()?;
    Ok(model)
}

/// A small universe: `n_sectors` sectors of `per_sector` stocks with
/// well-separated bull and bear regimes and weakly persistent chains.
pub fn demo_specs(n_sectors: usize, per_sector: usize) -> Vec<SectorSpec> {
    (0..n_sectors)
        .map(|d| {
            let name = format!("Sector{}", (b'A' + d as u8) as char);
            SectorSpec {
                tickers: (0..per_sector).map(|i| format!("{}{}", &name[6..], i + 1)).collect(),
                name,
                mu: (0..per_sector)
                    .map(|i| (0.016 + 0.002 * i as f64 + 0.001 * d as f64, -0.018 - 0.002 * i as f64))
                    .collect(),
                sd: (0..per_sector).map(|i| (0.010 + 0.001 * i as f64, 0.013 + 0.001 * i as f64)).collect(),
                transition: [[0.6 + 0.02 * d as f64, 0.4 - 0.02 * d as f64], [0.4, 0.6]],
            }
        })
        .collect()
}

/// Friday dates, one per week, starting at the first Friday on or after `start`.
pub fn weekly_dates(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    use chrono::Datelike;
    let offset = (4 + 7 - start.weekday().num_days_from_monday() as i64) % 7;
    let first = start + Duration::days(offset);
    (0..n).map(|i| first + Duration::weeks(i as i64)).collect()
}

#[derive(Debug, Clone)]
pub struct PriceFiles {
    pub prices: PathBuf,
    pub sectors: PathBuf,
    pub index: PathBuf,
}

/// Simulates `dates.len() - 1` weeks from `model` and writes closes starting
/// at 100, the ticker-to-sector map, and an equal-weight index series.
pub fn write_price_files<G: Rng + ?Sized>(dir: &Path, model: &LhmmModel, dates: &[NaiveDate], rng: &mut G) -> Result<PriceFiles> {
    if dates.len() < 2 {
        return Err(Error::Validation("need at least two dates".into()));
    }
    let panel = simulate_dataset(model, dates.len() - 1, rng)?;
    let mut prices = String::from("date,ticker,close\n");
    for (k, t) in panel.tickers.iter().enumerate() {
        let mut p = 100.0;
        for (i, d) in dates.iter().enumerate() {
            if i > 0 {
                p *= 1.0 + panel.returns[k][i - 1];
            }
            writeln!(prices, "{d},{t},{p}").expect("write to string");
        }
    }
    let mut sectors = String::from("ticker,sector\n");
    for (k, t) in panel.tickers.iter().enumerate() {
        writeln!(sectors, "{t},{}", panel.sector_names[panel.stock_sector[k]]).expect("write to string");
    }
    let mut index = String::from("date,ticker,close\n");
    let mut level = 1000.0;
    for (i, d) in dates.iter().enumerate() {
        if i > 0 {
            let avg = panel.returns.iter().map(|r| r[i - 1]).sum::<f64>() / panel.n_stocks() as f64;
            level *= 1.0 + avg;
        }
        writeln!(index, "{d},INDEX,{level}").expect("write to string");
    }
    let files = PriceFiles {
        prices: dir.join("prices.csv"),
        sectors: dir.join("sectors.csv"),
        index: dir.join("index.csv"),
    };
    write_file(&files.prices, &prices)?;
    write_file(&files.sectors, &sectors)?;
    write_file(&files.index, &index)?;
    Ok(files)
}

/// Writes a demo universe covering October 2011 to September 2017: the
/// sectors of [`demo_specs`] with all pairwise state correlations at 0.3.
pub fn demo_fixture(dir: &Path, n_sectors: usize, per_sector: usize, seed: u64) -> Result<PriceFiles> {
    let specs = demo_specs(n_sectors, per_sector);
    let chains: Vec<MarkovChain> = specs.iter().map(|s| s.params().chain).collect();
    let target: Vec<Vec<f64>> = (0..n_sectors)
        .map(|i| (0..n_sectors).map(|j| if i == j { 1.0 } else { 0.3 }).collect())
        .collect();
    let copula = calibrated_copula(&chains, &target, &CalibrationOptions::default(), seed)?;
    let truth = model_from_specs(&specs, copula)?;
    let dates = weekly_dates(NaiveDate::from_ymd_opt(2011, 9, 30).expect("valid date"), 314);
    write_price_files(dir, &truth, &dates, &mut task_rng(seed, &[STREAM_DATASET]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Datelike;

    #[test]
    fn weekly_dates_are_fridays() {
        let d = weekly_dates(NaiveDate::from_ymd_opt(2011, 10, 1).unwrap(), 3);
        assert!(d.iter().all(|x| x.weekday() == chrono::Weekday::Fri));
        assert_eq!(d[0], NaiveDate::from_ymd_opt(2011, 10, 7).unwrap());
        assert_eq!(d[2] - d[0], Duration::weeks(2));
    }

    #[test]
    fn demo_specs_satisfy_label_rule() {
        for s in demo_specs(3, 3) {
            let score = s.params().return_to_volatility();
            assert!(score[0] > score[1]);
            s.params().validate().unwrap();
        }
    }
}
