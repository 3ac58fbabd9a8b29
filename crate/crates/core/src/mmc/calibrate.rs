//! Pairwise copula calibration.
//!
//! For two chains and an observed Spearman correlation between their state
//! paths, find the Spearman-scale copula parameter whose synthetic chains
//! reproduce that correlation. The synthetic correlation is evaluated on a
//! fixed set of Normal draws (common random numbers), so the search sees a
//! deterministic, essentially monotone curve.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::copula::{kruskal_rho, std_normal_cdf};
use super::{chain_from_uniforms, spearman, InitialLaw};
use crate::error::{Error, Result};
use crate::hmm::MarkovChain;

/// Search interval for the Spearman-scale parameter is `(-LIMIT, LIMIT)`.
pub const RHO_STAR_LIMIT: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    /// Bisection over the full parameter interval.
    #[default]
    Bisection,
    /// Start at the target and step upward by `tau` until within `eps`.
    FixedStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationOptions {
    pub eps: f64,
    pub tau: f64,
    pub sim_len: usize,
    pub search: LineSearch,
    pub max_iter: usize,
    pub initial_law: InitialLaw,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            eps: 0.01,
            tau: 0.005,
            sim_len: 50_000,
            search: LineSearch::Bisection,
            max_iter: 100,
            initial_law: InitialLaw::Estimated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairCalibration {
    pub rho_star: f64,
    /// Copula correlation `kruskal_rho(rho_star)`.
    pub rho: f64,
    /// Spearman correlation of the synthetic states at `rho_star`.
    pub achieved: f64,
    pub iterations: usize,
}

struct SyntheticPair<'a> {
    second: &'a MarkovChain,
    init_second: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    path1: Vec<usize>,
}

impl<'a> SyntheticPair<'a> {
    fn new<G: Rng + ?Sized>(
        first: &'a MarkovChain,
        second: &'a MarkovChain,
        opts: &CalibrationOptions,
        rng: &mut G,
    ) -> Result<Self> {
        let n = opts.sim_len;
        let z1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let z2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let u1: Vec<f64> = z1.iter().map(|&z| uniform(z)).collect();
        let init_first = opts.initial_law.resolve(first)?;
        let init_second = opts.initial_law.resolve(second)?;
        let path1 = chain_from_uniforms(first, &init_first, &u1);
        Ok(Self {
            second,
            init_second,
            z1,
            z2,
            path1,
        })
    }

    /// Spearman correlation of the synthetic state paths at `rho_star`.
    fn correlation(&self, rho_star: f64) -> Result<f64> {
        let rho = kruskal_rho(rho_star)?;
        let c = (1.0 - rho * rho).max(0.0).sqrt();
        let u2: Vec<f64> = self
            .z1
            .iter()
            .zip(&self.z2)
            .map(|(&a, &b)| uniform(rho * a + c * b))
            .collect();
        let path2 = chain_from_uniforms(self.second, &self.init_second, &u2);
        spearman(&self.path1, &path2)
    }
}

fn uniform(w: f64) -> f64 {
    std_normal_cdf(w).min(1.0 - f64::EPSILON / 2.0)
}

fn finish(rho_star: f64, achieved: f64, iterations: usize) -> Result<PairCalibration> {
    Ok(PairCalibration {
        rho_star,
        rho: kruskal_rho(rho_star)?,
        achieved,
        iterations,
    })
}

/// Finds `rho_star` such that synthetic chains generated through the
/// copula with correlation `kruskal_rho(rho_star)` have state Spearman
/// correlation within `eps` of `target`.
pub fn calibrate_pair<G: Rng + ?Sized>(
    first: &MarkovChain,
    second: &MarkovChain,
    target: f64,
    opts: &CalibrationOptions,
    rng: &mut G,
) -> Result<PairCalibration> {
    if !(target.abs() < 1.0) {
        return Err(Error::CorrelationDomain(target));
    }
    if !(opts.eps > 0.0) || opts.sim_len < 2 {
        return Err(Error::Validation("calibration needs eps > 0 and sim_len >= 2".into()));
    }
    let pair = SyntheticPair::new(first, second, opts, rng)?;
    match opts.search {
        LineSearch::Bisection => bisect(&pair, target, opts),
        LineSearch::FixedStep => fixed_step(&pair, target, opts),
    }
}

fn bisect(pair: &SyntheticPair<'_>, target: f64, opts: &CalibrationOptions) -> Result<PairCalibration> {
    let eps = opts.eps;
    let mut iterations = 1;
    let start = pair.correlation(target)?;
    if (start - target).abs() <= eps {
        return finish(target, start, iterations);
    }
    let (mut lo, mut hi) = if start < target {
        let top = pair.correlation(RHO_STAR_LIMIT)?;
        iterations += 1;
        if (top - target).abs() <= eps {
            return finish(RHO_STAR_LIMIT, top, iterations);
        }
        if top < target {
            let bottom = pair.correlation(-RHO_STAR_LIMIT)?;
            return Err(Error::UnreachableTarget {
                target,
                min: bottom,
                max: top,
            });
        }
        (target, RHO_STAR_LIMIT)
    } else {
        let bottom = pair.correlation(-RHO_STAR_LIMIT)?;
        iterations += 1;
        if (bottom - target).abs() <= eps {
            return finish(-RHO_STAR_LIMIT, bottom, iterations);
        }
        if bottom > target {
            let top = pair.correlation(RHO_STAR_LIMIT)?;
            return Err(Error::UnreachableTarget {
                target,
                min: bottom,
                max: top,
            });
        }
        (-RHO_STAR_LIMIT, target)
    };
    let mut best = start;
    while iterations < opts.max_iter && hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let r = pair.correlation(mid)?;
        iterations += 1;
        if (r - target).abs() < (best - target).abs() {
            best = r;
        }
        if (r - target).abs() <= eps {
            return finish(mid, r, iterations);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::CalibrationStalled { target, best })
}

fn fixed_step(pair: &SyntheticPair<'_>, target: f64, opts: &CalibrationOptions) -> Result<PairCalibration> {
    let mut rho_star = target;
    let mut achieved = 0.0;
    let mut iterations = 0;
    let mut best = achieved;
    while (achieved - target).abs() > opts.eps {
        rho_star += opts.tau;
        if rho_star > RHO_STAR_LIMIT {
            return Err(Error::CalibrationStalled { target, best });
        }
        achieved = pair.correlation(rho_star)?;
        iterations += 1;
        if (achieved - target).abs() < (best - target).abs() {
            best = achieved;
        }
    }
    if iterations == 0 {
        achieved = pair.correlation(rho_star)?;
    }
    finish(rho_star, achieved, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn symmetric() -> MarkovChain {
        MarkovChain {
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.8, 0.2], vec![0.2, 0.8]],
        }
    }

    #[test]
    fn zero_target_maps_to_zero() {
        let c = symmetric();
        let opts = CalibrationOptions::default();
        let out = calibrate_pair(&c, &c, 0.0, &opts, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((out.achieved).abs() <= opts.eps);
        assert!(out.rho_star.abs() < 2.0 * opts.eps);
    }

    #[test]
    fn positive_target_attenuated() {
        let c = symmetric();
        let opts = CalibrationOptions::default();
        let out = calibrate_pair(&c, &c, 0.35, &opts, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!((out.achieved - 0.35).abs() <= 0.01);
        assert!(out.rho_star > 0.35);
        assert!((out.rho - kruskal_rho(out.rho_star).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn negative_target_converges() {
        let c = symmetric();
        let opts = CalibrationOptions::default();
        let out = calibrate_pair(&c, &c, -0.3, &opts, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!((out.achieved + 0.3).abs() <= 0.01);
        assert!(out.rho_star < -0.3);
    }

    #[test]
    fn fixed_step_reaches_positive_target() {
        let c = symmetric();
        let opts = CalibrationOptions {
            search: LineSearch::FixedStep,
            ..Default::default()
        };
        let out = calibrate_pair(&c, &c, 0.3, &opts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!((out.achieved - 0.3).abs() <= 0.01);
        assert!(out.rho_star > 0.3);
    }

    #[test]
    fn fixed_step_cannot_descend() {
        let c = symmetric();
        let opts = CalibrationOptions {
            search: LineSearch::FixedStep,
            ..Default::default()
        };
        let err = calibrate_pair(&c, &c, -0.3, &opts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap_err();
        assert!(matches!(err, Error::CalibrationStalled { .. }));
    }

    #[test]
    fn unreachable_target_reports_bound() {
        // A chain that almost never moves cannot track a strongly correlated partner.
        let sticky = MarkovChain {
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.999, 0.001], vec![0.001, 0.999]],
        };
        let opts = CalibrationOptions {
            sim_len: 5_000,
            ..Default::default()
        };
        let iid = MarkovChain {
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        match calibrate_pair(&sticky, &iid, 0.95, &opts, &mut ChaCha8Rng::seed_from_u64(6)) {
            Err(Error::UnreachableTarget { max, .. }) => assert!(max < 0.95),
            other => panic!("expected unreachable, got {other:?}"),
        }
    }

    #[test]
    fn calibration_curve_monotone_and_attenuated() {
        let c = symmetric();
        let opts = CalibrationOptions::default();
        let pair = SyntheticPair::new(&c, &c, &opts, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let grid: Vec<f64> = (-9..=9).map(|i| i as f64 / 10.0).collect();
        let curve: Vec<f64> = grid.iter().map(|&g| pair.correlation(g).unwrap()).collect();
        for w in curve.windows(2) {
            assert!(w[1] >= w[0] - 0.01, "curve not monotone: {curve:?}");
        }
        for (g, r) in grid.iter().zip(&curve) {
            assert!(r.abs() <= g.abs() + 0.02, "r*({g}) = {r}");
        }
    }
}
