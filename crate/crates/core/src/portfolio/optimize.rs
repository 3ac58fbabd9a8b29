//! Projected-gradient solvers for the two allocation criteria.
//!
//! Both objectives are convex in the minimization form, so each start
//! converges to the global optimum; the multistarts only guard against slow
//! convergence on badly conditioned instances.

use nalgebra::DVector;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{portfolio_moments, Objective, PortfolioWeights, ReturnMoments};
use crate::error::{Error, Result};
use crate::seeding::{task_rng, STREAM_OPTIMIZER};

/// `E(R) > 0` is enforced as `E(R) >= MIN_EXPECTED_RETURN`.
pub const MIN_EXPECTED_RETURN: f64 = 1e-8;
/// Added to the variance inside the square root to keep its gradient finite.
pub const SQRT_EPS: f64 = 1e-12;
const ARMIJO: f64 = 1e-4;
const DIVERGENCE: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerOptions {
    pub multistarts: usize,
    pub seed: u64,
    /// Restrict weights to be nonnegative; otherwise only `sum(w) = 1`.
    pub long_only: bool,
    pub max_iter: usize,
    /// Stationarity tolerance on the projected gradient step.
    pub tol: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            multistarts: 50,
            seed: 0,
            long_only: true,
            max_iter: 20_000,
            tol: 1e-12,
        }
    }
}

/// Euclidean projection onto `{w >= 0, sum(w) = 1}` by the sort-and-threshold rule.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn project_affine(v: &[f64]) -> Vec<f64> {
    let shift = (v.iter().sum::<f64>() - 1.0) / v.len() as f64;
    v.iter().map(|x| x - shift).collect()
}

struct Feasible<'a> {
    long_only: bool,
    /// Lower bound on the expected return, if any.
    floor: Option<&'a DVector<f64>>,
}

impl Feasible<'_> {
    fn base(&self, v: &[f64]) -> Vec<f64> {
        if self.long_only {
            project_simplex(v)
        } else {
            project_affine(v)
        }
    }

    fn check(&self) -> Result<()> {
        let Some(m) = self.floor else { return Ok(()) };
        let max = m.max();
        let constant = m.iter().all(|&x| x == m[0]);
        if (self.long_only || constant) && max < MIN_EXPECTED_RETURN {
            return Err(Error::NoPositiveReturnAllocation);
        }
        Ok(())
    }

    /// Projection onto the base set intersected with `{m . w >= floor}`:
    /// `P(v + nu m)` with the smallest multiplier `nu >= 0` that satisfies the bound.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let w = self.base(v);
        let Some(m) = self.floor else { return w };
        let ret = |w: &[f64]| w.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>();
        if ret(&w) >= MIN_EXPECTED_RETURN {
            return w;
        }
        let shifted = |nu: f64| -> Vec<f64> {
            let x: Vec<f64> = v.iter().zip(m.iter()).map(|(a, b)| a + nu * b).collect();
            self.base(&x)
        };
        let mut hi = 1.0 / m.amax().max(1e-300);
        let mut w_hi = shifted(hi);
        for _ in 0..2_000 {
            if ret(&w_hi) >= MIN_EXPECTED_RETURN {
                break;
            }
            hi *= 2.0;
            w_hi = shifted(hi);
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let w_mid = shifted(mid);
            if ret(&w_mid) >= MIN_EXPECTED_RETURN {
                hi = mid;
                w_hi = w_mid;
            } else {
                lo = mid;
            }
        }
        w_hi
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the feasible set from `x0` by projected gradient
/// descent with Barzilai-Borwein steps and Armijo backtracking.
fn descend<F>(f: &F, set: &Feasible<'_>, x0: &[f64], opts: &OptimizerOptions) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = set.project(x0);
    let (mut fx, mut g) = f(&x);
    let mut alpha = 1.0 / g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    for _ in 0..opts.max_iter {
        let mut step = alpha;
        let (xn, fnew, gn) = loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let xn = set.project(&trial);
            let d: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let (fnew, gn) = f(&xn);
            if fnew <= fx + ARMIJO * dot(&g, &d) || step < 1e-30 {
                break (xn, fnew, gn);
            }
            step *= 0.5;
        };
        if fnew > fx {
            // No descent even at a vanishing step: x is stationary to working precision.
            break;
        }
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let moved = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        x = xn;
        fx = fnew;
        g = gn;
        if x.iter().any(|v| v.abs() > DIVERGENCE) {
            return Err(Error::Unbounded);
        }
        if moved <= opts.tol {
            break;
        }
        let sy = dot(&s, &y);
        alpha = if sy > 0.0 { (dot(&s, &s) / sy).clamp(1e-12, 1e12) } else { alpha * 2.0 };
    }
    Ok((x, fx))
}

fn starts(k: usize, opts: &OptimizerOptions) -> Vec<Vec<f64>> {
    let mut out = vec![vec![1.0 / k as f64; k]];
    for s in 1..opts.multistarts.max(1) {
        let mut rng = task_rng(opts.seed, &[STREAM_OPTIMIZER, s as u64]);
        let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        out.push(draws.into_iter().map(|d| d / total).collect());
    }
    out
}

fn multistart<F>(f: F, set: &Feasible<'_>, k: usize, opts: &OptimizerOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    let runs: Vec<Result<(Vec<f64>, f64)>> = starts(k, opts)
        .par_iter()
        .map(|x0| descend(&f, set, x0, opts))
        .collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for run in runs {
        let (x, fx) = run?;
        if best.as_ref().is_none_or(|(_, b)| fx < *b) {
            best = Some((x, fx));
        }
    }
    let (mut w, _) = best.expect("at least one start");
    if set.long_only {
        w.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

fn check(m: &ReturnMoments) -> Result<usize> {
    let k = m.n_assets();
    if k == 0 || m.cov.nrows() != k || m.cov.ncols() != k {
        return Err(Error::Validation("moments must have matching, non-empty dimensions".into()));
    }
    if m.mean.iter().chain(m.cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData);
    }
    Ok(k)
}

fn cov_times(m: &ReturnMoments, w: &[f64]) -> Vec<f64> {
    let w = DVector::from_column_slice(w);
    (&m.cov * w).iter().copied().collect()
}

/// Minimizes `w' V w` subject to the weight constraints and `E(R) > 0`.
pub fn optimize_min_variance(m: &ReturnMoments, opts: &OptimizerOptions) -> Result<PortfolioWeights> {
    let k = check(m)?;
    let set = Feasible {
        long_only: opts.long_only,
        floor: Some(&m.mean),
    };
    set.check()?;
    let f = |w: &[f64]| {
        let cw = cov_times(m, w);
        (dot(w, &cw), cw.into_iter().map(|v| 2.0 * v).collect())
    };
    let w = multistart(f, &set, k, opts)?;
    let (expected, variance) = portfolio_moments(m, &w)?;
    if expected < MIN_EXPECTED_RETURN * (1.0 - 1e-9) {
        return Err(Error::NoPositiveReturnAllocation);
    }
    Ok(PortfolioWeights {
        w,
        objective: Objective::MinVariance,
        q: 0.0,
        value: variance,
        expected,
        variance,
    })
}

/// Maximizes `E(R) - q sqrt(V(R))` subject to the weight constraints.
pub fn optimize_balanced(m: &ReturnMoments, q: f64, opts: &OptimizerOptions) -> Result<PortfolioWeights> {
    let k = check(m)?;
    if !(q >= 0.0) || !q.is_finite() {
        return Err(Error::Validation(format!("q must be finite and nonnegative, got {q}")));
    }
    let w = if q == 0.0 && opts.long_only {
        // Linear objective: the best vertex, lowest index on ties.
        let best = (0..k).fold(0, |b, i| if m.mean[i] > m.mean[b] { i } else { b });
        let mut w = vec![0.0; k];
        w[best] = 1.0;
        w
    } else {
        let set = Feasible {
            long_only: opts.long_only,
            floor: None,
        };
        let f = |w: &[f64]| {
            let cw = cov_times(m, w);
            let sd = (dot(w, &cw) + SQRT_EPS).sqrt();
            let value = q * sd - m.mean.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
            let grad = cw.iter().zip(m.mean.iter()).map(|(c, e)| q * c / sd - e).collect();
            (value, grad)
        };
        multistart(f, &set, k, opts)?
    };
    let (expected, variance) = portfolio_moments(m, &w)?;
    Ok(PortfolioWeights {
        w,
        objective: Objective::Balanced,
        q,
        value: expected - q * variance.max(0.0).sqrt(),
        expected,
        variance,
    })
}
