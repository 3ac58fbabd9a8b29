use rand::Rng;
use rand_distr::{Distribution, Exp1, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_data, log_emissions, posterior, EmissionParams, GaussianHmmParams, MarkovChain, VARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::seeding::{task_rng, STREAM_RESTARTS};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_RESTARTS: usize = 20;

/// Expected occupancy below which a state counts as never visited.
const MIN_OCCUPANCY: f64 = 1e-6;
const MAX_RESEEDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchFit {
    pub params: GaussianHmmParams,
    pub log_likelihood: f64,
    /// Log-likelihood of each E-step since the last re-seed; the final entry
    /// belongs to `params`.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartFit {
    pub fit: BaumWelchFit,
    pub bic: f64,
    pub restart: usize,
    /// BIC of every restart; `None` for restarts that failed.
    pub restart_bics: Vec<Option<f64>>,
}

/// `(J - 1) + J(J - 1) + 2 J n_d` free parameters.
pub fn parameter_count(n_states: usize, n_stocks: usize) -> usize {
    (n_states - 1) + n_states * (n_states - 1) + 2 * n_states * n_stocks
}

/// `-2 LL + p ln(n)`.
pub fn bic<R: AsRef<[f64]>>(params: &GaussianHmmParams, data: &[R]) -> Result<f64> {
    let ll = super::log_likelihood(params, data)?;
    Ok(bic_from(ll, params, data[0].as_ref().len()))
}

fn bic_from(ll: f64, params: &GaussianHmmParams, n: usize) -> f64 {
    let p = parameter_count(params.n_states(), params.n_stocks()) as f64;
    -2.0 * ll + p * (n as f64).ln()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

fn reseed_state<R: AsRef<[f64]>>(e: &mut EmissionParams, data: &[R], state: usize, n_states: usize) {
    let q = (state as f64 + 0.5) / n_states as f64;
    for (k, row) in data.iter().enumerate() {
        let mut sorted = row.as_ref().to_vec();
        sorted.sort_by(f64::total_cmp);
        e.mu[k][state] = quantile(&sorted, q);
        e.sigma2[k][state] = variance(&sorted).max(VARIANCE_FLOOR);
    }
}

/// Expectation-maximization for the sector HMM, stopping when the relative
/// log-likelihood change drops below `tol` or after `max_iter` M-steps.
pub fn baum_welch<R: AsRef<[f64]>>(
    data: &[R],
    init: &GaussianHmmParams,
    max_iter: usize,
    tol: f64,
) -> Result<BaumWelchFit> {
    init.validate()?;
    check_data(init, data)?;
    let j = init.n_states();
    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut reseeds = 0;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let log_b = log_emissions(&params, data);
        let post = posterior(&params, &log_b)?;
        let ll = post.log_likelihood;
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if ((ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations >= max_iter {
            break;
        }

        // M-step.
        let occupancy: Vec<f64> = (0..j).map(|s| post.gamma.iter().map(|g| g[s]).sum()).collect();
        let mut next = params.clone();
        let g0: f64 = post.gamma[0].iter().sum();
        next.chain.initial = post.gamma[0].iter().map(|g| g / g0).collect();
        for i in 0..j {
            let row_sum: f64 = post.xi_sum[i].iter().sum();
            if row_sum > 0.0 {
                next.chain.transition[i] = post.xi_sum[i].iter().map(|x| x / row_sum).collect();
            }
        }
        let mut degenerate = Vec::new();
        for s in 0..j {
            if occupancy[s] < MIN_OCCUPANCY {
                degenerate.push(s);
                continue;
            }
            for (k, row) in data.iter().enumerate() {
                let row = row.as_ref();
                let mean = post.gamma.iter().zip(row).map(|(g, y)| g[s] * y).sum::<f64>() / occupancy[s];
                let var = post
                    .gamma
                    .iter()
                    .zip(row)
                    .map(|(g, y)| g[s] * (y - mean).powi(2))
                    .sum::<f64>()
                    / occupancy[s];
                next.emissions.mu[k][s] = mean;
                next.emissions.sigma2[k][s] = var.max(VARIANCE_FLOOR);
            }
        }
        iterations += 1;
        if !degenerate.is_empty() {
            reseeds += 1;
            if reseeds > MAX_RESEEDS {
                return Err(Error::Estimation(format!(
                    "state {:?} keeps collapsing after {MAX_RESEEDS} re-seeds",
                    degenerate
                )));
            }
            log::debug!("re-seeding collapsed states {degenerate:?}");
            for &s in &degenerate {
                reseed_state(&mut next.emissions, data, s, j);
                next.chain.transition[s] = vec![1.0 / j as f64; j];
            }
            next.chain.initial = vec![1.0 / j as f64; j];
            trace.clear();
        }
        params = next;
    }

    let log_likelihood = *trace.last().expect("at least one E-step");
    if !log_likelihood.is_finite() {
        return Err(Error::Estimation("non-finite log-likelihood".into()));
    }
    Ok(BaumWelchFit {
        params,
        log_likelihood,
        trace,
        iterations,
        converged,
        reseeds,
    })
}

fn flat_dirichlet<G: Rng + ?Sized>(j: usize, rng: &mut G) -> Vec<f64> {
    let draws: Vec<f64> = (0..j).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Random starting values: flat-Dirichlet initial law and transition rows;
/// emissions from the means and variances of random quantile segments of
/// each stock's sorted returns.
pub fn random_init<R: AsRef<[f64]>, G: Rng + ?Sized>(
    data: &[R],
    n_states: usize,
    rng: &mut G,
) -> GaussianHmmParams {
    let initial = flat_dirichlet(n_states, rng);
    let transition = (0..n_states).map(|_| flat_dirichlet(n_states, rng)).collect();
    let mut cuts: Vec<f64> = {
        let u = Uniform::new(0.2, 0.8).expect("valid range");
        (1..n_states).map(|_| u.sample(rng)).collect()
    };
    cuts.sort_by(f64::total_cmp);
    let mut bounds = vec![0.0];
    bounds.extend(cuts);
    bounds.push(1.0);

    let mut mu = Vec::with_capacity(data.len());
    let mut sigma2 = Vec::with_capacity(data.len());
    for row in data {
        let mut sorted = row.as_ref().to_vec();
        sorted.sort_by(f64::total_cmp);
        let len = sorted.len();
        let mut m_row = Vec::with_capacity(n_states);
        let mut v_row = Vec::with_capacity(n_states);
        for s in 0..n_states {
            let lo = ((bounds[s] * len as f64).floor() as usize).min(len - 1);
            let hi = ((bounds[s + 1] * len as f64).ceil() as usize).clamp(lo + 1, len);
            let seg = &sorted[lo..hi];
            m_row.push(seg.iter().sum::<f64>() / seg.len() as f64);
            v_row.push(variance(seg).max(VARIANCE_FLOOR));
        }
        mu.push(m_row);
        sigma2.push(v_row);
    }
    GaussianHmmParams {
        chain: MarkovChain { initial, transition },
        emissions: EmissionParams { mu, sigma2 },
    }
}

/// Lowest BIC among successful candidates; ties go to the earliest.
pub fn select_min_bic(candidates: &[Option<(f64, usize)>]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|(b, _)| (i, b)))
        .fold(None, |best: Option<(usize, f64)>, (i, b)| match best {
            Some((_, bb)) if bb <= b => best,
            _ => Some((i, b)),
        })
        .map(|(i, _)| i)
}

/// Runs Baum-Welch from `restarts` random starting points and keeps the fit
/// with the lowest BIC. Restart `r` draws its starting values from the
/// stream `(seed, RESTARTS, r)`.
pub fn fit_with_restarts<R: AsRef<[f64]> + Sync>(
    data: &[R],
    n_states: usize,
    restarts: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<RestartFit> {
    if restarts == 0 {
        return Err(Error::Validation("restarts must be at least 1".into()));
    }
    let n = data.first().map_or(0, |r| r.as_ref().len());
    let runs: Vec<Result<BaumWelchFit>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = task_rng(seed, &[STREAM_RESTARTS, r as u64]);
            let init = random_init(data, n_states, &mut rng);
            baum_welch(data, &init, max_iter, tol)
        })
        .collect();
    let bics: Vec<Option<(f64, usize)>> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| r.as_ref().ok().map(|f| (bic_from(f.log_likelihood, &f.params, n), i)))
        .collect();
    let Some(best) = select_min_bic(&bics) else {
        let reason = runs
            .into_iter()
            .rev()
            .find_map(|r| r.err())
            .map_or_else(String::new, |e| e.to_string());
        return Err(Error::Estimation(format!("all {restarts} restarts failed: {reason}")));
    };
    let restart_bics = bics.iter().map(|b| b.map(|(v, _)| v)).collect();
    let bic = bics[best].expect("selected candidate succeeded").0;
    let fit = runs.into_iter().nth(best).expect("index in range")?;
    Ok(RestartFit {
        fit,
        bic,
        restart: best,
        restart_bics,
    })
}

#[cfg(test)]
mod tests {
    use super::super::test_support::two_state;
    use super::super::{log_likelihood, simulate_emissions, StateSequence};
    use super::*;
    use crate::mmc::simulate_chain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn truth() -> GaussianHmmParams {
        two_state(
            &[(0.01, -0.015), (0.02, -0.01), (0.005, -0.02)],
            &[(0.02, 0.04), (0.03, 0.05), (0.015, 0.035)],
            [[0.95, 0.05], [0.10, 0.90]],
            [0.5, 0.5],
        )
    }

    fn simulate(p: &GaussianHmmParams, n: usize, seed: u64) -> (StateSequence, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = simulate_chain(&p.chain, n, &mut rng);
        let y = simulate_emissions(p, &states, &mut rng);
        (states, y)
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(parameter_count(1, 1), 2);
        assert_eq!(parameter_count(2, 3), 15);
    }

    #[test]
    fn bic_orders_by_likelihood() {
        let p = truth();
        let (_, y) = simulate(&p, 300, 1);
        let mut worse = p.clone();
        worse.emissions.mu[0][0] += 0.05;
        let (lb, lw) = (log_likelihood(&p, &y).unwrap(), log_likelihood(&worse, &y).unwrap());
        let (bb, bw) = (bic(&p, &y).unwrap(), bic(&worse, &y).unwrap());
        assert_eq!(lb > lw, bb < bw);
        let expected = -2.0 * lb + 15.0 * 300f64.ln();
        assert!((bb - expected).abs() < 1e-9);
    }

    #[test]
    fn em_preserves_normalization_and_monotone_trace() {
        let (_, y) = simulate(&truth(), 800, 3);
        let init = random_init(&y, 2, &mut ChaCha8Rng::seed_from_u64(4));
        let fit = baum_welch(&y, &init, 200, 1e-10).unwrap();
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace decreased: {} -> {}", w[0], w[1]);
        }
        let c = &fit.params.chain;
        assert!((c.initial.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for row in &c.transition {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_at_truth_converges_quickly() {
        let p = truth();
        let (_, y) = simulate(&p, 2000, 5);
        let fit = baum_welch(&y, &p, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations < 20, "took {} iterations", fit.iterations);
    }

    #[test]
    fn single_restart_equals_single_run() {
        let (_, y) = simulate(&truth(), 400, 6);
        let via_restarts = fit_with_restarts(&y, 2, 1, 77, 300, 1e-6).unwrap();
        let mut rng = task_rng(77, &[STREAM_RESTARTS, 0]);
        let init = random_init(&y, 2, &mut rng);
        let direct = baum_welch(&y, &init, 300, 1e-6).unwrap();
        assert_eq!(via_restarts.fit, direct);
        assert_eq!(via_restarts.restart, 0);
    }

    #[test]
    fn lower_bic_run_wins_over_symmetric_fixed_point() {
        let p = truth();
        let (_, y) = simulate(&p, 600, 8);
        // Identical states form an EM fixed point with a poor likelihood.
        let mut collapsed = p.clone();
        collapsed.chain.transition = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        for k in 0..3 {
            let m: f64 = y[k].iter().sum::<f64>() / 600.0;
            let v = variance(&y[k]);
            collapsed.emissions.mu[k] = vec![m, m];
            collapsed.emissions.sigma2[k] = vec![v, v];
        }
        let stuck = baum_welch(&y, &collapsed, 100, 1e-8).unwrap();
        let good = baum_welch(&y, &p, 100, 1e-8).unwrap();
        let cands = vec![
            Some((bic(&stuck.params, &y).unwrap(), 0)),
            Some((bic(&good.params, &y).unwrap(), 1)),
        ];
        assert!(stuck.log_likelihood < good.log_likelihood);
        assert_eq!(select_min_bic(&cands), Some(1));
        assert_eq!(select_min_bic(&[None, None]), None);
    }

    #[test]
    fn collapsed_state_is_reseeded() {
        let (_, y) = simulate(&truth(), 300, 9);
        let mut init = truth();
        // State 1 sits far from every observation so its posterior mass vanishes.
        for k in 0..3 {
            init.emissions.mu[k][1] = 50.0;
            init.emissions.sigma2[k][1] = 1e-4;
        }
        let fit = baum_welch(&y, &init, 200, 1e-8).unwrap();
        assert!(fit.reseeds >= 1);
        fit.params.validate().unwrap();
    }
}
