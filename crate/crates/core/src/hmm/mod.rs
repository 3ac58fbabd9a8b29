//! Gaussian-emission hidden Markov models for one sector.
//!
//! Within a sector every stock shares the latent state; given the state,
//! stocks are independent Normals with state-specific means and variances.
//! States are zero-based: after [`relabel_states`] state 0 is the bull state
//! and state 1 the bear state.

mod baum_welch;
mod viterbi;

pub use baum_welch::{
    baum_welch, bic, fit_with_restarts, parameter_count, random_init, select_min_bic,
    BaumWelchFit, RestartFit, DEFAULT_MAX_ITER, DEFAULT_RESTARTS, DEFAULT_TOL,
};
pub use viterbi::viterbi;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Initial distribution and row-stochastic transition matrix of a finite chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

/// Per-stock, per-state Normal parameters; `mu[k][j]`, `sigma2[k][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionParams {
    pub mu: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianHmmParams {
    pub chain: MarkovChain,
    pub emissions: EmissionParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSequence(pub Vec<usize>);

/// Result of the bull/bear labelling rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelOutcome {
    Kept,
    Swapped,
    /// Both states have the same score; original order kept.
    Tie,
}

impl MarkovChain {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.initial.len();
        let ok_dist = |p: &[f64]| {
            p.iter().all(|&v| v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9
        };
        if j == 0 || !ok_dist(&self.initial) {
            return Err(Error::Validation("initial distribution must be a probability vector".into()));
        }
        if self.transition.len() != j
            || self.transition.iter().any(|row| row.len() != j || !ok_dist(row))
        {
            return Err(Error::Validation("transition matrix must be square and row-stochastic".into()));
        }
        Ok(())
    }

    /// Empirical chain from an observed path: occupancy frequencies for the
    /// initial law and transition counts for the matrix. Rows of states that
    /// are never left fall back to `fallback`.
    pub fn from_path(states: &[usize], fallback: &MarkovChain) -> MarkovChain {
        let j = fallback.n_states();
        let mut occupancy = vec![0.0; j];
        let mut counts = vec![vec![0.0; j]; j];
        for &s in states {
            occupancy[s] += 1.0;
        }
        for w in states.windows(2) {
            counts[w[0]][w[1]] += 1.0;
        }
        let total: f64 = occupancy.iter().sum();
        let initial = if total > 0.0 {
            occupancy.iter().map(|c| c / total).collect()
        } else {
            fallback.initial.clone()
        };
        let transition = counts
            .iter()
            .zip(&fallback.transition)
            .map(|(row, fb)| {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter().map(|c| c / s).collect()
                } else {
                    fb.clone()
                }
            })
            .collect();
        MarkovChain {
            initial,
            transition,
        }
    }
}

impl GaussianHmmParams {
    pub fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    pub fn n_stocks(&self) -> usize {
        self.emissions.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.chain.validate()?;
        let j = self.n_states();
        let e = &self.emissions;
        if e.mu.len() != e.sigma2.len()
            || e.mu.iter().chain(&e.sigma2).any(|row| row.len() != j)
        {
            return Err(Error::Validation("emission parameter shape mismatch".into()));
        }
        if e.sigma2.iter().flatten().any(|&v| !(v >= VARIANCE_FLOOR) || !v.is_finite())
            || e.mu.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::Validation("emission variances must be finite and floored".into()));
        }
        Ok(())
    }

    /// Reorders states so new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> GaussianHmmParams {
        let chain = MarkovChain {
            initial: perm.iter().map(|&p| self.chain.initial[p]).collect(),
            transition: perm
                .iter()
                .map(|&pi| perm.iter().map(|&pj| self.chain.transition[pi][pj]).collect())
                .collect(),
        };
        let pick = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect()
        };
        GaussianHmmParams {
            chain,
            emissions: EmissionParams {
                mu: pick(&self.emissions.mu),
                sigma2: pick(&self.emissions.sigma2),
            },
        }
    }

    /// Sum over stocks of mean-to-volatility ratios, one entry per state.
    pub fn return_to_volatility(&self) -> Vec<f64> {
        let e = &self.emissions;
        (0..self.n_states())
            .map(|j| {
                e.mu.iter()
                    .zip(&e.sigma2)
                    .map(|(m, s)| m[j] / s[j].sqrt())
                    .sum()
            })
            .collect()
    }
}

fn check_data<R: AsRef<[f64]>>(params: &GaussianHmmParams, data: &[R]) -> Result<usize> {
    if data.len() != params.n_stocks() {
        return Err(Error::Validation(format!(
            "sector has {} stocks but parameters describe {}",
            data.len(),
            params.n_stocks()
        )));
    }
    let n = data.first().map_or(0, |r| r.as_ref().len());
    if n == 0 || data.iter().any(|r| r.as_ref().len() != n) {
        return Err(Error::Validation("sector data must be a non-empty rectangle".into()));
    }
    if data.iter().any(|r| r.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteData);
    }
    Ok(n)
}

/// `log_b[t][j] = sum_k log N(y[k][t]; mu[k][j], sigma2[k][j])`.
pub(crate) fn log_emissions<R: AsRef<[f64]>>(params: &GaussianHmmParams, data: &[R]) -> Vec<Vec<f64>> {
    let j = params.n_states();
    let n = data[0].as_ref().len();
    let mut out = vec![vec![0.0; j]; n];
    for (row, (mu, s2)) in data
        .iter()
        .zip(params.emissions.mu.iter().zip(&params.emissions.sigma2))
    {
        let row = row.as_ref();
        for s in 0..j {
            let norm = -0.5 * (LN_2PI + s2[s].ln());
            let inv = 0.5 / s2[s];
            for (t, &y) in row.iter().enumerate() {
                let d = y - mu[s];
                out[t][s] += norm - d * d * inv;
            }
        }
    }
    out
}

/// Scaled forward-backward quantities.
pub(crate) struct Posterior {
    pub gamma: Vec<Vec<f64>>,
    pub xi_sum: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

/// Scaled forward pass: normalized filtered probabilities, scaled emissions
/// and per-step log normalizers.
struct Forward {
    alpha_hat: Vec<Vec<f64>>,
    scaled_b: Vec<Vec<f64>>,
    scale: Vec<f64>,
    log_likelihood: f64,
}

fn forward(params: &GaussianHmmParams, log_b: &[Vec<f64>]) -> Result<Forward> {
    let j = params.n_states();
    let n = log_b.len();
    let pi = &params.chain.transition;
    let mut alpha_hat = vec![vec![0.0; j]; n];
    let mut scaled_b = vec![vec![0.0; j]; n];
    let mut scale = vec![0.0; n];
    let mut ll = 0.0;
    for t in 0..n {
        let m = log_b[t].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for s in 0..j {
            scaled_b[t][s] = (log_b[t][s] - m).exp();
        }
        for s in 0..j {
            let prior = if t == 0 {
                params.chain.initial[s]
            } else {
                (0..j).map(|i| alpha_hat[t - 1][i] * pi[i][s]).sum()
            };
            alpha_hat[t][s] = prior * scaled_b[t][s];
        }
        let c: f64 = alpha_hat[t].iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Estimation(format!("zero likelihood at week {t}")));
        }
        alpha_hat[t].iter_mut().for_each(|a| *a /= c);
        scale[t] = c;
        ll += c.ln() + m;
    }
    Ok(Forward {
        alpha_hat,
        scaled_b,
        scale,
        log_likelihood: ll,
    })
}

pub(crate) fn posterior(params: &GaussianHmmParams, log_b: &[Vec<f64>]) -> Result<Posterior> {
    let j = params.n_states();
    let n = log_b.len();
    let pi = &params.chain.transition;
    let f = forward(params, log_b)?;
    let mut beta = vec![vec![1.0; j]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        for i in 0..j {
            beta[t][i] = (0..j)
                .map(|s| pi[i][s] * f.scaled_b[t + 1][s] * beta[t + 1][s])
                .sum::<f64>()
                / f.scale[t + 1];
        }
    }
    let mut gamma = vec![vec![0.0; j]; n];
    for t in 0..n {
        let mut total = 0.0;
        for s in 0..j {
            gamma[t][s] = f.alpha_hat[t][s] * beta[t][s];
            total += gamma[t][s];
        }
        gamma[t].iter_mut().for_each(|g| *g /= total);
    }
    let mut xi_sum = vec![vec![0.0; j]; j];
    for t in 0..n.saturating_sub(1) {
        let c = f.scale[t + 1];
        for i in 0..j {
            for s in 0..j {
                xi_sum[i][s] +=
                    f.alpha_hat[t][i] * pi[i][s] * f.scaled_b[t + 1][s] * beta[t + 1][s] / c;
            }
        }
    }
    Ok(Posterior {
        gamma,
        xi_sum,
        log_likelihood: f.log_likelihood,
    })
}

/// Marginal log-likelihood of a sector's returns (rows are stocks).
pub fn log_likelihood<R: AsRef<[f64]>>(params: &GaussianHmmParams, data: &[R]) -> Result<f64> {
    check_data(params, data)?;
    let log_b = log_emissions(params, data);
    Ok(forward(params, &log_b)?.log_likelihood)
}

/// Labels the state with the larger summed mean-to-volatility ratio as state 0.
///
/// Requires two states. On an exact tie the input order is kept and a
/// warning is logged.
pub fn relabel_states(params: &GaussianHmmParams) -> Result<(GaussianHmmParams, RelabelOutcome)> {
    if params.n_states() != 2 {
        return Err(Error::Validation("relabelling requires exactly two states".into()));
    }
    let score = params.return_to_volatility();
    if score[0] > score[1] {
        Ok((params.clone(), RelabelOutcome::Kept))
    } else if score[1] > score[0] {
        Ok((params.permuted(&[1, 0]), RelabelOutcome::Swapped))
    } else {
        log::warn!("bull/bear scores tie at {}; keeping state order", score[0]);
        Ok((params.clone(), RelabelOutcome::Tie))
    }
}

fn reachable(pi: &[Vec<f64>], from: usize) -> Vec<bool> {
    let mut seen = vec![false; pi.len()];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(i) = stack.pop() {
        for (j, &p) in pi[i].iter().enumerate() {
            if p > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Solves `eta * Pi = eta`, `sum(eta) = 1` for an irreducible chain.
pub fn stationary_distribution(pi: &[Vec<f64>]) -> Result<Vec<f64>> {
    let j = pi.len();
    if j == 0 || pi.iter().any(|r| r.len() != j) {
        return Err(Error::Validation("transition matrix must be square".into()));
    }
    if (0..j).any(|i| reachable(pi, i).iter().any(|&r| !r)) {
        return Err(Error::ReducibleChain);
    }
    let mut a = nalgebra::DMatrix::<f64>::zeros(j, j);
    for r in 0..j {
        for c in 0..j {
            a[(r, c)] = pi[c][r] - if r == c { 1.0 } else { 0.0 };
        }
    }
    for c in 0..j {
        a[(j - 1, c)] = 1.0;
    }
    let mut b = nalgebra::DVector::<f64>::zeros(j);
    b[j - 1] = 1.0;
    let eta = a.lu().solve(&b).ok_or(Error::ReducibleChain)?;
    Ok(eta.iter().map(|v| v.max(0.0)).collect())
}

/// Draws independent Normal returns for each stock given the state path.
/// Output rows are stocks; draws are taken week by week.
pub fn simulate_emissions<G: Rng + ?Sized>(
    params: &GaussianHmmParams,
    states: &StateSequence,
    rng: &mut G,
) -> Vec<Vec<f64>> {
    let e = &params.emissions;
    let k = e.mu.len();
    let mut out = vec![vec![0.0; states.0.len()]; k];
    for (t, &s) in states.0.iter().enumerate() {
        for i in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            out[i][t] = e.mu[i][s] + e.sigma2[i][s].sqrt() * z;
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn two_state(mu: &[(f64, f64)], sd: &[(f64, f64)], pi: [[f64; 2]; 2], alpha: [f64; 2]) -> GaussianHmmParams {
        GaussianHmmParams {
            chain: MarkovChain {
                initial: alpha.to_vec(),
                transition: pi.iter().map(|r| r.to_vec()).collect(),
            },
            emissions: EmissionParams {
                mu: mu.iter().map(|&(a, b)| vec![a, b]).collect(),
                sigma2: sd.iter().map(|&(a, b)| vec![a * a, b * b]).collect(),
            },
        }
    }

    /// Log-likelihood by summing the joint density over every state path.
    pub fn enumerate_log_likelihood(p: &GaussianHmmParams, data: &[Vec<f64>]) -> f64 {
        let j = p.n_states();
        let n = data[0].len();
        let mut total = 0.0;
        for code in 0..j.pow(n as u32) {
            let path: Vec<usize> = (0..n).map(|t| (code / j.pow(t as u32)) % j).collect();
            total += path_log_joint(p, data, &path).exp();
        }
        total.ln()
    }

    pub fn path_log_joint(p: &GaussianHmmParams, data: &[Vec<f64>], path: &[usize]) -> f64 {
        let mut lp = p.chain.initial[path[0]].ln();
        for t in 1..path.len() {
            lp += p.chain.transition[path[t - 1]][path[t]].ln();
        }
        for (k, row) in data.iter().enumerate() {
            for (t, &y) in row.iter().enumerate() {
                let m = p.emissions.mu[k][path[t]];
                let v = p.emissions.sigma2[k][path[t]];
                lp += -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (y - m).powi(2) / (2.0 * v);
            }
        }
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_state_is_iid_normal() {
        let p = GaussianHmmParams {
            chain: MarkovChain {
                initial: vec![1.0],
                transition: vec![vec![1.0]],
            },
            emissions: EmissionParams {
                mu: vec![vec![0.01]],
                sigma2: vec![vec![0.0004]],
            },
        };
        let y = vec![vec![0.02, -0.01, 0.0, 0.03]];
        let direct: f64 = y[0]
            .iter()
            .map(|v| -0.5 * (2.0 * std::f64::consts::PI * 0.0004f64).ln() - (v - 0.01f64).powi(2) / 0.0008)
            .sum();
        assert!((log_likelihood(&p, &y).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn forward_matches_enumeration() {
        let p = two_state(&[(0.01, -0.02)], &[(0.02, 0.04)], [[0.8, 0.2], [0.3, 0.7]], [0.6, 0.4]);
        let y = vec![vec![0.015, -0.05, 0.002]];
        let a = log_likelihood(&p, &y).unwrap();
        let b = enumerate_log_likelihood(&p, &y);
        assert!(((a - b) / b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn absorbing_first_state() {
        let p = two_state(&[(0.01, -0.02)], &[(0.02, 0.04)], [[1.0, 0.0], [0.0, 1.0]], [1.0, 0.0]);
        let y = vec![vec![0.015, -0.05, 0.002, 0.01]];
        let mut only_first = p.clone();
        only_first.emissions.mu[0][1] = 0.01;
        only_first.emissions.sigma2[0][1] = 0.0004;
        let direct = path_log_joint(&p, &y, &[0, 0, 0, 0]);
        assert!((log_likelihood(&p, &y).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn nan_rejected() {
        let p = two_state(&[(0.0, 0.0)], &[(1.0, 1.0)], [[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]);
        assert!(matches!(log_likelihood(&p, &[vec![0.1, f64::NAN]]), Err(Error::NonFiniteData)));
    }

    #[test]
    fn relabel_rules() {
        let bull_first = two_state(&[(3.0, -1.0)], &[(1.0, 1.0)], [[0.9, 0.1], [0.2, 0.8]], [0.3, 0.7]);
        let (same, outcome) = relabel_states(&bull_first).unwrap();
        assert_eq!(outcome, RelabelOutcome::Kept);
        assert_eq!(same, bull_first);

        let bear_first = bull_first.permuted(&[1, 0]);
        let (fixed, outcome) = relabel_states(&bear_first).unwrap();
        assert_eq!(outcome, RelabelOutcome::Swapped);
        assert_eq!(fixed.chain.transition, vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(fixed.chain.initial, vec![0.3, 0.7]);

        let y = vec![vec![0.5, -2.0, 1.0, 4.0, -0.3]];
        let a = log_likelihood(&bear_first, &y).unwrap();
        let b = log_likelihood(&fixed, &y).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());

        assert_eq!(bear_first.permuted(&[1, 0]).permuted(&[1, 0]), bear_first);
        assert_eq!(relabel_states(&fixed).unwrap().0, fixed);
    }

    #[test]
    fn relabel_tie_keeps_order() {
        let p = two_state(&[(1.0, 2.0)], &[(1.0, 2.0)], [[0.9, 0.1], [0.2, 0.8]], [0.5, 0.5]);
        let (out, outcome) = relabel_states(&p).unwrap();
        assert_eq!(outcome, RelabelOutcome::Tie);
        assert_eq!(out, p);
    }

    #[test]
    fn stationary_cases() {
        let eta = stationary_distribution(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((eta[0] - 0.5).abs() < 1e-12 && (eta[1] - 0.5).abs() < 1e-12);
        // Balance: 0.1 * eta0 = 0.3 * eta1.
        let eta = stationary_distribution(&[vec![0.9, 0.1], vec![0.3, 0.7]]).unwrap();
        assert!((eta[0] - 0.75).abs() < 1e-12 && (eta[1] - 0.25).abs() < 1e-12);
        assert!(matches!(
            stationary_distribution(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            Err(Error::ReducibleChain)
        ));
    }

    #[test]
    fn emissions_at_floor_equal_means() {
        let mut p = two_state(&[(0.01, -0.02), (0.03, 0.0)], &[(0.0, 0.0), (0.0, 0.0)], [[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]);
        for row in &mut p.emissions.sigma2 {
            row.iter_mut().for_each(|v| *v = VARIANCE_FLOOR);
        }
        let states = StateSequence(vec![0, 1, 1, 0]);
        let y = simulate_emissions(&p, &states, &mut ChaCha8Rng::seed_from_u64(1));
        for (k, row) in y.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                assert!((v - p.emissions.mu[k][states.0[t]]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn emission_moments_match() {
        let p = two_state(&[(0.01, -0.02)], &[(0.02, 0.05)], [[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]);
        let n = 100_000;
        let states = StateSequence((0..n).map(|t| t % 2).collect());
        let y = simulate_emissions(&p, &states, &mut ChaCha8Rng::seed_from_u64(2));
        for s in 0..2 {
            let xs: Vec<f64> = y[0].iter().skip(s).step_by(2).copied().collect();
            let m = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / m;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
            let sd = p.emissions.sigma2[0][s].sqrt();
            assert!((mean - p.emissions.mu[0][s]).abs() < 3.0 * sd / m.sqrt());
            let var_se = sd * sd * (2.0 / (m - 1.0)).sqrt();
            assert!((var - sd * sd).abs() < 3.0 * var_se);
        }
    }

    #[test]
    fn emissions_deterministic_under_seed() {
        let p = two_state(&[(0.01, -0.02)], &[(0.02, 0.05)], [[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]);
        let states = StateSequence(vec![0, 1, 0, 0, 1]);
        let a = simulate_emissions(&p, &states, &mut ChaCha8Rng::seed_from_u64(9));
        let b = simulate_emissions(&p, &states, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_chain_counts() {
        let fb = MarkovChain {
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        let c = MarkovChain::from_path(&[0, 0, 1, 0, 0, 0], &fb);
        assert_eq!(c.initial, vec![5.0 / 6.0, 1.0 / 6.0]);
        assert_eq!(c.transition[0], vec![0.75, 0.25]);
        assert_eq!(c.transition[1], vec![1.0, 0.0]);
    }
}
