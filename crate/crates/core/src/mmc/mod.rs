//! Multivariate Markov chains driven by a Gaussian copula.
//!
//! A chain is built from a sequence of uniforms by interval membership: the
//! first state from the cumulative initial law, every later state from the
//! cumulative transition row of the previous state. Feeding each chain with
//! one coordinate of a sequence of copula-correlated uniform vectors yields
//! chains that are marginally Markov and contemporaneously dependent.

mod calibrate;
mod copula;
mod rank;

pub use calibrate::{calibrate_pair, CalibrationOptions, LineSearch, PairCalibration, RHO_STAR_LIMIT};
pub use copula::{
    assemble_sigma, cholesky_psd, kruskal_rho, min_eigenvalue, sample_correlated_uniforms,
    std_normal_cdf, CopulaCorrelation, MIN_EIGENVALUE, REPAIR_EIGENVALUE,
};
pub use rank::{fractional_ranks, pearson, spearman};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{stationary_distribution, MarkovChain, StateSequence};

/// Which law seeds the first state of each generated chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialLaw {
    /// The chain's estimated initial distribution.
    #[default]
    Estimated,
    /// The stationary distribution of the transition matrix.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MmcSample {
    /// `states[d][t]`, zero-based.
    pub states: Vec<Vec<usize>>,
}

/// State whose cumulative interval `[F(j-1), F(j))` of `probs` contains `u`.
pub fn serfozo_h(u: f64, probs: &[f64]) -> usize {
    let mut cum = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return j;
        }
    }
    // Rounding left the total just below 1; fall back to the last reachable state.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Next state from row `prev` of the transition matrix.
pub fn serfozo_f(prev: usize, u: f64, transition: &[Vec<f64>]) -> usize {
    serfozo_h(u, &transition[prev])
}

impl InitialLaw {
    pub fn resolve(self, chain: &MarkovChain) -> Result<Vec<f64>> {
        match self {
            InitialLaw::Estimated => Ok(chain.initial.clone()),
            InitialLaw::Stationary => stationary_distribution(&chain.transition),
        }
    }
}

/// Maps one row of uniforms to a state path.
pub fn chain_from_uniforms(chain: &MarkovChain, initial: &[f64], uniforms: &[f64]) -> Vec<usize> {
    let mut path = Vec::with_capacity(uniforms.len());
    let mut iter = uniforms.iter();
    if let Some(&u0) = iter.next() {
        let mut state = serfozo_h(u0, initial);
        path.push(state);
        for &u in iter {
            state = serfozo_f(state, u, &chain.transition);
            path.push(state);
        }
    }
    path
}

/// A single chain from independent uniforms.
pub fn simulate_chain<G: Rng + ?Sized>(chain: &MarkovChain, n: usize, rng: &mut G) -> StateSequence {
    let uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    StateSequence(chain_from_uniforms(chain, &chain.initial, &uniforms))
}

pub fn generate_mmc<G: Rng + ?Sized>(
    chains: &[MarkovChain],
    sigma: &[Vec<f64>],
    n: usize,
    rng: &mut G,
    law: InitialLaw,
) -> Result<MmcSample> {
    if chains.is_empty() {
        return Err(Error::Validation("need at least one chain".into()));
    }
    if sigma.len() != chains.len() {
        return Err(Error::Validation(format!(
            "copula is {}x{} but there are {} chains",
            sigma.len(),
            sigma.len(),
            chains.len()
        )));
    }
    let uniforms = sample_correlated_uniforms(sigma, n, rng)?;
    let states = chains
        .iter()
        .zip(&uniforms)
        .map(|(c, u)| Ok(chain_from_uniforms(c, &law.resolve(c)?, u)))
        .collect::<Result<_>>()?;
    Ok(MmcSample { states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(pi: [[f64; 2]; 2], alpha: [f64; 2]) -> MarkovChain {
        MarkovChain {
            initial: alpha.to_vec(),
            transition: pi.iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn transition_freq(path: &[usize]) -> [[f64; 2]; 2] {
        let mut c = [[0.0; 2]; 2];
        for w in path.windows(2) {
            c[w[0]][w[1]] += 1.0;
        }
        for row in &mut c {
            let s = row[0] + row[1];
            row.iter_mut().for_each(|v| *v /= s);
        }
        c
    }

    #[test]
    fn interval_membership() {
        assert_eq!(serfozo_h(0.2, &[0.3, 0.7]), 0);
        assert_eq!(serfozo_h(0.3, &[0.3, 0.7]), 1);
        assert_eq!(serfozo_h(0.999_999, &[1.0, 0.0]), 0);
        assert_eq!(serfozo_h(0.0, &[1.0, 0.0]), 0);
        let pi = vec![vec![0.9, 0.1], vec![0.3, 0.7]];
        assert_eq!(serfozo_f(0, 0.85, &pi), 0);
        assert_eq!(serfozo_f(0, 0.95, &pi), 1);
    }

    #[test]
    fn iid_uniforms_reproduce_transition_matrix() {
        let c = chain([[0.9, 0.1], [0.3, 0.7]], [0.5, 0.5]);
        let path = simulate_chain(&c, 100_000, &mut ChaCha8Rng::seed_from_u64(21));
        let f = transition_freq(&path.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((f[i][j] - c.transition[i][j]).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn single_chain_mmc_is_plain_chain() {
        let c = chain([[0.8, 0.2], [0.4, 0.6]], [0.5, 0.5]);
        let s = generate_mmc(std::slice::from_ref(&c), &[vec![1.0]], 100_000, &mut ChaCha8Rng::seed_from_u64(3), InitialLaw::Estimated).unwrap();
        let f = transition_freq(&s.states[0]);
        for i in 0..2 {
            for j in 0..2 {
                assert!((f[i][j] - c.transition[i][j]).abs() <= 0.02);
            }
        }
    }

    #[test]
    fn identity_copula_gives_independent_rows() {
        let a = chain([[0.6, 0.4], [0.3, 0.7]], [0.5, 0.5]);
        let b = chain([[0.7, 0.3], [0.4, 0.6]], [0.5, 0.5]);
        let n = 100_000;
        let s = generate_mmc(&[a, b], &[vec![1.0, 0.0], vec![0.0, 1.0]], n, &mut ChaCha8Rng::seed_from_u64(4), InitialLaw::Estimated).unwrap();
        let mut table = [[0.0f64; 2]; 2];
        for t in 0..n {
            table[s.states[0][t]][s.states[1][t]] += 1.0;
        }
        let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
        let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
        let mut chi2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] * cols[j] / n as f64;
                chi2 += (table[i][j] - e).powi(2) / e;
            }
        }
        // 99.9th percentile of chi-square with one degree of freedom.
        assert!(chi2 < 10.828, "chi2 = {chi2}");
    }

    #[test]
    fn discretization_attenuates_dependence() {
        let c = chain([[0.8, 0.2], [0.2, 0.8]], [0.5, 0.5]);
        let rho = kruskal_rho(0.9).unwrap();
        let sigma = vec![vec![1.0, rho], vec![rho, 1.0]];
        let s = generate_mmc(&[c.clone(), c], &sigma, 50_000, &mut ChaCha8Rng::seed_from_u64(5), InitialLaw::Estimated).unwrap();
        let r = spearman(&s.states[0], &s.states[1]).unwrap();
        assert!(r > 0.0 && r < 0.9, "r = {r}");
    }

    #[test]
    fn marginal_law_survives_any_copula() {
        let a = chain([[0.9, 0.1], [0.3, 0.7]], [0.5, 0.5]);
        let b = chain([[0.6, 0.4], [0.2, 0.8]], [0.5, 0.5]);
        let c = chain([[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]);
        let sigma = vec![
            vec![1.0, 0.8, -0.5],
            vec![0.8, 1.0, -0.3],
            vec![-0.5, -0.3, 1.0],
        ];
        let s = generate_mmc(&[a.clone(), b.clone(), c.clone()], &sigma, 100_000, &mut ChaCha8Rng::seed_from_u64(6), InitialLaw::Stationary).unwrap();
        for (row, ch) in s.states.iter().zip([&a, &b, &c]) {
            let f = transition_freq(row);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((f[i][j] - ch.transition[i][j]).abs() <= 0.02);
                }
            }
        }
    }

    #[test]
    fn copula_dimension_checked() {
        let a = chain([[0.9, 0.1], [0.3, 0.7]], [0.5, 0.5]);
        assert!(generate_mmc(&[a], &[vec![1.0, 0.0], vec![0.0, 1.0]], 10, &mut ChaCha8Rng::seed_from_u64(1), InitialLaw::Estimated).is_err());
    }
}
