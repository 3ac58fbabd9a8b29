use super::{check_data, log_emissions, GaussianHmmParams, StateSequence};
use crate::error::Result;

/// Most probable state path. Ties resolve toward the lower state index.
pub fn viterbi<R: AsRef<[f64]>>(params: &GaussianHmmParams, data: &[R]) -> Result<StateSequence> {
    let n = check_data(params, data)?;
    let j = params.n_states();
    let log_b = log_emissions(params, data);
    let log_pi: Vec<Vec<f64>> = params
        .chain
        .transition
        .iter()
        .map(|r| r.iter().map(|p| p.ln()).collect())
        .collect();

    let mut delta: Vec<f64> = (0..j)
        .map(|s| params.chain.initial[s].ln() + log_b[0][s])
        .collect();
    let mut back = vec![vec![0usize; j]; n];
    for t in 1..n {
        let mut next = vec![f64::NEG_INFINITY; j];
        for s in 0..j {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in 0..j {
                let v = delta[i] + log_pi[i][s];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            next[s] = best + log_b[t][s];
            back[t][s] = arg;
        }
        delta = next;
    }

    let mut last = 0;
    for s in 1..j {
        if delta[s] > delta[last] {
            last = s;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(StateSequence(path))
}

#[cfg(test)]
mod tests {
    use super::super::test_support::{path_log_joint, two_state};
    use super::*;

    #[test]
    fn separable_emissions_recover_states() {
        let p = two_state(&[(1.0, -1.0)], &[(0.01, 0.01)], [[0.7, 0.3], [0.3, 0.7]], [0.5, 0.5]);
        let truth = [0, 0, 1, 0, 1, 1, 1, 0];
        let y = vec![truth.iter().map(|&s| if s == 0 { 1.0 } else { -1.0 }).collect::<Vec<f64>>()];
        assert_eq!(viterbi(&p, &y).unwrap().0, truth.to_vec());
    }

    #[test]
    fn matches_brute_force_path() {
        let p = two_state(
            &[(0.01, -0.02), (0.0, 0.01)],
            &[(0.02, 0.04), (0.01, 0.03)],
            [[0.8, 0.2], [0.35, 0.65]],
            [0.6, 0.4],
        );
        let y = vec![vec![0.015, -0.05, 0.002, 0.03], vec![0.001, 0.02, -0.01, 0.0]];
        let mut best = (f64::NEG_INFINITY, vec![]);
        for code in 0..16usize {
            let path: Vec<usize> = (0..4).map(|t| (code >> t) & 1).collect();
            let lp = path_log_joint(&p, &y, &path);
            if lp > best.0 {
                best = (lp, path);
            }
        }
        assert_eq!(viterbi(&p, &y).unwrap().0, best.1);
    }

    #[test]
    fn absorbing_second_state() {
        let p = two_state(&[(0.0, 0.0)], &[(1.0, 1.0)], [[1.0, 0.0], [0.0, 1.0]], [0.0, 1.0]);
        let y = vec![vec![0.3, -0.2, 0.1, 0.5, -0.4]];
        assert_eq!(viterbi(&p, &y).unwrap().0, vec![1; 5]);
    }

    #[test]
    fn ties_prefer_lower_state() {
        let p = two_state(&[(0.0, 0.0)], &[(1.0, 1.0)], [[0.5, 0.5], [0.5, 0.5]], [0.5, 0.5]);
        let y = vec![vec![0.1, 0.2, 0.3]];
        assert_eq!(viterbi(&p, &y).unwrap().0, vec![0; 3]);
    }
}
