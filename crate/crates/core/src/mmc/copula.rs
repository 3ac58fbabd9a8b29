use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest eigenvalue an assembled copula matrix may have.
pub const MIN_EIGENVALUE: f64 = 1e-7;
/// Value substituted for offending eigenvalues during repair.
pub const REPAIR_EIGENVALUE: f64 = 1e-6;

/// Copula correlation matrix together with the Spearman-scale parameters it
/// was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaCorrelation {
    pub sigma: Vec<Vec<f64>>,
    pub rho_star: Vec<Vec<f64>>,
}

impl CopulaCorrelation {
    pub fn identity(d: usize) -> Self {
        let eye: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            sigma: eye.clone(),
            rho_star: eye,
        }
    }

    /// Maps each Spearman-scale entry through the Kruskal relation and
    /// repairs the result to a positive-definite correlation matrix.
    pub fn from_rho_star(rho_star: Vec<Vec<f64>>) -> Result<Self> {
        let rho = rho_star
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, &v)| if i == j { Ok(1.0) } else { kruskal_rho(v) })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sigma: assemble_sigma(&rho)?,
            rho_star,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.sigma.len();
        if d == 0 || self.sigma.iter().any(|r| r.len() != d) || self.rho_star.len() != d {
            return Err(Error::Validation("copula matrix must be square and non-empty".into()));
        }
        for i in 0..d {
            if (self.sigma[i][i] - 1.0).abs() > 1e-9 {
                return Err(Error::Validation("copula matrix must have unit diagonal".into()));
            }
            for j in 0..i {
                if (self.sigma[i][j] - self.sigma[j][i]).abs() > 1e-12 {
                    return Err(Error::Validation("copula matrix must be symmetric".into()));
                }
            }
        }
        if min_eigenvalue(&self.sigma) < MIN_EIGENVALUE * (1.0 - 1e-6) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }
}

/// Pearson correlation of a bivariate Normal with Spearman correlation `rho_star`:
/// `2 sin(pi rho_star / 6)`.
pub fn kruskal_rho(rho_star: f64) -> Result<f64> {
    if !(rho_star.abs() <= 1.0) {
        return Err(Error::CorrelationDomain(rho_star));
    }
    if rho_star.abs() == 1.0 {
        return Ok(rho_star);
    }
    Ok((2.0 * (std::f64::consts::PI * rho_star / 6.0).sin()).clamp(-1.0, 1.0))
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn to_dmatrix(m: &[Vec<f64>]) -> DMatrix<f64> {
    let d = m.len();
    DMatrix::from_fn(d, d, |i, j| m[i][j])
}

pub fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    SymmetricEigen::new(to_dmatrix(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Lower-triangular factor `L` with `L L^T = sigma`, tolerating zero pivots
/// so that singular (e.g. comonotone) correlation matrices can still be sampled.
pub fn cholesky_psd(sigma: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = sigma.len();
    let mut l = vec![vec![0.0; d]; d];
    for j in 0..d {
        let pivot = sigma[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if pivot < -1e-10 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite);
        }
        if pivot <= 1e-12 {
            // Column is a linear combination of earlier ones; any residual must vanish.
            for i in j + 1..d {
                let resid = sigma[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if resid.abs() > 1e-8 {
                    return Err(Error::NotPositiveDefinite);
                }
            }
            continue;
        }
        let root = pivot.sqrt();
        l[j][j] = root;
        for i in j + 1..d {
            let s = sigma[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / root;
        }
    }
    Ok(l)
}

/// `D x n` uniforms whose columns are `Phi(W_t)` with `W_t ~ MVN(0, sigma)` i.i.d.
pub fn sample_correlated_uniforms<G: Rng + ?Sized>(
    sigma: &[Vec<f64>],
    n: usize,
    rng: &mut G,
) -> Result<Vec<Vec<f64>>> {
    let d = sigma.len();
    if d == 0 || sigma.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("copula matrix must be square".into()));
    }
    let l = cholesky_psd(sigma)?;
    // Largest double below one, so interval lookups never fall off the end.
    let top = 1.0 - f64::EPSILON / 2.0;
    let mut out = vec![vec![0.0; n]; d];
    let mut z = vec![0.0; d];
    for t in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..d {
            let w: f64 = (0..=i).map(|k| l[i][k] * z[k]).sum();
            out[i][t] = std_normal_cdf(w).min(top);
        }
    }
    Ok(out)
}

/// Assembles pairwise copula correlations into a positive-definite matrix.
///
/// Input already at or above [`MIN_EIGENVALUE`] is returned unchanged.
/// Otherwise the matrix is eigendecomposed, eigenvalues below
/// [`REPAIR_EIGENVALUE`] are replaced by it, and the reassembled matrix is
/// rescaled to unit diagonal.
pub fn assemble_sigma(pairs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = pairs.len();
    if d == 0 || pairs.iter().any(|r| r.len() != d) {
        return Err(Error::Validation("pairwise matrix must be square".into()));
    }
    for i in 0..d {
        if (pairs[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::Validation("pairwise matrix must have unit diagonal".into()));
        }
        for j in 0..d {
            if !(pairs[i][j].abs() <= 1.0) || (pairs[i][j] - pairs[j][i]).abs() > 1e-12 {
                return Err(Error::Validation(
                    "pairwise matrix must be symmetric with entries in [-1, 1]".into(),
                ));
            }
        }
    }
    if min_eigenvalue(pairs) >= MIN_EIGENVALUE {
        return Ok(pairs.to_vec());
    }

    let mut m = to_dmatrix(pairs);
    for _ in 0..20 {
        let eig = SymmetricEigen::new(m.clone());
        let lambda = eig.eigenvalues.map(|v| v.max(REPAIR_EIGENVALUE));
        let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&lambda) * eig.eigenvectors.transpose();
        let scale: Vec<f64> = (0..d).map(|i| rebuilt[(i, i)].sqrt()).collect();
        m = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else {
                let v = 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]);
                v / (scale[i] * scale[j])
            }
        });
        if SymmetricEigen::new(m.clone()).eigenvalues.min() >= MIN_EIGENVALUE {
            break;
        }
    }
    let out: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| m[(i, j)]).collect()).collect();
    if min_eigenvalue(&out) < MIN_EIGENVALUE {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(out)
}
