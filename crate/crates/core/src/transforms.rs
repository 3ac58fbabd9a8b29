//! Yeo-Johnson power transform, its inverse, and marginal lambda estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Search interval and tolerance for the lambda profile likelihood.
pub const LAMBDA_BOUNDS: (f64, f64) = (-5.0, 5.0);
pub const LAMBDA_TOL: f64 = 1e-4;
pub const MIN_SERIES_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YeoJohnsonParams {
    pub lambda: f64,
}

impl YeoJohnsonParams {
    pub fn transform(&self, y: f64) -> f64 {
        yj_transform(y, self.lambda)
    }

    pub fn inverse(&self, ystar: f64) -> Result<f64> {
        yj_inverse(ystar, self.lambda)
    }
}

/// `(1 + y)^l - 1) / l` written with `exp_m1`/`ln_1p` so it stays accurate
/// for small `l` and small `y`.
fn power_branch(x: f64, l: f64) -> f64 {
    if l == 0.0 {
        x.ln_1p()
    } else {
        (l * x.ln_1p()).exp_m1() / l
    }
}

fn power_branch_inverse(v: f64, l: f64) -> Option<f64> {
    if l == 0.0 {
        return Some(v.exp_m1());
    }
    let base = l * v;
    if base <= -1.0 {
        return None;
    }
    Some((base.ln_1p() / l).exp_m1())
}

pub fn yj_transform(y: f64, lambda: f64) -> f64 {
    if y >= 0.0 {
        power_branch(y, lambda)
    } else {
        -power_branch(-y, 2.0 - lambda)
    }
}

/// Inverse transform; errors when `ystar` lies outside the transform's range.
pub fn yj_inverse(ystar: f64, lambda: f64) -> Result<f64> {
    let out = if ystar >= 0.0 {
        power_branch_inverse(ystar, lambda)
    } else {
        power_branch_inverse(-ystar, 2.0 - lambda).map(|v| -v)
    };
    match out {
        Some(v) if v.is_finite() => Ok(v),
        _ => Err(Error::TransformDomain {
            value: ystar,
            lambda,
        }),
    }
}

/// Gaussian profile log-likelihood of the transformed series, up to a constant.
pub fn profile_log_likelihood(series: &[f64], lambda: f64) -> f64 {
    let n = series.len() as f64;
    let t: Vec<f64> = series.iter().map(|&y| yj_transform(y, lambda)).collect();
    let mean = t.iter().sum::<f64>() / n;
    let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return f64::NEG_INFINITY;
    }
    let jacobian: f64 = series.iter().map(|&y| y.signum() * y.abs().ln_1p()).sum();
    -0.5 * n * var.ln() + (lambda - 1.0) * jacobian
}

/// Maximizes the profile likelihood over `[-5, 5]` by golden-section search.
pub fn fit_lambda(series: &[f64]) -> Result<YeoJohnsonParams> {
    if series.len() < MIN_SERIES_LEN {
        return Err(Error::Validation(format!(
            "lambda estimation needs at least {MIN_SERIES_LEN} observations, got {}",
            series.len()
        )));
    }
    if series.iter().any(|y| !y.is_finite()) {
        return Err(Error::NonFiniteData);
    }
    let first = series[0];
    if series.iter().all(|&y| y == first) {
        return Err(Error::ZeroVariance);
    }
    let objective = |l: f64| -profile_log_likelihood(series, l);
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = LAMBDA_BOUNDS;
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while (b - a).abs() > LAMBDA_TOL {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = objective(d);
        }
    }
    Ok(YeoJohnsonParams {
        lambda: 0.5 * (a + b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Literal coding of the four-branch definition.
    fn reference(y: f64, l: f64) -> f64 {
        if y >= 0.0 && l != 0.0 {
            ((y + 1.0).powf(l) - 1.0) / l
        } else if y >= 0.0 {
            (y + 1.0).ln()
        } else if l != 2.0 {
            -((1.0 - y).powf(2.0 - l) - 1.0) / (2.0 - l)
        } else {
            -(1.0 - y).ln()
        }
    }

    #[test]
    fn fixed_point_and_identity() {
        for l in [-3.0, -0.5, 0.0, 0.7, 1.0, 2.0, 4.5] {
            assert_eq!(yj_transform(0.0, l), 0.0);
            assert_eq!(yj_inverse(0.0, l).unwrap(), 0.0);
        }
        assert!((yj_transform(1.0, 1.0) - 1.0).abs() < 1e-15);
        for y in [-0.7, -0.1, 0.2, 3.0] {
            assert!((yj_transform(y, 1.0) - y).abs() < 1e-14);
            assert!((yj_inverse(y, 1.0).unwrap() - y).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_branch_definition() {
        let v = yj_transform(-0.5, 0.5);
        assert!((v - reference(-0.5, 0.5)).abs() < 1e-14);
        // -((1.5)^1.5 - 1) / 1.5
        assert!((v + (1.5f64.powf(1.5) - 1.0) / 1.5).abs() < 1e-14);
        for &y in &[-2.0, -0.3, 0.0, 0.4, 5.0] {
            for &l in &[-2.0, 0.0, 0.5, 1.0, 2.0, 3.0] {
                let r = reference(y, l);
                assert!((yj_transform(y, l) - r).abs() <= 1e-12 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn continuous_in_lambda_near_special_values() {
        for y in [-0.4, 0.3] {
            for l0 in [0.0, 2.0] {
                let a = yj_transform(y, l0);
                let b = yj_transform(y, l0 + 1e-9);
                assert!((a - b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn inverse_rejects_out_of_range() {
        // lambda < 0 bounds the positive branch above by -1/lambda.
        assert!(matches!(yj_inverse(2.5, -0.5), Err(Error::TransformDomain { .. })));
        // lambda > 2 bounds the negative branch below by 1/(2 - lambda).
        assert!(matches!(yj_inverse(-1.5, 3.0), Err(Error::TransformDomain { .. })));
        assert!(yj_inverse(1.9, -0.5).is_ok());
    }

    #[test]
    fn round_trip_uniform_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let y: f64 = rng.random_range(-0.5..0.5);
            let back = yj_inverse(yj_transform(y, 0.3), 0.3).unwrap();
            worst = worst.max((back - y).abs());
        }
        assert!(worst < 1e-10, "max error {worst}");
    }

    #[test]
    fn normal_series_gives_lambda_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = Normal::new(0.0, 0.02).unwrap();
        let series: Vec<f64> = (0..20_000).map(|_| dist.sample(&mut rng)).collect();
        let fit = fit_lambda(&series).unwrap();
        assert!((fit.lambda - 1.0).abs() <= 0.15, "lambda {}", fit.lambda);
    }

    #[test]
    fn right_skewed_series_gives_lambda_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dist = Normal::new(0.0f64, 0.3).unwrap();
        let series: Vec<f64> = (0..2_000).map(|_| dist.sample(&mut rng).exp_m1()).collect();
        let n = series.len() as f64;
        let m = series.iter().sum::<f64>() / n;
        let m2 = series.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m3 = series.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
        assert!(m3 / m2.powf(1.5) > 0.0, "oracle: sample is right-skewed");
        assert!(fit_lambda(&series).unwrap().lambda < 1.0);
    }

    #[test]
    fn constant_series_rejected() {
        assert!(matches!(fit_lambda(&[0.01; 40]), Err(Error::ZeroVariance)));
        assert!(fit_lambda(&[0.01; 10]).is_err());
    }

    proptest! {
        #[test]
        fn strictly_increasing(l in -4.0f64..4.0, a in -0.9f64..2.0, gap in 1e-6f64..0.5) {
            prop_assert!(yj_transform(a + gap, l) > yj_transform(a, l));
        }

        #[test]
        fn inverse_is_exact(y in -0.9f64..1.5, l in -3.0f64..5.0) {
            let back = yj_inverse(yj_transform(y, l), l).unwrap();
            prop_assert!((back - y).abs() <= 1e-10 * y.abs().max(1e-3));
        }
    }
}
