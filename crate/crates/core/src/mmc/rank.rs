use crate::error::{Error, Result};

/// One-based ranks; tied values share the average of their positions.
pub fn fractional_ranks<T: PartialOrd + Copy>(xs: &[T]) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut incomparable = false;
    order.sort_by(|&a, &b| {
        xs[a].partial_cmp(&xs[b]).unwrap_or_else(|| {
            incomparable = true;
            std::cmp::Ordering::Equal
        })
    });
    if incomparable {
        return Err(Error::NonFiniteData);
    }
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..j (zero-based) share rank mean(i+1..=j).
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    Ok(ranks)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation: Pearson correlation of fractional ranks.
pub fn spearman<T: PartialOrd + Copy>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Validation(
            "spearman needs two sequences of equal length >= 2".into(),
        ));
    }
    pearson(&fractional_ranks(x)?, &fractional_ranks(y)?)
}
