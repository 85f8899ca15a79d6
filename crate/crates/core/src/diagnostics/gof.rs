//! Pearson χ² goodness of fit with tail pooling.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{check_dim, Error, Result};

/// Smallest expected count a cell may have before it is pooled.
pub const MIN_EXPECTED: f64 = 5.0;

/// Pearson χ² statistic of `observed` against `expected_probs`.
///
/// Cells whose expected count falls below [`MIN_EXPECTED`] are pooled into one
/// bin; if that bin is still too small it is folded into the smallest regular
/// cell. Zero-probability cells with zero counts drop out; a zero-probability
/// cell with counts makes the statistic infinite.
pub fn chi_square_gof(observed: &[u64], expected_probs: &[f64]) -> Result<(f64, usize)> {
    check_dim(expected_probs.len(), observed.len())?;
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(Error::Domain("no observations".into()));
    }
    let psum: f64 = expected_probs.iter().sum();
    if !(psum > 0.0) || expected_probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Domain("degenerate expected distribution".into()));
    }
    let total = total as f64;

    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    let mut stray = false;
    for (&c, &p) in observed.iter().zip(expected_probs) {
        let e = p / psum * total;
        if e == 0.0 {
            stray |= c > 0;
            continue;
        }
        if e < MIN_EXPECTED {
            pooled.0 += c as f64;
            pooled.1 += e;
        } else {
            bins.push((c as f64, e));
        }
    }
    if pooled.1 > 0.0 {
        if pooled.1 >= MIN_EXPECTED || bins.is_empty() {
            bins.push(pooled);
        } else {
            let smallest = (0..bins.len())
                .min_by(|&a, &b| bins[a].1.total_cmp(&bins[b].1))
                .expect("non-empty");
            bins[smallest].0 += pooled.0;
            bins[smallest].1 += pooled.1;
        }
    }
    if bins.len() < 2 {
        return Err(Error::Domain(
            "expected distribution has fewer than two usable cells".into(),
        ));
    }
    if stray {
        return Ok((f64::INFINITY, bins.len() - 1));
    }
    let stat = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    Ok((stat, bins.len() - 1))
}

/// Quantile of the χ² distribution with `dof` degrees of freedom.
pub fn chi_square_quantile(p: f64, dof: usize) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("dof >= 1")
        .inverse_cdf(p)
}

/// Counts of each class among `draws`.
pub fn histogram(draws: &[usize], n: usize) -> Vec<u64> {
    let mut c = vec![0u64; n];
    for &i in draws {
        c[i] += 1;
    }
    c
}
