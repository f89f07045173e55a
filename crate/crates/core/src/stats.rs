//! Small statistical helpers used by the verification checks.

use std::num::NonZeroUsize;

use gauss_quad::{FiniteAboveNegOneF64, GaussHermite, GaussLaguerre, GaussLegendre};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{invalid, Result};

/// Minimum expected count per cell; rarer cells are pooled.
pub const MIN_EXPECTED: f64 = 5.0;

/// Pearson χ² goodness-of-fit p-value of `counts` against `probs`.
///
/// Cells with expected count below [`MIN_EXPECTED`] are pooled into one cell.
/// An observation in a cell of probability zero gives p = 0.
pub fn chi_square_gof(counts: &[u64], probs: &[f64]) -> Result<f64> {
    if counts.len() != probs.len() {
        return Err(invalid("probs", "length differs from counts"));
    }
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Ok(1.0);
    }
    let n = n as f64;
    let mut stat = 0.0;
    let mut cells = 0usize;
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 0.0 {
            if c > 0 {
                return Ok(0.0);
            }
            continue;
        }
        let e = n * p;
        if e < MIN_EXPECTED {
            pooled_obs += c as f64;
            pooled_exp += e;
        } else {
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        cells += 1;
    }
    if cells <= 1 {
        return Ok(1.0);
    }
    let dist = ChiSquared::new((cells - 1) as f64).expect("positive degrees of freedom");
    Ok(dist.sf(stat))
}

/// Two-sided p-value of a standard normal statistic.
pub fn z_p_value(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * n.sf(z.abs())
}

/// Upper `1 - alpha/2` standard normal quantile.
pub fn z_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    (d, kolmogorov_sf((en + 0.12 + 0.11 / en) * d))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Standard error of the mean of a correlated series via non-overlapping
/// batch means with `sqrt(n)` batches.
pub fn batch_means_se(xs: &[f64]) -> f64 {
    let n = xs.len();
    let batches = (n as f64).sqrt().floor().max(2.0) as usize;
    let size = n / batches;
    if size == 0 {
        return f64::INFINITY;
    }
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * size..(b + 1) * size])).collect();
    (variance(&means) / batches as f64).sqrt()
}

fn nonzero(n: usize) -> NonZeroUsize {
    NonZeroUsize::new(n).expect("at least one quadrature node")
}

/// Gauss–Hermite nodes and weights for `∫ f(x) e^{-x²} dx`, symmetrized so
/// that the rule is exactly odd-invariant.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut pairs = GaussHermite::new(nonzero(n)).as_node_weight_pairs().to_vec();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    for k in 0..n / 2 {
        let (x, w) = (
            0.5 * (pairs[n - 1 - k].0 - pairs[k].0),
            0.5 * (pairs[n - 1 - k].1 + pairs[k].1),
        );
        pairs[k] = (-x, w);
        pairs[n - 1 - k] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Gauss–Laguerre rule for `∫₀^∞ f(s) e^{-s} ds`.
pub fn gauss_laguerre(n: usize) -> Vec<(f64, f64)> {
    let alpha = FiniteAboveNegOneF64::new(0.0).expect("zero is admissible");
    GaussLaguerre::new(nonzero(n), alpha).as_node_weight_pairs().to_vec()
}

/// Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
    GaussLegendre::new(nonzero(n))
        .as_node_weight_pairs()
        .iter()
        .map(|(x, w)| (mid + half * x, half * w))
        .collect()
}

/// Gauss–Hermite rule for expectations under `N(0, 1)`.
pub fn normal_quadrature(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let s = std::f64::consts::PI.sqrt();
    (
        x.iter().map(|x| x * std::f64::consts::SQRT_2).collect(),
        w.iter().map(|w| w / s).collect(),
    )
}
