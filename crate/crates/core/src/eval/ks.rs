use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Above this `n·m` the p-value comes from the asymptotic Kolmogorov
/// distribution instead of the exact lattice-path count.
pub const EXACT_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return Err(Error::Contract(format!(
            "KS test needs at least 2 values per sample, got {n} and {m}"
        )));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Contract("KS test input contains NaN".into()));
    }
    let d_int = statistic_scaled(a, b);
    let statistic = d_int as f64 / (n * m) as f64;
    let p_value = if n * m <= EXACT_LIMIT {
        exact_p_value(n, m, d_int)
    } else {
        asymptotic_p_value(statistic, n, m)
    };
    Ok(KsResult { statistic, p_value })
}

/// `n·m·D` as an integer: the largest `|i·m − j·n|` where `i` and `j` count
/// the values of each sample at or below a common threshold.
fn statistic_scaled(a: &[f64], b: &[f64]) -> u64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as i64, b.len() as i64);
    let (mut i, mut j, mut best) = (0usize, 0usize, 0i64);
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as i64 * m - j as i64 * n).abs());
    }
    best as u64
}

/// `P(D ≥ d)` under the null, counting monotone lattice paths from `(0,0)`
/// to `(n,m)` that keep `|i·m − j·n| < d_int` throughout.
pub fn exact_p_value(n: usize, m: usize, d_int: u64) -> f64 {
    if d_int == 0 {
        return 1.0;
    }
    // The count is symmetric; fixing the order keeps the rounding symmetric too.
    let (n, m) = (n.min(m), n.max(m));
    let inside = |i: usize, j: usize| ((i * m) as i64 - (j * n) as i64).unsigned_abs() < d_int;
    // Row-by-row DP over i holding raw path counts; they stay below
    // C(n+m, n), which fits an f64 comfortably for n·m <= EXACT_LIMIT.
    let mut row = vec![0.0f64; m + 1];
    row[0] = 1.0;
    for j in 1..=m {
        row[j] = if inside(0, j) { row[j - 1] } else { 0.0 };
    }
    for i in 1..=n {
        row[0] = if inside(i, 0) { row[0] } else { 0.0 };
        for j in 1..=m {
            row[j] = if inside(i, j) {
                row[j] + row[j - 1]
            } else {
                0.0
            };
        }
    }
    let total = ln_binomial(n + m, n);
    let kept = if row[m] > 0.0 {
        (row[m].ln() - total).exp()
    } else {
        0.0
    };
    (1.0 - kept).clamp(0.0, 1.0)
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    (1..=k)
        .map(|t| ((n - k + t) as f64).ln() - (t as f64).ln())
        .sum()
}

/// Kolmogorov tail `2·Σ (−1)^{k−1} exp(−2k²λ²)` with `λ = D·√(nm/(n+m))`,
/// summed until terms drop below 1e-10. For small `λ`, where that series
/// converges slowly, the equivalent theta-function form of the CDF is used.
pub fn asymptotic_p_value(d: f64, n: usize, m: usize) -> f64 {
    let lambda = d * ((n * m) as f64 / (n + m) as f64).sqrt();
    kolmogorov_tail(lambda)
}

pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.0 {
        let c = std::f64::consts::PI * std::f64::consts::PI / (8.0 * lambda * lambda);
        let mut cdf = 0.0;
        for k in 1..=100 {
            let t = (-((2 * k - 1) as f64).powi(2) * c).exp();
            cdf += t;
            if t < 1e-10 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * cdf
    } else {
        let mut s = 0.0;
        for k in 1..=100 {
            let t = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
            s += if k % 2 == 1 { t } else { -t };
            if t < 1e-10 {
                break;
            }
        }
        2.0 * s
    };
    p.clamp(0.0, 1.0)
}
