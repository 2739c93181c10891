//! Small numerical helpers shared across modules.

use statrs::function::gamma::{gamma_ur, ln_gamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sample_std(xs: &[f64]) -> f64 {
    sample_variance(xs).sqrt()
}

/// Linear-interpolation quantile of already sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty slice");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Empirical τ-expectile: the root of `Σ |τ - 1{y<m}| (y - m) = 0`.
pub fn expectile(xs: &[f64], tau: f64) -> f64 {
    let score = |m: f64| -> f64 {
        xs.iter()
            .map(|&y| {
                let w = if y < m { 1.0 - tau } else { tau };
                w * (y - m)
            })
            .sum()
    };
    let (mut lo, mut hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if lo == hi {
        return lo;
    }
    // score is decreasing in m, positive at min, negative at max
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Shortest interval containing a fraction `mass` of the samples.
pub fn hpd_interval(samples: &[f64], mass: f64) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let keep = ((mass * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (v[0], v[keep - 1]);
    for i in 1..=(n - keep) {
        let (a, b) = (v[i], v[i + keep - 1]);
        if b - a < best.1 - best.0 {
            best = (a, b);
        }
    }
    best
}

/// Upper tail of the χ² distribution via the regularized incomplete gamma function.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if !x.is_finite() {
        return 0.0;
    }
    gamma_ur(0.5 * df, 0.5 * x).clamp(0.0, 1.0)
}

pub fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// Inverse-Gamma(shape, scale) log density.
pub fn inv_gamma_log_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// `x ln y` with the `0 ln 0 = 0` convention.
#[inline]
pub(crate) fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}
