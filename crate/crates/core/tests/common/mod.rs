//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

#[path = "../../src/oracle.rs"]
pub mod quad;

use carm::sampler::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw from the SEP with `α = 1` (asymmetric Laplace) centred at 0: mass τ
/// below zero with rate `(1-τ)/σ`, mass `1-τ` above with rate `τ/σ`.
pub fn al_draw<R: Rng>(rng: &mut R, tau: f64, sigma: f64) -> f64 {
    let u: f64 = rng.random();
    if u < tau {
        sigma / (1.0 - tau) * (u / tau).ln()
    } else {
        -(sigma / tau) * ((1.0 - u) / (1.0 - tau)).ln()
    }
}

/// Draw from the SEP with `α = 2` (asymmetric Gaussian) centred at 0.
pub fn ag_draw<R: Rng>(rng: &mut R, tau: f64, sigma: f64) -> f64 {
    let a = (1.0 - tau).powf(-0.5);
    let b = tau.powf(-0.5);
    let z: f64 = StandardNormal.sample(rng);
    if rng.random::<f64>() < a / (a + b) {
        -z.abs() * sigma / (2.0 * (1.0 - tau)).sqrt()
    } else {
        z.abs() * sigma / (2.0 * tau).sqrt()
    }
}

/// SAV recursion truth in level space: `g_t = ω + γ g_{t-1} + β|y_{t-1}|`.
pub const SAV_TRUTH: [f64; 4] = [-0.05, 0.85, -0.2, 0.5];
pub const SAV_TAU: f64 = 0.05;

/// SAV returns with AL errors. Paths whose level leaves `±60` are discarded
/// and regenerated from the next derived seed. Returns the series and the
/// true level path.
pub fn sav_fixture(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let [w, g, b, s] = SAV_TRUTH;
    let burn = 200;
    for k in 0.. {
        let mut r = rng(derive_seed(seed, k));
        let mut y = Vec::with_capacity(n + burn);
        let mut path = Vec::with_capacity(n + burn);
        let mut gt = -1.0;
        let mut ok = true;
        for _ in 0..n + burn {
            let yt = gt + al_draw(&mut r, SAV_TAU, s);
            path.push(gt);
            y.push(yt);
            gt = w + g * gt + b * yt.abs();
            if gt.abs() > 60.0 {
                ok = false;
                break;
            }
        }
        if ok {
            return (y.split_off(burn), path.split_off(burn));
        }
    }
    unreachable!()
}

/// Piecewise-linear news impact: slope 0.4 for losses, 0.1 for gains,
/// minimum 0 at `y = 0.25`.
pub fn kinked_nic(y: f64) -> f64 {
    if y < 0.25 {
        0.4 * (0.25 - y)
    } else {
        0.1 * (y - 0.25)
    }
}

/// Median-level series `g_t = 0.5 g_{t-1} + ℓ(y_{t-1})` with AL(τ = 0.5, σ = 0.5) errors.
pub fn kinked_fixture(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    let mut y = Vec::with_capacity(n + 200);
    let mut g = 0.5;
    for _ in 0..n + 200 {
        let yt = g + al_draw(&mut r, 0.5, 0.5);
        y.push(yt);
        g = 0.5 * g + kinked_nic(yt);
    }
    y.split_off(200)
}

pub fn bernoulli_hits<R: Rng>(rng: &mut R, m: usize, p: f64) -> Vec<bool> {
    (0..m).map(|_| rng.random::<f64>() < p).collect()
}

/// AR(1) series used as a VaR regressor.
pub fn ar1<R: Rng>(rng: &mut R, m: usize, phi: f64, level: f64) -> Vec<f64> {
    let mut x = 0.0;
    (0..m)
        .map(|_| {
            x = phi * x + {
                let z: f64 = StandardNormal.sample(rng);
                0.3 * z
            };
            level + x
        })
        .collect()
}

/// Kolmogorov-Smirnov distance of a sample from Uniform(0,1).
pub fn ks_uniform(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

/// Brute-force backtest statistics used as oracles.
pub mod brute {
    /// `-2·(log L(τ) - log L(x/m))`, summed observation by observation.
    pub fn lr_uc(hits: &[bool], tau: f64) -> f64 {
        let m = hits.len() as f64;
        let x = hits.iter().filter(|h| **h).count() as f64;
        let pi = x / m;
        let ll = |p: f64| -> f64 {
            hits.iter()
                .map(|&h| {
                    let q = if h { p } else { 1.0 - p };
                    if q == 0.0 {
                        // only reached for outcomes that never occur when p is the MLE
                        0.0
                    } else {
                        q.ln()
                    }
                })
                .sum()
        };
        -2.0 * (ll(tau) - ll(pi))
    }

    /// Independence part from per-transition conditional likelihoods.
    pub fn lr_ind(hits: &[bool]) -> f64 {
        let mut n = [[0.0f64; 2]; 2];
        for w in hits.windows(2) {
            n[w[0] as usize][w[1] as usize] += 1.0;
        }
        let total = (hits.len() - 1) as f64;
        let pi = (n[0][1] + n[1][1]) / total;
        let row = |i: usize| {
            let r = n[i][0] + n[i][1];
            if r > 0.0 {
                n[i][1] / r
            } else {
                0.0
            }
        };
        let (p0, p1) = (row(0), row(1));
        let mut l_restricted = 0.0;
        let mut l_markov = 0.0;
        for w in hits.windows(2) {
            let p_next = if w[0] { p1 } else { p0 };
            let pr = |p: f64, hit: bool| if hit { p } else { 1.0 - p };
            let a = pr(pi, w[1]);
            let b = pr(p_next, w[1]);
            l_restricted += if a > 0.0 { a.ln() } else { 0.0 };
            l_markov += if b > 0.0 { b.ln() } else { 0.0 };
        }
        -2.0 * (l_restricted - l_markov)
    }

    /// DQ statistic via modified Gram-Schmidt projection, dropping columns
    /// that are numerically dependent on earlier ones.
    pub fn dq(hits: &[bool], var: &[f64], tau: f64, lags: usize) -> (f64, usize) {
        let h: Vec<f64> = hits.iter().map(|&b| if b { 1.0 - tau } else { -tau }).collect();
        let n = h.len() - lags;
        let mut cols: Vec<Vec<f64>> = Vec::new();
        cols.push(vec![1.0; n]);
        for l in 1..=lags {
            cols.push((lags..h.len()).map(|t| h[t - l]).collect());
        }
        cols.push(var[lags..].to_vec());
        let target: Vec<f64> = h[lags..].to_vec();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in cols {
            let scale = dot(&c, &c).sqrt();
            let mut v = c;
            for _ in 0..2 {
                for q in &basis {
                    let r = dot(q, &v);
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= r * b);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-9 * scale.max(1.0) {
                basis.push(v.iter().map(|x| x / norm).collect());
            }
        }
        let proj: f64 = basis.iter().map(|q| dot(q, &target).powi(2)).sum();
        (proj / (tau * (1.0 - tau)), basis.len())
    }
}
