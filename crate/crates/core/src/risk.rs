//! VaR and ES series from fitted level paths, including the expectile-level
//! calibration that makes a CARE path usable as a VaR forecast.

use serde::Serialize;

use crate::carm::{recurse_g, ModelSpec};
use crate::data::ReturnSeries;
use crate::error::{Error, Result};
use crate::sampler::{derive_seed, run_chain, PosteriorDraws, PriorSpec, SamplerConfig};
use crate::sep::Measure;

/// Number of grid points; the expectile level runs over `k/1000`, `k = 1..=500`.
const GRID_POINTS: usize = 500;
const GRID_STEP: f64 = 0.001;
/// Distances to τ closer than this count as ties.
const TIE_TOL: f64 = 1e-12;

/// Risk measures in the loss convention: `VaR_t = -g_t` is positive for
/// lower-tail levels, `ES_t` stays in return units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskSeries {
    pub var: Vec<f64>,
    pub es: Option<Vec<f64>>,
    pub tau: f64,
    /// Expectile level of the path, for expectile models.
    pub nu: Option<f64>,
}

/// ES from an expectile at level ν: `(1 + ν/((1-2ν)τ))·μ - ν/((1-2ν)τ)·E[y]`.
pub fn expectile_to_es(mu: f64, nu: f64, tau: f64, mean_y: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::invalid(format!("expectile level must lie in [0, 0.5), got {nu}")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    let k = nu / ((1.0 - 2.0 * nu) * tau);
    Ok(mu + k * (mu - mean_y))
}

/// VaR from a level path. For quantile models `tau` must match the model
/// level; for expectile models the path is the calibrated ν-expectile and the
/// model level is recorded as ν.
pub fn extract_var(spec: &ModelSpec, g: &[f64], tau: f64) -> Result<RiskSeries> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("tau must lie in (0,1), got {tau}")));
    }
    let nu = match spec.measure {
        Measure::Quantile => {
            if (spec.tau - tau).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "quantile model fitted at {} cannot give VaR at {tau}",
                    spec.tau
                )));
            }
            None
        }
        Measure::Expectile => Some(spec.tau),
    };
    Ok(RiskSeries {
        var: g.iter().map(|v| -v).collect(),
        es: None,
        tau,
        nu,
    })
}

impl RiskSeries {
    /// Attach ES computed from the expectile path (expectile models only).
    pub fn with_es(mut self, mean_y: f64) -> Result<Self> {
        let nu = self
            .nu
            .ok_or_else(|| Error::invalid("ES needs an expectile path"))?;
        let es = self
            .var
            .iter()
            .map(|v| expectile_to_es(-v, nu, self.tau, mean_y))
            .collect::<Result<Vec<_>>>()?;
        self.es = Some(es);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.var.is_empty()
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationPoint {
    pub nu: f64,
    pub proportion: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration<T> {
    pub nu: f64,
    pub proportion: f64,
    /// Every evaluated point, sorted by ν.
    pub trace: Vec<CalibrationPoint>,
    #[serde(skip)]
    pub fit: T,
}

pub fn grid_nu(k: usize) -> f64 {
    k as f64 * GRID_STEP
}

/// Pick the bracketing grid point whose proportion is closest to τ and check
/// it lands inside `[τ/2, 2τ]`.
fn finish<T>(tau: f64, mut evals: Vec<(usize, f64, T)>, lo: usize, hi: usize) -> Result<Calibration<T>> {
    let dist = |k: usize, evals: &[(usize, f64, T)]| {
        evals
            .iter()
            .find(|e| e.0 == k)
            .map(|e| (e.1 - tau).abs())
    };
    let mut best: Option<(usize, f64)> = None;
    for k in [lo, hi] {
        if let Some(d) = dist(k, &evals) {
            // candidates are visited in increasing ν, so ties keep the smaller one
            if best.is_none_or(|(_, bd)| d < bd - TIE_TOL) {
                best = Some((k, d));
            }
        }
    }
    let (k, _) = best.ok_or_else(|| Error::Calibration("no grid point evaluated".into()))?;
    evals.sort_by_key(|e| e.0);
    let trace = evals
        .iter()
        .map(|e| CalibrationPoint {
            nu: grid_nu(e.0),
            proportion: e.1,
        })
        .collect();
    let pos = evals.iter().position(|e| e.0 == k).expect("chosen point was evaluated");
    let (_, proportion, fit) = evals.swap_remove(pos);
    if proportion < tau / 2.0 || proportion > 2.0 * tau {
        return Err(Error::Calibration(format!(
            "closest proportion {proportion:.4} at nu = {:.3} lies outside [{:.4}, {:.4}]",
            grid_nu(k),
            tau / 2.0,
            2.0 * tau
        )));
    }
    Ok(Calibration {
        nu: grid_nu(k),
        proportion,
        trace,
        fit,
    })
}

/// Bisection over the ν grid, assuming the violation proportion is
/// non-decreasing in ν. `fit(ν)` returns the in-sample proportion below the
/// fitted path and the fit itself; it is called in search order, so it may
/// warm-start from its previous call.
pub fn calibrate_with<T, F>(tau: f64, mut fit: F) -> Result<Calibration<T>>
where
    F: FnMut(f64) -> Result<(f64, T)>,
{
    if !(tau > 0.0 && tau < 0.5) {
        return Err(Error::invalid(format!("calibration level must lie in (0, 0.5), got {tau}")));
    }
    let mut evals: Vec<(usize, f64, T)> = Vec::new();
    // virtual endpoints: proportion(0) < τ ≤ proportion(501)
    let (mut lo, mut hi) = (0usize, GRID_POINTS + 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let (p, f) = fit(grid_nu(mid))?;
        evals.push((mid, p, f));
        if p >= tau {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    finish(tau, evals, lo, hi)
}

/// k-section search: each round evaluates `threads` interior grid points
/// concurrently and keeps the sub-interval that brackets τ.
pub fn calibrate_parallel_with<T, F>(tau: f64, threads: usize, fit: F) -> Result<Calibration<T>>
where
    T: Send,
    F: Fn(f64) -> Result<(f64, T)> + Sync,
{
    if !(tau > 0.0 && tau < 0.5) {
        return Err(Error::invalid(format!("calibration level must lie in (0, 0.5), got {tau}")));
    }
    let threads = threads.max(1);
    let mut evals: Vec<(usize, f64, T)> = Vec::new();
    let (mut lo, mut hi) = (0usize, GRID_POINTS + 1);
    while hi - lo > 1 {
        let gap = hi - lo;
        let n = threads.min(gap - 1);
        let points: Vec<usize> = (1..=n).map(|j| lo + j * gap / (n + 1)).collect();
        let fit = &fit;
        let results: Vec<Result<(f64, T)>> = std::thread::scope(|s| {
            let hs: Vec<_> = points
                .iter()
                .map(|&k| s.spawn(move || fit(grid_nu(k))))
                .collect();
            hs.into_iter().map(|h| h.join().expect("calibration thread panicked")).collect()
        });
        let mut new_lo = lo;
        let mut new_hi = hi;
        for (&k, r) in points.iter().zip(results) {
            let (p, f) = r?;
            if p >= tau {
                new_hi = new_hi.min(k);
            } else {
                new_lo = new_lo.max(k);
            }
            evals.push((k, p, f));
        }
        if new_lo >= new_hi {
            // non-monotone evaluations; keep the tightest consistent bracket
            new_lo = points.iter().rev().copied().find(|&k| k < new_hi).unwrap_or(lo);
        }
        lo = new_lo;
        hi = new_hi;
    }
    finish(tau, evals, lo, hi)
}

/// Fraction of `y_t` strictly below `g_t`.
pub fn proportion_below(y: &[f64], g: &[f64]) -> f64 {
    let n = y.len().min(g.len());
    if n == 0 {
        return f64::NAN;
    }
    y.iter().zip(g).filter(|(a, b)| a < b).count() as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SearchMode {
    /// Sequential bisection; each candidate chain starts from the previous
    /// candidate's posterior mean and proposal state.
    WarmStart,
    /// Concurrent k-section with independent cold-start chains.
    ParallelColdStart { threads: usize },
}

/// Fit an expectile model at the ν whose in-sample violation proportion of
/// the posterior-mean path is closest to τ.
pub fn calibrate_nu(
    spec: &ModelSpec,
    prior: &PriorSpec,
    config: &SamplerConfig,
    y_in: &ReturnSeries,
    tau: f64,
    mode: SearchMode,
) -> Result<Calibration<PosteriorDraws>> {
    if spec.measure != Measure::Expectile {
        return Err(Error::invalid("calibration applies to expectile models"));
    }
    let fit_at = |nu: f64, cfg: SamplerConfig| -> Result<(f64, PosteriorDraws)> {
        let s = spec.with_tau(nu)?;
        let draws = run_chain(&s, prior, &cfg, y_in)?;
        let g = recurse_g(&s, &draws.mean_params(), y_in)?;
        Ok((proportion_below(&y_in.values, &g), draws))
    };
    let seeded = |nu: f64| {
        let mut cfg = config.clone();
        cfg.seed = derive_seed(config.seed, (nu / GRID_STEP).round() as u64);
        cfg
    };
    match mode {
        SearchMode::WarmStart => {
            let mut last: Option<(crate::carm::ParamVector, crate::sampler::ProposalState)> = None;
            calibrate_with(tau, |nu| {
                let mut cfg = seeded(nu);
                if let Some((p, s)) = &last {
                    cfg.init = Some(p.clone());
                    cfg.proposal = Some(s.clone());
                }
                let (prop, draws) = fit_at(nu, cfg)?;
                last = Some((draws.mean_params(), draws.final_proposal.clone()));
                Ok((prop, draws))
            })
        }
        SearchMode::ParallelColdStart { threads } => calibrate_parallel_with(tau, threads, |nu| fit_at(nu, seeded(nu))),
    }
}
