//! VaR and ES forecast evaluation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::risk::RiskSeries;
use crate::sep::{check_loss, Measure};
use crate::stats::{chi2_sf, mean, sample_std, xlogy};

pub const DEFAULT_DQ_LAGS: usize = 4;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// VaR exceedance indicators `I_t = 1{y_t < -VaR_t}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HitSequence {
    pub hits: Vec<bool>,
    pub tau: f64,
    pub violations: usize,
    /// `|y_t + VaR_t|` on hit days.
    pub ad: Vec<f64>,
}

impl HitSequence {
    pub fn from_hits(hits: Vec<bool>, tau: f64) -> Self {
        let violations = hits.iter().filter(|h| **h).count();
        HitSequence {
            hits,
            tau,
            violations,
            ad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Actual over expected violations, `x / (m·τ)`.
    pub fn actual_over_expected(&self) -> f64 {
        self.violations as f64 / (self.len() as f64 * self.tau)
    }
}

pub fn hits(y: &[f64], var: &[f64], tau: f64) -> Result<HitSequence> {
    if y.len() != var.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: var.len(),
        });
    }
    let mut seq = Vec::with_capacity(y.len());
    let mut ad = Vec::new();
    for (&yt, &v) in y.iter().zip(var) {
        let h = yt < -v;
        if h {
            ad.push((yt + v).abs());
        }
        seq.push(h);
    }
    let mut out = HitSequence::from_hits(seq, tau);
    out.ad = ad;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
}

/// Kupiec unconditional coverage likelihood ratio, χ²(1).
pub fn kupiec_lr_uc(x: usize, m: usize, tau: f64) -> Result<TestResult> {
    if x > m || m == 0 {
        return Err(Error::invalid(format!("need 0 <= x <= m and m > 0, got x = {x}, m = {m}")));
    }
    let (xf, mf) = (x as f64, m as f64);
    let pi = xf / mf;
    let null = xlogy(mf - xf, 1.0 - tau) + xlogy(xf, tau);
    let alt = xlogy(mf - xf, 1.0 - pi) + xlogy(xf, pi);
    let lr = (-2.0 * (null - alt)).max(0.0);
    Ok(TestResult {
        statistic: lr,
        p_value: chi2_sf(lr, 1.0),
        df: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CcResult {
    pub lr_uc: f64,
    pub lr_ind: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// First-order transition counts `(n00, n01, n10, n11)`.
pub fn transition_counts(hits: &[bool]) -> (usize, usize, usize, usize) {
    let mut n = [0usize; 4];
    for w in hits.windows(2) {
        n[(w[0] as usize) * 2 + w[1] as usize] += 1;
    }
    (n[0], n[1], n[2], n[3])
}

/// Christoffersen conditional coverage: `LR_uc + LR_ind`, χ²(2).
pub fn christoffersen_lr_cc(hit: &HitSequence) -> Result<CcResult> {
    let m = hit.len();
    if m < 2 {
        return Err(Error::InsufficientData("conditional coverage needs at least 2 observations".into()));
    }
    let uc = kupiec_lr_uc(hit.violations, m, hit.tau)?;
    let (n00, n01, n10, n11) = transition_counts(&hit.hits);
    let (f00, f01, f10, f11) = (n00 as f64, n01 as f64, n10 as f64, n11 as f64);
    let ratio = |a: f64, b: f64| if a + b > 0.0 { b / (a + b) } else { 0.0 };
    let pi = (f01 + f11) / (m - 1) as f64;
    let pi0 = ratio(f00, f01);
    let pi1 = ratio(f10, f11);
    let restricted = xlogy(f00 + f10, 1.0 - pi) + xlogy(f01 + f11, pi);
    let unrestricted = xlogy(f00, 1.0 - pi0) + xlogy(f01, pi0) + xlogy(f10, 1.0 - pi1) + xlogy(f11, pi1);
    let lr_ind = (-2.0 * (restricted - unrestricted)).max(0.0);
    let lr_cc = uc.statistic + lr_ind;
    Ok(CcResult {
        lr_uc: uc.statistic,
        lr_ind,
        statistic: lr_cc,
        p_value: chi2_sf(lr_cc, 2.0),
    })
}

/// Dynamic quantile test with regressors `[1, H_{t-1..t-lags}, VaR_t]` on
/// `H_t = I_t - τ`, using a pseudo-inverse and rank-based degrees of freedom.
pub fn dq_test(hit: &HitSequence, var: &[f64], lags: usize) -> Result<TestResult> {
    let m = hit.len();
    if var.len() != m {
        return Err(Error::LengthMismatch { left: m, right: var.len() });
    }
    if m <= lags + 2 {
        return Err(Error::InsufficientData(format!("DQ test with {lags} lags needs more than {} observations", lags + 2)));
    }
    let tau = hit.tau;
    let h: Vec<f64> = hit.hits.iter().map(|&b| b as u8 as f64 - tau).collect();
    let n = m - lags;
    let k = lags + 2;
    let x = DMatrix::from_fn(n, k, |r, c| {
        let t = r + lags;
        match c {
            0 => 1.0,
            c if c <= lags => h[t - c],
            _ => var[t],
        }
    });
    let hv = DVector::from_column_slice(&h[lags..]);
    // HᵀX(XᵀX)⁺XᵀH is the squared norm of H projected on the column space of X
    let svd = x.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let tol = svd.singular_values.max() * n.max(k) as f64 * f64::EPSILON;
    let mut rank = 0;
    let mut proj = 0.0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            rank += 1;
            proj += u.column(i).dot(&hv).powi(2);
        }
    }
    let stat = proj / (tau * (1.0 - tau));
    Ok(TestResult {
        statistic: stat,
        p_value: chi2_sf(stat, rank as f64),
        df: rank,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EsTestResult {
    pub n: usize,
    pub mean_residual: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

/// Studentized mean, with `0/0` read as 0 and `c/0` as ±∞.
fn t_stat(z: &[f64]) -> f64 {
    let m = mean(z);
    let se = sample_std(z) / (z.len() as f64).sqrt();
    if se > 0.0 {
        m / se
    } else if m == 0.0 {
        0.0
    } else {
        m.signum() * f64::INFINITY
    }
}

/// Two-sided bootstrap test that ES residuals on violation days have zero mean.
pub fn es_residual_test<R: Rng + ?Sized>(residuals: &[f64], b: usize, rng: &mut R) -> Result<EsTestResult> {
    let n = residuals.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!("ES test needs at least 3 violations, got {n}")));
    }
    if b == 0 {
        return Err(Error::invalid("bootstrap replications must be positive"));
    }
    let t_obs = t_stat(residuals);
    let m = mean(residuals);
    // shift to the null of zero mean before resampling
    let centred: Vec<f64> = residuals.iter().map(|r| r - m).collect();
    let mut sample = vec![0.0; n];
    let mut extreme = 0usize;
    for _ in 0..b {
        for s in sample.iter_mut() {
            *s = centred[rng.random_range(0..n)];
        }
        let t = t_stat(&sample);
        let t = if t.is_finite() { t } else { 0.0 };
        if t.abs() >= t_obs.abs() {
            extreme += 1;
        }
    }
    Ok(EsTestResult {
        n,
        mean_residual: m,
        t_stat: t_obs,
        p_value: extreme as f64 / b as f64,
    })
}

/// `(y_t - ES_t)/q_t` with `q_t = -VaR_t`, on days where `y_t < -VaR_t`.
pub fn es_residuals(y: &[f64], var: &[f64], es: &[f64]) -> Result<Vec<f64>> {
    if y.len() != var.len() || y.len() != es.len() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: var.len().min(es.len()),
        });
    }
    Ok(y.iter()
        .zip(var)
        .zip(es)
        .filter(|((yt, v), _)| **yt < -**v)
        .map(|((yt, v), e)| (yt - e) / -v)
        .collect())
}

pub fn es_bootstrap_test<R: Rng + ?Sized>(y: &[f64], var: &[f64], es: &[f64], b: usize, rng: &mut R) -> Result<EsTestResult> {
    es_residual_test(&es_residuals(y, var, es)?, b, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Zone {
    Green,
    Yellow,
    Red,
}

/// Basel traffic-light zone from the Binomial(m, τ) CDF at `x`.
pub fn traffic_light(x: usize, m: usize, tau: f64) -> Result<Zone> {
    let b = Binomial::new(tau, m as u64).map_err(|e| Error::invalid(e.to_string()))?;
    let p = b.cdf(x as u64);
    Ok(if p <= 0.95 {
        Zone::Green
    } else if p <= 0.9999 {
        Zone::Yellow
    } else {
        Zone::Red
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub m: usize,
    pub tau: f64,
    pub violations: usize,
    pub actual_over_expected: f64,
    pub ad_mean: Option<f64>,
    pub ad_max: Option<f64>,
    pub lr_uc: TestResult,
    pub lr_cc: CcResult,
    pub dq: Option<TestResult>,
    pub dq_lags: usize,
    pub es_test: Option<EsTestResult>,
    pub zone: Zone,
    /// Mean quantile check loss of `y_t + VaR_t`.
    pub mean_check_loss: f64,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BacktestOptions {
    pub dq_lags: usize,
    pub bootstrap: usize,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        BacktestOptions {
            dq_lags: DEFAULT_DQ_LAGS,
            bootstrap: DEFAULT_BOOTSTRAP,
        }
    }
}

/// Run every applicable test. Tests whose preconditions fail are left out
/// and noted rather than failing the report.
pub fn backtest<R: Rng + ?Sized>(y: &[f64], risk: &RiskSeries, opts: &BacktestOptions, rng: &mut R) -> Result<BacktestReport> {
    let hs = hits(y, &risk.var, risk.tau)?;
    let m = hs.len();
    if m == 0 {
        return Err(Error::InsufficientData("empty forecast window".into()));
    }
    let mut notes = Vec::new();
    let lr_uc = kupiec_lr_uc(hs.violations, m, risk.tau)?;
    let lr_cc = christoffersen_lr_cc(&hs)?;
    let dq = match dq_test(&hs, &risk.var, opts.dq_lags) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("DQ test skipped: {e}"));
            None
        }
    };
    let es_test = match &risk.es {
        Some(es) => match es_bootstrap_test(y, &risk.var, es, opts.bootstrap, rng) {
            Ok(r) => Some(r),
            Err(e) => {
                notes.push(format!("ES test skipped: {e}"));
                None
            }
        },
        None => None,
    };
    let (ad_mean, ad_max) = if hs.ad.is_empty() {
        (None, None)
    } else {
        (Some(mean(&hs.ad)), Some(hs.ad.iter().cloned().fold(f64::NEG_INFINITY, f64::max)))
    };
    let mean_check_loss = y
        .iter()
        .zip(&risk.var)
        .map(|(yt, v)| check_loss(yt + v, risk.tau, Measure::Quantile))
        .sum::<f64>()
        / m as f64;
    Ok(BacktestReport {
        m,
        tau: risk.tau,
        violations: hs.violations,
        actual_over_expected: hs.actual_over_expected(),
        ad_mean,
        ad_max,
        lr_uc,
        lr_cc,
        dq,
        dq_lags: opts.dq_lags,
        es_test,
        zone: traffic_light(hs.violations, m, risk.tau)?,
        mean_check_loss,
        notes,
    })
}

impl BacktestReport {
    pub const CSV_COLUMNS: [&'static str; 14] = [
        "m",
        "tau",
        "violations",
        "ae",
        "ad_mean",
        "ad_max",
        "lr_uc",
        "lr_uc_p",
        "lr_cc",
        "lr_cc_p",
        "dq",
        "dq_p",
        "es_p",
        "zone",
    ];

    /// One-row CSV with the columns of [`BacktestReport::CSV_COLUMNS`].
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(Self::CSV_COLUMNS)?;
        wtr.write_record([
            self.m.to_string(),
            self.tau.to_string(),
            self.violations.to_string(),
            self.actual_over_expected.to_string(),
            opt(self.ad_mean),
            opt(self.ad_max),
            self.lr_uc.statistic.to_string(),
            self.lr_uc.p_value.to_string(),
            self.lr_cc.statistic.to_string(),
            self.lr_cc.p_value.to_string(),
            opt(self.dq.map(|d| d.statistic)),
            opt(self.dq.map(|d| d.p_value)),
            opt(self.es_test.map(|e| e.p_value)),
            serde_json::to_value(self.zone)?.as_str().unwrap_or_default().to_string(),
        ])?;
        wtr.flush()?;
        Ok(())
    }
}
