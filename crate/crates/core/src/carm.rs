//! The conditional autoregressive recursion for the risk level `g_t` and the
//! SEP log-likelihood of a return series given that path.

use serde::{Deserialize, Serialize};

use crate::data::ReturnSeries;
use crate::error::{Error, Result};
use crate::nic::{nic_eval, NicSpec};
use crate::sep::{log_norm_const, pow_shape, Measure};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recursion {
    /// `g_t = ω + γ g_{t-1} + ℓ(β, y_{t-1})`
    Linear,
    /// `g_t = s·√(ω + γ g²_{t-1} + β y²_{t-1})`, `s = -1` for lower-tail levels.
    IndirectGarch,
}

/// How the first level `g_1` is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Empirical τ-quantile (quantile models) or τ-expectile (expectile
    /// models) of the first `n` observations.
    EmpiricalHead(usize),
    Fixed(f64),
}

impl Default for InitPolicy {
    fn default() -> Self {
        InitPolicy::EmpiricalHead(100)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub nic: NicSpec,
    pub measure: Measure,
    /// SEP skewness: the quantile level for `α = 1`, the expectile level for `α = 2`.
    pub tau: f64,
    pub init: InitPolicy,
}

impl ModelSpec {
    pub fn new(nic: NicSpec, measure: Measure, tau: f64) -> Result<Self> {
        let spec = ModelSpec {
            nic,
            measure,
            tau,
            init: InitPolicy::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_init(mut self, init: InitPolicy) -> Self {
        self.init = init;
        self
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let mut s = self.clone();
        s.tau = tau;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        Ok(())
    }

    pub fn recursion(&self) -> Recursion {
        match self.nic {
            NicSpec::IndirectGarch => Recursion::IndirectGarch,
            _ => Recursion::Linear,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.measure.shape()
    }

    /// Sign of the square-root branch for the indirect-GARCH recursion.
    pub fn branch_sign(&self) -> f64 {
        if self.tau < 0.5 {
            -1.0
        } else {
            1.0
        }
    }

    pub fn initial_level(&self, y: &[f64]) -> Result<f64> {
        match self.init {
            InitPolicy::Fixed(g) => Ok(g),
            InitPolicy::EmpiricalHead(n) => {
                if y.is_empty() {
                    return Err(Error::InsufficientData("empty series".into()));
                }
                let head = &y[..n.clamp(1, y.len())];
                Ok(match self.measure {
                    Measure::Quantile => stats::quantile(head, self.tau),
                    Measure::Expectile => stats::expectile(head, self.tau),
                })
            }
        }
    }

    pub fn is_spline(&self) -> bool {
        matches!(self.nic, NicSpec::Spline(_))
    }
}

/// Full parameter state `(ω, γ, β, σ, φ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub omega: f64,
    pub gamma: f64,
    pub beta: Vec<f64>,
    pub sigma: f64,
    /// Smoothing variance, present only for spline news impact curves.
    pub phi2: Option<f64>,
}

impl ParamVector {
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.beta.len() != spec.nic.n_coef() {
            return Err(Error::DimensionMismatch {
                expected: spec.nic.n_coef(),
                got: self.beta.len(),
            });
        }
        if self.sigma.is_nan() || self.sigma <= 0.0 {
            return Err(Error::invalid("sigma must be positive"));
        }
        match (spec.is_spline(), self.phi2) {
            (true, Some(p)) if p > 0.0 => Ok(()),
            (true, _) => Err(Error::invalid("spline models need a positive phi2")),
            (false, None) => Ok(()),
            (false, Some(_)) => Err(Error::invalid("phi2 is only defined for spline models")),
        }
    }

    /// Column names in the order of [`ParamVector::flatten`].
    pub fn names(spec: &ModelSpec) -> Vec<String> {
        let mut names = vec!["omega".to_string(), "gamma".to_string()];
        names.extend((1..=spec.nic.n_coef()).map(|i| format!("beta{i}")));
        names.push("sigma".into());
        if spec.is_spline() {
            names.push("phi2".into());
        }
        names
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = vec![self.omega, self.gamma];
        v.extend_from_slice(&self.beta);
        v.push(self.sigma);
        if let Some(p) = self.phi2 {
            v.push(p);
        }
        v
    }
}

/// Precomputed evaluation state for repeated likelihood evaluations on one series.
#[derive(Debug, Clone)]
pub struct PathEvaluator<'a> {
    spec: &'a ModelSpec,
    y: &'a [f64],
    z: &'a [f64],
    g1: f64,
    /// Spline design rows `(first index, d+1 values)` for `y_0..y_{T-2}`.
    design: Option<(Vec<usize>, Vec<f64>, usize)>,
    log_c_unit: f64,
}

impl<'a> PathEvaluator<'a> {
    pub fn new(spec: &'a ModelSpec, series: &'a ReturnSeries) -> Result<Self> {
        let g1 = spec.initial_level(&series.values)?;
        Self::with_initial_level(spec, series, g1)
    }

    pub fn with_initial_level(spec: &'a ModelSpec, series: &'a ReturnSeries, g1: f64) -> Result<Self> {
        spec.validate()?;
        let y = series.values.as_slice();
        if y.is_empty() {
            return Err(Error::InsufficientData("empty return series".into()));
        }
        let z = if spec.nic.needs_exogenous() {
            let z = series
                .exogenous
                .as_deref()
                .ok_or_else(|| Error::invalid("threshold model needs an exogenous series"))?;
            if z.len() != y.len() {
                return Err(Error::LengthMismatch {
                    left: y.len(),
                    right: z.len(),
                });
            }
            z
        } else {
            y
        };
        let design = spec.nic.spline().map(|basis| {
            let w = basis.degree() + 1;
            let mut first = Vec::with_capacity(y.len());
            let mut vals = Vec::with_capacity(y.len() * w);
            for &v in y {
                let (f, b) = basis.nonzero(v);
                first.push(f);
                vals.extend_from_slice(&b);
            }
            (first, vals, w)
        });
        Ok(PathEvaluator {
            spec,
            y,
            z,
            g1,
            design,
            log_c_unit: log_norm_const(1.0, spec.tau, spec.alpha()),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn initial_level(&self) -> f64 {
        self.g1
    }

    #[inline]
    fn news(&self, beta: &[f64], t: usize) -> f64 {
        match (&self.design, &self.spec.nic) {
            (Some((first, vals, w)), _) => {
                let f = first[t];
                let row = &vals[t * w..(t + 1) * w];
                row.iter().zip(&beta[f..f + w]).map(|(b, c)| b * c).sum()
            }
            (None, NicSpec::Sav) => beta[0] * self.y[t].abs(),
            (None, NicSpec::AsymmetricSlope) => {
                let y = self.y[t];
                beta[0] * y.max(0.0) + beta[1] * (-y).max(0.0)
            }
            (None, NicSpec::IndirectGarch) => beta[0] * self.y[t] * self.y[t],
            (None, nic) => nic_eval(nic, beta, self.y[t], self.z[t]).unwrap_or(f64::NAN),
        }
    }

    /// Fill `g` with the level path for `(ω, γ, β)`.
    pub fn path_into(&self, omega: f64, gamma: f64, beta: &[f64], g: &mut Vec<f64>) -> Result<()> {
        let n = self.spec.nic.n_coef();
        if beta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: beta.len(),
            });
        }
        g.clear();
        g.reserve(self.y.len());
        g.push(self.g1);
        let mut prev = self.g1;
        match self.spec.recursion() {
            Recursion::Linear => {
                for t in 1..self.y.len() {
                    let next = omega + gamma * prev + self.news(beta, t - 1);
                    if !next.is_finite() {
                        return Err(Error::NonFinite { t: t + 1 });
                    }
                    g.push(next);
                    prev = next;
                }
            }
            Recursion::IndirectGarch => {
                let s = self.spec.branch_sign();
                for t in 1..self.y.len() {
                    let radicand = omega + gamma * prev * prev + self.news(beta, t - 1);
                    let next = s * radicand.max(0.0).sqrt();
                    if !next.is_finite() {
                        return Err(Error::NonFinite { t: t + 1 });
                    }
                    g.push(next);
                    prev = next;
                }
            }
        }
        Ok(())
    }

    /// `(Σ_{y<g} (g-y)^α, Σ_{y≥g} (y-g)^α)` for a level path.
    pub fn residual_sums(&self, g: &[f64]) -> (f64, f64) {
        let a = self.spec.alpha();
        let mut left = 0.0;
        let mut right = 0.0;
        for (&y, &gt) in self.y.iter().zip(g) {
            if y < gt {
                left += pow_shape(gt - y, a);
            } else {
                right += pow_shape(y - gt, a);
            }
        }
        (left, right)
    }

    /// Log-likelihood from precomputed residual sums; `-∞` for invalid σ.
    pub fn log_likelihood_from_sums(&self, sums: (f64, f64), sigma: f64) -> f64 {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let a = self.spec.alpha();
        let tau = self.spec.tau;
        let t = self.y.len() as f64;
        -t * (self.log_c_unit + sigma.ln()) - ((1.0 - tau) * sums.0 + tau * sums.1) / pow_shape(sigma, a)
    }
}

/// Level path `g_1..g_T`.
pub fn recurse_g(spec: &ModelSpec, params: &ParamVector, y: &ReturnSeries) -> Result<Vec<f64>> {
    let ev = PathEvaluator::new(spec, y)?;
    let mut g = Vec::new();
    ev.path_into(params.omega, params.gamma, &params.beta, &mut g)?;
    Ok(g)
}

/// SEP log-likelihood of the series. Returns `-∞` for a non-positive σ.
pub fn log_likelihood(spec: &ModelSpec, params: &ParamVector, y: &ReturnSeries) -> Result<f64> {
    let ev = PathEvaluator::new(spec, y)?;
    let mut g = Vec::new();
    ev.path_into(params.omega, params.gamma, &params.beta, &mut g)?;
    Ok(ev.log_likelihood_from_sums(ev.residual_sums(&g), params.sigma))
}

/// One-step-ahead levels for the out-of-sample period with parameters held
/// fixed: element `j` is the level for `y_out[j]`, using returns through `j-1`.
pub fn forecast_path(
    spec: &ModelSpec,
    params: &ParamVector,
    y_in: &ReturnSeries,
    y_out: &ReturnSeries,
) -> Result<Vec<f64>> {
    if y_out.is_empty() {
        return Err(Error::InsufficientData("out-of-sample series is empty".into()));
    }
    let g1 = spec.initial_level(&y_in.values)?;
    let full = y_in.concat(y_out)?;
    let ev = PathEvaluator::with_initial_level(spec, &full, g1)?;
    let mut g = Vec::new();
    ev.path_into(params.omega, params.gamma, &params.beta, &mut g)?;
    Ok(g.split_off(y_in.len()))
}
