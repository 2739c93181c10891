//! News impact curves `ℓ(β, y_{t-1})`: the four parametric families and the
//! penalized B-spline family, plus the second-difference penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{hpd_interval, mean};

/// Variable compared against the threshold in the threshold family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdVariable {
    /// `z_t = y_t`.
    Own,
    /// An observed exogenous series supplied with the returns.
    Exogenous,
}

/// Equidistant B-spline basis of degree `d` on `[lo, hi]` split into `k`
/// equal intervals. The basis has `k + d` functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    intervals: usize,
    lo: f64,
    hi: f64,
}

pub const DEFAULT_SPLINE_DEGREE: usize = 3;
pub const DEFAULT_SPLINE_INTERVALS: usize = 20;

impl SplineBasis {
    pub fn new(degree: usize, intervals: usize, lo: f64, hi: f64) -> Result<Self> {
        if degree < 1 {
            return Err(Error::invalid("spline degree must be at least 1"));
        }
        if intervals < 2 {
            return Err(Error::invalid("spline needs at least 2 knot intervals"));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(format!("invalid knot range [{lo}, {hi}]")));
        }
        Ok(SplineBasis {
            degree,
            intervals,
            lo,
            hi,
        })
    }

    /// Knot range spanning the data padded by 5% of its range on each side.
    pub fn from_data(y: &[f64], degree: usize, intervals: usize) -> Result<Self> {
        let (min, max) = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pad = if max > min { 0.05 * (max - min) } else { 1.0 };
        Self::new(degree, intervals, min - pad, max + pad)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn dim(&self) -> usize {
        self.intervals + self.degree
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / self.intervals as f64
    }

    /// Full extended knot vector, `k + 2d + 1` equidistant knots.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.intervals + 2 * self.degree)
            .map(|j| self.lo + (j as f64 - self.degree as f64) * h)
            .collect()
    }

    pub fn clamp(&self, y: f64) -> f64 {
        y.clamp(self.lo, self.hi)
    }

    /// Non-zero basis values at `y` (after clamping): returns the index of the
    /// first non-zero function and the `d + 1` values, via Cox-de Boor.
    pub fn nonzero(&self, y: f64) -> (usize, Vec<f64>) {
        let d = self.degree;
        let x = self.clamp(y);
        let h = self.step();
        let span = (((x - self.lo) / h).floor() as isize).clamp(0, self.intervals as isize - 1) as usize;
        // knot t_j = lo + (j - d) h; x lies in [t_{span+d}, t_{span+d+1})
        let i = span + d;
        let t = |j: usize| self.lo + (j as f64 - d as f64) * h;
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t(i + 1 - j);
            right[j] = t(i + j) - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        (span, n)
    }

    pub fn eval(&self, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        let (first, vals) = self.nonzero(y);
        out[first..first + vals.len()].copy_from_slice(&vals);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NicSpec {
    /// `β·|y|`
    Sav,
    /// `β₁·max(y,0) + β₂·max(-y,0)`
    AsymmetricSlope,
    /// `β₁·|y|` when `z ≤ r`, else `β₂·|y|`
    Threshold {
        threshold: f64,
        variable: ThresholdVariable,
    },
    /// `β·y²`, used inside the square-root recursion.
    IndirectGarch,
    /// `Σ β_ν B_ν(y)`
    Spline(SplineBasis),
}

impl NicSpec {
    pub fn threshold_default() -> Self {
        NicSpec::Threshold {
            threshold: 0.0,
            variable: ThresholdVariable::Own,
        }
    }

    pub fn n_coef(&self) -> usize {
        match self {
            NicSpec::Sav | NicSpec::IndirectGarch => 1,
            NicSpec::AsymmetricSlope | NicSpec::Threshold { .. } => 2,
            NicSpec::Spline(b) => b.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            NicSpec::Sav => "sav",
            NicSpec::AsymmetricSlope => "as",
            NicSpec::Threshold { .. } => "threshold",
            NicSpec::IndirectGarch => "ig",
            NicSpec::Spline(_) => "spline",
        }
    }

    pub fn spline(&self) -> Option<&SplineBasis> {
        match self {
            NicSpec::Spline(b) => Some(b),
            _ => None,
        }
    }

    pub fn needs_exogenous(&self) -> bool {
        matches!(
            self,
            NicSpec::Threshold {
                variable: ThresholdVariable::Exogenous,
                ..
            }
        )
    }
}

/// Evaluate `ℓ(β, y_prev)`; `z_prev` is only read by the threshold family.
pub fn nic_eval(spec: &NicSpec, beta: &[f64], y_prev: f64, z_prev: f64) -> Result<f64> {
    let expected = spec.n_coef();
    if beta.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: beta.len(),
        });
    }
    Ok(match spec {
        NicSpec::Sav => beta[0] * y_prev.abs(),
        NicSpec::AsymmetricSlope => beta[0] * y_prev.max(0.0) + beta[1] * (-y_prev).max(0.0),
        NicSpec::Threshold { threshold, .. } => {
            if z_prev <= *threshold {
                beta[0] * y_prev.abs()
            } else {
                beta[1] * y_prev.abs()
            }
        }
        NicSpec::IndirectGarch => beta[0] * y_prev * y_prev,
        NicSpec::Spline(basis) => {
            let (first, vals) = basis.nonzero(y_prev);
            vals.iter().zip(&beta[first..]).map(|(b, c)| b * c).sum()
        }
    })
}

pub fn bspline_basis(basis: &SplineBasis, y: f64) -> Vec<f64> {
    basis.eval(y)
}

/// Second-order difference penalty `K = D₂ᵀ D₂` on `n` coefficients.
#[derive(Debug, Clone)]
pub struct PenaltyMatrix {
    d2: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl PenaltyMatrix {
    pub fn second_order(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid("second-order penalty needs at least 3 coefficients"));
        }
        let mut d2 = DMatrix::zeros(n - 2, n);
        for r in 0..n - 2 {
            d2[(r, r)] = 1.0;
            d2[(r, r + 1)] = -2.0;
            d2[(r, r + 2)] = 1.0;
        }
        let k = d2.transpose() * &d2;
        Ok(PenaltyMatrix { d2, k })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// `rank(K) = n - 2`: the null space holds constant and linear vectors.
    pub fn rank(&self) -> usize {
        self.dim() - 2
    }

    pub fn d2(&self) -> &DMatrix<f64> {
        &self.d2
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn quadform(&self, beta: &[f64]) -> Result<f64> {
        if beta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: beta.len(),
            });
        }
        Ok(second_difference_ss(beta))
    }
}

#[inline]
pub(crate) fn second_difference_ss(beta: &[f64]) -> f64 {
    beta.windows(3)
        .map(|w| {
            let d = w[2] - 2.0 * w[1] + w[0];
            d * d
        })
        .sum()
}

pub fn penalty_quadform(beta: &[f64], k: &PenaltyMatrix) -> Result<f64> {
    k.quadform(beta)
}

/// One row of an exported news impact curve band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NicBandRow {
    pub y: f64,
    pub mean: f64,
    pub hpd_low: f64,
    pub hpd_high: f64,
}

/// Posterior mean and HPD band of `ℓ` on a grid, from per-draw coefficient vectors.
/// The threshold family is evaluated with `z = y`.
pub fn nic_band(spec: &NicSpec, betas: &[Vec<f64>], grid: &[f64], mass: f64) -> Result<Vec<NicBandRow>> {
    if betas.is_empty() {
        return Err(Error::InsufficientData("no posterior draws for the NIC band".into()));
    }
    let mut vals = vec![0.0; betas.len()];
    grid.iter()
        .map(|&y| {
            for (v, b) in vals.iter_mut().zip(betas) {
                *v = nic_eval(spec, b, y, y)?;
            }
            let (lo, hi) = hpd_interval(&vals, mass);
            Ok(NicBandRow {
                y,
                mean: mean(&vals),
                hpd_low: lo,
                hpd_high: hi,
            })
        })
        .collect()
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
