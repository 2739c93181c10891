//! Skew Exponential Power (SEP) density and the quantile/expectile check losses.
//!
//! The density with location `g`, scale `σ`, skewness `τ` and shape `α` is
//!
//! ```text
//! f(y) = c⁻¹ · exp(-(1-τ)·((g-y)/σ)^α)   for y < g
//!        c⁻¹ · exp(-τ·((y-g)/σ)^α)       for y ≥ g
//! c    = σ · Γ(1 + 1/α) · (τ^(-1/α) + (1-τ)^(-1/α))
//! ```
//!
//! At `α = 1` it is the Asymmetric Laplace law and `g` is the τ-quantile. In the
//! classical AL rate form the left and right rates are `(1-τ)/σ` and `τ/σ`, so
//! `f(y) = τ(1-τ)/σ · exp(-ρ_τ((y-g)/σ))`. At `α = 2` it is the Asymmetric
//! Gaussian law and `g` is the τ-expectile.
//!
//! Densities are only exposed in log space.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Which functional the location of the working likelihood tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// `α = 1`: CAViaR-type models, the location is a quantile.
    Quantile,
    /// `α = 2`: CARE-type models, the location is an expectile.
    Expectile,
}

impl Measure {
    pub fn shape(self) -> f64 {
        match self {
            Measure::Quantile => 1.0,
            Measure::Expectile => 2.0,
        }
    }

    pub fn from_alpha(alpha: u32) -> Result<Self> {
        match alpha {
            1 => Ok(Measure::Quantile),
            2 => Ok(Measure::Expectile),
            other => Err(Error::invalid(format!("alpha must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SepParams {
    location: f64,
    scale: f64,
    skew: f64,
    shape: f64,
}

impl SepParams {
    pub fn new(location: f64, scale: f64, skew: f64, shape: f64) -> Result<Self> {
        if !location.is_finite() {
            return Err(Error::invalid("SEP location must be finite"));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("SEP scale must be positive, got {scale}")));
        }
        if !(skew > 0.0 && skew < 1.0) {
            return Err(Error::invalid(format!("SEP skewness must lie in (0,1), got {skew}")));
        }
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::invalid(format!("SEP shape must be positive, got {shape}")));
        }
        let p = SepParams {
            location,
            scale,
            skew,
            shape,
        };
        if !p.log_norm_const().is_finite() {
            return Err(Error::invalid("SEP normalizing constant is not finite"));
        }
        Ok(p)
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn skew(&self) -> f64 {
        self.skew
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    /// `log c`.
    pub fn log_norm_const(&self) -> f64 {
        log_norm_const(self.scale, self.skew, self.shape)
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        -self.log_norm_const() - self.exponent(y)
    }

    /// The non-negative exponent `(1-τ)·((g-y)/σ)^α` or `τ·((y-g)/σ)^α`.
    fn exponent(&self, y: f64) -> f64 {
        let g = self.location;
        if y < g {
            (1.0 - self.skew) * pow_shape((g - y) / self.scale, self.shape)
        } else {
            self.skew * pow_shape((y - g) / self.scale, self.shape)
        }
    }

    /// Probability mass to the left of the location.
    pub fn left_mass(&self) -> f64 {
        let inv = 1.0 / self.shape;
        let l = (1.0 - self.skew).powf(-inv);
        let r = self.skew.powf(-inv);
        l / (l + r)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y == f64::INFINITY {
            return 1.0;
        }
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        let g = self.location;
        let tau = self.skew;
        if self.shape == 1.0 {
            // Piecewise exponential; left mass is exactly τ.
            return if y < g {
                tau * (-(1.0 - tau) * (g - y) / self.scale).exp()
            } else {
                tau + (1.0 - tau) * -(-tau * (y - g) / self.scale).exp_m1()
            };
        }
        let a = 1.0 / self.shape;
        let wl = self.left_mass();
        if y < g {
            let u = (1.0 - tau) * pow_shape((g - y) / self.scale, self.shape);
            wl * gamma_ur(a, u)
        } else {
            let u = tau * pow_shape((y - g) / self.scale, self.shape);
            if u == 0.0 {
                wl
            } else {
                (wl + (1.0 - wl) * gamma_lr(a, u)).min(1.0)
            }
        }
    }
}

#[inline]
pub(crate) fn pow_shape(x: f64, shape: f64) -> f64 {
    if shape == 1.0 {
        x
    } else if shape == 2.0 {
        x * x
    } else {
        x.powf(shape)
    }
}

/// `ln Γ(1 + 1/α)`, exact for the two shapes the models use.
fn ln_gamma_one_plus_inv(shape: f64) -> f64 {
    if shape == 1.0 {
        0.0
    } else if shape == 2.0 {
        // Γ(3/2) = √π / 2
        0.5 * std::f64::consts::PI.ln() - std::f64::consts::LN_2
    } else {
        ln_gamma(1.0 + 1.0 / shape)
    }
}

/// `log c` for the SEP normalizing constant.
pub fn log_norm_const(scale: f64, skew: f64, shape: f64) -> f64 {
    let tail = if shape == 1.0 {
        // 1/τ + 1/(1-τ) = 1/(τ(1-τ))
        -(skew * (1.0 - skew)).ln()
    } else {
        let inv = 1.0 / shape;
        (skew.powf(-inv) + (1.0 - skew).powf(-inv)).ln()
    };
    scale.ln() + ln_gamma_one_plus_inv(shape) + tail
}

pub fn sep_log_pdf(y: f64, p: &SepParams) -> f64 {
    p.log_pdf(y)
}

pub fn sep_cdf(y: f64, p: &SepParams) -> f64 {
    p.cdf(y)
}

/// Quantile (`ρ_τ`) or expectile (`r_τ`) check loss.
pub fn check_loss(u: f64, tau: f64, measure: Measure) -> f64 {
    debug_assert!(tau > 0.0 && tau < 1.0);
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    match measure {
        Measure::Quantile => u.abs() * w,
        Measure::Expectile => u * u * w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::integrate_split;
    use proptest::prelude::*;

    #[test]
    fn standard_normal_special_case() {
        let p = SepParams::new(0.0, 1.0, 0.5, 2.0).unwrap();
        let expected = -(2.0 * std::f64::consts::PI).sqrt().ln();
        assert!((p.log_pdf(0.0) - expected).abs() < 1e-14);
        assert!((p.log_pdf(0.0) + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn laplace_special_case_at_location() {
        let p = SepParams::new(0.0, 1.0, 0.5, 1.0).unwrap();
        assert!((p.log_pdf(0.0) - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn log_pdf_matches_quadrature_normalizer() {
        let (g, s, tau, a) = (0.2, 0.7, 0.05, 1.0);
        let p = SepParams::new(g, s, tau, a).unwrap();
        let kernel = |y: f64| {
            if y < g {
                (-(1.0 - tau) * ((g - y) / s)).exp()
            } else {
                (-tau * ((y - g) / s)).exp()
            }
        };
        let c = integrate_split(kernel, g - 60.0 * s, g, g + 1200.0 * s, 1e-13);
        let oracle = -c.ln() - tau * (1.3 - g) / s;
        assert!((p.log_pdf(1.3) - oracle).abs() < 1e-10, "{} vs {}", p.log_pdf(1.3), oracle);
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(SepParams::new(0.0, 0.0, 0.5, 1.0).is_err());
        assert!(SepParams::new(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(SepParams::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(SepParams::new(0.0, 1.0, 0.5, -1.0).is_err());
        assert!(SepParams::new(f64::NAN, 1.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn cdf_at_location_is_tau_for_laplace() {
        for &s in &[0.3, 1.0, 4.0] {
            let p = SepParams::new(-1.0, s, 0.05, 1.0).unwrap();
            assert_eq!(p.cdf(-1.0), 0.05);
        }
        let p = SepParams::new(0.0, 1.0, 0.05, 1.0).unwrap();
        assert_eq!(p.cdf(f64::INFINITY), 1.0);
        assert!((p.cdf(1e6) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_at_location_for_gaussian_shape_matches_quadrature() {
        let (g, s, tau) = (0.4, 1.3, 0.3);
        let p = SepParams::new(g, s, tau, 2.0).unwrap();
        let lo = g - 40.0 * s / (1.0 - tau).sqrt();
        let oracle = integrate_split(|y| p.log_pdf(y).exp(), lo, 0.5 * (lo + g), g, 1e-13);
        assert!((p.cdf(g) - oracle).abs() < 1e-10);
        assert!((p.cdf(g) - 0.3).abs() > 0.01);
    }

    #[test]
    fn cdf_general_shape_agrees_with_quadrature() {
        let p = SepParams::new(0.0, 1.0, 0.2, 1.5).unwrap();
        let lo = -40.0 / 0.8f64.powf(1.0 / 1.5);
        for &y in &[-2.0f64, -0.5, 0.0, 0.7, 3.0] {
            let oracle = integrate_split(|x| p.log_pdf(x).exp(), lo, y.min(0.0) - 1.0, y, 1e-13);
            assert!((p.cdf(y) - oracle).abs() < 1e-9, "y={y}: {} vs {}", p.cdf(y), oracle);
        }
    }

    #[test]
    fn check_loss_examples() {
        assert_eq!(check_loss(1.0, 0.5, Measure::Quantile), 0.5);
        assert!((check_loss(-1.0, 0.05, Measure::Quantile) - 0.95).abs() < 1e-15);
        assert_eq!(check_loss(2.0, 0.5, Measure::Expectile), 2.0);
        assert_eq!(check_loss(0.0, 0.3, Measure::Expectile), 0.0);
    }

    proptest! {
        #[test]
        fn check_loss_nonnegative_and_homogeneous(u in -50.0f64..50.0, tau in 0.001f64..0.999, k in 0.01f64..20.0) {
            let q = check_loss(u, tau, Measure::Quantile);
            let e = check_loss(u, tau, Measure::Expectile);
            prop_assert!(q >= 0.0 && e >= 0.0);
            if u != 0.0 {
                prop_assert!(q > 0.0 && e > 0.0);
            }
            let qk = check_loss(k * u, tau, Measure::Quantile);
            let ek = check_loss(k * u, tau, Measure::Expectile);
            prop_assert!((qk - k * q).abs() <= 1e-12 * (1.0 + qk.abs()));
            prop_assert!((ek - k * k * e).abs() <= 1e-12 * (1.0 + ek.abs()));
        }

        #[test]
        fn cdf_is_monotone(tau in 0.01f64..0.99, s in 0.1f64..5.0, a in prop::sample::select(vec![1.0, 2.0, 1.5]), y0 in -10.0f64..10.0, dy in 0.0f64..5.0) {
            let p = SepParams::new(0.3, s, tau, a).unwrap();
            let c0 = p.cdf(y0);
            let c1 = p.cdf(y0 + dy);
            prop_assert!((0.0..=1.0).contains(&c0));
            prop_assert!(c1 >= c0 - 1e-15);
        }
    }
}
