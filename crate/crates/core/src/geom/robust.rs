//! Robust penalties.

use crate::error::{Error, Result};

/// Geman–McClure penalty `σ²‖r‖² / (σ² + ‖r‖²)`.
pub fn geman_mcclure(residual: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("Geman-McClure scale must be positive, got {sigma}")));
    }
    if residual.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Geman-McClure residual".into()));
    }
    let sq: f64 = residual.iter().map(|v| v * v).sum();
    Ok(geman_mcclure_sq(sq, sigma).0)
}

/// Penalty and its derivative with respect to the squared norm `s = ‖r‖²`.
#[inline]
pub fn geman_mcclure_sq(s: f64, sigma: f64) -> (f64, f64) {
    let s2 = sigma * sigma;
    let denom = s2 + s;
    (s2 * s / denom, s2 * s2 / (denom * denom))
}

/// Barron's general adaptive robust loss with shape `alpha` and scale `c`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Robustifier {
    pub alpha: f64,
    pub scale: f64,
}

impl Default for Robustifier {
    fn default() -> Self {
        Robustifier {
            alpha: 1.0,
            scale: 0.05,
        }
    }
}

impl Robustifier {
    pub fn new(alpha: f64, scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::invalid(format!("robustifier scale must be positive, got {scale}")));
        }
        if alpha.is_nan() {
            return Err(Error::invalid("robustifier shape is NaN"));
        }
        Ok(Robustifier { alpha, scale })
    }

    pub fn rho(&self, residual: f64) -> f64 {
        self.rho_sq(residual * residual).0
    }

    /// Value and derivative of the loss with respect to the squared residual.
    pub fn rho_sq(&self, s: f64) -> (f64, f64) {
        let c2 = self.scale * self.scale;
        let z = s / c2;
        let a = self.alpha;
        if (a - 2.0).abs() < 1e-12 {
            (0.5 * z, 0.5 / c2)
        } else if a.abs() < 1e-12 {
            (
                (0.5 * z + 1.0).ln(),
                0.5 / (c2 * (0.5 * z + 1.0)),
            )
        } else if a == f64::NEG_INFINITY {
            let e = (-0.5 * z).exp();
            (1.0 - e, 0.5 * e / c2)
        } else {
            let b = (a - 2.0).abs();
            let base = z / b + 1.0;
            (
                b / a * (base.powf(0.5 * a) - 1.0),
                0.5 / c2 * base.powf(0.5 * a - 1.0),
            )
        }
    }
}

/// Convenience free function for [`Robustifier::rho`].
pub fn robustifier(residual: f64, alpha: f64, c: f64) -> Result<f64> {
    Ok(Robustifier::new(alpha, c)?.rho(residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn geman_mcclure_examples() {
        assert_eq!(geman_mcclure(&[0.0, 0.0], 100.0).unwrap(), 0.0);
        let s = 7.0;
        assert_relative_eq!(geman_mcclure(&[s, 0.0, 0.0], s).unwrap(), s * s / 2.0, epsilon = 1e-12);
        // 25 * 25 / (25 + 25)
        assert_relative_eq!(geman_mcclure(&[3.0, 4.0], 5.0).unwrap(), 12.5, epsilon = 1e-12);
    }

    #[test]
    fn geman_mcclure_is_bounded_and_monotone() {
        let sigma = 3.0;
        let mut prev = -1.0;
        for i in 0..200 {
            let r = i as f64 * 0.5;
            let v = geman_mcclure(&[r, 0.0], sigma).unwrap();
            assert!(v < sigma * sigma);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn geman_mcclure_errors() {
        assert!(geman_mcclure(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(geman_mcclure(&[1.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn robustifier_special_cases() {
        assert_eq!(robustifier(0.0, 1.0, 0.3).unwrap(), 0.0);
        assert_eq!(robustifier(0.0, 0.0, 0.3).unwrap(), 0.0);
        assert_eq!(robustifier(0.0, -3.0, 0.3).unwrap(), 0.0);
        assert_relative_eq!(robustifier(2.0, 2.0, 1.0).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(robustifier(1.0, 0.0, 1.0).unwrap(), 1.5f64.ln(), epsilon = 1e-12);
        assert!(robustifier(1.0, 1.0, 0.0).is_err());
        assert!(robustifier(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn robustifier_continuous_across_special_shapes() {
        for r in [0.1, 0.7, 2.5] {
            let at2 = robustifier(r, 2.0, 0.5).unwrap();
            let near2 = robustifier(r, 2.0 - 1e-7, 0.5).unwrap();
            assert_relative_eq!(at2, near2, max_relative = 1e-5);
            let at0 = robustifier(r, 0.0, 0.5).unwrap();
            let near0 = robustifier(r, 1e-7, 0.5).unwrap();
            assert_relative_eq!(at0, near0, max_relative = 1e-5);
        }
    }

    #[test]
    fn robustifier_derivative_matches_differences() {
        for alpha in [-2.0, 0.0, 0.5, 1.0, 2.0, f64::NEG_INFINITY] {
            let r = Robustifier::new(alpha, 0.2).unwrap();
            for s in [1e-4f64, 0.01, 0.3, 2.0] {
                let h = 1e-7 * s.max(1e-3);
                let fd = (r.rho_sq(s + h).0 - r.rho_sq(s - h).0) / (2.0 * h);
                assert_relative_eq!(fd, r.rho_sq(s).1, epsilon = 1e-8, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn robustifier_non_decreasing() {
        for alpha in [-4.0, 0.0, 1.0, 2.0] {
            let r = Robustifier::new(alpha, 0.05).unwrap();
            let mut prev = 0.0;
            for i in 0..100 {
                let v = r.rho(i as f64 * 0.01);
                assert!(v >= prev);
                prev = v;
            }
        }
    }
}
