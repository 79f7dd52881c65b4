//! Closed-form error terms for a delay measurement.
//!
//! The dominant contribution is the receiver clock: a fractional frequency
//! error scales every measured delay by the same factor, so the absolute
//! error grows linearly with the delay itself. Temperature drift of the
//! fiber and the residual of the peak fit add two more terms. The terms are
//! independent, so reports combine them as a root-sum-square bound.

use serde::{Deserialize, Serialize};

/// Per-term error decomposition, all in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub clock_term: f64,
    pub temperature_term: f64,
    pub fit_term: f64,
    pub total_rss: f64,
}

impl ErrorBudget {
    pub fn new(clock_term: f64, temperature_term: f64, fit_term: f64) -> Self {
        Self {
            clock_term,
            temperature_term,
            fit_term,
            total_rss: (clock_term * clock_term
                + temperature_term * temperature_term
                + fit_term * fit_term)
                .sqrt(),
        }
    }
}

/// Absolute delay error caused by a fractional clock frequency offset.
pub fn clock_error(delay: f64, fractional_offset: f64) -> f64 {
    debug_assert!(delay >= 0.0);
    delay * fractional_offset.abs()
}

/// Delay change of a fiber path under a temperature excursion.
pub fn temperature_error(delay: f64, delta_t_k: f64, coeff_ppm_per_k: f64) -> f64 {
    debug_assert!(delay >= 0.0);
    delay * coeff_ppm_per_k * 1e-6 * delta_t_k
}

/// Bound on the error of a two-direction asymmetry measurement taken with a
/// shared clock: the first-order clock error cancels between the directions,
/// leaving the offset acting only on the asymmetry itself, plus one fit
/// residual per direction.
pub fn asymmetry_error_bound(asymmetry: f64, fractional_offset: f64, fit_tol: f64) -> f64 {
    debug_assert!(asymmetry >= 0.0 && fit_tol >= 0.0);
    asymmetry * fractional_offset.abs() + 2.0 * fit_tol
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Equal up to f64 representation of the decimal reference value.
    fn assert_exact(got: f64, want: f64) {
        if want == 0.0 {
            assert_eq!(got, 0.0);
        } else {
            assert!(
                ((got - want) / want).abs() < 1e-12,
                "got {got:e}, want {want:e}"
            );
        }
    }

    #[test]
    fn clock_term_reference_points() {
        // 500 us measured with a GNSS-grade clock vs a low-cost oscillator.
        assert_exact(clock_error(500e-6, 20e-9), 10e-12);
        assert_exact(clock_error(500e-6, 100e-6), 50e-9);
        assert_exact(clock_error(0.0, 123e-6), 0.0);
        assert_exact(clock_error(500e-6, -100e-6), 50e-9);
    }

    #[test]
    fn temperature_term_reference_points() {
        assert_exact(temperature_error(500e-6, 0.01, 7.0), 35e-12);
        assert_exact(temperature_error(500e-6, 0.0, 7.0), 0.0);
        assert_exact(temperature_error(50e-6, 1.0, 7.0), 350e-12);
    }

    #[test]
    fn asymmetry_bound_reference_points() {
        assert_exact(asymmetry_error_bound(100e-9, 100e-6, 5e-12), 20e-12);
        assert_exact(asymmetry_error_bound(0.0, 1.0, 5e-12), 10e-12);
        assert_exact(asymmetry_error_bound(300e-9, 100e-6, 2e-12), 34e-12);
    }

    #[test]
    fn terms_are_linear_in_their_drivers() {
        for k in [0.5, 2.0, 10.0] {
            assert_exact(clock_error(k * 1e-6, 1e-6), k * clock_error(1e-6, 1e-6));
            assert_exact(
                temperature_error(1e-3, k * 0.1, 7.0),
                k * temperature_error(1e-3, 0.1, 7.0),
            );
        }
    }

    #[test]
    fn rss_combines_terms() {
        let b = ErrorBudget::new(3e-12, 4e-12, 0.0);
        assert!((b.total_rss - 5e-12).abs() < 1e-24);
        let b = ErrorBudget::new(0.0, 0.0, 0.0);
        assert_eq!(b.total_rss, 0.0);
    }
}
