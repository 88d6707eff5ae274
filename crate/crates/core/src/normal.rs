//! Standard normal helpers used by the likelihood and the importance weights.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Below this argument `ln_phi` switches from `erfc` to the asymptotic tail series.
pub const LN_PHI_TAIL_CUTOFF: f64 = -8.0;

const TAIL_TERMS: usize = 12;

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn density(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `ln Φ(x)`, finite for every finite `x`.
///
/// For `x >= 0` the complement is small and goes through `ln_1p`. Between the
/// cutoff and zero `erfc` keeps full relative accuracy. Past the cutoff the
/// Mills-ratio series
/// `Φ(x) = φ(x)/|x| · Σ (-1)^n (2n-1)!! / x^{2n}` is used so that very
/// negative thresholds give a large negative number instead of `-inf`.
pub fn ln_phi(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x >= 0.0 {
        (-0.5 * libm::erfc(x * FRAC_1_SQRT_2)).ln_1p()
    } else if x >= LN_PHI_TAIL_CUTOFF {
        (0.5 * libm::erfc(-x * FRAC_1_SQRT_2)).ln()
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        let inv_x2 = 1.0 / (x * x);
        let mut term = 1.0;
        let mut series = 1.0;
        for n in 1..=TAIL_TERMS {
            term *= -((2 * n - 1) as f64) * inv_x2;
            series += term;
        }
        -0.5 * x * x - (-x).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

/// `ln Σ exp(v_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `ln((1/n) Σ exp(v_i))`.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    log_sum_exp(values) - (values.len() as f64).ln()
}
