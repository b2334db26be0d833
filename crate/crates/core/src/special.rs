//! Scalar special functions: the exact (erf-based) GeLU and its derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Error function. Backed by the musl/FreeBSD rational approximation in
/// `libm`, which is accurate to within one ulp.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    libm::exp(-0.5 * x * x) / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

/// `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `x·e^{-x²/2}/√(2π) + erf(x/√2)/2 + 1/2`.
pub fn gelu_grad(x: f64) -> f64 {
    x * normal_pdf(x) + 0.5 * erf(x * FRAC_1_SQRT_2) + 0.5
}

/// `φ(x)·(2 − x²)`; its positive root `√2` is where `gelu_grad` peaks.
pub fn gelu_second(x: f64) -> f64 {
    normal_pdf(x) * (2.0 - x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Abramowitz & Stegun table values.
        assert_eq!(erf(0.0), 0.0);
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-15);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((erf(2.0) - 0.995_322_265_018_952_7).abs() < 1e-15);
        assert!((erf(-1.0) + erf(1.0)).abs() < 1e-16);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
        assert_eq!(gelu_grad(0.0), 0.5);
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for &x in &[-3.0, -1.2, -0.1, 0.3, 1.0, 1.7, 4.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
            let fd2 = (gelu_grad(x + h) - gelu_grad(x - h)) / (2.0 * h);
            assert!((fd2 - gelu_second(x)).abs() < 1e-9, "x={x}");
        }
    }
}
