//! Small helpers for verifying analytic gradients against central finite
//! differences.

/// Central difference approximation of `df/dx` at `x`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Relative error between an analytic and a numeric derivative, guarded by an
/// absolute floor so near-zero pairs compare on absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_on_quadratic() {
        let d = central_diff(|x| x * x, 3.0, 1e-3);
        assert!((d - 6.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_guards_near_zero() {
        assert!(relative_error(0.0, 1e-12) < 1e-3);
        assert!(relative_error(1.0, 2.0) > 0.3);
    }
}
