//! Central finite-difference gradients for validating the tape.
//!
//! These helpers only evaluate a user-supplied scalar function; they never
//! touch the reverse-mode machinery, so they serve as an independent oracle
//! for it.

use crate::tensor::Scalar;

/// Default bump size for central differences (64-bit builds).
pub const DEFAULT_H: Scalar = 1e-5;

/// Gradient floor below which both values are treated as zero.
pub const ZERO_FLOOR: Scalar = 1e-10;

/// Absolute disagreement below this does not count as a relative error: an
/// f64 central difference at `DEFAULT_H` carries ~1e-11 rounding noise plus
/// O(h^2) truncation that reaches a few 1e-9 on sharply curved losses, so
/// differences this small cannot be attributed to the tape.
pub const ABS_FLOOR: Scalar = 1e-8;

/// Central-difference gradient of `f` at `x`: one `(f(x+h) - f(x-h)) / 2h`
/// per coordinate. `f` must be a pure function of its argument.
pub fn central_diff<F>(mut f: F, x: &[Scalar], h: Scalar) -> Vec<Scalar>
where
    F: FnMut(&[Scalar]) -> Scalar,
{
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error between two gradient values. Pairs that agree within
/// [`ABS_FLOOR`], and pairs that are both effectively zero, compare as equal.
pub fn rel_err(a: Scalar, b: Scalar) -> Scalar {
    let diff = (a - b).abs();
    let denom = a.abs().max(b.abs());
    if diff < ABS_FLOOR || denom < ZERO_FLOOR {
        0.0
    } else {
        diff / denom.max(1e-8)
    }
}

/// Largest elementwise [`rel_err`] between two gradient vectors.
pub fn max_rel_err(a: &[Scalar], b: &[Scalar]) -> Scalar {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, Scalar::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic() {
        // f(x) = x0^2 + 3 x1, grad = [2 x0, 3]
        let g = central_diff(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], DEFAULT_H);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn rel_err_floors_near_zero() {
        assert_eq!(rel_err(1e-12, -1e-12), 0.0);
        assert!(rel_err(1.0, 1.0001) < 2e-4);
    }
}
