//! Scalar and slice kernels shared by the autodiff tape and the frozen
//! (inference-only) forward path, so both routes compute identical values.

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without overflow for large |x|.
///
/// log σ(x) = -softplus(-x) = min(x, 0) - log1p(exp(-|x|)).
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// In-place max-subtracted softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax of a slice into a fresh vector.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// y = W x for a row-major [rows, cols] matrix.
pub fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(&w[r * cols..(r + 1) * cols], x);
    }
    out
}

/// Elementwise rotation of `h` (first half real, second half imaginary
/// parts) by phase angles `theta` (length h.len()/2).
pub fn rotate(h: &[f64], theta: &[f64]) -> Vec<f64> {
    let k = theta.len();
    debug_assert_eq!(h.len(), 2 * k);
    let mut out = vec![0.0; 2 * k];
    for i in 0..k {
        let (re, im) = (h[i], h[k + i]);
        let (sin, cos) = theta[i].sin_cos();
        out[i] = re * cos - im * sin;
        out[k + i] = re * sin + im * cos;
    }
    out
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    PI - (PI - theta).rem_euclid(2.0 * PI)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn sigmoid_midpoint_and_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(40.0) > 1.0 - 1e-12);
        assert!(sigmoid(-40.0) < 1e-12);
        assert!(sigmoid(-800.0) >= 0.0);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // Naive log(sigmoid(-800)) would be -inf.
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let s = softmax(&[1.0, 1.0, 1.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rotate_zero_phase_is_identity() {
        let h = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rotate(&h, &[0.0, 0.0]), h.to_vec());
    }

    #[test]
    fn rotate_half_turn_negates() {
        let out = rotate(&[1.0, 0.0], &[PI]);
        assert!((out[0] + 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for i in -20..20 {
            let t = i as f64 * 0.7;
            let w = wrap_angle(t);
            assert!(w > -PI && w <= PI, "wrap({t}) = {w}");
            // Same point on the circle.
            assert!((w.sin() - t.sin()).abs() < 1e-9);
            assert!((w.cos() - t.cos()).abs() < 1e-9);
        }
    }
}
