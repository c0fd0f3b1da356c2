//! Hermite interpolation on a single interval.

use crate::metric::Vector;

/// Cubic Hermite value from endpoint values and derivatives on [0, h],
/// evaluated at s = (t - t0) / h. Returns (value, derivative).
pub fn cubic(y0: &Vector, d0: &Vector, y1: &Vector, d1: &Vector, h: f64, s: f64) -> (Vector, Vector) {
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let g00 = 6.0 * s2 - 6.0 * s;
    let g10 = 3.0 * s2 - 4.0 * s + 1.0;
    let g01 = -g00;
    let g11 = 3.0 * s2 - 2.0 * s;
    let v = y0 * h00 + d0 * (h * h10) + y1 * h01 + d1 * (h * h11);
    let d = (y0 * g00 + y1 * g01) / h + d0 * g10 + d1 * g11;
    (v, d)
}

/// Quintic Hermite through (value, first, second derivative) at both ends.
/// Returns value, first and second derivative at s = (t - t0) / h.
#[allow(clippy::too_many_arguments)]
pub fn quintic(
    y0: &Vector,
    d0: &Vector,
    a0: &Vector,
    y1: &Vector,
    d1: &Vector,
    a1: &Vector,
    h: f64,
    s: f64,
) -> (Vector, Vector, Vector) {
    let s2 = s * s;
    let s3 = s2 * s;
    let s4 = s3 * s;
    let s5 = s4 * s;
    let b = [
        1.0 - 10.0 * s3 + 15.0 * s4 - 6.0 * s5,
        s - 6.0 * s3 + 8.0 * s4 - 3.0 * s5,
        0.5 * s2 - 1.5 * s3 + 1.5 * s4 - 0.5 * s5,
        0.5 * s3 - s4 + 0.5 * s5,
        -4.0 * s3 + 7.0 * s4 - 3.0 * s5,
        10.0 * s3 - 15.0 * s4 + 6.0 * s5,
    ];
    let db = [
        -30.0 * s2 + 60.0 * s3 - 30.0 * s4,
        1.0 - 18.0 * s2 + 32.0 * s3 - 15.0 * s4,
        s - 4.5 * s2 + 6.0 * s3 - 2.5 * s4,
        1.5 * s2 - 4.0 * s3 + 2.5 * s4,
        -12.0 * s2 + 28.0 * s3 - 15.0 * s4,
        30.0 * s2 - 60.0 * s3 + 30.0 * s4,
    ];
    let ddb = [
        -60.0 * s + 180.0 * s2 - 120.0 * s3,
        -36.0 * s + 96.0 * s2 - 60.0 * s3,
        1.0 - 9.0 * s + 18.0 * s2 - 10.0 * s3,
        3.0 * s - 12.0 * s2 + 10.0 * s3,
        -24.0 * s + 84.0 * s2 - 60.0 * s3,
        60.0 * s - 180.0 * s2 + 120.0 * s3,
    ];
    let h2 = h * h;
    let combine = |w: &[f64; 6]| y0 * w[0] + d0 * (h * w[1]) + a0 * (h2 * w[2]) + a1 * (h2 * w[3]) + d1 * (h * w[4]) + y1 * w[5];
    let v = combine(&b);
    let d = combine(&db) / h;
    let a = combine(&ddb) / h2;
    (v, d, a)
}

/// Scalar quintic Hermite; returns value and first derivative.
#[allow(clippy::too_many_arguments)]
pub fn quintic_scalar(y0: f64, d0: f64, a0: f64, y1: f64, d1: f64, a1: f64, h: f64, s: f64) -> (f64, f64) {
    let one = |v: f64| Vector::from_element(1, v);
    let (v, d, _) = quintic(&one(y0), &one(d0), &one(a0), &one(y1), &one(d1), &one(a1), h, s);
    (v[0], d[0])
}
