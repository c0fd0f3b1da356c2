//! Piecewise-polynomial transition functions.
//!
//! All transitions are built from the degree-9 smoothstep, which is C^4 at
//! both ends. The connecting curve needs two derivatives of the blend and the
//! conformal factor needs one more, so C^4 leaves a margin.

/// Degree-9 smoothstep on [0, 1], clamped outside. Returns (S, S', S'').
pub fn smoothstep(u: f64) -> (f64, f64, f64) {
    if u <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if u >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let u2 = u * u;
    let u4 = u2 * u2;
    let u5 = u4 * u;
    // S = u^5 (126 - 420u + 540u^2 - 315u^3 + 70u^4)
    let s = u5 * (126.0 + u * (-420.0 + u * (540.0 + u * (-315.0 + 70.0 * u))));
    // S' = 630 u^4 (1-u)^4
    let om = 1.0 - u;
    let om2 = om * om;
    let ds = 630.0 * u4 * om2 * om2;
    // S'' = 2520 u^3 (1-u)^3 (1-2u)
    let dds = 2520.0 * u2 * u * om2 * om * (1.0 - 2.0 * u);
    (s, ds, dds)
}

/// Transition from 0 at `a` to 1 at `b`. Returns value and first two
/// derivatives with respect to t.
pub fn ramp(t: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let w = b - a;
    let (s, ds, dds) = smoothstep((t - a) / w);
    (s, ds / w, dds / (w * w))
}

/// Radial cutoff: 1 on [0, 1/3], 0 on [2/3, inf), monotone in between.
/// Returns value and derivative.
pub fn cutoff(r: f64) -> (f64, f64) {
    let (s, ds, _) = smoothstep(3.0 * r - 1.0);
    (1.0 - s, -3.0 * ds)
}

/// Symmetric window: 0 for |u| <= 1/2, 1 for |u| >= 1. Returns value and two
/// derivatives in u.
pub fn outer_window(u: f64) -> (f64, f64, f64) {
    let a = u.abs();
    let (s, ds, dds) = smoothstep(2.0 * a - 1.0);
    let sg = if u < 0.0 { -1.0 } else { 1.0 };
    (s, 2.0 * ds * sg, 4.0 * dds)
}
