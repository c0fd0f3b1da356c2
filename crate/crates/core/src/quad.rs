//! Gauss–Legendre quadrature with interval bisection.

use gauss_quad::GaussLegendre;
use std::sync::OnceLock;

const ORDER: usize = 12;

fn rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        GaussLegendre::new(ORDER)
            .expect("order >= 2")
            .iter()
            .map(|(x, w)| (*x, *w))
            .collect()
    })
}

/// Fixed 12-point rule on [a, b].
pub fn gauss<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    rule().iter().map(|&(x, w)| w * f(c + h * x)).sum::<f64>() * h
}

/// Fixed rule applied on each piece of `[a, b]` cut at the given interior
/// breakpoints, which the integrand may be non-smooth across.
pub fn gauss_pieces<F: FnMut(f64) -> f64>(a: f64, b: f64, cuts: &[f64], mut f: F) -> f64 {
    let (lo, hi, sign) = if a <= b { (a, b, 1.0) } else { (b, a, -1.0) };
    let mut total = 0.0;
    let mut left = lo;
    for &c in cuts.iter().filter(|&&c| c > lo && c < hi) {
        total += gauss(left, c, &mut f);
        left = c;
    }
    total += gauss(left, hi, &mut f);
    sign * total
}

/// Adaptive quadrature: bisect until the 12-point rule on a panel agrees
/// with the sum over its halves to within `tol` (scaled by panel share).
pub fn adaptive<F: FnMut(f64) -> f64>(a: f64, b: f64, tol: f64, mut f: F) -> f64 {
    fn rec<F: FnMut(f64) -> f64>(a: f64, b: f64, whole: f64, tol: f64, depth: u32, f: &mut F) -> f64 {
        let m = 0.5 * (a + b);
        let left = gauss(a, m, &mut *f);
        let right = gauss(m, b, &mut *f);
        if depth == 0 || (left + right - whole).abs() <= tol {
            return left + right;
        }
        rec(a, m, left, 0.5 * tol, depth - 1, f) + rec(m, b, right, 0.5 * tol, depth - 1, f)
    }
    if a == b {
        return 0.0;
    }
    let whole = gauss(a, b, &mut f);
    rec(a, b, whole, tol, 40, &mut f)
}

/// `adaptive` on `panels` equal sub-intervals, so that features narrower
/// than the whole interval are not skipped by the first comparison.
pub fn adaptive_panels<F: FnMut(f64) -> f64>(a: f64, b: f64, panels: usize, tol: f64, mut f: F) -> f64 {
    let h = (b - a) / panels as f64;
    (0..panels).map(|k| adaptive(a + k as f64 * h, a + (k + 1) as f64 * h, tol / panels as f64, &mut f)).sum()
}
