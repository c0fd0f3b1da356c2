//! Compactly supported functions with prescribed gradient along a curve.
//!
//! For a curve y on [0, T] with |y' - e1| <= 1/5 and a field w orthogonal to
//! y' and vanishing near both ends, the tube chart Phi(t, z) = y(t) + (0, z)
//! is a diffeomorphism and
//!
//!   W~(t, z) = c(|z| / mu) * sum_{i >= 2} int_0^{z_i} w_i(t + s) ds
//!
//! (with w extended by zero outside [0, T]) satisfies grad W(y(t)) = w(t) and
//! W(y(t)) = 0, where W = W~ o Phi^{-1} and c is the radial cutoff.

use crate::error::{GeoError, Result};
use crate::factor::{ConformalFactor, SupportBox};
use crate::metric::Vector;
use crate::quad;
use crate::smooth::cutoff;
use std::fmt::Debug;
use std::sync::Arc;

/// A curve together with the gradient field to be prescribed along it.
pub trait TubeCurve: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Parameter length T.
    fn span(&self) -> f64;

    /// y(t) and y'(t).
    fn point(&self, t: f64) -> (Vector, Vector);

    /// w(t).
    fn field(&self, t: f64) -> Vector;

    /// Parameters in (0, T) across which w may fail to be smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct TubeBumpSpec {
    pub curve: Arc<dyn TubeCurve>,
    pub beta: f64,
    pub mu: f64,
}

const TABLE: usize = 512;

/// The function W, usable as a conformal factor.
#[derive(Debug, Clone)]
pub struct TubeBump {
    spec: TubeBumpSpec,
    cuts: Vec<f64>,
    table_t: Vec<f64>,
    table_y1: Vec<f64>,
    bbox: SupportBox,
}

fn samples(t0: f64, t1: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..=n).map(move |k| t0 + (t1 - t0) * k as f64 / n as f64)
}

/// Check the hypotheses on the curve and field at 400+ sample points.
pub fn validate_spec(spec: &TubeBumpSpec) -> Result<()> {
    let big_t = spec.curve.span();
    let (beta, mu) = (spec.beta, spec.mu);
    if !(mu > 0.0 && 3.0 * mu <= beta * (1.0 + 1e-12) && beta < big_t) {
        return Err(GeoError::BumpParameters(format!(
            "need 0 < 3 mu <= beta < T, got mu = {mu}, beta = {beta}, T = {big_t}"
        )));
    }
    let mut e1 = Vector::zeros(spec.curve.dim());
    e1[0] = 1.0;
    let mut wmax: f64 = 0.0;
    let pts: Vec<f64> = samples(0.0, big_t, 600).collect();
    for &t in &pts {
        wmax = wmax.max(spec.curve.field(t).amax());
    }
    for &t in &pts {
        let (_, dy) = spec.curve.point(t);
        let dev = (&dy - &e1).norm();
        if dev > 0.2 {
            return Err(GeoError::BumpParameters(format!("|y'(t) - e1| = {dev} > 1/5 at t = {t}")));
        }
        let w = spec.curve.field(t);
        if (t <= beta || t >= big_t - beta) && w.amax() > 1e-14 * (1.0 + wmax) {
            return Err(GeoError::BumpParameters(format!("w(t) != 0 at t = {t} inside the end margins")));
        }
        let dot = dy.dot(&w);
        if dot.abs() > 1e-9 * (1.0 + wmax) {
            return Err(GeoError::BumpParameters(format!("<y'(t), w(t)> = {dot:e} at t = {t}")));
        }
    }
    Ok(())
}

/// Invert the tube chart: the (t, z) with y(t) + (0, z) = x, or None when
/// x_1 lies outside [y_1(0), y_1(T)].
pub fn tube_chart(spec: &TubeBumpSpec, x: &Vector) -> Option<(f64, Vector)> {
    TubeBump::chart_only(spec).chart(x)
}

/// Build W after validating the hypotheses.
pub fn build_bump(spec: TubeBumpSpec) -> Result<TubeBump> {
    validate_spec(&spec)?;
    Ok(TubeBump::new_unchecked(spec))
}

impl TubeBump {
    fn chart_only(spec: &TubeBumpSpec) -> TubeBump {
        let big_t = spec.curve.span();
        let table_t: Vec<f64> = samples(0.0, big_t, TABLE).collect();
        let table_y1 = table_t.iter().map(|&t| spec.curve.point(t).0[0]).collect();
        let n = spec.curve.dim();
        TubeBump {
            spec: spec.clone(),
            cuts: Vec::new(),
            table_t,
            table_y1,
            bbox: SupportBox { lo: Vector::zeros(n), hi: Vector::zeros(n) },
        }
    }

    pub fn new_unchecked(spec: TubeBumpSpec) -> TubeBump {
        let mut b = TubeBump::chart_only(&spec);
        let big_t = spec.curve.span();
        let mut cuts = vec![0.0, big_t];
        cuts.extend(spec.curve.breakpoints());
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup();
        b.cuts = cuts;
        // W~(t, z) can be non-zero only if w is non-zero somewhere within
        // |z| < 2 mu / 3 of t, i.e. for t in (beta - 2mu/3, T - beta + 2mu/3).
        let r = 2.0 * spec.mu / 3.0;
        let n = spec.curve.dim();
        let mut lo = Vector::from_element(n, f64::INFINITY);
        let mut hi = Vector::from_element(n, f64::NEG_INFINITY);
        for t in samples((spec.beta - r).max(0.0), (big_t - spec.beta + r).min(big_t), 400) {
            let y = spec.curve.point(t).0;
            for i in 0..n {
                lo[i] = lo[i].min(y[i]);
                hi[i] = hi[i].max(y[i]);
            }
        }
        for i in 1..n {
            lo[i] -= r;
            hi[i] += r;
        }
        b.bbox = SupportBox { lo, hi }.inflate(1e-9);
        b
    }

    pub fn spec(&self) -> &TubeBumpSpec {
        &self.spec
    }

    pub fn mu(&self) -> f64 {
        self.spec.mu
    }

    fn chart(&self, x: &Vector) -> Option<(f64, Vector)> {
        let target = x[0];
        let (first, last) = (self.table_y1[0], *self.table_y1.last().unwrap());
        if target < first || target > last {
            return None;
        }
        let k = self.table_y1.partition_point(|&v| v <= target).clamp(1, self.table_y1.len() - 1);
        let (mut a, mut b) = (self.table_t[k - 1], self.table_t[k]);
        let (ya, yb) = (self.table_y1[k - 1], self.table_y1[k]);
        let mut t = if yb > ya { a + (b - a) * (target - ya) / (yb - ya) } else { a };
        let mut y = self.spec.curve.point(t);
        for _ in 0..50 {
            let g = y.0[0] - target;
            if g.abs() <= 1e-15 * (1.0 + target.abs()) {
                break;
            }
            if g > 0.0 {
                b = t;
            } else {
                a = t;
            }
            let mut next = t - g / y.1[0];
            if !(next > a && next < b) {
                next = 0.5 * (a + b);
            }
            if (next - t).abs() < 1e-16 * (1.0 + t.abs()) {
                break;
            }
            t = next;
            y = self.spec.curve.point(t);
        }
        let n = x.len();
        let mut z = Vector::zeros(n - 1);
        for i in 1..n {
            z[i - 1] = x[i] - y.0[i];
        }
        Some((t, z))
    }

    fn w_ext(&self, t: f64) -> Vector {
        if t < 0.0 || t > self.spec.curve.span() {
            Vector::zeros(self.spec.curve.dim())
        } else {
            self.spec.curve.field(t)
        }
    }

    /// W~ and its partial derivatives in the tube coordinates (t, z).
    pub fn eval_tube(&self, t: f64, z: &Vector) -> (f64, f64, Vector) {
        let m = z.len();
        let mu = self.spec.mu;
        let rz = z.norm();
        let (c, dc) = cutoff(rz / mu);
        if c == 0.0 && dc == 0.0 {
            return (0.0, 0.0, Vector::zeros(m));
        }
        let w_here = self.w_ext(t);
        let mut sum = 0.0;
        let mut dt = 0.0;
        let mut dz = Vector::zeros(m);
        for j in 0..m {
            let zj = z[j];
            let integral = if zj == 0.0 {
                0.0
            } else {
                quad::gauss_pieces(t, t + zj, &self.cuts, |s| self.w_ext(s)[j + 1])
            };
            let w_end = self.w_ext(t + zj)[j + 1];
            sum += integral;
            dt += w_end - w_here[j + 1];
            dz[j] = c * w_end;
        }
        if rz > 0.0 && dc != 0.0 {
            for j in 0..m {
                dz[j] += dc / mu * z[j] / rz * sum;
            }
        }
        (c * sum, c * dt, dz)
    }

    /// Sampled sup|W| + sup|grad W| over the support, on an (nt x nz-per-axis)
    /// grid in tube coordinates. Returns (sup|W|, sup|grad W|).
    pub fn c1_parts(&self, nt: usize, nz: usize) -> Result<(f64, f64)> {
        let big_t = self.spec.curve.span();
        let r = 2.0 * self.spec.mu / 3.0;
        let n = self.spec.curve.dim();
        let offsets = disk_grid(n - 1, r, nz);
        let mut c0: f64 = 0.0;
        let mut c1: f64 = 0.0;
        for t in samples((self.spec.beta - r).max(0.0), (big_t - self.spec.beta + r).min(big_t), nt) {
            let y = self.spec.curve.point(t).0;
            for z in &offsets {
                let mut x = y.clone();
                for i in 1..n {
                    x[i] += z[i - 1];
                }
                let (v, g) = self.value_grad(&x)?;
                c0 = c0.max(v.abs());
                c1 = c1.max(g.norm());
            }
        }
        Ok((c0, c1))
    }

    pub fn c1_norm_estimate(&self) -> Result<f64> {
        let (a, b) = self.c1_parts(120, 24)?;
        Ok(a + b)
    }
}

/// Points of a grid in the closed (m)-ball of radius r, nz per axis.
pub fn disk_grid(m: usize, r: f64, nz: usize) -> Vec<Vector> {
    let axis: Vec<f64> = (0..=nz).map(|k| -r + 2.0 * r * k as f64 / nz as f64).collect();
    let mut out = Vec::new();
    let total = (nz + 1).pow(m as u32);
    for idx in 0..total {
        let mut rem = idx;
        let mut z = Vector::zeros(m);
        for j in 0..m {
            z[j] = axis[rem % (nz + 1)];
            rem /= nz + 1;
        }
        if z.norm() <= r * (1.0 + 1e-12) {
            out.push(z);
        }
    }
    out
}

impl ConformalFactor for TubeBump {
    fn dim(&self) -> usize {
        self.spec.curve.dim()
    }

    fn value_grad(&self, x: &Vector) -> Result<(f64, Vector)> {
        let n = x.len();
        if !self.bbox.contains(x) {
            return Ok((0.0, Vector::zeros(n)));
        }
        let Some((t, z)) = self.chart(x) else {
            return Ok((0.0, Vector::zeros(n)));
        };
        let (w, wt, wz) = self.eval_tube(t, &z);
        let (_, dy) = self.spec.curve.point(t);
        let mut g = Vector::zeros(n);
        let mut lateral = 0.0;
        for r in 1..n {
            g[r] = wz[r - 1];
            lateral += dy[r] * wz[r - 1];
        }
        g[0] = (wt - lateral) / dy[0];
        Ok((w, g))
    }

    fn support(&self) -> Option<SupportBox> {
        Some(self.bbox.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::gradient_check;
    use crate::smooth::ramp;

    /// Straight or gently curved curve with w = a * bump(t) * normal.
    #[derive(Debug)]
    struct TestCurve {
        amplitude: f64,
        bend: f64,
        span: f64,
    }

    impl TestCurve {
        fn bump(&self, t: f64) -> f64 {
            let s = self.span;
            let up = ramp(t, s / 4.0, s / 2.0).0;
            let down = ramp(t, s / 2.0, 3.0 * s / 4.0).0;
            self.amplitude * (up - down)
        }
    }

    impl TubeCurve for TestCurve {
        fn dim(&self) -> usize {
            2
        }
        fn span(&self) -> f64 {
            self.span
        }
        fn point(&self, t: f64) -> (Vector, Vector) {
            let y = Vector::from_column_slice(&[t, self.bend * (3.0 * t).sin()]);
            let dy = Vector::from_column_slice(&[1.0, 3.0 * self.bend * (3.0 * t).cos()]);
            (y, dy)
        }
        fn field(&self, t: f64) -> Vector {
            let (_, dy) = self.point(t);
            let normal = Vector::from_column_slice(&[-dy[1], dy[0]]) / dy.norm();
            normal * self.bump(t)
        }
        fn breakpoints(&self) -> Vec<f64> {
            vec![self.span / 4.0, self.span / 2.0, 3.0 * self.span / 4.0]
        }
    }

    fn spec(amplitude: f64, bend: f64, mu: f64) -> TubeBumpSpec {
        TubeBumpSpec { curve: Arc::new(TestCurve { amplitude, bend, span: 1.0 }), beta: 0.25, mu }
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn straight_chart_is_identity() {
        let s = spec(1.0, 0.0, 0.05);
        let (t, z) = tube_chart(&s, &v(&[0.3, 0.2])).unwrap();
        assert!((t - 0.3).abs() < 1e-14);
        assert!((z[0] - 0.2).abs() < 1e-14);
        assert!(tube_chart(&s, &v(&[1.3, 0.0])).is_none());
    }

    #[test]
    fn curved_chart_round_trip() {
        let s = spec(1.0, 0.05, 0.05);
        for k in 0..50 {
            let p = v(&[0.02 * k as f64, 0.03 - 0.001 * k as f64]);
            let (t, z) = tube_chart(&s, &p).unwrap();
            let y = s.curve.point(t).0;
            let back = v(&[y[0], y[1] + z[0]]);
            assert!((back - &p).norm() < 1e-10);
        }
        let (t0, z0) = tube_chart(&s, &s.curve.point(0.41).0).unwrap();
        assert!((t0 - 0.41).abs() < 1e-11 && z0.norm() < 1e-11);
    }

    #[test]
    fn on_curve_gradient_and_value() {
        for bend in [0.0, 0.05] {
            let b = build_bump(spec(0.7, bend, 0.05)).unwrap();
            for k in 0..=100 {
                let t = k as f64 / 100.0;
                let y = b.spec.curve.point(t).0;
                let (val, g) = b.value_grad(&y).unwrap();
                assert!(val.abs() < 1e-10);
                assert!((g - b.spec.curve.field(t)).norm() < 1e-9, "t = {t}");
            }
        }
    }

    #[test]
    fn zero_field_zero_bump() {
        let b = build_bump(spec(0.0, 0.05, 0.05)).unwrap();
        let (a, c) = b.c1_parts(40, 10).unwrap();
        assert_eq!(a + c, 0.0);
    }

    #[test]
    fn support_confined() {
        let b = build_bump(spec(1.0, 0.0, 0.05)).unwrap();
        for k in 0..=200 {
            let t = k as f64 / 200.0;
            for z in [0.034, 0.05, 0.2, -0.034] {
                let (val, g) = b.value_grad(&v(&[t, z])).unwrap();
                assert_eq!(val, 0.0);
                assert_eq!(g.norm(), 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let b = build_bump(spec(0.8, 0.05, 0.08)).unwrap();
        // Sample the whole support, including the cutoff annulus.
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..9 {
                let t = 0.2 + 0.6 * i as f64 / 29.0;
                let y = b.spec.curve.point(t).0;
                pts.push(v(&[y[0], y[1] - 0.056 + 0.014 * j as f64]));
            }
        }
        let worst = gradient_check(&b, &pts, 1e-5).unwrap();
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn linear_in_field() {
        let b1 = build_bump(spec(0.5, 0.05, 0.05)).unwrap();
        let b2 = build_bump(spec(1.0, 0.05, 0.05)).unwrap();
        let (a1, c1) = b1.c1_parts(60, 12).unwrap();
        let (a2, c2) = b2.c1_parts(60, 12).unwrap();
        assert!(((a2 + c2) / (a1 + c1) - 2.0).abs() < 0.02);
    }

    #[test]
    fn hypothesis_violations_rejected() {
        assert!(build_bump(TubeBumpSpec { mu: 0.2, ..spec(1.0, 0.0, 0.05) }).is_err());
        let steep = TubeBumpSpec { curve: Arc::new(TestCurve { amplitude: 1.0, bend: 0.2, span: 1.0 }), beta: 0.25, mu: 0.05 };
        assert!(matches!(build_bump(steep), Err(GeoError::BumpParameters(_))));
    }

    #[test]
    fn disk_grid_inside_ball() {
        let g = disk_grid(2, 0.5, 10);
        assert!(g.iter().all(|z| z.norm() <= 0.5 + 1e-12));
        assert!(g.len() > 50);
    }
}
