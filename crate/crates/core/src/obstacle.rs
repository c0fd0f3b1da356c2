//! Connecting through a tube that other geodesics cross.
//!
//! The blend is shifted and locally straightened so that it meets the
//! obstacle geodesics only where the control field vanishes. The tube bump
//! is then post-processed so that its gradient along every obstacle is
//! colinear with the obstacle momentum: it is frozen near obstacle
//! crossings, snapped onto the connecting curve near its contacts with the
//! obstacles, and finally made constant along the metric-orthogonal fibers
//! of a thin neighborhood of the obstacles.

use crate::connector::{
    arclength_reparam, blend_curve, check_reference, verify_connection, BlendProfile,
    ConnectOptions, ConnectReport, ConnectingCurve, ConnectingData, GeodesicPatch, ParamCurve, ShiftTerm,
};
use crate::error::{GeoError, Result};
use crate::factor::{ConformalFactor, SupportBox, TubeRegion};
use crate::flow::{FlowOptions, GeodesicArc};
use crate::metric::{MetricField, TangentPoint, Vector};
use crate::reparam::{
    beta_reparam, colinearity_check, verify_perturbed_geodesic, PerturbedGeodesicReport, VerifyOptions,
};
use crate::smooth::cutoff;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

/// Anything with a position jet on an interval.
pub trait CurveJet {
    fn interval(&self) -> (f64, f64);
    fn jet(&self, t: f64) -> (Vector, Vector, Vector);
}

impl CurveJet for GeodesicArc {
    fn interval(&self) -> (f64, f64) {
        (self.start_time(), self.end_time())
    }

    fn jet(&self, t: f64) -> (Vector, Vector, Vector) {
        self.position_jet(t)
    }
}

/// A parametrized curve restricted to [t0, t1].
pub struct CurveWindow<'a> {
    pub curve: &'a dyn ParamCurve,
    pub t0: f64,
    pub t1: f64,
}

impl CurveJet for CurveWindow<'_> {
    fn interval(&self) -> (f64, f64) {
        (self.t0, self.t1)
    }

    fn jet(&self, t: f64) -> (Vector, Vector, Vector) {
        self.curve.jet(t.clamp(self.t0, self.t1))
    }
}

/// A local minimum of |a(t) - b(s)|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Approach {
    pub t: f64,
    pub s: f64,
    pub distance: f64,
    /// Angle in [0, pi/2] between the tangents.
    pub angle: f64,
    pub point: Vector,
}

fn bbox(points: &[Vector]) -> SupportBox {
    let n = points[0].len();
    let mut lo = Vector::from_element(n, f64::INFINITY);
    let mut hi = Vector::from_element(n, f64::NEG_INFINITY);
    for p in points {
        for i in 0..n {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    SupportBox { lo, hi }
}

fn boxes_apart(a: &SupportBox, b: &SupportBox, gap: f64) -> bool {
    (0..a.lo.len()).any(|i| a.lo[i] > b.hi[i] + gap || b.lo[i] > a.hi[i] + gap)
}

fn tangent_angle(u: &Vector, v: &Vector) -> f64 {
    (u.dot(v).abs() / (u.norm() * v.norm())).min(1.0).acos()
}

/// Newton on the squared distance between a(t) and b(s), clamped to the
/// intervals.
fn polish(a: &dyn CurveJet, b: &dyn CurveJet, mut t: f64, mut s: f64) -> (f64, f64) {
    let (a0, a1) = a.interval();
    let (b0, b1) = b.interval();
    for _ in 0..60 {
        let (xa, va, aa) = a.jet(t);
        let (xb, vb, ab) = b.jet(s);
        let f = &xa - &xb;
        let g = [f.dot(&va), -f.dot(&vb)];
        let mut h = [[va.dot(&va) + f.dot(&aa), -va.dot(&vb)], [-va.dot(&vb), vb.dot(&vb) - f.dot(&ab)]];
        let mut det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        if !(det > 0.0 && h[0][0] > 0.0) {
            h = [[va.dot(&va), -va.dot(&vb)], [-va.dot(&vb), vb.dot(&vb)]];
            det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        }
        let (dt, ds) = if det.abs() > 1e-300 {
            ((h[1][1] * g[0] - h[0][1] * g[1]) / det, (h[0][0] * g[1] - h[1][0] * g[0]) / det)
        } else {
            (g[0] / h[0][0].max(1e-300), g[1] / h[1][1].max(1e-300))
        };
        let nt = (t - dt).clamp(a0, a1);
        let ns = (s - ds).clamp(b0, b1);
        let step = (nt - t).abs() + (ns - s).abs();
        t = nt;
        s = ns;
        if step < 1e-15 * (1.0 + t.abs() + s.abs()) {
            break;
        }
    }
    (t, s)
}

/// Equally spaced samples of a curve with their bounding box.
pub struct Sampled<'a> {
    curve: &'a dyn CurveJet,
    times: Vec<f64>,
    points: Vec<Vector>,
    bbox: SupportBox,
    spacing: f64,
}

impl<'a> Sampled<'a> {
    pub fn new(curve: &'a dyn CurveJet, n: usize) -> Sampled<'a> {
        let (a, b) = curve.interval();
        let times: Vec<f64> = (0..=n).map(|k| a + (b - a) * k as f64 / n as f64).collect();
        let points: Vec<Vector> = times.iter().map(|&t| curve.jet(t).0).collect();
        let spacing = points.windows(2).map(|w| (&w[1] - &w[0]).norm()).fold(0.0, f64::max);
        let bbox = bbox(&points);
        Sampled { curve, times, points, bbox, spacing }
    }
}

/// All local minima of the distance between two curves, from `n`-point
/// samplings refined by Newton. Curves whose sample boxes are farther apart
/// than `reach` are skipped.
pub fn closest_approaches(a: &dyn CurveJet, b: &dyn CurveJet, n: usize, reach: f64) -> Vec<Approach> {
    sampled_approaches(&Sampled::new(a, n), &Sampled::new(b, n), reach)
}

/// [`closest_approaches`] on presampled curves.
pub fn sampled_approaches(sa: &Sampled, sb: &Sampled, reach: f64) -> Vec<Approach> {
    let slack = sa.spacing + sb.spacing;
    if boxes_apart(&sa.bbox, &sb.bbox, reach + slack) {
        return Vec::new();
    }
    let (a, b) = (sa.curve, sb.curve);
    let (a0, a1) = a.interval();
    let (b0, b1) = b.interval();
    let (ta, pa, tb, pb) = (&sa.times, &sa.points, &sb.times, &sb.points);
    let n = ta.len() - 1;
    let nearest = nearest_samples(pa, pb, reach + slack);
    let mut out: Vec<Approach> = Vec::new();
    for i in 0..=n {
        let d = nearest[i].0;
        let left = if i > 0 { nearest[i - 1].0 } else { f64::INFINITY };
        let right = if i < n { nearest[i + 1].0 } else { f64::INFINITY };
        if d > left || d > right || d > reach + slack {
            continue;
        }
        let (t, s) = polish(a, b, ta[i], tb[nearest[i].1]);
        let (xa, va, _) = a.jet(t);
        let (xb, vb, _) = b.jet(s);
        let dist = (&xa - &xb).norm();
        if dist > reach {
            continue;
        }
        if out.iter().any(|o| (o.t - t).abs() < 1e-9 * (1.0 + (a1 - a0)) && (o.s - s).abs() < 1e-9 * (1.0 + (b1 - b0))) {
            continue;
        }
        out.push(Approach { t, s, distance: dist, angle: tangent_angle(&va, &vb), point: 0.5 * (xa + xb) });
    }
    out.sort_by(|x, y| x.t.partial_cmp(&y.t).unwrap());
    out
}

/// For each point of `pa`, the nearest point of `pb` and its distance.
/// With a finite `reach` only neighbours within it are found; farther
/// points report infinity.
fn nearest_samples(pa: &[Vector], pb: &[Vector], reach: f64) -> Vec<(f64, usize)> {
    let brute = |p: &Vector| {
        let (d2, j) = pb
            .iter()
            .enumerate()
            .map(|(j, q)| ((p - q).norm_squared(), j))
            .fold((f64::INFINITY, 0), |m, c| if c.0 < m.0 { c } else { m });
        (d2.sqrt(), j)
    };
    if !reach.is_finite() || !(reach > 0.0) {
        return pa.iter().map(brute).collect();
    }
    let cell = |p: &Vector| -> Vec<i64> { p.iter().map(|c| (c / reach).floor() as i64).collect() };
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (j, q) in pb.iter().enumerate() {
        grid.entry(cell(q)).or_default().push(j);
    }
    let dim = pa.first().map_or(0, |p| p.len());
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(dim as u32))
        .map(|mut k| {
            (0..dim)
                .map(|_| {
                    let o = (k % 3) as i64 - 1;
                    k /= 3;
                    o
                })
                .collect()
        })
        .collect();
    pa.iter()
        .map(|p| {
            let c = cell(p);
            let mut best = (f64::INFINITY, 0);
            for o in &offsets {
                let key: Vec<i64> = c.iter().zip(o).map(|(a, b)| a + b).collect();
                for &j in grid.get(&key).map_or(&[][..], |v| v.as_slice()) {
                    let d2 = (p - &pb[j]).norm_squared();
                    if d2 < best.0 {
                        best = (d2, j);
                    }
                }
            }
            let d = best.0.sqrt();
            if d <= reach {
                (d, best.1)
            } else {
                (f64::INFINITY, 0)
            }
        })
        .collect()
}

/// Distance from a point to a curve, by sampling plus Newton.
pub fn distance_to_curve(q: &Vector, c: &dyn CurveJet, n: usize) -> (f64, f64) {
    let (a, b) = c.interval();
    let mut best = (f64::INFINITY, a);
    for k in 0..=n {
        let t = a + (b - a) * k as f64 / n as f64;
        let d = (c.jet(t).0 - q).norm();
        if d < best.0 {
            best = (d, t);
        }
    }
    let mut t = best.1;
    for _ in 0..40 {
        let (x, v, acc) = c.jet(t);
        let r = &x - q;
        let dphi = v.dot(&v) + r.dot(&acc);
        if dphi <= 0.0 {
            break;
        }
        let next = (t - r.dot(&v) / dphi).clamp(a, b);
        let done = (next - t).abs() < 1e-15 * (1.0 + t.abs());
        t = next;
        if done {
            break;
        }
    }
    let d = (c.jet(t).0 - q).norm();
    if d < best.0 {
        (d, t)
    } else {
        best
    }
}

/// The obstacle geodesics c_l, in the same chart as the connecting curve.
#[derive(Debug, Clone, Default)]
pub struct ObstacleSet {
    pub arcs: Vec<GeodesicArc>,
}

impl ObstacleSet {
    pub fn new(arcs: Vec<GeodesicArc>) -> Self {
        ObstacleSet { arcs }
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    /// Largest |c'(s) - c'(s')| over the arc's nodes.
    pub fn velocity_oscillation(arc: &GeodesicArc) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..arc.len() {
            for j in i + 1..arc.len() {
                worst = worst.max((&arc.dx[i] - &arc.dx[j]).norm());
            }
        }
        worst
    }

    /// Endpoints outside the tube, velocity oscillation below 1/8, and no
    /// arc running along either connected geodesic.
    pub fn validate(&self, tube: &TubeRegion, connected: &[&GeodesicArc]) -> Result<()> {
        for (l, arc) in self.arcs.iter().enumerate() {
            for (end, x) in [("start", arc.start().x), ("end", arc.end().x)] {
                if tube.contains(&x) {
                    return Err(GeoError::ObstacleAssumption(format!("arc {l}: {end} point lies inside the tube")));
                }
            }
            let osc = Self::velocity_oscillation(arc);
            if osc >= 0.125 {
                return Err(GeoError::ObstacleAssumption(format!(
                    "arc {l}: velocity oscillation {osc:.4} is not below 1/8"
                )));
            }
            for (m, g) in connected.iter().enumerate() {
                for ap in closest_approaches(arc, *g, 200, 1e-9) {
                    let va = arc.position_jet(ap.t).1;
                    let vb = g.position_jet(ap.s).1;
                    if (va - vb).norm() < 1e-6 {
                        return Err(GeoError::ObstacleAssumption(format!(
                            "arc {l} coincides in phase space with connected geodesic {m}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleOptions {
    /// Smallest accepted crossing angle, radians.
    pub angle_floor: f64,
    pub max_tries: usize,
    pub seed: u64,
    /// Distance below which two curves are taken to intersect.
    pub intersect_tol: f64,
    /// Samples per curve when searching for approaches.
    pub samples: usize,
    /// Half-width of the local geodesic patches, as a fraction of tau.
    pub patch_fraction: f64,
    /// Tolerance for colinearity of the final gradient with obstacle momenta.
    pub colinear_tol: f64,
}

impl Default for ObstacleOptions {
    fn default() -> Self {
        ObstacleOptions {
            angle_floor: 1e-3,
            max_tries: 40,
            seed: 0,
            intersect_tol: 1e-9,
            samples: 400,
            patch_fraction: 1.0 / 40.0,
            colinear_tol: 1e-7,
        }
    }
}

/// Outcome of making the blend transverse to the obstacles.
#[derive(Debug, Clone)]
pub struct Transversal {
    pub curve: ConnectingCurve,
    pub omega: Option<Vector>,
    pub tries: usize,
    /// Curve parameters of the local geodesic patches.
    pub patch_centers: Vec<f64>,
}

/// Intersections of a curve with the obstacle set, as (arc index, approach).
fn intersections(curve: &dyn ParamCurve, obstacles: &ObstacleSet, opts: &ObstacleOptions) -> Vec<(usize, Approach)> {
    let w = CurveWindow { curve, t0: 0.0, t1: curve.span() };
    let mut out = Vec::new();
    for (l, arc) in obstacles.arcs.iter().enumerate() {
        for ap in closest_approaches(&w, arc, opts.samples, opts.intersect_tol) {
            out.push((l, ap));
        }
    }
    out
}

/// Intersections inside the parameter range where the control field may be
/// nonzero.
fn in_support(curve: &dyn ParamCurve, hits: &[(usize, Approach)]) -> bool {
    hits.iter().any(|(_, ap)| !curve.is_geodesic_at(ap.t))
}

pub fn transversalize(
    metric: &dyn MetricField,
    curve: &ConnectingCurve,
    obstacles: &ObstacleSet,
    opts: &ObstacleOptions,
    flow: &FlowOptions,
) -> Result<Transversal> {
    if obstacles.is_empty() {
        return Ok(Transversal { curve: curve.clone(), omega: None, tries: 0, patch_centers: vec![] });
    }
    let tau = curve.profile.tau;
    let n = curve.dim();
    let acceptable = |c: &ConnectingCurve| -> (bool, bool) {
        let hits = intersections(c, obstacles, opts);
        let angles = hits.iter().all(|(_, ap)| ap.angle > opts.angle_floor);
        (angles, angles && !in_support(c, &hits))
    };
    let (ok0, clean0) = acceptable(curve);
    let mut chosen = if clean0 { Some((curve.clone(), None, 0)) } else { None };
    let mut fallback = if ok0 { Some((curve.clone(), None, 0)) } else { None };
    if chosen.is_none() {
        let sep = curve.start.distance(&curve.target).max(1e-12);
        let r0 = 0.1 * sep;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for k in 0..opts.max_tries {
            let mut dir = Vector::zeros(n);
            loop {
                for i in 1..n {
                    dir[i] = rng.random_range(-1.0..1.0);
                }
                let len = dir.norm();
                if len > 1e-3 && len <= 1.0 {
                    dir /= len;
                    break;
                }
            }
            let omega = dir * (r0 * 0.5f64.powi((k / 4) as i32));
            let shift = ShiftTerm { omega: omega.clone(), t1: tau / 4.0, t2: 3.0 * tau / 4.0, nu: tau / 120.0 };
            let c = curve.with_shift(Some(shift));
            let (ok, clean) = acceptable(&c);
            if clean {
                chosen = Some((c, Some(omega), k + 1));
                break;
            }
            if ok && fallback.is_none() {
                fallback = Some((c, Some(omega), k + 1));
            }
        }
    }
    let (base, omega, tries) = match chosen.or(fallback) {
        Some(x) => x,
        None => return Err(GeoError::TransversalityFailed { attempts: opts.max_tries }),
    };
    let hits: Vec<f64> = intersections(&base, obstacles, opts)
        .into_iter()
        .filter(|(_, ap)| !base.is_geodesic_at(ap.t))
        .map(|(_, ap)| ap.t)
        .collect();
    if hits.is_empty() {
        return Ok(Transversal { curve: base, omega, tries, patch_centers: vec![] });
    }
    let mut centers = hits.clone();
    centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    centers.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let mut lam = opts.patch_fraction * tau;
    for w in centers.windows(2) {
        lam = lam.min(0.45 * (w[1] - w[0]));
    }
    for &c in &centers {
        lam = lam.min(0.9 * c).min(0.9 * (tau - c));
    }
    let mut patches = Vec::new();
    for &c in &centers {
        let (x, v, _) = base.jet(c);
        patches.push(GeodesicPatch::new(metric, &x, &v, c, lam, flow)?);
    }
    let patched = base.with_patches(patches);
    let hits = intersections(&patched, obstacles, opts);
    if hits.iter().any(|(_, ap)| ap.angle <= opts.angle_floor) || in_support(&patched, &hits) {
        return Err(GeoError::TransversalityFailed { attempts: tries });
    }
    Ok(Transversal { curve: patched, omega, tries, patch_centers: centers })
}

/// Crossing points, contact times and the cutoff scales derived from them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IntersectionGeometry {
    /// Pairwise obstacle intersections near the tube.
    pub cross_points: Vec<Vector>,
    /// Curve parameters where the connecting curve meets an obstacle.
    pub touch_params: Vec<f64>,
    /// Arclength times of the same contacts.
    pub touch_times: Vec<f64>,
    pub touch_points: Vec<Vector>,
    /// Smallest crossing angle among all intersections.
    #[serde(with = "crate::nonfinite")]
    pub min_angle: f64,
    /// Smallest distance between non-intersecting obstacles near the tube.
    #[serde(with = "crate::nonfinite")]
    pub clearance: f64,
    /// Distance between the obstacles and the curve where the control is on.
    #[serde(with = "crate::nonfinite")]
    pub support_distance: f64,
    pub mu: f64,
    /// Radius of the projection neighborhood around the obstacles.
    pub mu_projection: f64,
}

fn lateral(x: &Vector) -> f64 {
    TubeRegion::lateral(x)
}

/// Parameter intervals where the control field may be nonzero.
fn control_windows(curve: &dyn ParamCurve, n: usize) -> Vec<(f64, f64)> {
    let span = curve.span();
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    for k in 0..=n {
        let t = span * k as f64 / n as f64;
        let on = !curve.is_geodesic_at(t);
        match (on, open) {
            (true, None) => open = Some((t - span / n as f64).max(0.0)),
            (false, Some(a)) => {
                out.push((a, t));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(a) = open {
        out.push((a, span));
    }
    out
}

pub fn intersection_geometry(
    curve: &dyn ParamCurve,
    data: &ConnectingData,
    obstacles: &ObstacleSet,
    rho: f64,
    opts: &ObstacleOptions,
) -> Result<IntersectionGeometry> {
    let mut geo = IntersectionGeometry {
        min_angle: std::f64::consts::FRAC_PI_2,
        clearance: f64::INFINITY,
        support_distance: f64::INFINITY,
        ..Default::default()
    };
    let zone = 2.0 * rho / 3.0 + rho / 6.0;
    let arcs = &obstacles.arcs;
    let sampled: Vec<Sampled> = arcs.iter().map(|a| Sampled::new(a, opts.samples)).collect();
    // mu_projection <= rho / 32, so clearances above rho / 16 never bind.
    let pair_reach = rho / 16.0;
    for i in 0..arcs.len() {
        for j in i + 1..arcs.len() {
            for ap in sampled_approaches(&sampled[i], &sampled[j], pair_reach) {
                if ap.distance < opts.intersect_tol {
                    if lateral(&ap.point) < zone {
                        geo.cross_points.push(ap.point.clone());
                        geo.min_angle = geo.min_angle.min(ap.angle);
                    }
                } else if lateral(&ap.point) < zone + ap.distance {
                    geo.clearance = geo.clearance.min(ap.distance);
                }
            }
        }
    }
    let whole = CurveWindow { curve, t0: 0.0, t1: curve.span() };
    let whole_sampled = Sampled::new(&whole, opts.samples);
    for arc in &sampled {
        for ap in sampled_approaches(&whole_sampled, arc, opts.intersect_tol) {
            geo.touch_params.push(ap.t);
            geo.touch_points.push(curve.jet(ap.t).0);
            geo.min_angle = geo.min_angle.min(ap.angle);
        }
    }
    let mut order: Vec<usize> = (0..geo.touch_params.len()).collect();
    order.sort_by(|&a, &b| geo.touch_params[a].partial_cmp(&geo.touch_params[b]).unwrap());
    geo.touch_params = order.iter().map(|&k| geo.touch_params[k]).collect();
    geo.touch_points = order.iter().map(|&k| geo.touch_points[k].clone()).collect();
    geo.touch_times = geo.touch_params.iter().map(|&t| data.alpha(t)).collect();

    let windows = control_windows(curve, 4000);
    let coarse: Vec<Sampled> = arcs.iter().map(|a| Sampled::new(a, opts.samples / 4 + 8)).collect();
    for (a, b) in &windows {
        let w = CurveWindow { curve, t0: *a, t1: *b };
        let ws = Sampled::new(&w, opts.samples / 4 + 8);
        for arc in &coarse {
            for ap in sampled_approaches(&ws, arc, geo.support_distance) {
                geo.support_distance = geo.support_distance.min(ap.distance);
            }
        }
    }

    let points: Vec<&Vector> = geo.cross_points.iter().chain(geo.touch_points.iter()).collect();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if (points[i] - points[j]).norm() < 1e-6 {
                return Err(GeoError::DegenerateGeometry(
                    "intersections closer than 1e-6; use a smaller tube radius".into(),
                ));
            }
        }
    }

    let mut bound = f64::INFINITY;
    let xs = &geo.cross_points;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            bound = bound.min((&xs[i] - &xs[j]).norm() / 4.0);
        }
        bound = bound.min(distance_to_curve(&xs[i], &whole, 2000).0 / 2.0);
        let edge = if lateral(&xs[i]) < 2.0 * rho / 3.0 { 2.0 * rho / 3.0 } else { rho };
        bound = bound.min((edge - lateral(&xs[i])) / 2.0);
    }
    let ys = &geo.touch_points;
    for k in 0..ys.len() {
        for l in k + 1..ys.len() {
            bound = bound.min((&ys[k] - &ys[l]).norm() / 10.0);
        }
        bound = bound.min((rho / 2.0 - lateral(&ys[k])) / 5.0);
        for (a, b) in &windows {
            let w = CurveWindow { curve, t0: *a, t1: *b };
            bound = bound.min(distance_to_curve(&ys[k], &w, 400).0 / 5.0);
        }
    }
    if !bound.is_finite() {
        bound = rho / 4.0;
    }
    geo.mu = 0.5 * bound;
    if !(geo.mu > 1e-9) {
        return Err(GeoError::NoScale(format!("cutoff radius {:e} is not positive", geo.mu)));
    }
    let mut m4 = 0.25 * geo.mu * geo.min_angle.sin().min(1.0);
    m4 = m4.min(geo.clearance / 2.0).min(geo.support_distance / 2.0);
    geo.mu_projection = m4;
    if !arcs.is_empty() && !(m4 > 1e-10) {
        return Err(GeoError::NoScale(format!("projection radius {m4:e} is not positive")));
    }
    Ok(geo)
}

/// Metric-orthogonal foot point on one obstacle arc.
#[derive(Debug, Clone)]
struct Foot {
    point: Vector,
    vel: Vector,
    /// Gradient of the foot parameter.
    grad_s: Vector,
    dist: f64,
    grad_dist: Vector,
}

/// Coarse positions of an arc for initial guesses.
#[derive(Debug, Clone)]
struct ArcTable {
    times: Vec<f64>,
    points: Vec<Vector>,
    bbox: SupportBox,
    spacing: f64,
}

/// The post-processed factor f = f1 o A2 o A3 o A4.
#[derive(Debug, Clone)]
pub struct ObstacleFactor {
    metric: Arc<dyn MetricField>,
    base: Arc<dyn ConformalFactor>,
    curve: Arc<dyn ParamCurve>,
    arcs: Vec<GeodesicArc>,
    tables: Vec<ArcTable>,
    index: TableIndex,
    cross: Vec<Vector>,
    touch_params: Vec<f64>,
    touch_points: Vec<Vector>,
    mu: f64,
    mu4: f64,
    bbox: Option<SupportBox>,
    tube: Option<TubeRegion>,
}

impl ObstacleFactor {
    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn mu_projection(&self) -> f64 {
        self.mu4
    }

    /// Foot on arc `l`, starting Newton from table entry `best = (d^2, k)`,
    /// the table point nearest to x.
    fn foot(&self, l: usize, x: &Vector, best: (f64, usize)) -> Option<Foot> {
        let arc = &self.arcs[l];
        let tab = &self.tables[l];
        if tab.bbox.distance(x) > self.mu4 || best.0.sqrt() > self.mu4 + tab.spacing {
            return None;
        }
        let (a, b) = (arc.start_time(), arc.end_time());
        let mut s = tab.times[best.1];
        let n = x.len();
        let mut converged = false;
        for _ in 0..50 {
            let (c, v, acc) = arc.position_jet(s);
            let (g, dg) = self.metric.eval(&c);
            let mut m = crate::metric::Matrix::zeros(n, n);
            for j in 0..n {
                m += &dg[j] * v[j];
            }
            let p = &g * &v;
            let dp = &m * &v + &g * &acc;
            let r = x - &c;
            let phi = r.dot(&p);
            let dphi = -v.dot(&p) + r.dot(&dp);
            if dphi >= 0.0 {
                break;
            }
            let next = s - phi / dphi;
            if next < a || next > b {
                return None;
            }
            let done = (next - s).abs() < 1e-15 * (1.0 + s.abs());
            s = next;
            if done {
                converged = true;
                break;
            }
        }
        if !converged {
            return None;
        }
        let (c, v, acc) = arc.position_jet(s);
        let (g, dg) = self.metric.eval(&c);
        let mut m = crate::metric::Matrix::zeros(n, n);
        for j in 0..n {
            m += &dg[j] * v[j];
        }
        let p = &g * &v;
        let dp = &m * &v + &g * &acc;
        let r = x - &c;
        let grad_s = &p / (v.dot(&p) - r.dot(&dp));
        let gr = &g * &r;
        let d2 = r.dot(&gr);
        let dist = d2.max(0.0).sqrt();
        let grad_d2 = &gr * 2.0 + &grad_s * r.dot(&(&m * &r));
        let grad_dist = if dist > 0.0 { grad_d2 / (2.0 * dist) } else { Vector::zeros(n) };
        Some(Foot { point: c, vel: v, grad_s, dist, grad_dist })
    }

    /// Exclusion weight chi: 0 near obstacle crossings and contacts.
    fn chi(&self, x: &Vector) -> (f64, Vector) {
        let n = x.len();
        let mut val = 1.0;
        let mut grad = Vector::zeros(n);
        let centers = self.cross.iter().map(|c| (c, 1.5 * self.mu)).chain(self.touch_points.iter().map(|c| (c, 0.75 * self.mu)));
        for (c, scale) in centers {
            let r = (x - c).norm();
            if r >= scale {
                continue;
            }
            let (psi, dpsi) = cutoff(r / scale);
            let factor = 1.0 - psi;
            let dfac = if r > 0.0 { (x - c) * (-dpsi / (scale * r)) } else { Vector::zeros(n) };
            grad = grad * factor + dfac * val;
            val *= factor;
        }
        (val, grad)
    }

    /// A4(x) plus the weight, its gradient and the foot point when active.
    fn step4(&self, x: &Vector) -> (Vector, Option<(f64, Vector, Foot)>) {
        if self.arcs.is_empty() {
            return (x.clone(), None);
        }
        let mut best: Option<Foot> = None;
        for (l, nearest) in self.index.nearest_per_arc(x) {
            if let Some(f) = self.foot(l, x, nearest) {
                if f.dist < self.mu4 && best.as_ref().is_none_or(|b| f.dist < b.dist) {
                    best = Some(f);
                }
            }
        }
        let Some(foot) = best else { return (x.clone(), None) };
        let (phi, dphi) = cutoff(2.0 * foot.dist / (3.0 * self.mu4));
        if phi == 0.0 {
            return (x.clone(), None);
        }
        let (chi, dchi) = self.chi(x);
        let w = chi * phi;
        if w == 0.0 {
            return (x.clone(), None);
        }
        let grad_w = dchi * phi + &foot.grad_dist * (chi * dphi * 2.0 / (3.0 * self.mu4));
        let y = x + (&foot.point - x) * w;
        (y, Some((w, grad_w, foot)))
    }

    fn step3(&self, x: &Vector) -> (Vector, Option<Snap>) {
        for (q, c) in self.touch_points.iter().enumerate() {
            let r = (x - c).norm();
            if r >= self.mu {
                continue;
            }
            let (h, dh) = cutoff(2.0 * r / (3.0 * self.mu));
            if h == 0.0 {
                return (x.clone(), None);
            }
            let grad_h = if r > 0.0 { (x - c) * (dh * 2.0 / (3.0 * self.mu * r)) } else { Vector::zeros(x.len()) };
            let mut t = self.touch_params[q];
            for _ in 0..50 {
                let (p, v, a) = self.curve.jet(t);
                let rr = x - &p;
                let next = t + rr.dot(&v) / (v.dot(&v) - rr.dot(&a));
                let done = (next - t).abs() < 1e-15 * (1.0 + t.abs());
                t = next;
                if done {
                    break;
                }
            }
            let (p, v, a) = self.curve.jet(t);
            let rr = x - &p;
            let grad_t = &v / (v.dot(&v) - rr.dot(&a));
            let y = x + (&p - x) * h;
            return (y, Some(Snap { h, grad_h, foot: p, grad_t, tangent: v }));
        }
        (x.clone(), None)
    }

    fn step2(&self, x: &Vector) -> (Vector, Option<(f64, Vector, usize)>) {
        for (k, c) in self.cross.iter().enumerate() {
            let r = (x - c).norm();
            if r >= 2.0 * self.mu {
                continue;
            }
            let (psi, dpsi) = cutoff(r / (3.0 * self.mu));
            let grad = if r > 0.0 { (x - c) * (dpsi / (3.0 * self.mu * r)) } else { Vector::zeros(x.len()) };
            return (x + (c - x) * psi, Some((psi, grad, k)));
        }
        (x.clone(), None)
    }
}

/// Step 3 data at one point: weight, its gradient, the Euclidean foot on the
/// connecting curve, the gradient of the foot parameter, and the tangent.
struct Snap {
    h: f64,
    grad_h: Vector,
    foot: Vector,
    grad_t: Vector,
    tangent: Vector,
}

/// Table points of all arcs hashed into cubes of side `cell`.
#[derive(Debug, Clone)]
struct TableIndex {
    cell: f64,
    cells: HashMap<Vec<i64>, Vec<(usize, usize)>>,
    points: Vec<Vec<Vector>>,
    offsets: Vec<Vec<i64>>,
}

impl TableIndex {
    fn new(tables: &[ArcTable], cell: f64) -> TableIndex {
        let dim = tables.first().map_or(0, |t| t.points[0].len());
        let mut cells: HashMap<Vec<i64>, Vec<(usize, usize)>> = HashMap::new();
        for (l, t) in tables.iter().enumerate() {
            for (k, p) in t.points.iter().enumerate() {
                cells.entry(Self::key(p, cell)).or_default().push((l, k));
            }
        }
        let offsets = (0..3usize.pow(dim as u32))
            .map(|mut k| {
                (0..dim)
                    .map(|_| {
                        let o = (k % 3) as i64 - 1;
                        k /= 3;
                        o
                    })
                    .collect()
            })
            .collect();
        TableIndex { cell, cells, points: tables.iter().map(|t| t.points.clone()).collect(), offsets }
    }

    fn key(p: &Vector, cell: f64) -> Vec<i64> {
        p.iter().map(|c| (c / cell).floor() as i64).collect()
    }

    /// For every arc with a table point within one cell of x, the squared
    /// distance and index of its nearest such point, in arc order.
    fn nearest_per_arc(&self, x: &Vector) -> Vec<(usize, (f64, usize))> {
        let c = Self::key(x, self.cell);
        let mut found: Vec<(usize, (f64, usize))> = Vec::new();
        let mut key = c.clone();
        for o in &self.offsets {
            for (i, k) in key.iter_mut().enumerate() {
                *k = c[i] + o[i];
            }
            let Some(entries) = self.cells.get(&key) else { continue };
            for &(l, k) in entries {
                let d: f64 = self.points[l][k].iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                match found.iter_mut().find(|e| e.0 == l) {
                    Some(e) => {
                        if d < e.1 .0 || (d == e.1 .0 && k < e.1 .1) {
                            e.1 = (d, k);
                        }
                    }
                    None => found.push((l, (d, k))),
                }
            }
        }
        found.sort_by_key(|e| e.0);
        found
    }
}

impl ConformalFactor for ObstacleFactor {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn value_grad(&self, x: &Vector) -> Result<(f64, Vector)> {
        if let Some(b) = &self.bbox {
            if !b.contains(x) {
                return Ok((0.0, Vector::zeros(x.len())));
            }
        }
        let (y4, s4) = self.step4(x);
        let (y3, s3) = self.step3(&y4);
        let (y2, s2) = self.step2(&y3);
        let (val, mut g) = self.base.value_grad(&y2)?;
        if let Some((psi, grad, k)) = s2 {
            let c = &self.cross[k];
            g = &g * (1.0 - psi) + grad * (c - &y3).dot(&g);
        }
        if let Some(sn) = s3 {
            g = &g * (1.0 - sn.h) + sn.grad_h * (&sn.foot - &y4).dot(&g) + sn.grad_t * (sn.tangent.dot(&g) * sn.h);
        }
        if let Some((w, gw, foot)) = s4 {
            g = &g * (1.0 - w) + gw * (&foot.point - x).dot(&g) + &foot.grad_s * (foot.vel.dot(&g) * w);
        }
        Ok((val, g))
    }

    fn support(&self) -> Option<SupportBox> {
        self.bbox.clone()
    }

    fn support_tube(&self) -> Option<TubeRegion> {
        self.tube
    }
}

/// Wrap the Step 1 factor with the obstacle post-processing.
pub fn build_obstacle_factor(
    metric: Arc<dyn MetricField>,
    curve: Arc<dyn ParamCurve>,
    base: Arc<dyn ConformalFactor>,
    obstacles: &ObstacleSet,
    geometry: &IntersectionGeometry,
) -> Result<ObstacleFactor> {
    let mu = geometry.mu;
    let mu4 = geometry.mu_projection;
    let tables = obstacles
        .arcs
        .iter()
        .map(|arc| {
            let (a, b) = (arc.start_time(), arc.end_time());
            let times: Vec<f64> = (0..=400).map(|k| a + (b - a) * k as f64 / 400.0).collect();
            let points: Vec<Vector> = times.iter().map(|&t| arc.position(t)).collect();
            let bbox = bbox(&points);
            let spacing = points.windows(2).map(|w| (&w[1] - &w[0]).norm()).fold(0.0, f64::max);
            ArcTable { times, points, bbox, spacing }
        })
        .collect::<Vec<ArcTable>>();
    let widest = tables.iter().map(|t| t.spacing).fold(0.0, f64::max);
    let index = TableIndex::new(&tables, (mu4 + widest).max(f64::MIN_POSITIVE));
    let mut reach = 0.0;
    if !geometry.cross_points.is_empty() {
        reach += 2.0 * mu;
    }
    if !geometry.touch_points.is_empty() {
        reach += mu;
    }
    if !obstacles.is_empty() {
        reach += mu4;
    }
    let bbox = base.support().map(|b| if reach > 0.0 { b.inflate(reach) } else { b });
    Ok(ObstacleFactor {
        metric,
        tube: base.support_tube(),
        base,
        curve,
        arcs: obstacles.arcs.clone(),
        tables,
        index,
        cross: geometry.cross_points.clone(),
        touch_params: geometry.touch_params.clone(),
        touch_points: geometry.touch_points.clone(),
        mu,
        mu4,
        bbox,
    })
}

/// Preservation checks for one obstacle under the final factor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObstacleCheck {
    pub colinearity_residual: f64,
    pub system_residual: f64,
    #[serde(with = "crate::nonfinite")]
    pub hausdorff: f64,
    pub round_trip: f64,
    pub passed: bool,
}

/// Geometry dump and per-obstacle checks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObstacleReport {
    pub omega: Option<Vector>,
    pub shift_tries: usize,
    pub patch_centers: Vec<f64>,
    pub geometry: IntersectionGeometry,
    pub obstacles: Vec<ObstacleCheck>,
}

/// Colinearity, Lemma-3 reparametrization and re-integration of one arc.
pub fn check_obstacle(
    metric: &dyn MetricField,
    f: &dyn ConformalFactor,
    arc: &GeodesicArc,
    colinear_tol: f64,
    verify: &VerifyOptions,
) -> Result<ObstacleCheck> {
    let prof = colinearity_check(f, arc, f64::INFINITY)?;
    let rc = beta_reparam(metric, f, arc)?;
    let rep: PerturbedGeodesicReport = verify_perturbed_geodesic(metric, f, &rc, verify)?;
    Ok(ObstacleCheck {
        colinearity_residual: prof.worst_residual,
        system_residual: rep.system_residual,
        hausdorff: rep.hausdorff,
        round_trip: rep.round_trip,
        passed: prof.worst_residual < colinear_tol && rep.passed,
    })
}

/// A connection built around obstacles.
#[derive(Debug, Clone)]
pub struct ObstacleConnection {
    pub factor: Arc<dyn ConformalFactor>,
    pub base: Arc<dyn ConformalFactor>,
    pub curve: ConnectingCurve,
    pub data: Arc<ConnectingData>,
    pub tube: TubeRegion,
    pub report: ConnectReport,
    pub obstacle_report: ObstacleReport,
}

/// Connect `start` to the time-tau image of `target` while keeping every
/// obstacle geodesic a geodesic up to reparametrization.
#[allow(clippy::too_many_arguments)]
pub fn connect_with_obstacles(
    metric: Arc<dyn MetricField>,
    start: &TangentPoint,
    target: &TangentPoint,
    tau: f64,
    rho: f64,
    obstacles: &ObstacleSet,
    opts: &ConnectOptions,
    obs: &ObstacleOptions,
) -> Result<ObstacleConnection> {
    let profile = BlendProfile::new(tau)?;
    let reference = opts.reference.clone().unwrap_or_else(|| start.clone());
    let (tube, _) = check_reference(metric.as_ref(), &reference, tau, rho, &opts.arc)?;
    let blend = blend_curve(metric.as_ref(), start, target, profile, &reference, opts.delta_bar, &opts.arc)?;
    obstacles.validate(&tube, &[blend.gamma_start(), blend.gamma_target()])?;
    let trans = transversalize(metric.as_ref(), &blend, obstacles, obs, &opts.arc)?;
    let curve = trans.curve.clone();
    let curve_dyn: Arc<dyn ParamCurve> = Arc::new(curve.clone());
    let data = Arc::new(arclength_reparam(metric.clone(), curve_dyn.clone(), opts.quad_tol)?);
    let mut report = crate::connector::curve_report(&data, &curve, opts.samples)?;

    let widest = (0..=opts.samples)
        .map(|k| lateral(&curve.jet(tau * k as f64 / opts.samples as f64).0))
        .fold(0.0, f64::max);
    let room = 2.0 * rho / 3.0 - widest;
    if room <= 0.0 {
        return Err(GeoError::OutsideTube(format!("connecting curve reaches |z| = {widest:.4e} >= 2 rho/3")));
    }
    let mu_w = opts.tube_mu.unwrap_or(rho / 8.0).min(0.75 * room);
    let (base, _) =
        crate::connector::step_one_factor(&data, &curve, metric.dim(), rho, mu_w, opts.samples, &mut report)?;

    let geometry = intersection_geometry(&curve, &data, obstacles, rho, obs)?;
    let factor: Arc<dyn ConformalFactor> = if obstacles.is_empty() {
        base.clone()
    } else {
        Arc::new(build_obstacle_factor(metric.clone(), curve_dyn, base.clone(), obstacles, &geometry)?)
    };
    if let Some(sb) = factor.support() {
        report.support_in_tube = crate::connector::box_lateral_extent(&sb) < rho;
    }
    let expected_end = curve.gamma_target().end();
    verify_connection(metric.as_ref(), factor.as_ref(), &data, start, &expected_end, opts, &mut report)?;

    // The obstacle factor varies on the scale mu_4, so re-integration needs
    // the tighter of the two tolerances.
    let flow = FlowOptions { tol: opts.verify.tol.min(1e-13), max_step: opts.verify.max_step.min(0.005), ..opts.verify };
    let verify = VerifyOptions { flow, ..VerifyOptions::default() };
    let mut checks = Vec::new();
    let mut extra = Vec::new();
    for (l, arc) in obstacles.arcs.iter().enumerate() {
        let c = check_obstacle(metric.as_ref(), factor.as_ref(), arc, obs.colinear_tol, &verify)?;
        if !c.passed {
            extra.push(format!(
                "obstacle {l} not preserved (colinearity {:e}, system {:e}, hausdorff {:e})",
                c.colinearity_residual, c.system_residual, c.hausdorff
            ));
        }
        checks.push(c);
    }
    crate::connector::conclude(&mut report, opts, &extra);
    let obstacle_report = ObstacleReport {
        omega: trans.omega.clone(),
        shift_tries: trans.tries,
        patch_centers: trans.patch_centers.clone(),
        geometry,
        obstacles: checks,
    };
    Ok(ObstacleConnection { factor, base, curve, data, tube, report, obstacle_report })
}
