//! Closing a recurrent geodesic of a periodic metric.
//!
//! Everything after [`align_chart`] happens in chart coordinates y, where
//! the seed sits at the origin with velocity e1 and the lattice of the torus
//! becomes A Z^n. The closed orbit is verified back in torus coordinates
//! with the glued metric e^f g.

use crate::connector::{ConnectOptions, ConnectReport};
use crate::error::{GeoError, Result};
use crate::factor::{ConformalFactor, SupportBox, TubeRegion, ZeroFactor};
use crate::flow::{Flow, FlowOptions, GeodesicArc};
use crate::metric::{Matrix, MetricField, PhasePoint, TangentPoint, Vector};
use crate::obstacle::{
    connect_with_obstacles, IntersectionGeometry, ObstacleCheck, ObstacleOptions, ObstacleSet,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

/// Similarity y = A (x - origin) with A = R / |v|, R a rotation taking
/// v / |v| to e1.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub origin: Vector,
    pub a: Matrix,
    pub b: Matrix,
}

impl Chart {
    /// The chart sending x to 0 and v to e1.
    pub fn aligned(x: &Vector, v: &Vector) -> Result<Chart> {
        let n = x.len();
        let speed = v.norm();
        if !(speed > 0.0) || v.len() != n {
            return Err(GeoError::InvalidInput("chart needs a nonzero velocity of matching dimension".into()));
        }
        let r = rotation_to_e1(&(v / speed));
        let a = &r / speed;
        let b = r.transpose() * speed;
        Ok(Chart { origin: x.clone(), a, b })
    }

    pub fn identity(n: usize) -> Chart {
        Chart { origin: Vector::zeros(n), a: Matrix::identity(n, n), b: Matrix::identity(n, n) }
    }

    pub fn to_chart(&self, tp: &TangentPoint) -> TangentPoint {
        TangentPoint::new(&self.a * (&tp.x - &self.origin), &self.a * &tp.v)
    }

    pub fn from_chart(&self, tp: &TangentPoint) -> TangentPoint {
        TangentPoint::new(&self.origin + &self.b * &tp.x, &self.b * &tp.v)
    }

    pub fn point_from_chart(&self, y: &Vector) -> Vector {
        &self.origin + &self.b * y
    }

    /// Images A e_i of the lattice vectors, as columns.
    pub fn lattice(&self) -> &Matrix {
        &self.a
    }

    /// Lattice vector k with y - A k nearest to `center`.
    pub fn nearest_cell(&self, y: &Vector, center: &Vector) -> Vector {
        (&self.b * (y - center)).map(|c| c.round())
    }
}

/// Rotation R with R u = e1 for a unit vector u, acting in span(u, e1).
fn rotation_to_e1(u: &Vector) -> Matrix {
    let n = u.len();
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    let c = u.dot(&e1);
    if c < -1.0 + 1e-12 {
        let mut r = Matrix::identity(n, n);
        r[(0, 0)] = -1.0;
        r[(1, 1)] = -1.0;
        return r;
    }
    let k = &e1 * u.transpose() - u * e1.transpose();
    Matrix::identity(n, n) + &k + (&k * &k) / (1.0 + c)
}

/// The metric in chart coordinates: G_bar(y) = B^T G(origin + B y) B.
#[derive(Debug, Clone)]
pub struct ChartMetric {
    pub base: Arc<dyn MetricField>,
    pub chart: Chart,
}

impl MetricField for ChartMetric {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, y: &Vector) -> (Matrix, Vec<Matrix>) {
        let b = &self.chart.b;
        let (g, dg) = self.base.eval(&self.chart.point_from_chart(y));
        let bt = b.transpose();
        let gbar = &bt * g * b;
        let n = y.len();
        let dbar = (0..n)
            .map(|i| {
                let mut d = Matrix::zeros(n, n);
                for (j, dj) in dg.iter().enumerate() {
                    d += dj * b[(j, i)];
                }
                &bt * d * b
            })
            .collect();
        (gbar, dbar)
    }

    fn is_periodic(&self) -> bool {
        false
    }
}

/// Sum of the lattice translates of a compactly supported factor.
#[derive(Debug, Clone)]
pub struct PeriodicFactor {
    inner: Arc<dyn ConformalFactor>,
    lattice: Matrix,
    inverse: Matrix,
    sbox: SupportBox,
    center: Vector,
    offsets: Vec<Vector>,
}

impl PeriodicFactor {
    /// Fails unless the support box is disjoint from its translates.
    pub fn new(inner: Arc<dyn ConformalFactor>, lattice: &Matrix) -> Result<PeriodicFactor> {
        let n = inner.dim();
        let inverse = lattice
            .clone()
            .try_inverse()
            .ok_or_else(|| GeoError::InvalidInput("singular lattice".into()))?;
        let sbox = inner.support().ok_or_else(|| GeoError::InvalidInput("factor has unbounded support".into()))?;
        let empty = sbox.lo.iter().zip(sbox.hi.iter()).any(|(l, h)| l > h);
        let center = if empty { Vector::zeros(n) } else { (&sbox.lo + &sbox.hi) * 0.5 };
        let half = if empty { 0.0 } else { (&sbox.hi - &sbox.lo).norm() * 0.5 };
        let reach = (inverse.norm() * half + 0.5 * (n as f64).sqrt()).ceil() as i64;
        let mut offsets = Vec::new();
        for d in lattice_range(n, reach) {
            offsets.push(d);
        }
        let pf = PeriodicFactor { inner, lattice: lattice.clone(), inverse, sbox, center, offsets };
        if !empty && pf.translate_margin() <= 0.0 {
            return Err(GeoError::Assumption("support overlaps one of its lattice translates".into()));
        }
        Ok(pf)
    }

    pub fn inner(&self) -> &Arc<dyn ConformalFactor> {
        &self.inner
    }

    /// Smallest gap between the support box and a nonzero translate of it.
    pub fn translate_margin(&self) -> f64 {
        let size = &self.sbox.hi - &self.sbox.lo;
        let mut best = f64::INFINITY;
        for d in &self.offsets {
            if d.iter().all(|c| *c == 0.0) {
                continue;
            }
            let shift = &self.lattice * d;
            let gap: f64 = shift
                .iter()
                .zip(size.iter())
                .map(|(s, w)| (s.abs() - w).max(0.0).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(gap);
        }
        best
    }
}

fn lattice_range(n: usize, reach: i64) -> Vec<Vector> {
    let mut out = vec![Vector::zeros(n)];
    for i in 0..n {
        let mut next = Vec::new();
        for v in &out {
            for c in -reach..=reach {
                let mut w = v.clone();
                w[i] = c as f64;
                next.push(w);
            }
        }
        out = next;
    }
    out
}

impl ConformalFactor for PeriodicFactor {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value_grad(&self, y: &Vector) -> Result<(f64, Vector)> {
        let k0 = (&self.inverse * (y - &self.center)).map(|c| c.round());
        let mut value = 0.0;
        let mut grad = Vector::zeros(y.len());
        for d in &self.offsets {
            let q = y - &self.lattice * (&k0 + d);
            if self.sbox.contains(&q) {
                let (v, g) = self.inner.value_grad(&q)?;
                value += v;
                grad += g;
            }
        }
        Ok((value, grad))
    }
}

/// e^{f(A(x - origin))} G(x), with f periodized over the chart lattice: the
/// glued metric g~ in torus coordinates.
#[derive(Debug, Clone)]
pub struct PerturbedMetric {
    pub base: Arc<dyn MetricField>,
    pub chart: Chart,
    pub factor: Arc<dyn ConformalFactor>,
}

impl PerturbedMetric {
    /// f at a torus point, with its gradient in torus coordinates.
    pub fn factor_at(&self, x: &Vector) -> Result<(f64, Vector)> {
        let y = &self.chart.a * (x - &self.chart.origin);
        let (f, g) = self.factor.value_grad(&y)?;
        Ok((f, self.chart.a.transpose() * g))
    }
}

impl MetricField for PerturbedMetric {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, x: &Vector) -> (Matrix, Vec<Matrix>) {
        let (g, dg) = self.base.eval(x);
        let n = x.len();
        let (f, grad) = match self.factor_at(x) {
            Ok(v) => v,
            Err(e) => {
                log::error!("conformal factor failed at {x:?}: {e}");
                (f64::NAN, Vector::from_element(n, f64::NAN))
            }
        };
        let ef = f.exp();
        let dgt = dg.iter().enumerate().map(|(i, d)| (d + &g * grad[i]) * ef).collect();
        (g * ef, dgt)
    }

    fn is_periodic(&self) -> bool {
        self.base.is_periodic()
    }
}

/// A chart aligned with the seed, and the closing window tau for which the
/// seed geodesic stays in the 1/10 cone around e1.
#[derive(Debug, Clone)]
pub struct AlignedChart {
    pub chart: Chart,
    pub metric: Arc<ChartMetric>,
    pub tau: f64,
    pub cone_deviation: f64,
    /// Number of times tau was halved.
    pub shrinks: usize,
}

/// Align the seed with (0, e1), halving tau until the cone condition holds
/// on [0, tau] and the geodesic has no self-intersection on [-10 tau, 10 tau].
pub fn align_chart(metric: Arc<dyn MetricField>, tp: &TangentPoint, tau: f64, flow: &FlowOptions) -> Result<AlignedChart> {
    check_seed(metric.as_ref(), tp)?;
    let chart = Chart::aligned(&tp.x, &tp.v)?;
    let cm = Arc::new(ChartMetric { base: metric, chart: chart.clone() });
    let n = cm.dim();
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    let zero = ZeroFactor::new(n);
    let fl = Flow::new(cm.as_ref(), &zero, *flow);
    let start = PhasePoint::new(Vector::zeros(n), cm.matrix(&Vector::zeros(n)) * &e1);
    let mut tau = tau;
    let mut shrinks = 0;
    loop {
        if !(tau >= 1e-3) {
            return Err(GeoError::Assumption(format!("geometry too curved: closing window shrank to {tau:e}")));
        }
        let arc = fl.integrate(&start, tau)?;
        let cone = arc.dx.iter().map(|d| (d - &e1).norm()).fold(0.0, f64::max);
        if cone <= 0.1 && !self_intersects(&fl, &start, tau, &chart)? {
            return Ok(AlignedChart { chart, metric: cm, tau, cone_deviation: cone, shrinks });
        }
        tau *= 0.5;
        shrinks += 1;
    }
}

fn check_seed(metric: &dyn MetricField, tp: &TangentPoint) -> Result<()> {
    let n2 = tp.v.dot(&(metric.matrix(&tp.x) * &tp.v));
    if (n2 - 1.0).abs() > 1e-10 {
        return Err(GeoError::NotUnit { norm_sq: n2 });
    }
    Ok(())
}

/// Whether the geodesic on [-10 tau, 10 tau] meets itself on the torus.
/// Samples are hashed into torus cells; polyline segments in neighboring
/// cells are tested for contact.
fn self_intersects(fl: &Flow, start: &PhasePoint, tau: f64, chart: &Chart) -> Result<bool> {
    let back = fl.advance(start, -10.0 * tau)?;
    let arc = fl.integrate(&back, 20.0 * tau)?;
    let h = 0.005f64.min(tau / 4.0);
    let count = (20.0 * tau / h).ceil() as usize;
    let pts: Vec<Vector> = (0..=count)
        .map(|k| chart.point_from_chart(&arc.position(arc.start_time() + 20.0 * tau * k as f64 / count as f64)))
        .collect();
    let cell_size = 4.0 * h * chart.b.norm().max(1.0);
    let key = |x: &Vector| -> Vec<i64> { x.iter().map(|c| ((c - c.floor()) / cell_size).floor() as i64).collect() };
    let mut cells: std::collections::HashMap<Vec<i64>, Vec<usize>> = std::collections::HashMap::new();
    for (i, p) in pts.iter().enumerate().take(count) {
        cells.entry(key(p)).or_default().push(i);
    }
    for (i, p) in pts.iter().enumerate().take(count) {
        let base = key(p);
        for nb in neighbor_keys(&base) {
            let Some(list) = cells.get(&nb) else { continue };
            for &j in list {
                if j <= i + 2 {
                    continue;
                }
                let shift = (&pts[j] - p).map(|c| c.round());
                let (q0, q1) = (&pts[j] - &shift, &pts[j + 1] - &shift);
                if segment_distance(p, &pts[i + 1], &q0, &q1) < 1e-10 {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

fn neighbor_keys(k: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for c in k {
        let mut next = Vec::new();
        for v in &out {
            for d in -1..=1 {
                let mut w = v.clone();
                w.push(c + d);
                next.push(w);
            }
        }
        out = next;
    }
    out
}

/// Euclidean distance between the segments [p0, p1] and [q0, q1].
fn segment_distance(p0: &Vector, p1: &Vector, q0: &Vector, q1: &Vector) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let (a, e, f) = (d1.dot(&d1), d2.dot(&d2), d2.dot(&r));
    let c = d1.dot(&r);
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-300 { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
    let mut t = if e > 0.0 { (b * s + f) / e } else { 0.0 };
    if t < 0.0 {
        t = 0.0;
        s = if a > 0.0 { (-c / a).clamp(0.0, 1.0) } else { 0.0 };
    } else if t > 1.0 {
        t = 1.0;
        s = if a > 0.0 { ((b - c) / a).clamp(0.0, 1.0) } else { 0.0 };
    }
    (p0 + d1 * s - (q0 + d2 * t)).norm()
}

const EXACT_GAP_FLOOR: f64 = 1e-12;

/// Which recurrence to keep among those below the target gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceChoice {
    /// Smallest gap over the whole search.
    BestGap,
    /// Shortest return time with gap below the target.
    Earliest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecurrenceOptions {
    pub max_time: f64,
    pub target_gap: f64,
    /// Crossings farther than this from the seed, in position or velocity
    /// (chart coordinates), are ignored.
    pub window: f64,
    pub min_return: f64,
    pub choice: RecurrenceChoice,
}

impl Default for RecurrenceOptions {
    fn default() -> Self {
        RecurrenceOptions {
            max_time: 5e3,
            target_gap: 1e-2,
            window: 0.02,
            min_return: 1.0,
            choice: RecurrenceChoice::BestGap,
        }
    }
}

/// Two crossings of the section near the seed, the second the time-T image
/// of the first. Points are in chart coordinates, reduced by the lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrencePair {
    pub first: TangentPoint,
    pub second: TangentPoint,
    pub return_time: f64,
    pub gap: f64,
    /// Time of the first crossing along the seed orbit.
    pub first_time: f64,
    /// Lattice vector k with phi_T(first) = second + A k.
    pub cell: Vec<f64>,
    /// Crossings inside the window found during the search.
    pub candidates: usize,
}

#[derive(Debug, Clone)]
struct Crossing {
    time: f64,
    point: TangentPoint,
}

/// Search the seed orbit for section crossings near the seed and pick a
/// pair; the pair is then re-integrated so that the second crossing is the
/// exact flow image of the first.
pub fn find_recurrence(
    metric: &dyn MetricField,
    chart: &Chart,
    seed: &TangentPoint,
    opts: &RecurrenceOptions,
    flow: &FlowOptions,
) -> Result<RecurrencePair> {
    let n = metric.dim();
    let zero = ZeroFactor::new(n);
    let fl = Flow::new(metric, &zero, *flow);
    let start = fl.to_phase(seed)?;
    let arc = fl.integrate(&start, opts.max_time)?;
    let crossings = window_crossings(&arc, chart, &seed.x, opts.window);
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    let mut best: Option<(f64, f64, usize, usize)> = None;
    let mut best_any = (f64::INFINITY, 0.0);
    for i in 0..crossings.len() {
        for j in i + 1..crossings.len() {
            let t = crossings[j].time - crossings[i].time;
            if t < opts.min_return {
                continue;
            }
            let gap = crossings[i].point.distance(&crossings[j].point);
            if gap < best_any.0 {
                best_any = (gap, t);
            }
            if gap > opts.target_gap {
                continue;
            }
            let better = match (best, opts.choice) {
                (None, _) => true,
                // Gaps at round-off level are ties; the earlier return wins.
                (Some((g, bt, _, _)), RecurrenceChoice::BestGap) => {
                    if g.max(gap) <= EXACT_GAP_FLOOR {
                        t < bt
                    } else {
                        gap < g
                    }
                }
                (Some((g, bt, _, _)), RecurrenceChoice::Earliest) => t < bt || (t == bt && gap < g),
            };
            if better {
                best = Some((gap, t, i, j));
            }
        }
    }
    let (_, t_guess, i, j) =
        best.ok_or(GeoError::RecurrenceNotFound { best_gap: best_any.0, best_time: best_any.1 })?;
    let first = crossings[i].point.clone();
    let first_time = crossings[i].time;
    let lifted = arc.position(crossings[j].time);
    let cell = chart.nearest_cell(&lifted, &seed.x) - chart.nearest_cell(&arc.position(first_time), &seed.x);
    let (second, return_time) = return_crossing(&fl, chart, &first, &cell, t_guess, 1e-2)?;
    let gap = first.distance(&second);
    if gap > opts.target_gap {
        return Err(GeoError::RecurrenceNotFound { best_gap: gap, best_time: return_time });
    }
    Ok(RecurrencePair {
        first,
        second,
        return_time,
        gap,
        first_time,
        cell: cell.iter().cloned().collect(),
        candidates: crossings.len(),
    })
}

/// Crossings of the translates y_1 = (A k)_1 of the section, with the
/// reduced point within `window` of `center` and velocity within `window`
/// of e1.
fn window_crossings(arc: &GeodesicArc, chart: &Chart, center: &Vector, window: f64) -> Vec<Crossing> {
    let n = arc.dim();
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    let mut out = Vec::new();
    for i in 0..arc.len().saturating_sub(1) {
        let k = chart.nearest_cell(&arc.x[i], center);
        let shift = chart.lattice() * &k;
        let step = (&arc.x[i + 1] - &arc.x[i]).norm();
        if (&arc.x[i] - &shift - center).norm() > window + 2.0 * step {
            continue;
        }
        let Some(t) = arc.root_in_interval(i, &e1, shift[0] + center[0]) else { continue };
        if out.last().is_some_and(|c: &Crossing| (c.time - t).abs() < 1e-9) {
            continue;
        }
        let (x, v, _) = arc.position_jet(t);
        let y = x - &shift;
        if v[0] <= 0.0 || (&y - center).norm() >= window || (&v - &e1).norm() >= window {
            continue;
        }
        out.push(Crossing { time: t, point: TangentPoint::new(y, v) });
    }
    out
}

/// Flow `first` for about `t_guess` and locate the return to the section
/// translate A `cell`, within `slack` of the guess.
fn return_crossing(
    fl: &Flow,
    chart: &Chart,
    first: &TangentPoint,
    cell: &Vector,
    t_guess: f64,
    slack: f64,
) -> Result<(TangentPoint, f64)> {
    let n = first.x.len();
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    let shift = chart.lattice() * cell;
    let offset = shift[0] + first.x[0];
    let arc = fl.integrate(&fl.to_phase(first)?, t_guess + slack)?;
    for i in 0..arc.len() - 1 {
        if arc.times[i + 1] < t_guess - slack {
            continue;
        }
        if let Some(t) = arc.root_in_interval(i, &e1, offset) {
            if (t - t_guess).abs() > slack {
                continue;
            }
            let ev = fl.refine_crossing(&arc, i, t, &e1, offset)?;
            let tp = fl.to_tangent(&ev.state)?;
            return Ok((TangentPoint::new(&tp.x - &shift, tp.v), ev.time));
        }
    }
    Err(GeoError::Assumption(format!("return to the section near t = {t_guess:.6} not found")))
}

/// Time interval of the orbit of `first` that runs through the tube,
/// extended to end outside it, and the lattice cell of the visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleInterval {
    pub start: f64,
    pub end: f64,
    pub cell: Vec<f64>,
}

/// Sub-arcs of the orbit of the first recurrence point over
/// [5 tau, T - 5 tau] that pass through R(rho/2), translated back by the
/// lattice. Each arc is extended until it leaves the box
/// [t_min - rho, t_max + rho] x B(0, rho).
pub fn collect_obstacles(
    orbit: &GeodesicArc,
    chart: &Chart,
    tube: &TubeRegion,
    tau: f64,
    return_time: f64,
) -> Result<(ObstacleSet, Vec<ObstacleInterval>)> {
    let rho = tube.radius;
    let n = orbit.dim();
    let mut center = Vector::zeros(n);
    center[0] = 0.5 * (tube.t_min + tube.t_max);
    let inner = tube.with_radius(0.5 * rho);
    let outer = |q: &Vector| {
        q[0] >= tube.t_min - rho && q[0] <= tube.t_max + rho && TubeRegion::lateral(q) < rho
    };
    let (lo, hi) = (5.0 * tau, return_time - 5.0 * tau);
    let mut visits: Vec<ObstacleInterval> = Vec::new();
    if hi <= lo {
        return Ok((ObstacleSet::default(), visits));
    }
    let h = (rho / 8.0).min(0.01);
    let count = ((hi - lo) / h).ceil() as usize;
    let at = |t: f64, k: &Vector| orbit.position(t) - chart.lattice() * k;
    let mut k = 0;
    while k <= count {
        let t = lo + (hi - lo) * k as f64 / count as f64;
        let y = orbit.position(t);
        let cell = chart.nearest_cell(&y, &center);
        let q = &y - chart.lattice() * &cell;
        if !inner.contains(&q) {
            k += 1;
            continue;
        }
        let mut a = t;
        while outer(&at(a, &cell)) {
            a -= h;
            if a < orbit.start_time() {
                return Err(GeoError::ObstacleAssumption(format!("visit near t = {t:.4} reaches the orbit start")));
            }
        }
        let mut b = t;
        while outer(&at(b, &cell)) {
            b += h;
            if b > orbit.end_time() {
                return Err(GeoError::ObstacleAssumption(format!("visit near t = {t:.4} reaches the orbit end")));
            }
        }
        let cell_vec: Vec<f64> = cell.iter().cloned().collect();
        match visits.last_mut() {
            Some(last) if last.cell == cell_vec && a <= last.end => last.end = last.end.max(b),
            _ => visits.push(ObstacleInterval { start: a, end: b, cell: cell_vec }),
        }
        while k <= count && lo + (hi - lo) * k as f64 / count as f64 <= b {
            k += 1;
        }
    }
    let mut arcs = Vec::with_capacity(visits.len());
    for v in &visits {
        let i0 = orbit.interval(v.start);
        let i1 = (orbit.interval(v.end) + 1).min(orbit.len() - 1);
        let shift = -(chart.lattice() * Vector::from_column_slice(&v.cell));
        arcs.push(orbit.slice(i0, i1, &shift, orbit.times[i0]));
    }
    Ok((ObstacleSet::new(arcs), visits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloseOptions {
    pub tau: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub closure_tol: f64,
    /// Half-width of the window in which the period is polished.
    pub polish_window: f64,
    /// Gaps below this are treated as an exact recurrence.
    pub exact_gap: f64,
    /// Number of times rho may be halved when an assumption fails.
    pub max_adjustments: usize,
    /// Integration of the long orbit and of the closed-orbit check.
    pub orbit: FlowOptions,
    pub recurrence: RecurrenceOptions,
}

impl Default for CloseOptions {
    fn default() -> Self {
        CloseOptions {
            tau: 1.0 / 40.0,
            rho: 0.05,
            epsilon: 0.05,
            closure_tol: 1e-5,
            polish_window: 1e-3,
            exact_gap: 1e-13,
            max_adjustments: 10,
            orbit: FlowOptions { tol: 1e-12, max_step: 0.02, energy_tol: 1e-8, ..Default::default() },
            recurrence: RecurrenceOptions::default(),
        }
    }
}

/// Residuals certifying the closed orbit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosingResiduals {
    /// Phase-space distance between the periodic point and its image after
    /// one period (torus coordinates, reduced by the lattice).
    #[serde(with = "crate::nonfinite")]
    pub periodicity: f64,
    /// The same after two periods.
    #[serde(with = "crate::nonfinite")]
    pub second_period: f64,
    /// Connection endpoint residual in chart coordinates.
    #[serde(with = "crate::nonfinite")]
    pub endpoint: f64,
    /// Largest Hausdorff distance of a re-integrated obstacle arc.
    #[serde(with = "crate::nonfinite")]
    pub obstacle_hausdorff: f64,
    pub obstacle_system: f64,
    pub obstacle_round_trip: f64,
    pub obstacle_colinearity: f64,
    /// Orbit samples outside the connection and the obstacle arcs where
    /// f is nonzero.
    pub uncovered_support: usize,
    /// Distance between the support box and its nearest lattice translate.
    #[serde(with = "crate::nonfinite")]
    pub translate_margin: f64,
}

/// Everything measured by [`close_orbit`]. Times are kept in [`Timings`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosingReport {
    pub recurrence: Option<RecurrencePair>,
    pub gap: f64,
    pub tau: f64,
    pub rho: f64,
    pub tau_tilde: f64,
    pub period: f64,
    /// tau~ + T - tau, before polishing.
    pub predicted_period: f64,
    pub periodic_point: Option<TangentPoint>,
    /// d_TM between the seed and the periodic point.
    #[serde(with = "crate::nonfinite")]
    pub displacement: f64,
    pub residuals: ClosingResiduals,
    pub f_c0_norm: f64,
    pub f_c1_norm: f64,
    pub epsilon: f64,
    pub obstacle_count: usize,
    pub obstacles: Vec<ObstacleCheck>,
    pub obstacle_intervals: Vec<ObstacleInterval>,
    pub geometry: Option<IntersectionGeometry>,
    pub omega: Option<Vector>,
    pub connection: Option<ConnectReport>,
    pub rho_adjustments: usize,
    pub tau_shrinks: usize,
    /// The connection runs from the return point to the time-tau image of
    /// the first point.
    pub orientation: String,
    pub closed: bool,
    pub failure: Option<String>,
}

impl ClosingReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ClosingReport> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    fn record(&mut self, stage: &str, since: Instant) {
        self.stages.push((stage.to_string(), since.elapsed().as_secs_f64()));
    }

    pub fn total(&self) -> f64 {
        self.stages.iter().map(|s| s.1).sum()
    }
}

/// Output of [`close_orbit`].
#[derive(Debug, Clone)]
pub struct ClosedOrbit {
    pub chart: Chart,
    /// The glued metric e^f g in torus coordinates.
    pub metric: Arc<PerturbedMetric>,
    pub periodic_point: TangentPoint,
    pub period: f64,
    pub report: ClosingReport,
    pub timings: Timings,
    /// Closed orbit over one period, torus coordinates.
    pub orbit: Option<GeodesicArc>,
}

fn stage<T>(r: Result<T>, name: &str) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Close the geodesic through `seed` by a conformal perturbation supported
/// in a tube around its first tau units.
pub fn close_orbit(
    metric: Arc<dyn MetricField>,
    seed: &TangentPoint,
    opts: &CloseOptions,
    connect: &ConnectOptions,
    obstacle: &ObstacleOptions,
) -> Result<ClosedOrbit> {
    if !metric.is_periodic() {
        return Err(GeoError::InvalidInput("closing needs a periodic metric".into()));
    }
    let n = metric.dim();
    let mut timings = Timings::default();
    let mut report = ClosingReport {
        epsilon: opts.epsilon,
        orientation: "return_point_to_image_of_first".into(),
        ..Default::default()
    };

    let clock = Instant::now();
    let aligned = stage(align_chart(metric.clone(), seed, opts.tau, &connect.arc), "align_chart")?;
    timings.record("align_chart", clock);
    let chart = aligned.chart.clone();
    let cm: Arc<dyn MetricField> = aligned.metric.clone();
    let tau = aligned.tau;
    report.tau = tau;
    report.tau_shrinks = aligned.shrinks;

    let clock = Instant::now();
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    let origin = TangentPoint::new(Vector::zeros(n), e1.clone());
    let pair = stage(find_recurrence(cm.as_ref(), &chart, &origin, &opts.recurrence, &opts.orbit), "find_recurrence")?;
    timings.record("find_recurrence", clock);
    report.gap = pair.gap;
    report.recurrence = Some(pair.clone());

    let zero = ZeroFactor::new(n);
    let fl = Flow::new(cm.as_ref(), &zero, opts.orbit);
    let exact = pair.gap <= opts.exact_gap;

    let clock = Instant::now();
    let orbit = stage(fl.integrate(&fl.to_phase(&pair.first)?, pair.return_time), "collect_obstacles")?;
    let mut rho = opts.rho;
    let mut adjustments = 0;
    let (_tube, obstacles, intervals) = loop {
        let attempt = (|| -> Result<_> {
            let (tube, _) = crate::connector::check_reference(cm.as_ref(), &origin, tau, rho, &connect.arc)?;
            let (set, intervals) = collect_obstacles(&orbit, &chart, &tube, tau, pair.return_time)?;
            set.validate(&tube, &[])?;
            Ok((tube, set, intervals))
        })();
        match attempt {
            Ok(v) => break v,
            Err(e) if adjustments < opts.max_adjustments => {
                log::info!("rho = {rho:e} rejected ({e}); halving");
                rho *= 0.5;
                adjustments += 1;
            }
            Err(e) => return Err(e.in_stage("collect_obstacles")),
        }
    };
    timings.record("collect_obstacles", clock);
    report.rho = rho;
    report.rho_adjustments = adjustments;
    report.obstacle_count = obstacles.len();
    report.obstacle_intervals = intervals.clone();

    let clock = Instant::now();
    let (inner, start_chart, tau_tilde): (Arc<dyn ConformalFactor>, TangentPoint, f64) = if exact {
        (Arc::new(ZeroFactor::new(n)), pair.first.clone(), tau)
    } else {
        let copts = ConnectOptions { reference: Some(origin.clone()), ..connect.clone() };
        let c = stage(
            connect_with_obstacles(cm.clone(), &pair.second, &pair.first, tau, rho, &obstacles, &copts, obstacle),
            "connect",
        )?;
        let r = &c.obstacle_report;
        report.residuals.endpoint = c.report.endpoint_residual;
        for o in &r.obstacles {
            report.residuals.obstacle_hausdorff = report.residuals.obstacle_hausdorff.max(o.hausdorff);
            report.residuals.obstacle_system = report.residuals.obstacle_system.max(o.system_residual);
            report.residuals.obstacle_round_trip = report.residuals.obstacle_round_trip.max(o.round_trip);
            report.residuals.obstacle_colinearity = report.residuals.obstacle_colinearity.max(o.colinearity_residual);
        }
        report.obstacles = r.obstacles.clone();
        report.geometry = Some(r.geometry.clone());
        report.omega = r.omega.clone();
        if !c.report.verified {
            report.failure = c.report.failure.clone();
        }
        let tt = c.report.tau_tilde;
        report.connection = Some(c.report);
        (c.factor, pair.second.clone(), tt)
    };
    timings.record("connect", clock);
    report.tau_tilde = tau_tilde;

    let clock = Instant::now();
    let periodic = stage(PeriodicFactor::new(inner, chart.lattice()), "glue")?;
    report.residuals.translate_margin = periodic.translate_margin();
    let (c0, c1) = factor_norms(&periodic, &chart)?;
    report.f_c0_norm = c0;
    report.f_c1_norm = c1;
    report.residuals.uncovered_support =
        uncovered_support(&periodic, &orbit, &intervals, tau, pair.return_time)?;
    timings.record("glue", clock);
    let periodic = Arc::new(periodic);
    let glued = Arc::new(PerturbedMetric { base: metric.clone(), chart: chart.clone(), factor: periodic.clone() });

    let clock = Instant::now();
    let periodic_point = chart.from_chart(&start_chart);
    report.periodic_point = Some(periodic_point.clone());
    report.displacement = torus_distance(seed, &periodic_point);
    report.predicted_period = tau_tilde + pair.return_time - tau;
    let check = stage(
        periodicity_check(glued.as_ref(), &chart, &periodic_point, report.predicted_period, opts),
        "verify_closed_orbit",
    );
    timings.record("verify_closed_orbit", clock);
    let mut orbit_out = None;
    match check {
        Ok((period, r1, r2, arc)) => {
            report.period = period;
            report.residuals.periodicity = r1;
            report.residuals.second_period = r2;
            orbit_out = Some(arc);
        }
        Err(e) => {
            report.residuals.periodicity = f64::INFINITY;
            report.residuals.second_period = f64::INFINITY;
            push_failure(&mut report, e.to_string());
        }
    }
    conclude(&mut report, opts);
    Ok(ClosedOrbit {
        chart,
        metric: glued,
        periodic_point,
        period: report.period,
        report,
        timings,
        orbit: orbit_out,
    })
}

fn push_failure(report: &mut ClosingReport, msg: String) {
    report.failure = Some(match report.failure.take() {
        Some(prev) => format!("{prev}; {msg}"),
        None => msg,
    });
}

fn conclude(report: &mut ClosingReport, opts: &CloseOptions) {
    let mut msgs = Vec::new();
    let r = &report.residuals;
    if !(r.periodicity < opts.closure_tol) {
        msgs.push(format!("periodicity residual {:e} above {:e}", r.periodicity, opts.closure_tol));
    }
    if !(r.second_period < 10.0 * opts.closure_tol) {
        msgs.push(format!("second-period residual {:e} above {:e}", r.second_period, 10.0 * opts.closure_tol));
    }
    if !(report.f_c1_norm < opts.epsilon) {
        msgs.push(format!("|f|_C1 = {:e} not below epsilon {:e}", report.f_c1_norm, opts.epsilon));
    }
    if !(report.displacement < opts.epsilon) {
        msgs.push(format!("displacement {:e} not below epsilon {:e}", report.displacement, opts.epsilon));
    }
    if !(r.obstacle_hausdorff < 1e-6) {
        msgs.push(format!("obstacle Hausdorff distance {:e} above 1e-6", r.obstacle_hausdorff));
    }
    if r.uncovered_support > 0 {
        msgs.push(format!("{} orbit samples meet the support outside the obstacle arcs", r.uncovered_support));
    }
    if !(r.translate_margin >= report.rho / 10.0) {
        msgs.push(format!("support margin {:e} below rho/10", r.translate_margin));
    }
    for m in msgs {
        push_failure(report, m);
    }
    report.closed = report.failure.is_none();
}

/// Euclidean phase-space distance on the torus cover, reduced by the lattice.
pub fn torus_distance(a: &TangentPoint, b: &TangentPoint) -> f64 {
    let dx = (&b.x - &a.x).map(|c| c - c.round());
    (dx.norm_squared() + (&b.v - &a.v).norm_squared()).sqrt()
}

/// sup |f| and sup |f| + sup |grad f| in torus coordinates, sampled on a
/// grid over the support box.
pub fn factor_norms(f: &PeriodicFactor, chart: &Chart) -> Result<(f64, f64)> {
    let sb = &f.sbox;
    let n = sb.lo.len();
    if sb.lo.iter().zip(sb.hi.iter()).any(|(l, h)| l > h) {
        return Ok((0.0, 0.0));
    }
    let per_axis: Vec<usize> =
        (0..n).map(|i| if i == 0 { 400 } else { (200f64).powf(1.0 / (n - 1) as f64).ceil() as usize }).collect();
    let at = chart.a.transpose();
    let (mut c0, mut c1) = (0.0f64, 0.0f64);
    let mut idx = vec![0usize; n];
    loop {
        let y = Vector::from_iterator(
            n,
            (0..n).map(|i| sb.lo[i] + (sb.hi[i] - sb.lo[i]) * idx[i] as f64 / per_axis[i] as f64),
        );
        let (v, g) = f.inner.value_grad(&y)?;
        c0 = c0.max(v.abs());
        c1 = c1.max((&at * g).norm());
        let mut d = 0;
        loop {
            if d == n {
                return Ok((c0, c0 + c1));
            }
            idx[d] += 1;
            if idx[d] <= per_axis[d] {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Samples of the orbit on [tau, T] outside every obstacle interval where
/// f does not vanish.
fn uncovered_support(
    f: &PeriodicFactor,
    orbit: &GeodesicArc,
    intervals: &[ObstacleInterval],
    tau: f64,
    return_time: f64,
) -> Result<usize> {
    let count = ((return_time - tau) / 0.005).ceil() as usize;
    let mut hits = 0;
    for k in 0..=count {
        let t = tau + (return_time - tau) * k as f64 / count.max(1) as f64;
        if intervals.iter().any(|iv| t >= iv.start && t <= iv.end) {
            continue;
        }
        let (v, g) = f.value_grad(&orbit.position(t))?;
        if v != 0.0 || g.amax() != 0.0 {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Integrate the glued metric from the periodic point for about two
/// periods, polish the period on the section, and measure the residuals.
fn periodicity_check(
    glued: &PerturbedMetric,
    chart: &Chart,
    point: &TangentPoint,
    predicted: f64,
    opts: &CloseOptions,
) -> Result<(f64, f64, f64, GeodesicArc)> {
    let zero = ZeroFactor::new(point.x.len());
    let fl = Flow::new(glued, &zero, opts.orbit);
    let normal = chart.a.row(0).transpose();
    let offset = normal.dot(&point.x);
    let w = opts.polish_window;
    let arc = fl.integrate(&fl.to_phase(point)?, 2.0 * predicted + 2.0 * w)?;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for round in 0..2 {
        let target = if round == 0 { predicted } else { 2.0 * out[0].0 };
        let lift = arc.position(target);
        let cell = (&lift - &point.x).map(|c| c.round());
        let off = offset + normal.dot(&cell);
        let mut found = None;
        for i in arc.interval(target - w)..arc.len() - 1 {
            if arc.times[i] > target + w {
                break;
            }
            if let Some(t) = arc.root_in_interval(i, &normal, off) {
                if (t - target).abs() <= w {
                    found = Some(fl.refine_crossing(&arc, i, t, &normal, off)?);
                    break;
                }
            }
        }
        let ev = found.ok_or_else(|| {
            GeoError::ClosureFailed { residual: f64::INFINITY, tol: opts.closure_tol }
        })?;
        let tp = fl.to_tangent(&ev.state)?;
        let back = TangentPoint::new(&tp.x - &cell, tp.v);
        out.push((ev.time, point.distance(&back)));
    }
    let i1 = arc.interval(out[0].0);
    let one = arc.slice(0, (i1 + 1).min(arc.len() - 1), &Vector::zeros(point.x.len()), 0.0);
    Ok((out[0].0, out[0].1, out[1].1, one))
}
