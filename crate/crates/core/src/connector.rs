//! Connecting two nearby unit-speed geodesics through a thin tube.
//!
//! The two geodesics are blended into a curve X on [0, tau], reparametrized
//! by arclength into x~ on [0, tau~], and the defect of x~ from being a
//! geodesic is collected into a control field u~. A tube bump with gradient
//! u~ along x~ then makes x~ a geodesic of e^f g.

use crate::error::{GeoError, Result};
use crate::factor::{ConformalFactor, SupportBox, TubeRegion, ZeroFactor};
use crate::flow::{Flow, FlowOptions, GeodesicArc};
use crate::interp;
use crate::metric::{phase_jet, MetricField, PhasePoint, TangentPoint, Vector};
use crate::ode::{self, OdeOptions};
use crate::quad;
use crate::smooth::{outer_window, ramp};
use crate::tube_bump::{build_bump, TubeBump, TubeBumpSpec, TubeCurve};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::io::Write;
use std::sync::Arc;

/// A parametrized curve with two analytic derivatives.
pub trait ParamCurve: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Parameter interval is [0, span].
    fn span(&self) -> f64;

    /// Position, first and second derivative.
    fn jet(&self, t: f64) -> (Vector, Vector, Vector);

    /// Parameters across which the curve is only finitely smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Whether the curve coincides with a geodesic near t (so the control
    /// field is exactly zero there).
    fn is_geodesic_at(&self, _t: f64) -> bool {
        false
    }

    /// Parameter interval outside of which `is_geodesic_at` holds.
    fn control_support(&self) -> (f64, f64) {
        (0.0, self.span())
    }
}

/// Blend weight psi on [0, tau]: 0 on [0, tau/3], 1 on [2 tau/3, tau].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendProfile {
    pub tau: f64,
}

impl BlendProfile {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(GeoError::InvalidInput(format!("blend length must be positive, got {tau}")));
        }
        Ok(BlendProfile { tau })
    }

    /// psi, psi', psi''.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        ramp(t, self.tau / 3.0, 2.0 * self.tau / 3.0)
    }
}

/// Smooth translation X + chi(t) omega, with chi = 1 on [t1 + nu, t2 - nu]
/// and chi = 0 outside [t1 - nu, t2 + nu].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftTerm {
    pub omega: Vector,
    pub t1: f64,
    pub t2: f64,
    pub nu: f64,
}

impl ShiftTerm {
    pub fn weight(&self, t: f64) -> (f64, f64, f64) {
        let a = ramp(t, self.t1 - self.nu, self.t1 + self.nu);
        let b = ramp(t, self.t2 - self.nu, self.t2 + self.nu);
        (a.0 - b.0, a.1 - b.1, a.2 - b.2)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.t1 - self.nu, self.t2 + self.nu)
    }
}

/// Replacement of the curve near `center` by the geodesic tangent to it
/// there: X_lambda = phi X + (1 - phi) Gamma with phi((t - center)/lambda)
/// vanishing for |u| <= 1/2 and equal to 1 for |u| >= 1.
#[derive(Debug, Clone)]
pub struct GeodesicPatch {
    pub center: f64,
    pub half_width: f64,
    pub speed: f64,
    forward: GeodesicArc,
    backward: GeodesicArc,
}

impl GeodesicPatch {
    /// `point` and `velocity` are X(center) and X'(center).
    pub fn new(
        metric: &dyn MetricField,
        point: &Vector,
        velocity: &Vector,
        center: f64,
        half_width: f64,
        opts: &FlowOptions,
    ) -> Result<Self> {
        let g = metric.matrix(point);
        let speed = velocity.dot(&(&g * velocity)).sqrt();
        let unit = velocity / speed;
        let p = &g * &unit;
        let zero = ZeroFactor::new(metric.dim());
        let flow = Flow::new(metric, &zero, *opts);
        let span = speed * half_width * 1.001;
        let forward = flow.integrate(&PhasePoint::new(point.clone(), p.clone()), span)?;
        let backward = flow.integrate(&PhasePoint::new(point.clone(), -p), span)?;
        Ok(GeodesicPatch { center, half_width, speed, forward, backward })
    }

    pub fn contains(&self, t: f64) -> bool {
        (t - self.center).abs() < self.half_width
    }

    pub fn in_core(&self, t: f64) -> bool {
        (t - self.center).abs() <= 0.5 * self.half_width
    }

    fn geodesic_jet(&self, t: f64) -> (Vector, Vector, Vector) {
        let s = self.speed * (t - self.center);
        let sp2 = self.speed * self.speed;
        if s >= 0.0 {
            let (x, v, a) = self.forward.position_jet(s);
            (x, v * self.speed, a * sp2)
        } else {
            let (x, v, a) = self.backward.position_jet(-s);
            (x, v * (-self.speed), a * sp2)
        }
    }

    fn apply(&self, t: f64, base: (Vector, Vector, Vector)) -> (Vector, Vector, Vector) {
        let lam = self.half_width;
        let (w, dw, ddw) = outer_window((t - self.center) / lam);
        let (dw, ddw) = (dw / lam, ddw / (lam * lam));
        let (gx, gv, ga) = self.geodesic_jet(t);
        let (x, v, a) = base;
        let dx = &x - &gx;
        let dv = &v - &gv;
        let nx = &gx + &dx * w;
        let nv = &dx * dw + &v * w + &gv * (1.0 - w);
        let na = &dx * ddw + &dv * (2.0 * dw) + &a * w + &ga * (1.0 - w);
        (nx, nv, na)
    }
}

/// The blended curve X on [0, tau], with optional shift and patches.
#[derive(Debug, Clone)]
pub struct ConnectingCurve {
    pub profile: BlendProfile,
    pub start: TangentPoint,
    pub target: TangentPoint,
    gamma_start: Arc<GeodesicArc>,
    gamma_target: Arc<GeodesicArc>,
    pub shift: Option<ShiftTerm>,
    pub patches: Vec<GeodesicPatch>,
}

impl ConnectingCurve {
    pub fn gamma_start(&self) -> &GeodesicArc {
        &self.gamma_start
    }

    pub fn gamma_target(&self) -> &GeodesicArc {
        &self.gamma_target
    }

    pub fn with_shift(&self, shift: Option<ShiftTerm>) -> ConnectingCurve {
        ConnectingCurve { shift, ..self.clone() }
    }

    pub fn with_patches(&self, patches: Vec<GeodesicPatch>) -> ConnectingCurve {
        ConnectingCurve { patches, ..self.clone() }
    }

    /// Blend plus shift, before patches.
    pub fn base_jet(&self, t: f64) -> (Vector, Vector, Vector) {
        let (psi, dpsi, ddpsi) = self.profile.eval(t);
        let (a, da, dda) = self.gamma_start.position_jet(t);
        let (mut x, mut v, mut acc) = if psi == 0.0 && dpsi == 0.0 && ddpsi == 0.0 {
            (a, da, dda)
        } else if psi == 1.0 && dpsi == 0.0 && ddpsi == 0.0 {
            self.gamma_target.position_jet(t)
        } else {
            let (b, db, ddb) = self.gamma_target.position_jet(t);
            let diff = &b - &a;
            let x = &a * (1.0 - psi) + &b * psi;
            let v = &da * (1.0 - psi) + &db * psi + &diff * dpsi;
            let acc = &dda * (1.0 - psi) + &ddb * psi + (&db - &da) * (2.0 * dpsi) + &diff * ddpsi;
            (x, v, acc)
        };
        if let Some(sh) = &self.shift {
            let (w, dw, ddw) = sh.weight(t);
            x += &sh.omega * w;
            v += &sh.omega * dw;
            acc += &sh.omega * ddw;
        }
        (x, v, acc)
    }
}

impl ParamCurve for ConnectingCurve {
    fn dim(&self) -> usize {
        self.start.x.len()
    }

    fn span(&self) -> f64 {
        self.profile.tau
    }

    fn jet(&self, t: f64) -> (Vector, Vector, Vector) {
        let mut j = self.base_jet(t);
        for p in &self.patches {
            if p.contains(t) {
                j = p.apply(t, j);
            }
        }
        j
    }

    fn breakpoints(&self) -> Vec<f64> {
        let tau = self.profile.tau;
        let mut b = vec![tau / 3.0, 2.0 * tau / 3.0];
        if let Some(sh) = &self.shift {
            b.extend([sh.t1 - sh.nu, sh.t1 + sh.nu, sh.t2 - sh.nu, sh.t2 + sh.nu]);
        }
        for p in &self.patches {
            let (c, l) = (p.center, p.half_width);
            b.extend([c - l, c - 0.5 * l, c + 0.5 * l, c + l]);
        }
        b.retain(|&t| t > 0.0 && t < tau);
        b.sort_by(|a, b| a.partial_cmp(b).unwrap());
        b.dedup();
        b
    }

    fn is_geodesic_at(&self, t: f64) -> bool {
        if self.patches.iter().any(|p| p.in_core(t)) {
            return true;
        }
        if self.patches.iter().any(|p| p.contains(t)) {
            return false;
        }
        let (lo, hi) = self.control_support();
        t <= lo || t >= hi
    }

    fn control_support(&self) -> (f64, f64) {
        let tau = self.profile.tau;
        let (mut lo, mut hi) = (tau / 3.0, 2.0 * tau / 3.0);
        if let Some(sh) = &self.shift {
            let (a, b) = sh.range();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        (lo, hi)
    }
}

/// Geodesics from `start` and `target` over [0, tau] and their blend.
pub fn blend_curve(
    metric: &dyn MetricField,
    start: &TangentPoint,
    target: &TangentPoint,
    profile: BlendProfile,
    reference: &TangentPoint,
    delta_bar: f64,
    opts: &FlowOptions,
) -> Result<ConnectingCurve> {
    for (name, tp) in [("start", start), ("target", target)] {
        let dx = (&tp.x - &reference.x).norm();
        let dv = (&tp.v - &reference.v).norm();
        if dx.max(dv) >= delta_bar {
            return Err(GeoError::InvalidInput(format!(
                "{name} is {:.3e} from the reference (position {dx:.3e}, velocity {dv:.3e}); limit {delta_bar:e}",
                dx.max(dv)
            )));
        }
        check_unit(metric, tp, name)?;
    }
    let zero = ZeroFactor::new(metric.dim());
    let flow = Flow::new(metric, &zero, *opts);
    let g = |tp: &TangentPoint| -> Result<GeodesicArc> {
        let p = metric.matrix(&tp.x) * &tp.v;
        flow.integrate(&PhasePoint::new(tp.x.clone(), p), profile.tau)
    };
    let gamma_start = Arc::new(g(start)?);
    let gamma_target = if start == target { gamma_start.clone() } else { Arc::new(g(target)?) };
    Ok(ConnectingCurve {
        profile,
        start: start.clone(),
        target: target.clone(),
        gamma_start,
        gamma_target,
        shift: None,
        patches: Vec::new(),
    })
}

fn check_unit(metric: &dyn MetricField, tp: &TangentPoint, name: &str) -> Result<()> {
    let n2 = tp.v.dot(&(metric.matrix(&tp.x) * &tp.v));
    if (n2 - 1.0).abs() > 1e-9 {
        return Err(GeoError::InvalidInput(format!("{name}: {}", GeoError::NotUnit { norm_sq: n2 })));
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct ThetaPiece {
    s: Vec<f64>,
    theta: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

/// Everything derived from a curve along the arclength parameter s.
#[derive(Debug, Clone)]
pub struct CurveSample {
    /// Curve parameter theta(s).
    pub param: f64,
    pub x: Vector,
    /// dx~/ds.
    pub v: Vector,
    pub p: Vector,
    /// dp~/ds.
    pub dp: Vector,
    pub u: Vector,
    /// |X'(param)| in the metric.
    pub speed: f64,
}

/// The unit-speed connecting curve x~ with momentum p~ and control u~.
#[derive(Debug, Clone)]
pub struct ConnectingData {
    metric: Arc<dyn MetricField>,
    pub curve: Arc<dyn ParamCurve>,
    pub tau_tilde: f64,
    cuts_t: Vec<f64>,
    cuts_s: Vec<f64>,
    pieces: Vec<ThetaPiece>,
}

/// Arclength alpha(t) = int_0^t |X'|, its total tau~ = alpha(tau), and the
/// inverse theta obtained by integrating theta' = 1 / |X'(theta)|.
pub fn arclength_reparam(
    metric: Arc<dyn MetricField>,
    curve: Arc<dyn ParamCurve>,
    quad_tol: f64,
) -> Result<ConnectingData> {
    let span = curve.span();
    let mut cuts_t = vec![0.0];
    cuts_t.extend(curve.breakpoints());
    cuts_t.push(span);
    let mut data =
        ConnectingData { metric, curve, tau_tilde: 0.0, cuts_t: cuts_t.clone(), cuts_s: vec![0.0], pieces: Vec::new() };
    let mut min_speed = f64::INFINITY;
    for w in cuts_t.windows(2) {
        let len = quad::adaptive(w[0], w[1], quad_tol, |t| {
            let s = data.speed(t).0;
            min_speed = min_speed.min(s);
            s
        });
        let last = *data.cuts_s.last().unwrap();
        data.cuts_s.push(last + len);
    }
    if min_speed < 0.5 {
        return Err(GeoError::Reparametrization(format!("degenerate blend: speed {min_speed} below 0.5")));
    }
    data.tau_tilde = *data.cuts_s.last().unwrap();
    for k in 0..cuts_t.len() - 1 {
        let (s0, s1) = (data.cuts_s[k], data.cuts_s[k + 1]);
        let (t0, t1) = (cuts_t[k], cuts_t[k + 1]);
        let mut piece = ThetaPiece { s: vec![], theta: vec![], d1: vec![], d2: vec![] };
        let opts = OdeOptions::with_tol(1e-14).max_step((s1 - s0) / 24.0);
        ode::integrate(
            |y, dy| {
                dy[0] = 1.0 / data.speed(y[0]).0;
                Ok(())
            },
            s0,
            &[t0],
            s1,
            &opts,
            |s, y, _| {
                let (sig, dsig) = data.speed(y[0]);
                piece.s.push(s);
                piece.theta.push(y[0]);
                piece.d1.push(1.0 / sig);
                piece.d2.push(-dsig / sig.powi(3));
                Ok(())
            },
        )?;
        let end = *piece.theta.last().unwrap();
        if (end - t1).abs() > 1e-9 {
            return Err(GeoError::Reparametrization(format!(
                "inverse arclength misses the breakpoint {t1} by {:e}",
                (end - t1).abs()
            )));
        }
        *piece.theta.last_mut().unwrap() = t1;
        data.pieces.push(piece);
    }
    Ok(data)
}

impl ConnectingData {
    pub fn metric(&self) -> &Arc<dyn MetricField> {
        &self.metric
    }

    pub fn dim(&self) -> usize {
        self.curve.dim()
    }

    /// (|X'(t)|, d/dt |X'(t)|).
    pub fn speed(&self, t: f64) -> (f64, f64) {
        let (x, v, a) = self.curve.jet(t);
        let (g, dg) = self.metric.eval(&x);
        let gv = &g * &v;
        let sig = v.dot(&gv).sqrt();
        let mut mixed = 0.0;
        for (j, d) in dg.iter().enumerate() {
            if v[j] != 0.0 {
                mixed += v[j] * v.dot(&(d * &v));
            }
        }
        (sig, (2.0 * a.dot(&gv) + mixed) / (2.0 * sig))
    }

    /// theta(s), the curve parameter at arclength s.
    pub fn theta(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.tau_tilde);
        let k = self.cuts_s.partition_point(|&c| c <= s).clamp(1, self.pieces.len()) - 1;
        let pc = &self.pieces[k];
        if pc.s.len() == 1 {
            return pc.theta[0];
        }
        let i = pc.s.partition_point(|&c| c <= s).clamp(1, pc.s.len() - 1) - 1;
        let h = pc.s[i + 1] - pc.s[i];
        interp::quintic_scalar(
            pc.theta[i],
            pc.d1[i],
            pc.d2[i],
            pc.theta[i + 1],
            pc.d1[i + 1],
            pc.d2[i + 1],
            h,
            (s - pc.s[i]) / h,
        )
        .0
    }

    /// alpha(t): arclength of the curve up to parameter t.
    pub fn alpha(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.curve.span());
        let k = self.cuts_t.partition_point(|&c| c <= t).clamp(1, self.cuts_t.len() - 1) - 1;
        self.cuts_s[k] + quad::adaptive(self.cuts_t[k], t, 1e-13, |r| self.speed(r).0)
    }

    /// Sample everything at curve parameter t.
    pub fn sample_param(&self, t: f64) -> CurveSample {
        let (x, xd, xdd) = self.curve.jet(t);
        let (g, dg) = self.metric.eval(&x);
        let n = x.len();
        let gv = &g * &xd;
        let sig = xd.dot(&gv).sqrt();
        let mut mix = crate::metric::Matrix::zeros(n, n);
        for j in 0..n {
            if xd[j] != 0.0 {
                mix += &dg[j] * xd[j];
            }
        }
        let mv = &mix * &xd;
        let dsig = (2.0 * xdd.dot(&gv) + xd.dot(&mv)) / (2.0 * sig);
        let v = &xd / sig;
        let p = &gv / sig;
        let dp = (&mv / sig + (&g * &xdd) / sig - &gv * (dsig / (sig * sig))) / sig;
        let u = if self.curve.is_geodesic_at(t) {
            Vector::zeros(n)
        } else {
            let mut u = &dp * 2.0;
            for i in 0..n {
                u[i] -= v.dot(&(&dg[i] * &v));
            }
            u
        };
        CurveSample { param: t, x, v, p, dp, u, speed: sig }
    }

    pub fn sample(&self, s: f64) -> CurveSample {
        self.sample_param(self.theta(s))
    }

    pub fn x_tilde(&self, s: f64) -> Vector {
        self.curve.jet(self.theta(s)).0
    }

    pub fn p_tilde(&self, s: f64) -> Vector {
        self.sample(s).p
    }

    pub fn u_tilde(&self, s: f64) -> Vector {
        self.sample(s).u
    }

    /// Arclength interval outside of which u~ vanishes.
    pub fn support_interval(&self) -> (f64, f64) {
        let (a, b) = self.curve.control_support();
        (self.alpha(a), self.alpha(b))
    }

    /// Arclength images of the curve breakpoints.
    pub fn breakpoints_s(&self) -> Vec<f64> {
        self.cuts_s[1..self.cuts_s.len() - 1].to_vec()
    }

    /// `count + 1` uniformly spaced arclength samples.
    pub fn samples(&self, count: usize) -> Vec<(f64, CurveSample)> {
        (0..=count)
            .map(|k| {
                let s = self.tau_tilde * k as f64 / count as f64;
                (s, self.sample(s))
            })
            .collect()
    }

    /// CSV with columns s, x~_i, p~_i, u~_i.
    pub fn write_csv<W: Write>(&self, mut w: W, count: usize) -> Result<()> {
        let n = self.dim();
        let mut header = vec!["t".to_string()];
        for name in ["x", "p", "u"] {
            header.extend((1..=n).map(|i| format!("{name}{i}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for (s, smp) in self.samples(count) {
            let mut row = vec![format!("{s:.17e}")];
            for vec in [&smp.x, &smp.p, &smp.u] {
                row.extend(vec.iter().map(|c| format!("{c:.17e}")));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Largest deviations from the structural invariants over `count + 1`
    /// samples: (unit speed, orthogonality, pinning, sup |x~' - e1|).
    pub fn invariant_residuals(&self, count: usize) -> (f64, f64, f64, f64) {
        let mut unit: f64 = 0.0;
        let mut orth: f64 = 0.0;
        let mut cone: f64 = 0.0;
        let n = self.dim();
        let mut e1 = Vector::zeros(n);
        e1[0] = 1.0;
        for (_, smp) in self.samples(count) {
            unit = unit.max((smp.v.dot(&smp.p) - 1.0).abs());
            orth = orth.max(smp.u.dot(&smp.v).abs());
            cone = cone.max((&smp.v - &e1).norm());
        }
        let (x0, v0, _) = self.curve.jet(0.0);
        let (x1, v1, _) = self.curve.jet(self.curve.span());
        let a = self.sample(0.0);
        let b = self.sample(self.tau_tilde);
        let g0 = self.metric.matrix(&x0);
        let g1 = self.metric.matrix(&x1);
        let s0 = v0.dot(&(&g0 * &v0)).sqrt();
        let s1 = v1.dot(&(&g1 * &v1)).sqrt();
        let pin = [
            (&a.x - &x0).norm(),
            (&a.p - &g0 * &v0 / s0).norm(),
            (&b.x - &x1).norm(),
            (&b.p - &g1 * &v1 / s1).norm(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        (unit, orth, pin, cone)
    }

    /// sup |u~| over samples.
    pub fn control_c0(&self, count: usize) -> f64 {
        self.samples(count).iter().map(|(_, s)| s.u.norm()).fold(0.0, f64::max)
    }
}

impl TubeCurve for ConnectingData {
    fn dim(&self) -> usize {
        self.curve.dim()
    }

    fn span(&self) -> f64 {
        self.tau_tilde
    }

    fn point(&self, t: f64) -> (Vector, Vector) {
        let s = self.sample(t);
        (s.x, s.v)
    }

    fn field(&self, t: f64) -> Vector {
        let th = self.theta(t);
        if self.curve.is_geodesic_at(th) {
            return Vector::zeros(self.dim());
        }
        self.sample_param(th).u
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breakpoints_s()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectOptions {
    /// Largest allowed distance of either endpoint from the reference start.
    pub delta_bar: f64,
    /// Tube radius of the bump; defaults to rho / 8, capped at beta / 3.
    pub tube_mu: Option<f64>,
    /// Allowed phase-space error of the verified endpoint.
    pub endpoint_tol: f64,
    /// Integration options for the geodesics being blended.
    pub arc: FlowOptions,
    /// Integration options for verifying the perturbed flow.
    pub verify: FlowOptions,
    pub quad_tol: f64,
    /// Number of samples for invariant checks.
    pub samples: usize,
    /// Reference geodesic start; the tube is built around the x_1 axis and
    /// the reference must stay within rho/2 of it. Defaults to `start`.
    pub reference: Option<TangentPoint>,
    /// Skip integrating the perturbed flow (construction only).
    pub skip_verification: bool,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        ConnectOptions {
            delta_bar: 0.1,
            tube_mu: None,
            endpoint_tol: 1e-7,
            arc: FlowOptions { tol: 1e-13, max_step: 0.005, energy_tol: 1e-10, ..Default::default() },
            verify: FlowOptions { tol: 1e-11, max_step: 0.01, energy_tol: 1e-8, ..Default::default() },
            quad_tol: 1e-12,
            samples: 400,
            reference: None,
            skip_verification: false,
        }
    }
}

/// Measured quantities of a connection.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectReport {
    pub separation: f64,
    pub tau: f64,
    pub tau_tilde: f64,
    pub mu: f64,
    pub beta: f64,
    pub f_c1_norm: f64,
    pub u_c0_norm: f64,
    #[serde(with = "crate::nonfinite")]
    pub cone_deviation: f64,
    pub unit_speed_residual: f64,
    pub orthogonality_residual: f64,
    pub pinning_residual: f64,
    /// sup |grad f(x~) - u~|.
    pub gradient_residual: f64,
    /// sup |f(x~)|.
    pub value_on_curve: f64,
    /// Residual of x~, p~ in the perturbed Hamiltonian system.
    pub system_residual: f64,
    #[serde(with = "crate::nonfinite")]
    pub endpoint_residual: f64,
    pub support_in_tube: bool,
    pub verified: bool,
    pub failure: Option<String>,
}

/// A built connection: the factor, the curve it was built around, and the
/// verification report.
#[derive(Debug, Clone)]
pub struct Connection {
    pub factor: Arc<dyn ConformalFactor>,
    pub bump: Option<Arc<TubeBump>>,
    pub data: Arc<ConnectingData>,
    pub tube: TubeRegion,
    pub report: ConnectReport,
}

impl Connection {
    pub fn tau_tilde(&self) -> f64 {
        self.report.tau_tilde
    }
}

/// Integrate the reference geodesic and check it stays within 1/10 of e1 in
/// velocity and within rho/2 of the x_1 axis. Returns the tube R(rho).
pub fn check_reference(
    metric: &dyn MetricField,
    reference: &TangentPoint,
    tau: f64,
    rho: f64,
    opts: &FlowOptions,
) -> Result<(TubeRegion, GeodesicArc)> {
    check_unit(metric, reference, "reference")?;
    let zero = ZeroFactor::new(metric.dim());
    let p = metric.matrix(&reference.x) * &reference.v;
    let arc = Flow::new(metric, &zero, *opts).integrate(&PhasePoint::new(reference.x.clone(), p), tau)?;
    let n = metric.dim();
    let mut e1 = Vector::zeros(n);
    e1[0] = 1.0;
    for k in 0..arc.len() {
        let dev = (&arc.dx[k] - &e1).norm();
        if dev > 0.1 {
            return Err(GeoError::Assumption(format!(
                "reference velocity deviates from e1 by {dev:.4} > 1/10 at t = {:.4}",
                arc.times[k]
            )));
        }
        let lat = TubeRegion::lateral(&arc.x[k]);
        if lat >= rho / 2.0 {
            return Err(GeoError::Assumption(format!(
                "reference leaves R(rho/2): |z| = {lat:.4e} at t = {:.4}",
                arc.times[k]
            )));
        }
    }
    let tube = TubeRegion { t_min: arc.x[0][0], t_max: arc.end().x[0], radius: rho };
    Ok((tube, arc))
}

/// Bump with gradient u~ along x~. Returns the bump and beta.
pub fn connection_bump(data: &Arc<ConnectingData>, mu_request: f64) -> Result<(TubeBump, f64, f64)> {
    let (lo, hi) = data.support_interval();
    let beta = lo.min(data.tau_tilde - hi);
    let mu = mu_request.min(beta / 3.0);
    let spec = TubeBumpSpec { curve: data.clone(), beta, mu };
    Ok((build_bump(spec)?, beta, mu))
}

/// Verify a factor against its connecting curve: gradient and value along
/// x~, the perturbed Hamiltonian system along (x~, p~), and the endpoint of
/// the perturbed flow. Fills the corresponding report fields.
pub fn verify_connection(
    metric: &dyn MetricField,
    factor: &dyn ConformalFactor,
    data: &ConnectingData,
    start: &TangentPoint,
    expected_end: &PhasePoint,
    opts: &ConnectOptions,
    report: &mut ConnectReport,
) -> Result<()> {
    let mut grad_res: f64 = 0.0;
    let mut val: f64 = 0.0;
    let mut sys: f64 = 0.0;
    for (_, smp) in data.samples(opts.samples) {
        let (f, g) = factor.value_grad(&smp.x)?;
        val = val.max(f.abs());
        grad_res = grad_res.max((&g - &smp.u).norm());
        let j = phase_jet(metric, factor, &smp.x, &smp.p)?;
        sys = sys.max((&j.dx - &smp.v).norm()).max((&j.dp - &smp.dp).norm());
    }
    report.gradient_residual = grad_res;
    report.value_on_curve = val;
    report.system_residual = sys;
    if !opts.skip_verification {
        let flow = Flow::new(metric, factor, opts.verify);
        let p = metric.matrix(&start.x) * &start.v;
        let end = flow.advance(&PhasePoint::new(start.x.clone(), p), data.tau_tilde)?;
        report.endpoint_residual =
            ((&end.x - &expected_end.x).norm_squared() + (&end.p - &expected_end.p).norm_squared()).sqrt();
    }
    Ok(())
}

/// Build e^f g connecting `start` to the time-tau image of `target`.
pub fn connect(
    metric: Arc<dyn MetricField>,
    start: &TangentPoint,
    target: &TangentPoint,
    tau: f64,
    rho: f64,
    opts: &ConnectOptions,
) -> Result<Connection> {
    if !(rho > 0.0) {
        return Err(GeoError::InvalidInput(format!("tube radius must be positive, got {rho}")));
    }
    let profile = BlendProfile::new(tau)?;
    let reference = opts.reference.clone().unwrap_or_else(|| start.clone());
    let (tube, _) = check_reference(metric.as_ref(), &reference, tau, rho, &opts.arc)?;
    let curve = blend_curve(metric.as_ref(), start, target, profile, &reference, opts.delta_bar, &opts.arc)?;
    finish_connection(metric, Arc::new(curve.clone()), &curve, tube, rho, opts)
}

/// Reparametrize, build the bump and verify, for a given blended curve.
pub fn finish_connection(
    metric: Arc<dyn MetricField>,
    curve_dyn: Arc<dyn ParamCurve>,
    curve: &ConnectingCurve,
    tube: TubeRegion,
    rho: f64,
    opts: &ConnectOptions,
) -> Result<Connection> {
    let data = Arc::new(arclength_reparam(metric.clone(), curve_dyn, opts.quad_tol)?);
    let mut report = curve_report(&data, curve, opts.samples)?;
    let (factor, bump) = step_one_factor(&data, curve, metric.dim(), rho, opts.tube_mu.unwrap_or(rho / 8.0), opts.samples, &mut report)?;
    let expected_end = curve.gamma_target().end();
    verify_connection(metric.as_ref(), factor.as_ref(), &data, &curve.start, &expected_end, opts, &mut report)?;
    conclude(&mut report, opts, &[]);
    Ok(Connection { factor, bump, data, tube, report })
}

/// Structural invariants of the reparametrized curve. Fails when the
/// control field is not orthogonal to the curve or the cone condition
/// breaks.
pub fn curve_report(data: &ConnectingData, curve: &ConnectingCurve, samples: usize) -> Result<ConnectReport> {
    let separation = curve.start.distance(&curve.target);
    let mut report =
        ConnectReport { separation, tau: curve.profile.tau, support_in_tube: true, ..Default::default() };
    let (unit, orth, pin, cone) = data.invariant_residuals(samples);
    report.unit_speed_residual = unit;
    report.orthogonality_residual = orth;
    report.pinning_residual = pin;
    report.cone_deviation = cone;
    if orth > 1e-7 {
        return Err(GeoError::Reparametrization(format!("control field not orthogonal to x~' (residual {orth:e})")));
    }
    if cone > 0.2 {
        return Err(GeoError::ConeViolation { t: f64::NAN, deviation: cone });
    }
    Ok(report)
}

/// The tube bump along the curve, or zero when the two geodesics coincide
/// and the curve was not modified.
pub fn step_one_factor(
    data: &Arc<ConnectingData>,
    curve: &ConnectingCurve,
    dim: usize,
    rho: f64,
    mu_request: f64,
    samples: usize,
    report: &mut ConnectReport,
) -> Result<(Arc<dyn ConformalFactor>, Option<Arc<TubeBump>>)> {
    if report.separation == 0.0 && curve.shift.is_none() && curve.patches.is_empty() {
        report.tau_tilde = curve.profile.tau;
        return Ok((Arc::new(ZeroFactor::new(dim)), None));
    }
    report.tau_tilde = data.tau_tilde;
    report.u_c0_norm = data.control_c0(samples);
    let (b, beta, mu) = connection_bump(data, mu_request)?;
    report.beta = beta;
    report.mu = mu;
    let b = Arc::new(b);
    report.f_c1_norm = b.c1_norm_estimate()?;
    if let Some(sb) = b.support() {
        report.support_in_tube = box_lateral_extent(&sb) < rho;
    }
    Ok((b.clone() as Arc<dyn ConformalFactor>, Some(b)))
}

/// Largest lateral distance from the x_1 axis of any corner of the box.
pub fn box_lateral_extent(sb: &SupportBox) -> f64 {
    (1..sb.lo.len()).map(|i| sb.lo[i].abs().max(sb.hi[i].abs()).powi(2)).sum::<f64>().sqrt()
}

/// Set `verified` and `failure` from the measured residuals and any extra
/// failure messages.
pub fn conclude(report: &mut ConnectReport, opts: &ConnectOptions, extra: &[String]) {
    let mut failures = Vec::new();
    if !opts.skip_verification && !(report.endpoint_residual <= opts.endpoint_tol) {
        failures.push(format!("endpoint residual {:e} above {:e}", report.endpoint_residual, opts.endpoint_tol));
    }
    if report.gradient_residual > 1e-7 * (1.0 + report.u_c0_norm) {
        failures.push(format!("gradient along x~ off by {:e}", report.gradient_residual));
    }
    if !report.support_in_tube {
        failures.push("support leaves R(rho)".into());
    }
    failures.extend(extra.iter().cloned());
    report.verified = failures.is_empty();
    report.failure = if failures.is_empty() { None } else { Some(failures.join("; ")) };
}
