//! Geodesics whose factor gradient is colinear with the momentum stay
//! geodesics of e^f g after the time change beta(t) = int e^{f(c)/2}.

use crate::error::{GeoError, Result};
use crate::factor::{ConformalFactor, ZeroFactor};
use crate::flow::{Flow, FlowOptions, GeodesicArc};
use crate::interp;
use crate::metric::{hamiltonian, phase_jet, MetricField, PhasePoint, Vector};
use crate::ode::{self, OdeOptions};
use crate::quad;
use serde::{Deserialize, Serialize};

/// lambda(t) with grad f(c(t)) = lambda(t) p(t), sampled along an arc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaProfile {
    pub times: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Largest perpendicular residual |grad f - lambda p| / (1 + |grad f|).
    pub worst_residual: f64,
    pub worst_time: f64,
}

/// Sample times: every dense-output node and the midpoint of every step.
fn sample_times(arc: &GeodesicArc) -> Vec<f64> {
    let mut ts = Vec::with_capacity(2 * arc.len());
    for w in arc.times.windows(2) {
        ts.push(w[0]);
        ts.push(0.5 * (w[0] + w[1]));
    }
    ts.push(arc.end_time());
    ts
}

/// Perpendicular residual and lambda at one point.
fn colinear_at(g: &Vector, p: &Vector) -> (f64, f64) {
    let lam = g.dot(p) / p.dot(p);
    ((g - p * lam).norm() / (1.0 + g.norm()), lam)
}

pub fn colinearity_check(f: &dyn ConformalFactor, arc: &GeodesicArc, tol: f64) -> Result<LambdaProfile> {
    let mut prof = LambdaProfile { times: vec![], lambda: vec![], worst_residual: 0.0, worst_time: arc.start_time() };
    for t in sample_times(arc) {
        let (x, p) = (arc.position(t), arc.momentum(t));
        let (_, g) = f.value_grad(&x)?;
        let (res, lam) = colinear_at(&g, &p);
        if res > prof.worst_residual {
            prof.worst_residual = res;
            prof.worst_time = t;
        }
        prof.times.push(t);
        prof.lambda.push(lam);
    }
    if prof.worst_residual > tol {
        return Err(GeoError::NotColinear { t: prof.worst_time, residual: prof.worst_residual });
    }
    Ok(prof)
}

/// The arc c re-timed by theta = beta^{-1}, with momentum e^{f/2} p(theta).
#[derive(Debug, Clone)]
pub struct ReparamCurve {
    pub arc: GeodesicArc,
    pub tau_tilde: f64,
    s: Vec<f64>,
    theta: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

/// Point, velocity, momentum and momentum derivative of the re-timed curve.
#[derive(Debug, Clone)]
pub struct ReparamSample {
    pub s: f64,
    pub theta: f64,
    pub x: Vector,
    pub v: Vector,
    pub p: Vector,
    pub dp: Vector,
}

fn weight(f: &dyn ConformalFactor, arc: &GeodesicArc, t: f64) -> Result<(f64, f64)> {
    // theta' = e^{-f/2} and theta'' = -(1/2) <grad f, c'> theta'^2
    let (x, v, _) = arc.position_jet(t);
    let (fv, g) = f.value_grad(&x)?;
    let d1 = (-0.5 * fv).exp();
    Ok((d1, -0.5 * g.dot(&v) * d1 * d1))
}

pub fn beta_reparam(metric: &dyn MetricField, f: &dyn ConformalFactor, arc: &GeodesicArc) -> Result<ReparamCurve> {
    let energy = hamiltonian(metric, &arc.start())?;
    if (energy - 0.5).abs() > 1e-8 {
        return Err(GeoError::NotUnit { norm_sq: 2.0 * energy });
    }
    let (a, b) = (arc.start_time(), arc.end_time());
    let total = quad::adaptive_panels(a, b, 400, 1e-14, |t| f.value(&arc.position(t)).map(|v| (0.5 * v).exp()).unwrap_or(f64::NAN));
    if !total.is_finite() {
        return Err(GeoError::Reparametrization("quadrature of e^{f/2} along the arc failed".into()));
    }
    let mut rc =
        ReparamCurve { arc: arc.clone(), tau_tilde: total, s: vec![], theta: vec![], d1: vec![], d2: vec![] };
    let opts = OdeOptions::with_tol(1e-14).max_step(total / 200.0);
    ode::integrate(
        |y, dy| {
            dy[0] = weight(f, arc, y[0].min(b))?.0;
            Ok(())
        },
        0.0,
        &[a],
        total,
        &opts,
        |s, y, _| {
            let (d1, d2) = weight(f, arc, y[0].min(b))?;
            rc.s.push(s);
            rc.theta.push(y[0]);
            rc.d1.push(d1);
            rc.d2.push(d2);
            Ok(())
        },
    )?;
    let end = *rc.theta.last().unwrap();
    if (end - b).abs() > 1e-9 {
        return Err(GeoError::Reparametrization(format!("inverse time change misses the arc end by {:e}", end - b)));
    }
    *rc.theta.last_mut().unwrap() = b;
    Ok(rc)
}

impl ReparamCurve {
    /// theta(s) in the arc's time.
    pub fn theta(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.tau_tilde);
        if self.s.len() == 1 {
            return self.theta[0];
        }
        let i = self.s.partition_point(|&c| c <= s).clamp(1, self.s.len() - 1) - 1;
        let h = self.s[i + 1] - self.s[i];
        interp::quintic_scalar(
            self.theta[i],
            self.d1[i],
            self.d2[i],
            self.theta[i + 1],
            self.d1[i + 1],
            self.d2[i + 1],
            h,
            (s - self.s[i]) / h,
        )
        .0
    }

    /// beta(t) = int_a^t e^{f(c)/2} by adaptive quadrature.
    pub fn beta(&self, f: &dyn ConformalFactor, t: f64) -> f64 {
        let a = self.arc.start_time();
        let panels = (400.0 * (t - a) / (self.arc.end_time() - a)).ceil().max(1.0) as usize;
        quad::adaptive_panels(a, t, panels, 1e-14, |r| {
            f.value(&self.arc.position(r)).map(|v| (0.5 * v).exp()).unwrap_or(f64::NAN)
        })
    }

    /// sup |beta(theta(s)) - s| over `count + 1` samples, with beta
    /// accumulated between consecutive sample times.
    pub fn round_trip(&self, f: &dyn ConformalFactor, count: usize) -> f64 {
        let (a, b) = (self.arc.start_time(), self.arc.end_time());
        let g = |r: f64| f.value(&self.arc.position(r)).map(|v| (0.5 * v).exp()).unwrap_or(f64::NAN);
        let mut prev = a;
        let mut acc = 0.0;
        let mut worst: f64 = 0.0;
        for k in 0..=count {
            let s = self.tau_tilde * k as f64 / count as f64;
            let t = self.theta(s);
            if t > prev {
                let panels = (400.0 * (t - prev) / (b - a)).ceil().max(1.0) as usize;
                acc += quad::adaptive_panels(prev, t, panels, 1e-14 / count.max(1) as f64, g);
                prev = t;
            }
            worst = worst.max((acc - s).abs());
        }
        worst
    }

    pub fn sample(&self, metric: &dyn MetricField, f: &dyn ConformalFactor, s: f64) -> Result<ReparamSample> {
        let th = self.theta(s);
        let (x, v, _) = self.arc.position_jet(th);
        let pbar = self.arc.momentum(th);
        let (fv, g) = f.value_grad(&x)?;
        let half = (0.5 * fv).exp();
        let dth = 1.0 / half;
        let v = v * dth;
        let zero = ZeroFactor::new(x.len());
        let pbar_dot = phase_jet(metric, &zero, &x, &pbar)?.dp;
        let dp = &pbar * (0.5 * half * g.dot(&v)) + pbar_dot;
        Ok(ReparamSample { s, theta: th, p: &pbar * half, x, v, dp })
    }
}

/// Residuals of a re-timed curve as a trajectory of the perturbed system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbedGeodesicReport {
    /// sup of |c~' - dH_f/dp| and |p~' + dH_f/dx|.
    pub system_residual: f64,
    pub worst_time: f64,
    /// sup |H_f(c~, p~) - 1/2|.
    pub energy_residual: f64,
    /// Hausdorff distance between the original image and the re-integrated
    /// e^f g geodesic.
    #[serde(with = "crate::nonfinite")]
    pub hausdorff: f64,
    pub round_trip: f64,
    pub passed: bool,
}

impl PerturbedGeodesicReport {
    /// Turn a failed report into an error.
    pub fn ensure(&self) -> Result<()> {
        if self.passed {
            return Ok(());
        }
        Err(GeoError::Reparametrization(format!(
            "perturbed geodesic check failed: system residual {:e} (worst at s = {:.6}), hausdorff {:e}",
            self.system_residual, self.worst_time, self.hausdorff
        )))
    }
}

/// Tolerances for `verify_perturbed_geodesic`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyOptions {
    pub system_tol: f64,
    pub hausdorff_tol: f64,
    pub samples: usize,
    pub flow: FlowOptions,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            system_tol: 1e-7,
            hausdorff_tol: 1e-7,
            samples: 400,
            flow: FlowOptions { tol: 1e-12, max_step: 0.01, energy_tol: 1e-8, ..Default::default() },
        }
    }
}

pub fn verify_perturbed_geodesic(
    metric: &dyn MetricField,
    f: &dyn ConformalFactor,
    curve: &ReparamCurve,
    opts: &VerifyOptions,
) -> Result<PerturbedGeodesicReport> {
    let mut rep = PerturbedGeodesicReport::default();
    for k in 0..=opts.samples {
        let s = curve.tau_tilde * k as f64 / opts.samples as f64;
        let smp = curve.sample(metric, f, s)?;
        let jet = phase_jet(metric, f, &smp.x, &smp.p)?;
        let res = (&jet.dx - &smp.v).norm().max((&jet.dp - &smp.dp).norm());
        if res > rep.system_residual {
            rep.system_residual = res;
            rep.worst_time = s;
        }
        rep.energy_residual = rep.energy_residual.max((jet.energy - 0.5).abs());
    }
    let start = curve.sample(metric, f, 0.0)?;
    let flow = Flow::new(metric, f, opts.flow);
    rep.hausdorff = match flow.integrate(&PhasePoint::new(start.x, start.p), curve.tau_tilde) {
        Ok(arc) => arc_hausdorff(&curve.arc, &arc, opts.samples.max(200)),
        Err(e) => {
            log::warn!("re-integration of perturbed geodesic failed: {e}");
            f64::INFINITY
        }
    };
    rep.round_trip = curve.round_trip(f, 50);
    rep.passed = rep.system_residual < opts.system_tol && rep.hausdorff < opts.hausdorff_tol;
    Ok(rep)
}

/// Distance from q to the image of an arc, by Newton on <c(t) - q, c'(t)> = 0
/// from the best of a coarse scan around `guess`.
pub fn distance_to_arc(q: &Vector, arc: &GeodesicArc, guess: f64) -> (f64, f64) {
    let (a, b) = (arc.start_time(), arc.end_time());
    let mut best_t = guess.clamp(a, b);
    let mut best = (arc.position(best_t) - q).norm();
    let h = (b - a) / 400.0;
    for k in -8..=8 {
        let t = (guess + k as f64 * h).clamp(a, b);
        let d = (arc.position(t) - q).norm();
        if d < best {
            best = d;
            best_t = t;
        }
    }
    let mut t = best_t;
    for _ in 0..30 {
        let (x, v, acc) = arc.position_jet(t);
        let r = &x - q;
        let phi = r.dot(&v);
        let dphi = v.dot(&v) + r.dot(&acc);
        if dphi <= 0.0 {
            break;
        }
        let next = (t - phi / dphi).clamp(a, b);
        let done = (next - t).abs() < 1e-15 * (1.0 + t.abs());
        t = next;
        if done {
            break;
        }
    }
    let d = (arc.position(t) - q).norm();
    if d < best {
        (d, t)
    } else {
        (best, best_t)
    }
}

/// Symmetric Hausdorff distance between two arc images, sampling each arc
/// at `count + 1` points plus its nodes and projecting onto the other.
pub fn arc_hausdorff(a: &GeodesicArc, b: &GeodesicArc, count: usize) -> f64 {
    one_sided(a, b, count).max(one_sided(b, a, count))
}

fn one_sided(from: &GeodesicArc, to: &GeodesicArc, count: usize) -> f64 {
    let (a0, a1) = (from.start_time(), from.end_time());
    let (b0, b1) = (to.start_time(), to.end_time());
    let mut worst: f64 = 0.0;
    let mut guess = b0;
    for k in 0..=count {
        let t = a0 + (a1 - a0) * k as f64 / count as f64;
        let scaled = b0 + (b1 - b0) * k as f64 / count as f64;
        let q = from.position(t);
        let (d1, t1) = distance_to_arc(&q, to, guess);
        let (d, tt) = if d1 > 1e-6 {
            let (d2, t2) = distance_to_arc(&q, to, scaled);
            if d2 < d1 {
                (d2, t2)
            } else {
                (d1, t1)
            }
        } else {
            (d1, t1)
        };
        guess = tt;
        worst = worst.max(d);
    }
    worst
}
