//! Integration of the (conformally perturbed) geodesic flow in Hamiltonian
//! form, dense output, and section crossings.

use crate::error::{GeoError, Result};
use crate::factor::{ConformalFactor, ZeroFactor};
use crate::interp;
use crate::metric::{factorize, phase_jet, MetricField, PhasePoint, TangentPoint, Vector};
use crate::ode::{self, OdeOptions};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowOptions {
    /// Absolute and relative local error tolerance.
    pub tol: f64,
    /// Largest accepted step; bounds the Hermite interpolation error.
    pub max_step: f64,
    /// Allowed deviation of H from its initial value at any node.
    pub energy_tol: f64,
    pub max_steps: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { tol: 1e-12, max_step: 0.05, energy_tol: 1e-9, max_steps: 50_000_000 }
    }
}

impl FlowOptions {
    pub fn with_tol(tol: f64) -> Self {
        FlowOptions { tol, ..Default::default() }
    }

    fn ode(&self) -> OdeOptions {
        OdeOptions { rtol: self.tol, atol: self.tol, max_step: self.max_step, max_steps: self.max_steps }
    }
}

/// A numerically integrated trajectory with its accepted nodes.
///
/// Position is interpolated by quintic Hermite from (x, x', x'') at the
/// nodes, momentum by cubic Hermite from (p, p').
#[derive(Debug, Clone)]
pub struct GeodesicArc {
    pub times: Vec<f64>,
    pub x: Vec<Vector>,
    pub p: Vec<Vector>,
    pub dx: Vec<Vector>,
    pub dp: Vec<Vector>,
    pub ddx: Vec<Vector>,
    pub energy: Vec<f64>,
    pub tol: f64,
}

impl GeodesicArc {
    pub fn dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn start(&self) -> PhasePoint {
        PhasePoint::new(self.x[0].clone(), self.p[0].clone())
    }

    pub fn end(&self) -> PhasePoint {
        let k = self.len() - 1;
        PhasePoint::new(self.x[k].clone(), self.p[k].clone())
    }

    pub fn max_energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max)
    }

    /// Index i with times[i] <= t <= times[i+1], clamped to the arc.
    pub fn interval(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.saturating_sub(1).min(self.len().saturating_sub(2))
    }

    /// Position, velocity and acceleration at time t.
    pub fn position_jet(&self, t: f64) -> (Vector, Vector, Vector) {
        if self.len() == 1 {
            return (self.x[0].clone(), self.dx[0].clone(), self.ddx[0].clone());
        }
        let i = self.interval(t);
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        interp::quintic(&self.x[i], &self.dx[i], &self.ddx[i], &self.x[i + 1], &self.dx[i + 1], &self.ddx[i + 1], h, s)
    }

    pub fn position(&self, t: f64) -> Vector {
        self.position_jet(t).0
    }

    pub fn momentum(&self, t: f64) -> Vector {
        if self.len() == 1 {
            return self.p[0].clone();
        }
        let i = self.interval(t);
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        interp::cubic(&self.p[i], &self.dp[i], &self.p[i + 1], &self.dp[i + 1], h, s).0
    }

    pub fn state_at(&self, t: f64) -> PhasePoint {
        PhasePoint::new(self.position(t), self.momentum(t))
    }

    /// Copy of nodes `i0..=i1`, translated in space by `shift` and in time
    /// so that the first node is at `t_start`.
    pub fn slice(&self, i0: usize, i1: usize, shift: &Vector, t_start: f64) -> GeodesicArc {
        let dt = t_start - self.times[i0];
        GeodesicArc {
            times: self.times[i0..=i1].iter().map(|t| t + dt).collect(),
            x: self.x[i0..=i1].iter().map(|x| x + shift).collect(),
            p: self.p[i0..=i1].to_vec(),
            dx: self.dx[i0..=i1].to_vec(),
            dp: self.dp[i0..=i1].to_vec(),
            ddx: self.ddx[i0..=i1].to_vec(),
            energy: self.energy[i0..=i1].to_vec(),
            tol: self.tol,
        }
    }

    /// Write nodes as CSV: t, x1..xn, p1..pn, H.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("p{i}")));
        header.push("H".into());
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![format!("{:.17e}", self.times[k])];
            row.extend(self.x[k].iter().map(|v| format!("{v:.17e}")));
            row.extend(self.p[k].iter().map(|v| format!("{v:.17e}")));
            row.push(format!("{:.17e}", self.energy[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Earliest root of <normal, x(t)> = offset on node interval i, if the
    /// functional changes sign there (or touches zero at the right end).
    pub fn root_in_interval(&self, i: usize, normal: &Vector, offset: f64) -> Option<f64> {
        let g = |t: f64| normal.dot(&self.position(t)) - offset;
        let (ta, tb) = (self.times[i], self.times[i + 1]);
        // Sub-sample so that a double crossing within one step is not missed.
        const SUB: usize = 4;
        let mut prev_t = ta;
        let mut prev_g = normal.dot(&self.x[i]) - offset;
        if i == 0 && prev_g == 0.0 {
            return Some(ta);
        }
        for k in 1..=SUB {
            let t = if k == SUB { tb } else { ta + (tb - ta) * k as f64 / SUB as f64 };
            let gv = if k == SUB { normal.dot(&self.x[i + 1]) - offset } else { g(t) };
            if prev_g != 0.0 && prev_g * gv <= 0.0 {
                return Some(bracketed_root(&g, prev_t, t, prev_g, gv));
            }
            prev_t = t;
            prev_g = gv;
        }
        None
    }
}

/// Illinois-modified regula falsi on a sign-changing bracket.
fn bracketed_root<G: Fn(f64) -> f64>(g: &G, mut a: f64, mut b: f64, mut ga: f64, mut gb: f64) -> f64 {
    if gb == 0.0 {
        return b;
    }
    let mut side = 0i8;
    for _ in 0..200 {
        let c = (a * gb - b * ga) / (gb - ga);
        let c = if c.is_finite() && c > a.min(b) && c < a.max(b) { c } else { 0.5 * (a + b) };
        let gc = g(c);
        if gc == 0.0 || (b - a).abs() < 1e-15 * (1.0 + c.abs()) {
            return c;
        }
        if gc * gb < 0.0 {
            a = b;
            ga = gb;
            side = 0;
        } else {
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        b = c;
        gb = gc;
    }
    0.5 * (a + b)
}

/// A single crossing of a section.
#[derive(Debug, Clone)]
pub struct SectionEvent {
    pub time: f64,
    pub state: PhasePoint,
    pub velocity: Vector,
    /// Sign of the crossing (+1 increasing functional, -1 decreasing).
    pub direction: i8,
    /// |d/dt functional| below 1e-8: the crossing is numerically tangential.
    pub tangential: bool,
    /// |functional(state)| after polishing.
    pub residual: f64,
}

/// Couples a metric, a conformal factor and integration options.
#[derive(Debug, Clone, Copy)]
pub struct Flow<'a> {
    pub metric: &'a dyn MetricField,
    pub factor: &'a dyn ConformalFactor,
    pub opts: FlowOptions,
}

impl<'a> Flow<'a> {
    pub fn new(metric: &'a dyn MetricField, factor: &'a dyn ConformalFactor, opts: FlowOptions) -> Self {
        Flow { metric, factor, opts }
    }

    /// Integrate the perturbed flow from `start` for time `duration > 0`.
    pub fn integrate(&self, start: &PhasePoint, duration: f64) -> Result<GeodesicArc> {
        self.integrate_from(start, 0.0, duration)
    }

    pub fn integrate_from(&self, start: &PhasePoint, t0: f64, duration: f64) -> Result<GeodesicArc> {
        let n = self.metric.dim();
        if start.x.len() != n || start.p.len() != n {
            return Err(GeoError::InvalidInput(format!("state dimension does not match metric dimension {n}")));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(GeoError::InvalidInput(format!("integration duration must be positive, got {duration}")));
        }
        if !(self.opts.tol > 0.0) {
            return Err(GeoError::InvalidInput("tolerance must be positive".into()));
        }
        let mut arc = GeodesicArc {
            times: Vec::new(),
            x: Vec::new(),
            p: Vec::new(),
            dx: Vec::new(),
            dp: Vec::new(),
            ddx: Vec::new(),
            energy: Vec::new(),
            tol: self.opts.tol,
        };
        let rhs = |y: &[f64], dy: &mut [f64]| -> Result<()> {
            let pp = PhasePoint::from_state(y);
            let j = phase_jet(self.metric, self.factor, &pp.x, &pp.p)?;
            dy[..n].copy_from_slice(j.dx.as_slice());
            dy[n..].copy_from_slice(j.dp.as_slice());
            Ok(())
        };
        let energy_tol = self.opts.energy_tol;
        let observer = |t: f64, y: &[f64], _dy: &[f64]| -> Result<()> {
            let pp = PhasePoint::from_state(y);
            let j = phase_jet(self.metric, self.factor, &pp.x, &pp.p)?;
            if let Some(e0) = arc.energy.first() {
                let drift = (j.energy - e0).abs();
                if drift > energy_tol {
                    return Err(GeoError::EnergyDrift { t, drift, tol: energy_tol });
                }
            }
            arc.times.push(t);
            arc.x.push(pp.x);
            arc.p.push(pp.p);
            arc.dx.push(j.dx);
            arc.dp.push(j.dp);
            arc.ddx.push(j.ddx);
            arc.energy.push(j.energy);
            Ok(())
        };
        ode::integrate(rhs, t0, &start.to_state(), t0 + duration, &self.opts.ode(), observer)?;
        Ok(arc)
    }

    /// Phase point reached after time `dt >= 0` from `start`.
    pub fn advance(&self, start: &PhasePoint, dt: f64) -> Result<PhasePoint> {
        if dt == 0.0 {
            return Ok(start.clone());
        }
        if dt < 0.0 {
            let flipped = PhasePoint::new(start.x.clone(), -&start.p);
            let back = self.integrate(&flipped, -dt)?.end();
            return Ok(PhasePoint::new(back.x, -back.p));
        }
        Ok(self.integrate(start, dt)?.end())
    }

    /// Map a unit tangent vector for e^f G forward by time t.
    pub fn flow_map(&self, tp: &TangentPoint, t: f64) -> Result<TangentPoint> {
        let pp = self.to_phase(tp)?;
        if t == 0.0 {
            return Ok(tp.clone());
        }
        let end = self.advance(&pp, t)?;
        self.to_tangent(&end)
    }

    /// p = e^f G v, after checking that v is unit for e^f G.
    pub fn to_phase(&self, tp: &TangentPoint) -> Result<PhasePoint> {
        let g = self.metric.matrix(&tp.x);
        let ef = self.factor.value(&tp.x)?.exp();
        let gv = &g * &tp.v * ef;
        let n2 = tp.v.dot(&gv);
        if (n2 - 1.0).abs() > 1e-10 {
            return Err(GeoError::NotUnit { norm_sq: n2 });
        }
        Ok(PhasePoint::new(tp.x.clone(), gv))
    }

    pub fn to_tangent(&self, pp: &PhasePoint) -> Result<TangentPoint> {
        let g = self.metric.matrix(&pp.x);
        let ef = self.factor.value(&pp.x)?.exp();
        let v = factorize(&g, &pp.x)?.solve(&pp.p) / ef;
        Ok(TangentPoint::new(pp.x.clone(), v))
    }

    /// Polish a crossing of <normal, x> = offset near `t_guess` by Newton
    /// iteration on the re-integrated flow, starting from arc node `i`.
    pub fn refine_crossing(
        &self,
        arc: &GeodesicArc,
        i: usize,
        t_guess: f64,
        normal: &Vector,
        offset: f64,
    ) -> Result<SectionEvent> {
        let base = PhasePoint::new(arc.x[i].clone(), arc.p[i].clone());
        let t_base = arc.times[i];
        let fine = Flow { opts: FlowOptions { tol: (self.opts.tol * 0.1).max(1e-14), ..self.opts }, ..*self };
        let mut t = t_guess;
        let mut state = fine.advance(&base, t - t_base)?;
        for _ in 0..8 {
            let j = phase_jet(self.metric, self.factor, &state.x, &state.p)?;
            let g = normal.dot(&state.x) - offset;
            let dg = normal.dot(&j.dx);
            if dg.abs() < 1e-14 || g.abs() < 1e-15 {
                break;
            }
            let step = -g / dg;
            state = fine.advance(&state, step)?;
            t += step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        let j = phase_jet(self.metric, self.factor, &state.x, &state.p)?;
        let rate = normal.dot(&j.dx);
        Ok(SectionEvent {
            time: t,
            residual: (normal.dot(&state.x) - offset).abs(),
            direction: if rate >= 0.0 { 1 } else { -1 },
            tangential: rate.abs() < 1e-8,
            velocity: j.dx,
            state,
        })
    }
}

/// Integrate the unperturbed (or perturbed) flow from `start` for `duration`
/// at local tolerance `tol`.
pub fn integrate(
    metric: &dyn MetricField,
    factor: Option<&dyn ConformalFactor>,
    start: &PhasePoint,
    duration: f64,
    tol: f64,
) -> Result<GeodesicArc> {
    let zero = ZeroFactor::new(metric.dim());
    let f = factor.unwrap_or(&zero);
    Flow::new(metric, f, FlowOptions::with_tol(tol)).integrate(start, duration)
}

/// The unperturbed geodesic through `tp` on [-half, half], with times
/// shifted so that it starts at 0.
pub fn geodesic_through(metric: &dyn MetricField, tp: &TangentPoint, half: f64, opts: FlowOptions) -> Result<GeodesicArc> {
    let zero = ZeroFactor::new(metric.dim());
    let flow = Flow::new(metric, &zero, opts);
    let back = flow.advance(&flow.to_phase(tp)?, -half)?;
    flow.integrate(&back, 2.0 * half)
}

/// Flow a unit tangent vector forward by time t (t = 0 is the identity).
pub fn flow_map(
    metric: &dyn MetricField,
    factor: Option<&dyn ConformalFactor>,
    tp: &TangentPoint,
    t: f64,
) -> Result<TangentPoint> {
    let zero = ZeroFactor::new(metric.dim());
    let f = factor.unwrap_or(&zero);
    Flow::new(metric, f, FlowOptions::default()).flow_map(tp, t)
}

/// Crossings of the hyperplane {x_coord = level}, located on the dense
/// output, in time order.
pub fn section_crossings(arc: &GeodesicArc, coord: usize, level: f64) -> Result<Vec<SectionEvent>> {
    let n = arc.dim();
    if coord >= n {
        return Err(GeoError::InvalidInput(format!("coordinate {coord} out of range for dimension {n}")));
    }
    let mut normal = Vector::zeros(n);
    normal[coord] = 1.0;
    let mut out = Vec::new();
    for i in 0..arc.len().saturating_sub(1) {
        if let Some(t) = arc.root_in_interval(i, &normal, level) {
            let (x, v, _) = arc.position_jet(t);
            let rate = v[coord];
            out.push(SectionEvent {
                time: t,
                residual: (x[coord] - level).abs(),
                state: PhasePoint::new(x, arc.momentum(t)),
                direction: if rate >= 0.0 { 1 } else { -1 },
                tangential: rate.abs() < 1e-8,
                velocity: v,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::LinearFactor;
    use crate::metric::{hamiltonian, MetricSpec};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn flat_straight_line() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let arc = integrate(&m, None, &PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0])), 1.0, 1e-12).unwrap();
        let e = arc.end();
        assert!((e.x - v(&[1.0, 0.0])).norm() < 1e-12);
        assert!((e.p - v(&[1.0, 0.0])).norm() < 1e-12);
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            assert!((arc.position(t) - v(&[t, 0.0])).norm() < 1e-12);
        }
    }

    #[test]
    fn flow_map_zero_time_identity() {
        let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.1, modes: 3, seed: 2 }.build().unwrap();
        let x = v(&[0.2, 0.3]);
        let u = crate::metric::unit_normalize(&m, &x, &v(&[1.0, 0.4])).unwrap();
        let tp = TangentPoint::new(x, u);
        assert_eq!(flow_map(&m, None, &tp, 0.0).unwrap(), tp);
    }

    #[test]
    fn flow_map_flat_torus_period() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let tp = TangentPoint::new(v(&[0.25, 0.5]), v(&[1.0, 0.0]));
        let out = flow_map(&m, None, &tp, 1.0).unwrap();
        let wrapped = out.x.map(|c| c.rem_euclid(1.0));
        assert!((wrapped - &tp.x).norm() < 1e-12);
        assert!((out.v - &tp.v).norm() < 1e-12);
    }

    #[test]
    fn zero_duration_rejected() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        assert!(integrate(&m, None, &PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0])), 0.0, 1e-12).is_err());
        assert!(integrate(&m, None, &PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0])), 1.0, 0.0).is_err());
    }

    #[test]
    fn non_unit_vector_rejected() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let tp = TangentPoint::new(v(&[0.0, 0.0]), v(&[2.0, 0.0]));
        assert!(matches!(flow_map(&m, None, &tp, 1.0), Err(GeoError::NotUnit { .. })));
    }

    #[test]
    fn reverse_time_round_trip() {
        let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.1, modes: 3, seed: 5 }.build().unwrap();
        let x = v(&[0.1, 0.7]);
        let u = crate::metric::unit_normalize(&m, &x, &v(&[0.6, 0.8])).unwrap();
        let tp = TangentPoint::new(x, u);
        let zero = ZeroFactor::new(2);
        let flow = Flow::new(&m, &zero, FlowOptions::default());
        let fwd = flow.flow_map(&tp, 3.0).unwrap();
        let back = flow.flow_map(&fwd, -3.0).unwrap();
        assert!(back.distance(&tp) < 1e-9);
    }

    #[test]
    fn energy_conserved_with_factor() {
        let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.1, modes: 3, seed: 9 }.build().unwrap();
        let f = LinearFactor::new(v(&[0.05, -0.02]), 0.0);
        let arc = Flow::new(&m, &f, FlowOptions::default())
            .integrate(&PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.2])), 5.0)
            .unwrap();
        assert!(arc.max_energy_drift() < 1e-10);
    }

    #[test]
    fn section_crossings_flat_diagonal() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let s = 0.5f64.sqrt();
        let arc = integrate(&m, None, &PhasePoint::new(v(&[0.1, 0.0]), v(&[s, s])), 5.0, 1e-12).unwrap();
        let ev = section_crossings(&arc, 0, 1.0).unwrap();
        assert_eq!(ev.len(), 1);
        assert!((ev[0].time - 0.9 / s).abs() < 1e-12);
        assert!(ev[0].residual < 1e-10);
        assert_eq!(ev[0].direction, 1);
        assert!(!ev[0].tangential);
    }

    #[test]
    fn tangential_crossing_flagged() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let arc = integrate(&m, None, &PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0])), 1.0, 1e-12).unwrap();
        let ev = section_crossings(&arc, 1, 0.0).unwrap();
        assert!(!ev.is_empty());
        assert!(ev[0].tangential);
    }

    #[test]
    fn csv_columns() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let arc = integrate(&m, None, &PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0])), 0.2, 1e-12).unwrap();
        let mut buf = Vec::new();
        arc.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x1,x2,p1,p2,H");
        assert_eq!(text.lines().count(), arc.len() + 1);
    }

    #[test]
    fn refined_crossing_is_exact() {
        let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.2, modes: 3, seed: 4 }.build().unwrap();
        let zero = ZeroFactor::new(2);
        let flow = Flow::new(&m, &zero, FlowOptions { max_step: 0.5, ..Default::default() });
        let start = PhasePoint::new(v(&[0.0, 0.0]), v(&[0.9, 0.5]));
        let arc = flow.integrate(&start, 3.0).unwrap();
        let normal = v(&[1.0, 0.0]);
        let i = (0..arc.len() - 1).find(|&i| arc.root_in_interval(i, &normal, 1.0).is_some()).unwrap();
        let t0 = arc.root_in_interval(i, &normal, 1.0).unwrap();
        let ev = flow.refine_crossing(&arc, i, t0, &normal, 1.0).unwrap();
        assert!(ev.residual < 1e-12);
        let direct = flow.advance(&start, ev.time).unwrap();
        assert!((direct.x - &ev.state.x).norm() < 1e-10);
        let h0 = hamiltonian(&m, &start).unwrap();
        assert!((hamiltonian(&m, &ev.state).unwrap() - h0).abs() < 1e-10);
    }
}
