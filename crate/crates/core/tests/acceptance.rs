//! The acceptance criteria, run in order with one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`). The process fails when a
//! criterion fails that is not listed in `KNOWN_FAILURES`.

use geoclose::closer::{close_orbit, CloseOptions, ClosedOrbit, RecurrenceOptions};
use geoclose::connector::{connect, ConnectOptions, ConnectingData, Connection};
use geoclose::factor::{gradient_check, ConformalFactor, GaussianBump, LinearFactor, SupportBox, ZeroFactor};
use geoclose::flow::{geodesic_through, Flow, FlowOptions, GeodesicArc};
use geoclose::metric::{unit_normalize, MetricField, MetricSpec, TangentPoint, Vector};
use geoclose::obstacle::{connect_with_obstacles, ObstacleConnection, ObstacleOptions, ObstacleSet};
use geoclose::reparam::{beta_reparam, colinearity_check, verify_perturbed_geodesic, VerifyOptions};
use geoclose::smooth::ramp;
use geoclose::tube_bump::{build_bump, TubeBumpSpec, TubeCurve};
use geoclose::GeoError;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

/// Criteria that fail for reasons recorded in the decisions ledger.
const KNOWN_FAILURES: &[u32] = &[4, 10];

struct Line {
    id: u32,
    passed: bool,
    detail: String,
}

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn tp(m: &dyn MetricField, x: &[f64], dir: &[f64]) -> TangentPoint {
    let x = v(x);
    let u = unit_normalize(m, &x, &v(dir)).unwrap();
    TangentPoint::new(x, u)
}

fn trig() -> Arc<dyn MetricField> {
    Arc::new(MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.05, modes: 3, seed: 0 }.build().unwrap())
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let clock = Instant::now();
    let out = f();
    (out, clock.elapsed().as_secs_f64())
}

/// sup |H(x~, p~) - 1/2| and sup |<u~, x~'>| over `count` samples.
fn curve_residuals(data: &ConnectingData, count: usize) -> (f64, f64) {
    let m = data.metric();
    let mut energy: f64 = 0.0;
    let mut orth: f64 = 0.0;
    for (_, s) in data.samples(count - 1) {
        let g = m.matrix(&s.x);
        let q = g.cholesky().expect("metric positive definite").inverse();
        energy = energy.max((0.5 * s.p.dot(&(q * &s.p)) - 0.5).abs());
        orth = orth.max(s.u.dot(&s.v).abs());
    }
    (energy, orth)
}

// 1

fn flat_exactness() -> Line {
    let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
    let zero = ZeroFactor::new(2);
    let ((err, steps), secs) = timed(|| {
        let start = tp(&m, &[0.1, 0.2], &[0.8, 0.35]);
        let flow = Flow::new(&m, &zero, FlowOptions { tol: 1e-11, ..Default::default() });
        let arc = flow.integrate(&flow.to_phase(&start).unwrap(), 1.0).unwrap();
        let mut err: f64 = 0.0;
        for k in 0..=1000 {
            let t = k as f64 / 1000.0;
            err = err.max((arc.position(t) - (&start.x + &start.v * t)).norm());
        }
        (err, arc.len())
    });
    Line {
        id: 1,
        passed: err < 1e-12 && secs < 1.0,
        detail: format!("max position error {err:.2e} over {steps} nodes, {secs:.2} s"),
    }
}

// 4

/// y(t) = (t, b sin(k t)) with w = a (ramp up - ramp down) times the unit normal.
#[derive(Debug)]
struct RandomCurve {
    amplitude: f64,
    bend: f64,
    freq: f64,
    up: (f64, f64),
    down: (f64, f64),
}

impl RandomCurve {
    fn sample(rng: &mut ChaCha8Rng) -> RandomCurve {
        let a = rng.random_range(0.28..0.34);
        let b = rng.random_range(a + 0.06..0.5);
        let c = rng.random_range(0.5..0.66);
        let d = rng.random_range(c + 0.04..0.72);
        RandomCurve {
            amplitude: rng.random_range(0.2..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            bend: rng.random_range(0.0..0.03),
            freq: rng.random_range(1.0..4.0),
            up: (a, b),
            down: (c, d),
        }
    }

    fn profile(&self, t: f64) -> f64 {
        self.amplitude * (ramp(t, self.up.0, self.up.1).0 - ramp(t, self.down.0, self.down.1).0)
    }
}

impl TubeCurve for RandomCurve {
    fn dim(&self) -> usize {
        2
    }
    fn span(&self) -> f64 {
        1.0
    }
    fn point(&self, t: f64) -> (Vector, Vector) {
        let (s, c) = (self.freq * t).sin_cos();
        (v(&[t, self.bend * s]), v(&[1.0, self.bend * self.freq * c]))
    }
    fn field(&self, t: f64) -> Vector {
        let (_, dy) = self.point(t);
        v(&[-dy[1], dy[0]]) / dy.norm() * self.profile(t)
    }
    fn breakpoints(&self) -> Vec<f64> {
        vec![self.up.0, self.up.1, self.down.0, self.down.1]
    }
}

fn tube_bump_suite() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (result, secs) = timed(|| {
        let mut grad: f64 = 0.0;
        let mut value: f64 = 0.0;
        let mut leaks = 0usize;
        let mut worst_spread: f64 = 0.0;
        for _ in 0..5 {
            let curve = Arc::new(RandomCurve::sample(&mut rng));
            let w0 = (0..=1000).map(|k| curve.field(k as f64 / 1000.0).norm()).fold(0.0, f64::max);
            let mut ratios = Vec::new();
            for mu in [0.02, 0.04, 0.08] {
                let b = build_bump(TubeBumpSpec { curve: curve.clone(), beta: 0.25, mu }).unwrap();
                for k in 0..=400 {
                    let t = k as f64 / 400.0;
                    let y = curve.point(t).0;
                    let (val, g) = b.value_grad(&y).unwrap();
                    value = value.max(val.abs());
                    grad = grad.max((g - curve.field(t)).norm());
                }
                for _ in 0..400 {
                    let t: f64 = rng.random_range(-0.2..1.2);
                    let y = curve.point(t.clamp(0.0, 1.0)).0;
                    let z = rng.random_range(2.0 * mu / 3.0..4.0 * mu) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let x = v(&[t, y[1] + z]);
                    let (val, g) = b.value_grad(&x).unwrap();
                    if val != 0.0 || g.norm() != 0.0 {
                        leaks += 1;
                    }
                }
                ratios.push(b.c1_norm_estimate().unwrap() * mu / w0);
            }
            let hi = ratios.iter().cloned().fold(0.0, f64::max);
            let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            worst_spread = worst_spread.max(hi / lo);
        }
        (grad, value, leaks, worst_spread)
    });
    let (grad, value, leaks, spread) = result;
    Line {
        id: 4,
        passed: grad < 1e-8 && value < 1e-10 && leaks == 0 && spread < 3.0 && secs < 30.0,
        detail: format!(
            "grad W - w {grad:.2e}, W on curve {value:.2e}, {leaks} nonzero outside support, \
             |W|_C1 mu/|w|_C0 spread {spread:.2}, {secs:.1} s"
        ),
    }
}

// 5, 6, 7

fn crit5_endpoints(m: &dyn MetricField) -> (TangentPoint, TangentPoint) {
    let a = tp(m, &[0.0, 0.0], &[1.0, 0.0]);
    let b = tp(m, &[0.006, 0.008], &[1.0, 0.0]);
    (a, b)
}

fn endpoint_matching(m: &Arc<dyn MetricField>) -> (Line, Connection) {
    let (a, b) = crit5_endpoints(m.as_ref());
    let (c, secs) = timed(|| connect(m.clone(), &a, &b, 1.0, 0.2, &ConnectOptions::default()).unwrap());
    let r = &c.report;
    let line = Line {
        id: 5,
        passed: r.endpoint_residual < 1e-7 && secs < 30.0,
        detail: format!(
            "separation {:.3e}, endpoint residual {:.2e}, tau~ {:.6}, {secs:.1} s",
            r.separation, r.endpoint_residual, r.tau_tilde
        ),
    };
    (line, c)
}

fn linear_scaling(m: &Arc<dyn MetricField>) -> (Line, Vec<Connection>) {
    let start = tp(m.as_ref(), &[0.0, 0.0], &[1.0, 0.0]);
    let dir = v(&[0.6, 0.8]);
    let (conns, secs) = timed(|| {
        [1e-2, 5e-3, 2.5e-3, 1.25e-3]
            .iter()
            .map(|&s| {
                let x = &start.x + &dir * s;
                let u = unit_normalize(m.as_ref(), &x, &v(&[1.0, 0.3 * s])).unwrap();
                connect(m.clone(), &start, &TangentPoint::new(x, u), 1.0, 0.2, &ConnectOptions::default()).unwrap()
            })
            .collect::<Vec<_>>()
    });
    let c1: Vec<f64> = conns.iter().map(|c| c.report.f_c1_norm / c.report.separation).collect();
    let tt: Vec<f64> = conns.iter().map(|c| (c.report.tau_tilde - 1.0).abs() / c.report.separation).collect();
    let spread = |xs: &[f64]| xs.iter().cloned().fold(0.0, f64::max) / xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let (s1, s2) = (spread(&c1), spread(&tt));
    let verified = conns.iter().all(|c| c.report.verified);
    let line = Line {
        id: 6,
        passed: s1 < 2.0 && s2 < 2.0 && verified && secs < 120.0,
        detail: format!(
            "|f|_C1/sep {:.3e}..{:.3e} (spread {s1:.3}), |tau~-tau|/sep {:.3e}..{:.3e} (spread {s2:.3}), {secs:.1} s",
            c1.iter().cloned().fold(f64::INFINITY, f64::min),
            c1.iter().cloned().fold(0.0, f64::max),
            tt.iter().cloned().fold(f64::INFINITY, f64::min),
            tt.iter().cloned().fold(0.0, f64::max),
        ),
    };
    (line, conns)
}

fn obstacle_preservation(m: &Arc<dyn MetricField>) -> (Line, ObstacleConnection) {
    let (a, b) = crit5_endpoints(m.as_ref());
    let (c, secs) = timed(|| {
        let flow = FlowOptions { tol: 1e-13, max_step: 0.005, ..Default::default() };
        let arcs: Vec<GeodesicArc> = [([0.55, 0.0], [1.0, 1.0]), ([0.45, 0.0], [-1.0, 1.0])]
            .iter()
            .map(|(x, d)| geodesic_through(m.as_ref(), &tp(m.as_ref(), x, d), 0.4, flow).unwrap())
            .collect();
        connect_with_obstacles(
            m.clone(),
            &a,
            &b,
            1.0,
            0.2,
            &ObstacleSet::new(arcs),
            &ConnectOptions::default(),
            &ObstacleOptions::default(),
        )
        .unwrap()
    });
    let r = &c.obstacle_report;
    let haus = r.obstacles.iter().map(|o| o.hausdorff).fold(0.0, f64::max);
    let line = Line {
        id: 7,
        passed: haus < 1e-6 && c.report.endpoint_residual < 1e-7 && secs < 60.0,
        detail: format!(
            "{} obstacles, {} crossing(s) and {} touch point(s) in the support, max hausdorff {haus:.2e}, \
             endpoint residual {:.2e}, {secs:.1} s",
            r.obstacles.len(),
            r.geometry.cross_points.len(),
            r.geometry.touch_points.len(),
            c.report.endpoint_residual
        ),
    };
    (line, c)
}

// 8

fn lemma3(c: &ObstacleConnection) -> Line {
    let checks = &c.obstacle_report.obstacles;
    let sys = checks.iter().map(|o| o.system_residual).fold(0.0, f64::max);
    let rt = checks.iter().map(|o| o.round_trip).fold(0.0, f64::max);
    Line {
        id: 8,
        passed: !checks.is_empty() && sys < 1e-7 && rt < 1e-9,
        detail: format!("{} obstacles, max system residual {sys:.2e}, max round trip {rt:.2e}", checks.len()),
    }
}

// 2, 3

fn curve_invariants(id: u32, data: &[&ConnectingData]) -> Line {
    let (e, o) = data
        .iter()
        .map(|d| curve_residuals(d, 400))
        .fold((0.0f64, 0.0f64), |(a, b), (x, y)| (a.max(x), b.max(y)));
    if id == 2 {
        Line { id, passed: e < 1e-9, detail: format!("{} curves, max |H - 1/2| {e:.2e}", data.len()) }
    } else {
        Line { id, passed: o < 1e-9, detail: format!("{} curves, max |<u~, x~'>| {o:.2e}", data.len()) }
    }
}

// 9

fn closing(m: &Arc<dyn MetricField>) -> (Line, ClosedOrbit) {
    let seed = tp(m.as_ref(), &[0.1, 0.2], &[1.0, 0.618]);
    let opts = CloseOptions {
        tau: 2.4,
        rho: 0.1,
        recurrence: RecurrenceOptions { max_time: 5e3, ..Default::default() },
        ..Default::default()
    };
    let (closed, secs) = timed(|| {
        close_orbit(m.clone(), &seed, &opts, &ConnectOptions::default(), &ObstacleOptions::default()).unwrap()
    });
    let r = &closed.report;
    let line = Line {
        id: 9,
        passed: r.closed
            && r.residuals.periodicity < 1e-5
            && r.f_c1_norm < 0.05
            && r.displacement < 0.05
            && secs < 300.0,
        detail: format!(
            "period {:.6}, gap {:.2e}, {} obstacles, periodicity {:.2e}, |f|_C1 {:.4}, displacement {:.4}, {secs:.1} s{}",
            r.period,
            r.gap,
            r.obstacle_count,
            r.residuals.periodicity,
            r.f_c1_norm,
            r.displacement,
            r.failure.as_ref().map(|f| format!(" ({f})")).unwrap_or_default()
        ),
    };
    (line, closed)
}

// 10

fn random_points(rng: &mut ChaCha8Rng, sb: &SupportBox, count: usize) -> Vec<Vector> {
    (0..count)
        .map(|_| Vector::from_iterator(sb.lo.len(), (0..sb.lo.len()).map(|i| rng.random_range(sb.lo[i]..=sb.hi[i]))))
        .collect()
}

fn gradient_fidelity(factors: &[(&str, &dyn ConformalFactor)]) -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let unit = SupportBox { lo: v(&[-1.0, -1.0]), hi: v(&[1.0, 1.0]) };
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    let mut fine_worst: f64 = 0.0;
    for (name, f) in factors {
        let sb = f.support().filter(|b| b.lo.iter().zip(b.hi.iter()).all(|(l, h)| l < h)).unwrap_or(unit.clone());
        let pts = random_points(&mut rng, &sb, 1000);
        let err = gradient_check(*f, &pts, 1e-5).unwrap();
        worst = worst.max(err);
        fine_worst = fine_worst.max(gradient_check(*f, &pts, 1e-7).unwrap());
        parts.push(format!("{name} {err:.1e}"));
    }
    Line { id: 10, passed: worst < 1e-6, detail: format!("{}; at h = 1e-7 worst {fine_worst:.1e}", parts.join(", ")) }
}

// 11

fn negative_controls(m: &Arc<dyn MetricField>) -> Line {
    let flat = MetricSpec::Flat { dim: 2 }.build().unwrap();
    let arc = geodesic_through(&flat, &tp(&flat, &[0.5, 0.0], &[1.0, 0.0]), 0.5, FlowOptions::default()).unwrap();
    let off_axis = GaussianBump { center: v(&[0.5, 0.05]), amplitude: 0.1, width: 0.1 };
    let colinear = LinearFactor::new(v(&[0.1, 0.0]), 0.0);
    let tilted = LinearFactor::new(v(&[0.1, 0.05]), 0.0);

    let col_rejects = matches!(colinearity_check(&off_axis, &arc, 1e-7), Err(GeoError::NotColinear { .. }));
    let col_accepts = colinearity_check(&colinear, &arc, 1e-12).is_ok();

    let opts = VerifyOptions::default();
    let rc = beta_reparam(&flat, &colinear, &arc).unwrap();
    let good = verify_perturbed_geodesic(&flat, &colinear, &rc, &opts).unwrap();
    // Re-timed for one factor, checked against another.
    let bad = verify_perturbed_geodesic(&flat, &tilted, &rc, &opts).unwrap();
    let ver_rejects = !bad.passed && bad.ensure().is_err();

    // A trigonometric metric whose factor was built for a different metric.
    let other = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.05, modes: 3, seed: 9 }.build().unwrap();
    let tarc = geodesic_through(m.as_ref(), &tp(m.as_ref(), &[0.5, 0.0], &[1.0, 0.0]), 0.5, FlowOptions::default())
        .unwrap();
    let rc2 = beta_reparam(m.as_ref(), &colinear, &tarc).unwrap();
    let cross = verify_perturbed_geodesic(&other, &colinear, &rc2, &opts).unwrap();

    Line {
        id: 11,
        passed: col_rejects && col_accepts && good.passed && ver_rejects && !cross.passed,
        detail: format!(
            "colinearity rejects broken factor: {col_rejects}, accepts colinear: {col_accepts}; \
             verify accepts matched ({:.1e}), rejects mismatched factor ({:.1e}) and metric ({:.1e})",
            good.system_residual, bad.system_residual, cross.system_residual
        ),
    }
}

fn main() {
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| filter.is_empty() || filter.contains(&id);
    let m = trig();
    let mut lines: Vec<Line> = Vec::new();
    let mut report = |l: Line| {
        let tag = if l.passed {
            "PASS"
        } else if KNOWN_FAILURES.contains(&l.id) {
            "FAIL (known)"
        } else {
            "FAIL"
        };
        println!("criterion {:>2}: {tag}: {}", l.id, l.detail);
        lines.push(l);
    };

    if want(1) {
        report(flat_exactness());
    }
    let needs_curves = [2, 3, 5, 6, 7, 8, 10].iter().any(|&i| want(i));
    if needs_curves {
        let (l5, c5) = endpoint_matching(&m);
        let (l6, c6) = linear_scaling(&m);
        let (l7, c7) = obstacle_preservation(&m);
        let mut curves: Vec<&ConnectingData> = vec![c5.data.as_ref(), c7.data.as_ref()];
        curves.extend(c6.iter().map(|c| c.data.as_ref()));
        for id in [2, 3] {
            if want(id) {
                report(curve_invariants(id, &curves));
            }
        }
        if want(4) {
            report(tube_bump_suite());
        }
        for (id, l) in [(5, l5), (6, l6), (7, l7)] {
            if want(id) {
                report(l);
            }
        }
        if want(8) {
            report(lemma3(&c7));
        }
        if want(9) || want(10) {
            let (l9, closed) = closing(&m);
            if want(9) {
                report(l9);
            }
            if want(10) {
                let bump = c5.bump.clone().expect("criterion 5 builds a bump");
                let zero = ZeroFactor::new(2);
                let linear = LinearFactor::new(v(&[0.3, -0.2]), 0.1);
                let gauss = GaussianBump { center: v(&[0.2, 0.1]), amplitude: 0.3, width: 0.2 };
                let periodic = closed.metric.factor.clone();
                report(gradient_fidelity(&[
                    ("zero", &zero),
                    ("linear", &linear),
                    ("gaussian", &gauss),
                    ("tube bump", bump.as_ref()),
                    ("obstacle", c7.factor.as_ref()),
                    ("periodic", periodic.as_ref()),
                ]));
            }
        }
    } else {
        if want(4) {
            report(tube_bump_suite());
        }
        if want(9) {
            report(closing(&m).0);
        }
    }
    if want(11) {
        report(negative_controls(&m));
    }

    let passed = lines.iter().filter(|l| l.passed).count();
    let unexpected: Vec<u32> = lines.iter().filter(|l| !l.passed && !KNOWN_FAILURES.contains(&l.id)).map(|l| l.id).collect();
    println!("{passed}/{} criteria passed", lines.len());
    if !unexpected.is_empty() {
        println!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
