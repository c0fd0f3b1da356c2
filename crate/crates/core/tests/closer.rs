use geoclose::closer::{
    align_chart, close_orbit, find_recurrence, Chart, ClosingReport, CloseOptions, RecurrenceOptions,
};
use geoclose::connector::ConnectOptions;
use geoclose::flow::FlowOptions;
use geoclose::metric::{unit_normalize, MetricField, MetricSpec, TangentPoint, Vector};
use geoclose::obstacle::ObstacleOptions;
use std::sync::Arc;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn tp(m: &dyn MetricField, x: &[f64], dir: &[f64]) -> TangentPoint {
    let x = v(x);
    let u = unit_normalize(m, &x, &v(dir)).unwrap();
    TangentPoint::new(x, u)
}

fn flat() -> Arc<dyn MetricField> {
    Arc::new(MetricSpec::Flat { dim: 2 }.build().unwrap())
}

#[test]
fn aligned_chart_sends_seed_to_origin_and_e1() {
    let m = flat();
    let seed = tp(m.as_ref(), &[0.3, 0.7], &[0.0, 1.0]);
    let a = align_chart(m.clone(), &seed, 1.0 / 40.0, &FlowOptions::default()).unwrap();
    let y = a.chart.to_chart(&seed);
    assert!(y.x.norm() < 1e-15);
    assert!((&y.v - v(&[1.0, 0.0])).norm() < 1e-15);
    // v = e2 is taken to e1 by the rotation through -pi/2
    assert!((a.chart.a[(0, 1)] - 1.0).abs() < 1e-15 && (a.chart.a[(1, 0)] + 1.0).abs() < 1e-15);
    let back = a.chart.from_chart(&y);
    assert!(back.distance(&seed) < 1e-15);

    let same = align_chart(m.clone(), &tp(m.as_ref(), &[0.0, 0.0], &[1.0, 0.0]), 0.025, &FlowOptions::default())
        .unwrap();
    assert_eq!(same.chart, Chart::identity(2));
}

#[test]
fn chart_metric_is_unit_at_origin_on_trig_metric() {
    let m: Arc<dyn MetricField> =
        Arc::new(MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.05, modes: 3, seed: 2 }.build().unwrap());
    let seed = tp(m.as_ref(), &[0.1, 0.2], &[0.6, 0.8]);
    let a = align_chart(m.clone(), &seed, 1.0 / 40.0, &FlowOptions::default()).unwrap();
    let g = a.metric.matrix(&Vector::zeros(2));
    assert!((g[(0, 0)] - 1.0).abs() < 1e-13);
    assert!(a.cone_deviation <= 0.1);
    assert_eq!(a.shrinks, 0);
}

#[test]
fn rational_slope_recurs_exactly() {
    let m = flat();
    let seed = tp(m.as_ref(), &[0.0, 0.0], &[1.0, 1.0]);
    let a = align_chart(m.clone(), &seed, 1.0 / 40.0, &FlowOptions::default()).unwrap();
    let opts = RecurrenceOptions { max_time: 3.0, ..Default::default() };
    let origin = TangentPoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0]));
    let pair = find_recurrence(a.metric.as_ref(), &a.chart, &origin, &opts, &FlowOptions::default()).unwrap();
    assert!((pair.return_time - 2f64.sqrt()).abs() < 1e-10, "{}", pair.return_time);
    assert!(pair.gap < 1e-12, "{}", pair.gap);
}

#[test]
fn golden_slope_gap_follows_return_times() {
    let m = flat();
    let phi = 0.5 * (1.0 + 5f64.sqrt());
    let seed = tp(m.as_ref(), &[0.0, 0.0], &[1.0, phi]);
    let a = align_chart(m.clone(), &seed, 1.0 / 40.0, &FlowOptions::default()).unwrap();
    let origin = TangentPoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0]));
    let opts = RecurrenceOptions { max_time: 100.0, target_gap: 1e-2, ..Default::default() };
    let pair = find_recurrence(a.metric.as_ref(), &a.chart, &origin, &opts, &FlowOptions::default()).unwrap();
    // On the flat torus the return after lattice displacement k lands at
    // lateral offset |k x u| measured along the section.
    let u = v(&[1.0, phi]).normalize();
    let k = v(&[pair.cell[0], pair.cell[1]]);
    let k_torus = k;
    let lateral = (k_torus[0] * u[1] - k_torus[1] * u[0]).abs();
    let along = k_torus.dot(&u);
    assert!((pair.gap - lateral).abs() < 1e-9, "gap {} vs {}", pair.gap, lateral);
    assert!((pair.return_time - along).abs() < 1e-9);
    assert!(pair.gap < 1e-2);
}

#[test]
fn rational_slope_closes_without_perturbation() {
    let m = flat();
    let seed = tp(m.as_ref(), &[0.2, 0.1], &[1.0, 1.0]);
    let opts = CloseOptions { recurrence: RecurrenceOptions { max_time: 3.0, ..Default::default() }, ..Default::default() };
    let c = close_orbit(m, &seed, &opts, &ConnectOptions::default(), &ObstacleOptions::default()).unwrap();
    let r = &c.report;
    assert!(r.closed, "{:?}", r.failure);
    assert_eq!(r.f_c1_norm, 0.0);
    assert!((r.period - 2f64.sqrt()).abs() < 1e-10);
    assert!(r.residuals.periodicity < 1e-12, "{}", r.residuals.periodicity);
    assert_eq!(r.obstacle_count, 0);
    let back = ClosingReport::from_json(&r.to_json().unwrap()).unwrap();
    assert_eq!(&back, r);
}
