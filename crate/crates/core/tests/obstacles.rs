use geoclose::connector::ConnectOptions;
use geoclose::factor::{gradient_check, ZeroFactor};
use geoclose::flow::{Flow, FlowOptions, GeodesicArc};
use geoclose::metric::{unit_normalize, MetricField, MetricSpec, PhasePoint, TangentPoint, Vector};
use geoclose::obstacle::{connect_with_obstacles, ObstacleOptions, ObstacleSet};
use std::sync::Arc;

fn v(xs: &[f64]) -> Vector {
    Vector::from_column_slice(xs)
}

fn tp(m: &dyn MetricField, x: &[f64], dir: &[f64]) -> TangentPoint {
    let x = v(x);
    let u = unit_normalize(m, &x, &v(dir)).unwrap();
    TangentPoint::new(x, u)
}

/// Geodesic through `through` with direction `dir`, extending `half` on
/// either side.
fn line_arc(m: &dyn MetricField, through: &[f64], dir: &[f64], half: f64) -> GeodesicArc {
    let zero = ZeroFactor::new(m.dim());
    let flow = Flow::new(m, &zero, FlowOptions { tol: 1e-13, max_step: 0.005, ..Default::default() });
    let mid = tp(m, through, dir);
    let back = flow.advance(&flow.to_phase(&mid).unwrap(), -half).unwrap();
    flow.integrate(&PhasePoint::new(back.x, back.p), 2.0 * half).unwrap()
}

fn flat() -> Arc<dyn MetricField> {
    Arc::new(MetricSpec::Flat { dim: 2 }.build().unwrap())
}

#[test]
fn crossing_pair_inside_support_is_preserved() {
    let m = flat();
    let a = tp(m.as_ref(), &[0.0, 0.0], &[1.0, 0.0]);
    let b = tp(m.as_ref(), &[0.0, 0.008], &[1.0, 0.004]);
    let obs = ObstacleSet::new(vec![
        line_arc(m.as_ref(), &[0.55, 0.0], &[1.0, 1.0], 0.4),
        line_arc(m.as_ref(), &[0.45, 0.0], &[-1.0, 1.0], 0.4),
    ]);
    let c = connect_with_obstacles(m, &a, &b, 1.0, 0.2, &obs, &ConnectOptions::default(), &ObstacleOptions::default())
        .unwrap();
    let r = &c.obstacle_report;
    println!("{:#?}", c.report);
    println!("{:#?}", r);
    assert_eq!(r.geometry.cross_points.len(), 1);
    assert_eq!(r.geometry.touch_params.len(), 2);
    assert!(c.report.verified, "{:?}", c.report.failure);
    assert!(r.obstacles.iter().all(|o| o.passed));

    let g = &r.geometry;
    let mut pts = Vec::new();
    for q in g.cross_points.iter().chain(g.touch_points.iter()) {
        for i in -4..=4 {
            for j in -4..=4 {
                pts.push(q + v(&[i as f64, j as f64]) * (0.4 * g.mu));
            }
        }
    }
    let err = gradient_check(c.factor.as_ref(), &pts, 1e-7).unwrap();
    assert!(err < 1e-4, "gradient mismatch {err:e}");
}

#[test]
fn no_obstacles_keeps_the_tube_factor() {
    let m = flat();
    let a = tp(m.as_ref(), &[0.0, 0.0], &[1.0, 0.0]);
    let b = tp(m.as_ref(), &[0.0, 0.008], &[1.0, 0.004]);
    let c = connect_with_obstacles(
        m,
        &a,
        &b,
        1.0,
        0.2,
        &ObstacleSet::default(),
        &ConnectOptions::default(),
        &ObstacleOptions::default(),
    )
    .unwrap();
    assert!(Arc::ptr_eq(&c.factor, &c.base));
    assert!(c.obstacle_report.omega.is_none());
    assert!(c.obstacle_report.patch_centers.is_empty());
    assert!(c.report.verified, "{:?}", c.report.failure);
}

#[test]
fn crossing_on_geodesic_part_is_snapped() {
    let m = flat();
    let a = tp(m.as_ref(), &[0.0, 0.0], &[1.0, 0.0]);
    let b = tp(m.as_ref(), &[0.0, 0.008], &[1.0, 0.004]);
    let obs = ObstacleSet::new(vec![line_arc(m.as_ref(), &[0.12, 0.0], &[1.0, 0.8], 0.4)]);
    let c = connect_with_obstacles(m, &a, &b, 1.0, 0.2, &obs, &ConnectOptions::default(), &ObstacleOptions::default())
        .unwrap();
    let r = &c.obstacle_report;
    assert!(r.omega.is_none());
    assert!(r.geometry.cross_points.is_empty());
    assert_eq!(r.geometry.touch_params.len(), 1);
    assert!(r.geometry.touch_params[0] < 1.0 / 3.0);
    assert!(c.report.verified, "{:?}", c.report.failure);
    assert!(r.obstacles[0].colinearity_residual < 1e-7);
    assert!(r.obstacles[0].hausdorff < 1e-7);
}

#[test]
fn obstacles_on_a_trigonometric_metric() {
    let m: Arc<dyn MetricField> =
        Arc::new(MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.02, modes: 3, seed: 5 }.build().unwrap());
    let a = tp(m.as_ref(), &[0.0, 0.0], &[1.0, 0.0]);
    let b = tp(m.as_ref(), &[0.0, 0.008], &[1.0, 0.004]);
    let obs = ObstacleSet::new(vec![
        line_arc(m.as_ref(), &[0.55, 0.0], &[1.0, 1.0], 0.4),
        line_arc(m.as_ref(), &[0.2, 0.0], &[-1.0, 1.5], 0.4),
    ]);
    let c = connect_with_obstacles(m, &a, &b, 1.0, 0.2, &obs, &ConnectOptions::default(), &ObstacleOptions::default())
        .unwrap();
    let r = &c.obstacle_report;
    println!("{:?}", r.obstacles);
    assert!(c.report.verified, "{:?}", c.report.failure);
    for o in &r.obstacles {
        assert!(o.colinearity_residual < 1e-7 && o.hausdorff < 1e-6, "{o:?}");
    }
}
