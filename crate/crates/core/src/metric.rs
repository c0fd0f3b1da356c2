//! Riemannian metrics on the flat n-torus and the phase-space quantities
//! built from them.
//!
//! Points are represented in the universal cover R^n. Every family here is
//! Z^n-periodic unless it is built from non-integer wave vectors.

use crate::error::{GeoError, Result};
use crate::factor::ConformalFactor;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt::Debug;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// A smooth field of symmetric positive-definite matrices.
pub trait MetricField: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// G(x) together with the partial derivatives d_i G(x), i = 0..n.
    fn eval(&self, x: &Vector) -> (Matrix, Vec<Matrix>);

    fn matrix(&self, x: &Vector) -> Matrix {
        self.eval(x).0
    }

    /// Whether G(x + e_i) = G(x) for every lattice vector e_i.
    fn is_periodic(&self) -> bool;
}

/// Configuration-level description of a metric family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    Flat {
        dim: usize,
    },
    /// G = diag(scale_i (1 + amp_i sin(2 pi x_{i+1}))), indices cyclic.
    Diagonal {
        scales: Vec<f64>,
        #[serde(default)]
        amplitudes: Vec<f64>,
    },
    /// G = exp(a sin(2 pi k.x + phase)) I.
    ConformallyFlat {
        dim: usize,
        amplitude: f64,
        wave: Vec<f64>,
        #[serde(default)]
        phase: f64,
    },
    /// G = I + sum_m cos(2 pi k_m.x + phase_m) S_m with random symmetric S_m
    /// scaled so that sup|G - I| + max_i sup|d_i G| <= c1_size
    /// (entrywise max norm).
    TrigPerturbation {
        dim: usize,
        c1_size: f64,
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_modes() -> usize {
    3
}

#[derive(Debug, Clone)]
pub struct TrigMode {
    pub wave: Vec<f64>,
    pub phase: f64,
    pub coeff: Matrix,
}

/// A concrete metric, built from a [`MetricSpec`].
#[derive(Debug, Clone)]
pub enum Metric {
    Flat { dim: usize },
    Diagonal { scales: Vec<f64>, amplitudes: Vec<f64> },
    ConformallyFlat { dim: usize, amplitude: f64, wave: Vec<f64>, phase: f64 },
    Trig { dim: usize, modes: Vec<TrigMode> },
}

impl MetricSpec {
    pub fn build(&self) -> Result<Metric> {
        match self {
            MetricSpec::Flat { dim } => {
                check_dim(*dim)?;
                Ok(Metric::Flat { dim: *dim })
            }
            MetricSpec::Diagonal { scales, amplitudes } => {
                check_dim(scales.len())?;
                let amps = if amplitudes.is_empty() { vec![0.0; scales.len()] } else { amplitudes.clone() };
                if amps.len() != scales.len() {
                    return Err(GeoError::Config("diagonal metric: amplitudes and scales differ in length".into()));
                }
                if scales.iter().any(|s| !(*s > 0.0)) || amps.iter().any(|a| !(a.abs() < 1.0)) {
                    return Err(GeoError::Config("diagonal metric: need scales > 0 and |amplitudes| < 1".into()));
                }
                Ok(Metric::Diagonal { scales: scales.clone(), amplitudes: amps })
            }
            MetricSpec::ConformallyFlat { dim, amplitude, wave, phase } => {
                check_dim(*dim)?;
                if wave.len() != *dim {
                    return Err(GeoError::Config("conformally flat metric: wave vector has wrong length".into()));
                }
                if !amplitude.is_finite() || !phase.is_finite() {
                    return Err(GeoError::Config("conformally flat metric: non-finite parameter".into()));
                }
                Ok(Metric::ConformallyFlat { dim: *dim, amplitude: *amplitude, wave: wave.clone(), phase: *phase })
            }
            MetricSpec::TrigPerturbation { dim, c1_size, modes, seed } => {
                check_dim(*dim)?;
                if !(*c1_size >= 0.0 && *c1_size < 0.5) {
                    return Err(GeoError::Config("trig perturbation: c1_size must lie in [0, 0.5)".into()));
                }
                if *modes == 0 {
                    return Err(GeoError::Config("trig perturbation: need at least one mode".into()));
                }
                Ok(Metric::Trig { dim: *dim, modes: trig_modes(*dim, *c1_size, *modes, *seed) })
            }
        }
    }
}

fn check_dim(n: usize) -> Result<()> {
    if n < 2 {
        return Err(GeoError::Config(format!("dimension must be at least 2, got {n}")));
    }
    Ok(())
}

fn trig_modes(dim: usize, c1_size: f64, count: usize, seed: u64) -> Vec<TrigMode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut wave = vec![0.0; dim];
        while wave.iter().all(|k| *k == 0.0) {
            for k in wave.iter_mut() {
                *k = rng.random_range(-2i32..=2) as f64;
            }
        }
        let phase = rng.random_range(0.0..TAU);
        let mut coeff = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = rng.random_range(-1.0..1.0);
                coeff[(i, j)] = v;
                coeff[(j, i)] = v;
            }
        }
        modes.push(TrigMode { wave, phase, coeff });
    }
    let bound: f64 = modes
        .iter()
        .map(|m| {
            let kmax = m.wave.iter().fold(0.0f64, |a, k| a.max(k.abs()));
            m.coeff.amax() * (1.0 + TAU * kmax)
        })
        .sum();
    for m in modes.iter_mut() {
        m.coeff *= c1_size / bound;
    }
    modes
}

impl MetricField for Metric {
    fn dim(&self) -> usize {
        match self {
            Metric::Flat { dim } | Metric::ConformallyFlat { dim, .. } | Metric::Trig { dim, .. } => *dim,
            Metric::Diagonal { scales, .. } => scales.len(),
        }
    }

    fn eval(&self, x: &Vector) -> (Matrix, Vec<Matrix>) {
        let n = self.dim();
        match self {
            Metric::Flat { .. } => (Matrix::identity(n, n), vec![Matrix::zeros(n, n); n]),
            Metric::Diagonal { scales, amplitudes } => {
                let mut g = Matrix::zeros(n, n);
                let mut dg = vec![Matrix::zeros(n, n); n];
                for i in 0..n {
                    let j = (i + 1) % n;
                    let arg = TAU * x[j];
                    g[(i, i)] = scales[i] * (1.0 + amplitudes[i] * arg.sin());
                    dg[j][(i, i)] = scales[i] * amplitudes[i] * TAU * arg.cos();
                }
                (g, dg)
            }
            Metric::ConformallyFlat { amplitude, wave, phase, .. } => {
                let arg = TAU * wave.iter().zip(x.iter()).map(|(k, xi)| k * xi).sum::<f64>() + phase;
                let e = (amplitude * arg.sin()).exp();
                let de = e * amplitude * arg.cos() * TAU;
                let g = Matrix::identity(n, n) * e;
                let dg = wave.iter().map(|k| Matrix::identity(n, n) * (de * k)).collect();
                (g, dg)
            }
            Metric::Trig { modes, .. } => {
                let mut g = Matrix::identity(n, n);
                let mut dg = vec![Matrix::zeros(n, n); n];
                for m in modes {
                    let arg = TAU * m.wave.iter().zip(x.iter()).map(|(k, xi)| k * xi).sum::<f64>() + m.phase;
                    let (s, c) = arg.sin_cos();
                    g += &m.coeff * c;
                    for (i, d) in dg.iter_mut().enumerate() {
                        if m.wave[i] != 0.0 {
                            *d += &m.coeff * (-s * TAU * m.wave[i]);
                        }
                    }
                }
                (g, dg)
            }
        }
    }

    fn is_periodic(&self) -> bool {
        match self {
            Metric::ConformallyFlat { wave, .. } => wave.iter().all(|k| k.fract() == 0.0),
            _ => true,
        }
    }
}

/// Cotangent-bundle point (position, momentum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vector,
    pub p: Vector,
}

/// Tangent-bundle point (position, velocity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentPoint {
    pub x: Vector,
    pub v: Vector,
}

impl PhasePoint {
    pub fn new(x: Vector, p: Vector) -> Self {
        PhasePoint { x, p }
    }

    /// Concatenated (x, p) as a flat state vector.
    pub fn to_state(&self) -> Vec<f64> {
        self.x.iter().chain(self.p.iter()).copied().collect()
    }

    pub fn from_state(s: &[f64]) -> Self {
        let n = s.len() / 2;
        PhasePoint { x: Vector::from_column_slice(&s[..n]), p: Vector::from_column_slice(&s[n..]) }
    }
}

impl TangentPoint {
    pub fn new(x: Vector, v: Vector) -> Self {
        TangentPoint { x, v }
    }

    /// Euclidean distance in R^{2n} between (x, v) pairs.
    pub fn distance(&self, other: &TangentPoint) -> f64 {
        ((&self.x - &other.x).norm_squared() + (&self.v - &other.v).norm_squared()).sqrt()
    }
}

/// Cholesky factor of G(x), or a degeneracy error carrying the location.
pub fn factorize(g: &Matrix, x: &Vector) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(g.clone()).ok_or_else(|| GeoError::MetricDegenerate { x: x.iter().copied().collect() })
}

/// Q(x) = G(x)^{-1}.
pub fn dual_matrix(metric: &dyn MetricField, x: &Vector) -> Result<Matrix> {
    Ok(factorize(&metric.matrix(x), x)?.inverse())
}

/// d_i Q = -Q (d_i G) Q for every i.
pub fn dual_partials(metric: &dyn MetricField, x: &Vector) -> Result<Vec<Matrix>> {
    let (g, dg) = metric.eval(x);
    let q = factorize(&g, x)?.inverse();
    Ok(dg.iter().map(|d| -(&q * d * &q)).collect())
}

/// H(x, p) = <p, Q(x) p> / 2.
pub fn hamiltonian(metric: &dyn MetricField, pp: &PhasePoint) -> Result<f64> {
    let chol = factorize(&metric.matrix(&pp.x), &pp.x)?;
    Ok(0.5 * pp.p.dot(&chol.solve(&pp.p)))
}

/// Rescale `v` to unit length for G(x).
pub fn unit_normalize(metric: &dyn MetricField, x: &Vector, v: &Vector) -> Result<Vector> {
    let g = metric.matrix(x);
    let n2 = v.dot(&(&g * v));
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(GeoError::InvalidInput("cannot normalize a zero or non-finite vector".into()));
    }
    Ok(v / n2.sqrt())
}

/// Vector field and second derivative of position for the Hamiltonian
/// H_f = e^{-f} <p, Q p> / 2 at a single phase point.
#[derive(Debug, Clone)]
pub struct PhaseJet {
    pub dx: Vector,
    pub dp: Vector,
    /// d^2 x / dt^2 along the flow.
    pub ddx: Vector,
    pub energy: f64,
}

pub fn phase_jet(
    metric: &dyn MetricField,
    factor: &dyn ConformalFactor,
    x: &Vector,
    p: &Vector,
) -> Result<PhaseJet> {
    let (g, dg) = metric.eval(x);
    let chol = factorize(&g, x)?;
    let (f, grad) = factor.value_grad(x)?;
    let ef = (-f).exp();
    let qp = chol.solve(p);
    let dx = &qp * ef;
    let pqp = p.dot(&qp);
    let n = x.len();
    // dp_i = (e^f / 2) dx^T d_iG dx + (e^{-f} / 2) <p, Q p> d_i f
    let mut dp = Vector::zeros(n);
    for i in 0..n {
        dp[i] = 0.5 / ef * dx.dot(&(&dg[i] * &dx)) + 0.5 * ef * pqp * grad[i];
    }
    // ddx = -(grad f . dx) dx - Q (sum_j dx_j d_jG) dx + e^{-f} Q dp
    let mut mix = Matrix::zeros(n, n);
    for j in 0..n {
        mix += &dg[j] * dx[j];
    }
    let ddx = -&dx * grad.dot(&dx) - chol.solve(&(&mix * &dx)) + chol.solve(&dp) * ef;
    Ok(PhaseJet { dx, dp, ddx, energy: 0.5 * ef * pqp })
}

/// Right-hand side of the conformally perturbed geodesic flow.
pub fn conformal_hamiltonian_rhs(
    metric: &dyn MetricField,
    factor: &dyn ConformalFactor,
    pp: &PhasePoint,
) -> Result<(Vector, Vector)> {
    let j = phase_jet(metric, factor, &pp.x, &pp.p)?;
    Ok((j.dx, j.dp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor::{LinearFactor, ZeroFactor};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn flat_dual_is_identity() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let q = dual_matrix(&m, &v(&[0.3, 0.7])).unwrap();
        assert_eq!(q, Matrix::identity(2, 2));
    }

    #[test]
    fn diagonal_dual_and_hamiltonian() {
        let m = MetricSpec::Diagonal { scales: vec![4.0, 1.0], amplitudes: vec![] }.build().unwrap();
        let x = v(&[0.1, 0.2]);
        let q = dual_matrix(&m, &x).unwrap();
        assert!((q[(0, 0)] - 0.25).abs() < 1e-15 && (q[(1, 1)] - 1.0).abs() < 1e-15);
        let h = hamiltonian(&m, &PhasePoint::new(x, v(&[2.0, 0.0]))).unwrap();
        assert!((h - 0.5).abs() < 1e-15);
    }

    #[test]
    fn flat_hamiltonian_example() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let h = hamiltonian(&m, &PhasePoint::new(v(&[0.0, 0.0]), v(&[1.0, 0.0]))).unwrap();
        assert_eq!(h, 0.5);
    }

    #[test]
    fn conformal_rhs_flat_linear_factor() {
        let m = MetricSpec::Flat { dim: 2 }.build().unwrap();
        let f = LinearFactor::new(v(&[1.0, 0.0]), 0.0);
        let (dx, dp) = conformal_hamiltonian_rhs(&m, &f, &PhasePoint::new(v(&[0.0, 0.0]), v(&[0.0, 1.0]))).unwrap();
        assert!((dx - v(&[0.0, 1.0])).norm() < 1e-15);
        assert!((dp - v(&[0.5, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn degenerate_metric_reports_location() {
        let m = Metric::Diagonal { scales: vec![1.0, 1.0], amplitudes: vec![1.0, 0.0] };
        let x = v(&[0.0, 0.75]);
        match dual_matrix(&m, &x) {
            Err(GeoError::MetricDegenerate { x: loc }) => assert_eq!(loc, vec![0.0, 0.75]),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn dimension_one_rejected() {
        assert!(MetricSpec::Flat { dim: 1 }.build().is_err());
    }

    #[test]
    fn unit_normalize_diagonal() {
        let m = MetricSpec::Diagonal { scales: vec![4.0, 1.0], amplitudes: vec![] }.build().unwrap();
        let x = v(&[0.0, 0.0]);
        let u = unit_normalize(&m, &x, &v(&[1.0, 1.0])).unwrap();
        assert!((u.dot(&(m.matrix(&x) * &u)) - 1.0).abs() < 1e-14);
    }

    fn check_partials(m: &Metric) {
        let h = 1e-6;
        for s in 0..5 {
            let x = v(&[0.13 * s as f64 + 0.05, 0.71 - 0.2 * s as f64, 0.33][..m.dim()]);
            let (_, dg) = m.eval(&x);
            for i in 0..m.dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (m.matrix(&xp) - m.matrix(&xm)) / (2.0 * h);
                assert!((&fd - &dg[i]).amax() <= 1e-7 * (1.0 + dg[i].amax()), "partial {i}");
            }
        }
    }

    #[test]
    fn partials_match_differences() {
        for spec in [
            MetricSpec::Diagonal { scales: vec![2.0, 1.0], amplitudes: vec![0.3, -0.2] },
            MetricSpec::ConformallyFlat { dim: 2, amplitude: 0.1, wave: vec![1.0, 0.0], phase: 0.0 },
            MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.05, modes: 3, seed: 7 },
            MetricSpec::TrigPerturbation { dim: 3, c1_size: 0.1, modes: 4, seed: 1 },
        ] {
            check_partials(&spec.build().unwrap());
        }
    }

    #[test]
    fn trig_c1_size_bounded() {
        let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.05, modes: 3, seed: 3 }.build().unwrap();
        let mut c0: f64 = 0.0;
        let mut c1: f64 = 0.0;
        for i in 0..60 {
            for j in 0..60 {
                let x = v(&[i as f64 / 60.0, j as f64 / 60.0]);
                let (g, dg) = m.eval(&x);
                c0 = c0.max((g - Matrix::identity(2, 2)).amax());
                c1 = c1.max(dg.iter().map(|d| d.amax()).fold(0.0, f64::max));
            }
        }
        assert!(c0 + c1 <= 0.05 + 1e-12);
        assert!(c0 + c1 > 0.005);
    }

    #[test]
    fn phase_jet_acceleration_matches_differences() {
        let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.2, modes: 3, seed: 11 }.build().unwrap();
        let f = LinearFactor::new(v(&[0.3, -0.2]), 0.1);
        let x = v(&[0.2, 0.4]);
        let p = v(&[0.8, 0.5]);
        let j = phase_jet(&m, &f, &x, &p).unwrap();
        let h = 1e-6;
        let jp = phase_jet(&m, &f, &(&x + &j.dx * h), &(&p + &j.dp * h)).unwrap();
        let jm = phase_jet(&m, &f, &(&x - &j.dx * h), &(&p - &j.dp * h)).unwrap();
        let fd = (jp.dx - jm.dx) / (2.0 * h);
        assert!((fd - &j.ddx).norm() < 1e-7);
        let _ = ZeroFactor::new(2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn trig_metric_symmetric_pd_periodic(seed in 0u64..1000, x0 in -3.0f64..3.0, x1 in -3.0f64..3.0) {
                let m = MetricSpec::TrigPerturbation { dim: 2, c1_size: 0.3, modes: 3, seed }.build().unwrap();
                let x = v(&[x0, x1]);
                let g = m.matrix(&x);
                prop_assert!((&g - g.transpose()).amax() == 0.0);
                prop_assert!(g.clone().symmetric_eigenvalues().min() > 0.0);
                for i in 0..2 {
                    let mut y = x.clone();
                    y[i] += 1.0;
                    prop_assert!((m.matrix(&y) - &g).amax() < 1e-12);
                }
            }

            #[test]
            fn normalized_vectors_are_unit(a in -2.0f64..2.0, b in -2.0f64..2.0, x0 in 0.0f64..1.0) {
                prop_assume!(a.abs() + b.abs() > 1e-3);
                let m = MetricSpec::Diagonal { scales: vec![4.0, 1.0], amplitudes: vec![0.4, 0.2] }.build().unwrap();
                let x = v(&[x0, 0.3]);
                let u = unit_normalize(&m, &x, &v(&[a, b])).unwrap();
                prop_assert!((u.dot(&(m.matrix(&x) * &u)) - 1.0).abs() < 1e-14);
            }
        }
    }
}
