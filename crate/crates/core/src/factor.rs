//! Scalar conformal factors f, used as g~ = e^f g.

use crate::error::Result;
use crate::metric::Vector;
use std::fmt::Debug;

/// Axis-aligned box outside of which a factor vanishes identically.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportBox {
    pub lo: Vector,
    pub hi: Vector,
}

impl SupportBox {
    pub fn contains(&self, x: &Vector) -> bool {
        x.iter().zip(self.lo.iter().zip(self.hi.iter())).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn inflate(&self, r: f64) -> SupportBox {
        SupportBox { lo: self.lo.add_scalar(-r), hi: self.hi.add_scalar(r) }
    }

    /// Euclidean distance from `x` to the box (zero inside).
    pub fn distance(&self, x: &Vector) -> f64 {
        x.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .map(|(v, (l, h))| {
                let d = if v < l { l - v } else if v > h { v - h } else { 0.0 };
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// The tube {(t, z) : t in [t_min, t_max], |z| < radius} around the x_1 axis,
/// with t the first coordinate and z the remaining ones.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TubeRegion {
    pub t_min: f64,
    pub t_max: f64,
    pub radius: f64,
}

impl TubeRegion {
    pub fn contains(&self, x: &Vector) -> bool {
        let z2: f64 = x.iter().skip(1).map(|v| v * v).sum();
        x[0] >= self.t_min && x[0] <= self.t_max && z2.sqrt() < self.radius
    }

    /// Lateral distance |z| of x from the axis.
    pub fn lateral(x: &Vector) -> f64 {
        x.iter().skip(1).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn with_radius(&self, radius: f64) -> TubeRegion {
        TubeRegion { radius, ..*self }
    }
}

pub trait ConformalFactor: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// f(x) and its gradient.
    fn value_grad(&self, x: &Vector) -> Result<(f64, Vector)>;

    fn value(&self, x: &Vector) -> Result<f64> {
        Ok(self.value_grad(x)?.0)
    }

    /// Box outside of which f is identically zero, if bounded.
    fn support(&self) -> Option<SupportBox> {
        None
    }

    /// Tube region containing the support, when the factor is built around
    /// a connecting curve.
    fn support_tube(&self) -> Option<TubeRegion> {
        None
    }
}

/// f = 0.
#[derive(Debug, Clone)]
pub struct ZeroFactor {
    dim: usize,
}

impl ZeroFactor {
    pub fn new(dim: usize) -> Self {
        ZeroFactor { dim }
    }
}

impl ConformalFactor for ZeroFactor {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, _x: &Vector) -> Result<(f64, Vector)> {
        Ok((0.0, Vector::zeros(self.dim)))
    }

    fn support(&self) -> Option<SupportBox> {
        Some(SupportBox { lo: Vector::zeros(self.dim), hi: Vector::from_element(self.dim, -1.0) })
    }
}

/// f(x) = <a, x> + b.
#[derive(Debug, Clone)]
pub struct LinearFactor {
    pub slope: Vector,
    pub offset: f64,
}

impl LinearFactor {
    pub fn new(slope: Vector, offset: f64) -> Self {
        LinearFactor { slope, offset }
    }
}

impl ConformalFactor for LinearFactor {
    fn dim(&self) -> usize {
        self.slope.len()
    }

    fn value_grad(&self, x: &Vector) -> Result<(f64, Vector)> {
        Ok((self.slope.dot(x) + self.offset, self.slope.clone()))
    }
}

/// f(x) = a exp(-|x - c|^2 / s^2), truncated to zero beyond 8s.
#[derive(Debug, Clone)]
pub struct GaussianBump {
    pub center: Vector,
    pub amplitude: f64,
    pub width: f64,
}

impl ConformalFactor for GaussianBump {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value_grad(&self, x: &Vector) -> Result<(f64, Vector)> {
        let d = x - &self.center;
        let r2 = d.norm_squared() / (self.width * self.width);
        if r2 > 64.0 {
            return Ok((0.0, Vector::zeros(x.len())));
        }
        let v = self.amplitude * (-r2).exp();
        Ok((v, d * (-2.0 * v / (self.width * self.width))))
    }

    fn support(&self) -> Option<SupportBox> {
        let r = 8.0 * self.width;
        Some(SupportBox { lo: self.center.add_scalar(-r), hi: self.center.add_scalar(r) })
    }
}

/// Largest relative disagreement between the analytic gradient and central
/// differences of the value, over the given points.
pub fn gradient_check(f: &dyn ConformalFactor, points: &[Vector], h: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in points {
        let (_, g) = f.value_grad(x)?;
        let scale = 1.0 + g.amax();
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f.value(&xp)? - f.value(&xm)?) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / scale);
        }
    }
    Ok(worst)
}

/// sup|f| + sup|grad f| over a sample set.
pub fn sampled_c1_norm(f: &dyn ConformalFactor, points: &[Vector]) -> Result<f64> {
    let mut c0: f64 = 0.0;
    let mut c1: f64 = 0.0;
    for x in points {
        let (v, g) = f.value_grad(x)?;
        c0 = c0.max(v.abs());
        c1 = c1.max(g.norm());
    }
    Ok(c0 + c1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_gradient_consistent() {
        let f = GaussianBump { center: Vector::from_column_slice(&[0.2, 0.1]), amplitude: 0.3, width: 0.4 };
        let pts: Vec<Vector> =
            (0..20).map(|i| Vector::from_column_slice(&[0.05 * i as f64, 0.3 - 0.02 * i as f64])).collect();
        assert!(gradient_check(&f, &pts, 1e-6).unwrap() < 1e-8);
    }

    #[test]
    fn box_distance() {
        let b = SupportBox { lo: Vector::from_column_slice(&[0.0, 0.0]), hi: Vector::from_column_slice(&[1.0, 1.0]) };
        assert_eq!(b.distance(&Vector::from_column_slice(&[0.5, 0.5])), 0.0);
        assert!((b.distance(&Vector::from_column_slice(&[2.0, 2.0])) - 2f64.sqrt()).abs() < 1e-15);
        assert!(!ZeroFactor::new(2).support().unwrap().contains(&Vector::zeros(2)));
    }

    #[test]
    fn tube_membership() {
        let r = TubeRegion { t_min: 0.0, t_max: 1.0, radius: 0.1 };
        assert!(r.contains(&Vector::from_column_slice(&[0.5, 0.05])));
        assert!(!r.contains(&Vector::from_column_slice(&[0.5, 0.1])));
        assert!(!r.contains(&Vector::from_column_slice(&[1.5, 0.0])));
    }
}
