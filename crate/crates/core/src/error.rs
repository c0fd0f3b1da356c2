use thiserror::Error;

/// Failure modes shared by every stage of the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("metric not positive definite at x = {x:?}")]
    MetricDegenerate { x: Vec<f64> },

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudget { t: f64, max_steps: usize },

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("energy drift {drift:e} exceeds tolerance {tol:e} at t = {t}")]
    EnergyDrift { t: f64, drift: f64, tol: f64 },

    #[error("vector is not unit length for the metric: |v|^2 = {norm_sq}")]
    NotUnit { norm_sq: f64 },

    #[error("endpoint outside the tube region: {0}")]
    OutsideTube(String),

    #[error("cone condition violated: |x'(t) - e1| = {deviation} at t = {t}")]
    ConeViolation { t: f64, deviation: f64 },

    #[error("reparametrization failed: {0}")]
    Reparametrization(String),

    #[error("chart inversion failed at x = {x:?}")]
    ChartInversion { x: Vec<f64> },

    #[error("bump parameters out of range: {0}")]
    BumpParameters(String),

    #[error("gradient of the conformal factor is not colinear with the momentum at t = {t} (residual {residual:e})")]
    NotColinear { t: f64, residual: f64 },

    #[error("obstacle assumption violated: {0}")]
    ObstacleAssumption(String),

    #[error("transversality could not be achieved after {attempts} shifts")]
    TransversalityFailed { attempts: usize },

    #[error("degenerate intersection geometry: {0}")]
    DegenerateGeometry(String),

    #[error("no usable cutoff scale: {0}")]
    NoScale(String),

    #[error("no recurrence below the target gap; best gap {best_gap:e} at return time {best_time}")]
    RecurrenceNotFound { best_gap: f64, best_time: f64 },

    #[error("closing assumption violated: {0}")]
    Assumption(String),

    #[error("closure residual {residual:e} exceeds tolerance {tol:e}")]
    ClosureFailed { residual: f64, tol: f64 },

    #[error("perturbation size {size:e} exceeds epsilon {epsilon:e}")]
    EpsilonExceeded { size: f64, epsilon: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("{stage}: {source}")]
    Stage { stage: String, source: Box<GeoError> },
}

pub type Result<T> = std::result::Result<T, GeoError>;

impl GeoError {
    /// Tag the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> GeoError {
        GeoError::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// The innermost error, with stage tags removed.
    pub fn root(&self) -> &GeoError {
        match self {
            GeoError::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

impl From<std::io::Error> for GeoError {
    fn from(e: std::io::Error) -> Self {
        GeoError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for GeoError {
    fn from(e: serde_json::Error) -> Self {
        GeoError::Config(e.to_string())
    }
}
