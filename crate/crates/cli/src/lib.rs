//! Configuration, command runners and on-disk artifacts of the `geoclose`
//! binary.

use geoclose::closer::{close_orbit, Chart, ChartMetric, CloseOptions, Timings};
use geoclose::connector::{connect, ConnectOptions, ConnectReport};
use geoclose::flow::{geodesic_through, Flow, FlowOptions};
use geoclose::metric::{unit_normalize, MetricField, MetricSpec, TangentPoint, Vector};
use geoclose::obstacle::{connect_with_obstacles, ObstacleOptions, ObstacleReport, ObstacleSet};
use geoclose::GeoError;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// A tangent vector as written in the config. `v` is rescaled to unit
/// length for the metric before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSpec {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PointSpec {
    pub fn resolve(&self, metric: &dyn MetricField) -> Result<TangentPoint, GeoError> {
        let n = metric.dim();
        if self.x.len() != n || self.v.len() != n {
            return Err(GeoError::Config(format!("point must have {n} coordinates in x and v")));
        }
        let x = Vector::from_column_slice(&self.x);
        let v = unit_normalize(metric, &x, &Vector::from_column_slice(&self.v))?;
        Ok(TangentPoint::new(x, v))
    }
}

/// An obstacle geodesic: the geodesic through `x` with direction `v`,
/// extended by `half_length` on either side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub half_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrateSection {
    pub start: PointSpec,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectSection {
    pub start: PointSpec,
    pub target: PointSpec,
    pub tau: f64,
    pub rho: f64,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloseSection {
    pub seed: PointSpec,
    #[serde(default)]
    pub options: CloseOptions,
}

/// Targets are placed at `start.x + s * offset / |offset|` with velocity
/// `start.v + s * turn`, for each separation s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub start: PointSpec,
    pub offset: Vec<f64>,
    #[serde(default)]
    pub turn: Vec<f64>,
    pub separations: Vec<f64>,
    pub tau: f64,
    pub rho: f64,
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub metric: MetricSpec,
    #[serde(default)]
    pub flow: FlowOptions,
    #[serde(default)]
    pub integrate: Option<IntegrateSection>,
    #[serde(default)]
    pub connect: Option<ConnectSection>,
    #[serde(default)]
    pub connect_options: ConnectOptions,
    #[serde(default)]
    pub obstacle: ObstacleOptions,
    #[serde(default)]
    pub close: Option<CloseSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config, GeoError> {
        serde_json::from_str(text).map_err(|e| GeoError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Config, GeoError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GeoError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Override every seed-driven choice.
    pub fn with_seed(mut self, seed: u64) -> Config {
        self.obstacle.seed = seed;
        self
    }

    fn build_metric(&self) -> Result<Arc<dyn MetricField>, GeoError> {
        Ok(Arc::new(self.metric.build()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Integrate,
    Connect,
    Close,
    Verify,
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Integrate => "integrate",
            Command::Connect => "connect",
            Command::Close => "close",
            Command::Verify => "verify",
            Command::Sweep => "sweep",
        }
    }
}

/// How a command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Verified,
    Failed,
}

impl Outcome {
    fn from(ok: bool) -> Outcome {
        if ok {
            Outcome::Verified
        } else {
            Outcome::Failed
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Verified => 0,
            Outcome::Failed => 1,
        }
    }
}

/// Where artifacts go and whether trajectories are written.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub out_dir: PathBuf,
    pub emit_trajectories: bool,
}

impl RunContext {
    fn file(&self, name: &str) -> Result<BufWriter<File>, GeoError> {
        std::fs::create_dir_all(&self.out_dir)?;
        Ok(BufWriter::new(File::create(self.out_dir.join(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), GeoError> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrateReport {
    pub duration: f64,
    pub steps: usize,
    pub end: TangentPoint,
    pub max_energy_drift: f64,
    pub energy_tol: f64,
    pub verified: bool,
}

/// Chart y = a (x - origin) in which a connection is built; `a` is stored
/// row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartRecord {
    pub origin: Vec<f64>,
    pub a: Vec<Vec<f64>>,
}

impl ChartRecord {
    fn of(chart: &Chart) -> ChartRecord {
        ChartRecord {
            origin: chart.origin.iter().copied().collect(),
            a: chart.a.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectOutput {
    pub chart: ChartRecord,
    pub connection: ConnectReport,
    pub obstacles: Option<ObstacleReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub separation: f64,
    pub f_c1_norm: f64,
    pub tau_shift: f64,
    pub c1_ratio: f64,
    pub tau_ratio: f64,
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// max / min of f_c1_norm / separation over the rows.
    pub c1_ratio_spread: f64,
    /// max / min of |tau~ - tau| / separation over the rows.
    pub tau_ratio_spread: f64,
    /// f_c1_norm decreases with the separation.
    pub monotone: bool,
    pub verified: bool,
}

/// Result of re-running a saved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub command: String,
    pub identical: bool,
    pub differences: Vec<String>,
    pub verified: bool,
}

/// Saved alongside every report so that `verify` can re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub command: String,
    pub config: Config,
}

/// Run a command that takes a configuration. `verify` goes through
/// [`verify`] instead.
pub fn run(command: Command, config: &Config, ctx: &RunContext) -> Result<Outcome, GeoError> {
    if command == Command::Verify {
        return verify(ctx);
    }
    ctx.write_json("input.json", &RunRecord { command: command.name().into(), config: config.clone() })?;
    let clock = Instant::now();
    let (outcome, mut timings) = match command {
        Command::Integrate => (run_integrate(config, ctx)?, Timings::default()),
        Command::Connect => (run_connect(config, ctx)?, Timings::default()),
        Command::Close => run_close(config, ctx)?,
        Command::Sweep => (run_sweep(config, ctx)?, Timings::default()),
        Command::Verify => unreachable!(),
    };
    timings.stages.push(("total".into(), clock.elapsed().as_secs_f64()));
    ctx.write_json("timings.json", &timings)?;
    Ok(outcome)
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, GeoError> {
    s.as_ref().ok_or_else(|| GeoError::Config(format!("missing section `{name}`")))
}

fn run_integrate(config: &Config, ctx: &RunContext) -> Result<Outcome, GeoError> {
    let sec = section(&config.integrate, "integrate")?;
    let metric = config.build_metric()?;
    let start = sec.start.resolve(metric.as_ref())?;
    let zero = geoclose::factor::ZeroFactor::new(metric.dim());
    // Drift is judged after the run so the report is written either way.
    let flow = Flow::new(metric.as_ref(), &zero, FlowOptions { energy_tol: f64::INFINITY, ..config.flow });
    let arc = flow.integrate(&flow.to_phase(&start)?, sec.duration)?;
    arc.write_csv(ctx.file("trajectory.csv")?)?;
    let drift = arc.max_energy_drift();
    let report = IntegrateReport {
        duration: sec.duration,
        steps: arc.len().saturating_sub(1),
        end: flow.to_tangent(&arc.end())?,
        max_energy_drift: drift,
        energy_tol: config.flow.energy_tol,
        verified: drift <= config.flow.energy_tol,
    };
    ctx.write_json("report.json", &report)?;
    Ok(Outcome::from(report.verified))
}

/// Obstacle arcs in chart coordinates.
fn obstacle_set(
    base: &dyn MetricField,
    chart: &Chart,
    metric: &dyn MetricField,
    specs: &[ObstacleSpec],
    flow: FlowOptions,
) -> Result<ObstacleSet, GeoError> {
    let mut arcs = Vec::new();
    for (i, o) in specs.iter().enumerate() {
        let tp = chart.to_chart(&PointSpec { x: o.x.clone(), v: o.v.clone() }.resolve(base)?);
        if !(o.half_length > 0.0) {
            return Err(GeoError::Config(format!("obstacles[{i}].half_length must be positive")));
        }
        arcs.push(geodesic_through(metric, &tp, o.half_length, flow)?);
    }
    Ok(ObstacleSet::new(arcs))
}

/// The metric in the chart sending `start` to the origin with velocity e1.
fn aligned(metric: Arc<dyn MetricField>, start: &TangentPoint) -> Result<(Arc<dyn MetricField>, Chart), GeoError> {
    let chart = Chart::aligned(&start.x, &start.v)?;
    Ok((Arc::new(ChartMetric { base: metric, chart: chart.clone() }), chart))
}

fn run_connect(config: &Config, ctx: &RunContext) -> Result<Outcome, GeoError> {
    let sec = section(&config.connect, "connect")?;
    let base = config.build_metric()?;
    let start = sec.start.resolve(base.as_ref())?;
    let target = sec.target.resolve(base.as_ref())?;
    let (metric, chart) = aligned(base.clone(), &start)?;
    let start = chart.to_chart(&start);
    let target = chart.to_chart(&target);
    let opts = &config.connect_options;
    let (report, obstacles, data, factor) = if sec.obstacles.is_empty() {
        let c = connect(metric.clone(), &start, &target, sec.tau, sec.rho, opts)?;
        (c.report, None, c.data, c.factor)
    } else {
        let set = obstacle_set(base.as_ref(), &chart, metric.as_ref(), &sec.obstacles, opts.arc)?;
        let c = connect_with_obstacles(metric.clone(), &start, &target, sec.tau, sec.rho, &set, opts, &config.obstacle)?;
        (c.report, Some(c.obstacle_report), c.data, c.factor)
    };
    if ctx.emit_trajectories {
        data.write_csv(ctx.file("connecting_curve.csv")?, opts.samples)?;
        let flow = Flow::new(metric.as_ref(), factor.as_ref(), opts.verify);
        let arc = flow.integrate(&flow.to_phase(&start)?, report.tau_tilde.max(sec.tau))?;
        arc.write_csv(ctx.file("perturbed_trajectory.csv")?)?;
    }
    let verified = report.verified && obstacles.as_ref().is_none_or(|o| o.obstacles.iter().all(|c| c.passed));
    ctx.write_json("report.json", &ConnectOutput { chart: ChartRecord::of(&chart), connection: report, obstacles })?;
    Ok(Outcome::from(verified))
}

fn run_close(config: &Config, ctx: &RunContext) -> Result<(Outcome, Timings), GeoError> {
    let sec = section(&config.close, "close")?;
    let metric = config.build_metric()?;
    let seed = sec.seed.resolve(metric.as_ref())?;
    let options = CloseOptions { orbit: sec.options.orbit, ..sec.options.clone() };
    let closed = close_orbit(metric, &seed, &options, &config.connect_options, &config.obstacle)?;
    if ctx.emit_trajectories {
        if let Some(arc) = &closed.orbit {
            arc.write_csv(ctx.file("closed_orbit.csv")?)?;
        }
    }
    ctx.write_json("report.json", &closed.report)?;
    Ok((Outcome::from(closed.report.closed), closed.timings))
}

/// Connection for one separation of a sweep.
pub fn sweep_row(
    metric: Arc<dyn MetricField>,
    sec: &SweepSection,
    s: f64,
    opts: &ConnectOptions,
) -> Result<SweepRow, GeoError> {
    let start = sec.start.resolve(metric.as_ref())?;
    let n = metric.dim();
    let off = Vector::from_column_slice(&sec.offset);
    if off.len() != n || !(off.norm() > 0.0) {
        return Err(GeoError::Config("sweep.offset must be a nonzero vector of the metric dimension".into()));
    }
    let turn = if sec.turn.is_empty() { Vector::zeros(n) } else { Vector::from_column_slice(&sec.turn) };
    if turn.len() != n {
        return Err(GeoError::Config("sweep.turn has the wrong dimension".into()));
    }
    let x = &start.x + off.normalize() * s;
    let v = unit_normalize(metric.as_ref(), &x, &(&start.v + turn * s))?;
    let (metric, chart) = aligned(metric, &start)?;
    let start = chart.to_chart(&start);
    let target = chart.to_chart(&TangentPoint::new(x, v));
    let c = connect(metric, &start, &target, sec.tau, sec.rho, opts)?;
    let shift = (c.report.tau_tilde - sec.tau).abs();
    Ok(SweepRow {
        separation: c.report.separation,
        f_c1_norm: c.report.f_c1_norm,
        tau_shift: shift,
        c1_ratio: c.report.f_c1_norm / c.report.separation,
        tau_ratio: shift / c.report.separation,
        verified: c.report.verified,
    })
}

/// Summarize sweep rows.
pub fn sweep_report(rows: Vec<SweepRow>) -> SweepReport {
    let spread = |f: &dyn Fn(&SweepRow) -> f64| {
        let (lo, hi) = rows.iter().map(f).fold((f64::INFINITY, 0.0f64), |(l, h), v| (l.min(v), h.max(v)));
        hi / lo
    };
    let c1_ratio_spread = spread(&|r| r.c1_ratio);
    let tau_ratio_spread = spread(&|r| r.tau_ratio);
    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.separation.total_cmp(&b.separation));
    let monotone = sorted.windows(2).all(|w| w[0].f_c1_norm <= w[1].f_c1_norm);
    let verified = rows.iter().all(|r| r.verified);
    SweepReport { rows, c1_ratio_spread, tau_ratio_spread, monotone, verified }
}

fn run_sweep(config: &Config, ctx: &RunContext) -> Result<Outcome, GeoError> {
    let sec = section(&config.sweep, "sweep")?;
    if sec.separations.is_empty() {
        return Err(GeoError::Config("sweep.separations is empty".into()));
    }
    let metric = config.build_metric()?;
    let rows: Vec<Result<SweepRow, GeoError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sec
            .separations
            .iter()
            .map(|&s| {
                let m = metric.clone();
                scope.spawn(move || sweep_row(m, sec, s, &config.connect_options))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let report = sweep_report(rows);
    let mut w = ctx.file("sweep.csv")?;
    writeln!(w, "separation,f_c1_norm,tau_shift,c1_ratio,tau_ratio,verified")?;
    for r in &report.rows {
        writeln!(
            w,
            "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{}",
            r.separation, r.f_c1_norm, r.tau_shift, r.c1_ratio, r.tau_ratio, r.verified
        )?;
    }
    drop(w);
    ctx.write_json("report.json", &report)?;
    Ok(Outcome::from(report.verified && report.monotone))
}

/// Re-run the saved input of `ctx.out_dir` into a scratch directory and
/// compare the new report with the saved one.
pub fn verify(ctx: &RunContext) -> Result<Outcome, GeoError> {
    let input = std::fs::read_to_string(ctx.out_dir.join("input.json"))
        .map_err(|e| GeoError::Config(format!("no saved input in {}: {e}", ctx.out_dir.display())))?;
    let record: RunRecord = serde_json::from_str(&input).map_err(|e| GeoError::Config(e.to_string()))?;
    let saved = std::fs::read_to_string(ctx.out_dir.join("report.json"))
        .map_err(|e| GeoError::Config(format!("no saved report in {}: {e}", ctx.out_dir.display())))?;
    let command = match record.command.as_str() {
        "integrate" => Command::Integrate,
        "connect" => Command::Connect,
        "close" => Command::Close,
        "sweep" => Command::Sweep,
        other => return Err(GeoError::Config(format!("saved command `{other}` cannot be verified"))),
    };
    let scratch = RunContext { out_dir: ctx.out_dir.join("verify"), emit_trajectories: false };
    let outcome = run(command, &record.config, &scratch)?;
    let fresh = std::fs::read_to_string(scratch.out_dir.join("report.json"))?;
    let a: serde_json::Value = serde_json::from_str(&saved)?;
    let b: serde_json::Value = serde_json::from_str(&fresh)?;
    let mut differences = Vec::new();
    diff_json("", &a, &b, &mut differences);
    let report = VerifyReport {
        command: record.command,
        identical: differences.is_empty(),
        differences,
        verified: outcome == Outcome::Verified,
    };
    ctx.write_json("verify.json", &report)?;
    Ok(Outcome::from(report.identical && report.verified))
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                let p = format!("{path}/{k}");
                match y.get(k) {
                    Some(vb) => diff_json(&p, va, vb, out),
                    None => out.push(format!("{p}: missing in re-run")),
                }
            }
            for k in y.keys().filter(|k| !x.contains_key(*k)) {
                out.push(format!("{path}/{k}: only in re-run"));
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (va, vb)) in x.iter().zip(y.iter()).enumerate() {
                diff_json(&format!("{path}/{i}"), va, vb, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} != {b}")),
        _ => {}
    }
}

/// Write an error record for a failed run.
pub fn write_error(ctx: &RunContext, err: &GeoError) -> Result<(), GeoError> {
    #[derive(Serialize)]
    struct ErrorRecord<'a> {
        error: String,
        root: String,
        stage: Option<&'a str>,
    }
    let stage = match err {
        GeoError::Stage { stage, .. } => Some(stage.as_str()),
        _ => None,
    };
    ctx.write_json("error.json", &ErrorRecord { error: err.to_string(), root: err.root().to_string(), stage })
}

/// Load the config and report bad input as exit code 2.
pub fn load_config(path: &Path, seed: Option<u64>) -> Result<Config, GeoError> {
    let c = Config::load(path)?;
    Ok(match seed {
        Some(s) => c.with_seed(s),
        None => c,
    })
}
