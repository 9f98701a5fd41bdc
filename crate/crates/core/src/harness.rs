//! Scenario runner: fixed-step co-simulation of plant, sensor and controller,
//! run logs, metrics, and the identification and sweep drivers used by the
//! command line tool.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::actuation::ActuationElasticityModel;
use crate::control::{
    pd_reference, potential_acceleration, ControlOutput, OperationalSpaceController, PotentialParams,
    Projector, QuasistaticController, QuasistaticGains, TaskGains, DEFAULT_PINV_DAMPING,
};
use crate::dynamics::AugmentedModel;
use crate::kinematics::{wrap_pi, ArmGeometry};
use crate::plant::{AnisotropyProfile, ObstacleSphere, Plant, PlantSpec, Sensor, SensorModel};
use crate::polynomial::PiecewiseCubic;
use crate::sysid::{
    actuation_stage_pressures, angle_error_stats, collect_static_poses, damping_from_ratio,
    fit_magnitude_polynomial, fit_phase_polynomial, magnitude_sweep, phase_sweep, radial_error_stats,
    reidentify, stiffness_stage_pressures, tune_damping, FitReport, SweepPoint, SysIdConfig,
};
use crate::trajectory::{Event, Script};
use crate::{Error, Result};

pub const LOG_SCHEMA: &str = "# softarm run log, schema 1";
/// Length of the end of the log averaged for the resting position.
pub const SETTLE_TAIL_S: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Dynamic,
    Quasistatic,
}

/// How the dynamic controller learns about a payload held at the tip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LoadCompensation {
    /// Payload mass added to the controller's rigid-body model.
    #[default]
    Model,
    /// Payload weight supplied as a supplementary tip force.
    TipForce,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Use the magnitude and phase corrections of the model.
    pub corrections: bool,
    pub gains: TaskGains,
    pub quasistatic: QuasistaticGains,
    pub projector: Projector,
    pub pinv_damping: f64,
    pub potential: PotentialParams,
    pub load_compensation: LoadCompensation,
    pub rate_hz: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            kind: ControllerKind::Dynamic,
            corrections: true,
            gains: TaskGains::default(),
            quasistatic: QuasistaticGains::default(),
            projector: Projector::default(),
            pinv_damping: DEFAULT_PINV_DAMPING,
            potential: PotentialParams::default(),
            load_compensation: LoadCompensation::Model,
            rate_hz: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ModelSource {
    /// Chamber maps from geometry with the given stiffness and damping guesses.
    Analytic { stiffness_nm_per_rad: Vec<f64>, damping_nms_per_rad: Vec<f64> },
    /// Parameters read off the simulated plant.
    Truth,
    /// Run the identification pipeline against the scenario's plant.
    #[default]
    Identified,
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub t_s: f64,
    /// Generalized impulse, N m s per coordinate.
    pub impulse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MetricsConfig {
    /// Metrics use log rows from this time on.
    pub from_s: f64,
    /// Start of the settling-time measurement, if any. Settling is measured
    /// against the mean tip position over the last `SETTLE_TAIL_S` of the log.
    pub settle_from_s: Option<f64>,
    /// Window `[t0, t1]` for the residual oscillation amplitude.
    pub oscillation_window_s: Option<[f64; 2]>,
    /// Reference point for the goal error, if different from the reference.
    pub goal_m: Option<[f64; 3]>,
}

fn default_geometry() -> ArmGeometry {
    ArmGeometry::default_two_segment()
}

fn default_plant() -> PlantSpec {
    PlantSpec::default_two_segment()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Plant integration step, s.
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    /// Defaults to the trajectory's duration.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Closed-loop hold at the start point before logging starts, s.
    #[serde(default = "default_preroll")]
    pub preroll_s: f64,
    #[serde(default = "default_geometry")]
    pub geometry: ArmGeometry,
    #[serde(default = "default_plant")]
    pub plant: PlantSpec,
    #[serde(default)]
    pub sensor: SensorModel,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub model: ModelSource,
    #[serde(default)]
    pub sysid: SysIdConfig,
    pub trajectory: Script,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSphere>,
    #[serde(default)]
    pub disturbances: Vec<Disturbance>,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_dt() -> f64 {
    1e-3
}

fn default_preroll() -> f64 {
    3.0
}

impl Scenario {
    pub fn new(name: &str, trajectory: Script) -> Self {
        Scenario {
            name: name.to_string(),
            seed: 0,
            dt_s: default_dt(),
            duration_s: None,
            preroll_s: default_preroll(),
            geometry: default_geometry(),
            plant: default_plant(),
            sensor: SensorModel::default(),
            controller: ControllerConfig::default(),
            model: ModelSource::default(),
            sysid: SysIdConfig::default(),
            trajectory,
            obstacles: Vec::new(),
            disturbances: Vec::new(),
            metrics: MetricsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        let mut s: Scenario = toml::from_str(&text).map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        if let ModelSource::File { path: p } = &mut s.model {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigError(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.plant.validate(self.geometry.n_segments())?;
        self.sensor.validate()?;
        self.controller.gains.validate()?;
        self.controller.quasistatic.validate()?;
        self.controller.potential.validate()?;
        for ob in &self.obstacles {
            ob.validate()?;
        }
        let c = &self.controller;
        if !(c.rate_hz > 0.0) || !(self.dt_s > 0.0 && self.dt_s <= 1e-2) {
            return Err(Error::ConfigError("rate_hz must be positive and dt_s in (0, 0.01]".into()));
        }
        let ratio = 1.0 / (c.rate_hz * self.dt_s);
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::ConfigError("control period must be a multiple of dt_s".into()));
        }
        if !(self.preroll_s >= 0.0) || self.duration_s.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::ConfigError("preroll_s >= 0 and duration_s > 0 required".into()));
        }
        if let ModelSource::File { path } = &self.model {
            if !path.exists() {
                return Err(Error::ConfigError(format!("model file {} does not exist", path.display())));
            }
        }
        for d in &self.disturbances {
            if d.impulse.len() != self.geometry.n_q() {
                return Err(Error::ConfigError("disturbance impulse has the wrong length".into()));
            }
        }
        self.trajectory.compile()?;
        Ok(())
    }
}

/// Plant description consumed by `identify` and `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantFile {
    pub geometry: ArmGeometry,
    pub plant: PlantSpec,
    pub sysid: SysIdConfig,
    pub identify: IdentifyOptions,
}

impl Default for PlantFile {
    fn default() -> Self {
        PlantFile {
            geometry: default_geometry(),
            plant: default_plant(),
            sysid: SysIdConfig::default(),
            identify: IdentifyOptions::default(),
        }
    }
}

impl PlantFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        let f: PlantFile = toml::from_str(text).map_err(|e| Error::ConfigError(e.to_string()))?;
        f.geometry.validate()?;
        f.plant.validate(f.geometry.n_segments())?;
        f.sysid.sensor.validate()?;
        if f.identify.initial_stiffness_nm_per_rad.is_empty() || f.identify.damping_ratios.is_empty() {
            return Err(Error::ConfigError("identify needs a stiffness guess and damping candidates".into()));
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

/// Model serialized to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ActuationElasticityModel,
    #[serde(default)]
    pub report: Option<FitReport>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::ConfigError(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Model read off the plant. Correction profiles are sampled and fitted with
/// the same piecewise cubics the identified model uses.
pub fn truth_model(spec: &PlantSpec, geometry: &ArmGeometry) -> Result<ActuationElasticityModel> {
    let plant = Plant::new(geometry, spec)?;
    let n = geometry.n_segments();
    let mut m = ActuationElasticityModel::analytic_estimate(geometry, &spec.stiffness_nm_per_rad, &spec.damping_nms_per_rad);
    m.pressure_max_pa = spec.pressure_max_pa;
    for i in 0..n {
        m.set_chamber_map(i, &plant.truth.chamber_maps[i]);
        let grid: Vec<f64> = (0..360).map(|k| (k as f64 + 0.5).to_radians()).collect();
        let prof = &spec.stiffness_profile[i];
        if *prof != AnisotropyProfile::None {
            let s: Vec<_> = grid.iter().map(|&a| (a, 1.0 + prof.eval(a))).collect();
            m.magnitude_polys[i] = PiecewiseCubic::fit(&s)?;
        }
        let prof = &spec.phase_profile[i];
        if *prof != AnisotropyProfile::None {
            // Solve g = -delta(phi + g): the pre-rotation that the plant's own
            // rotation undoes.
            let s: Vec<_> = grid
                .iter()
                .map(|&a| {
                    let mut g = 0.0;
                    for _ in 0..100 {
                        g = -prof.eval(a + g);
                    }
                    (a, g)
                })
                .collect();
            m.phase_polys[i] = PiecewiseCubic::fit(&s)?;
        }
    }
    Ok(m)
}

/// One column-major log of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub events: Vec<String>,
}

impl RunLog {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::SchemaError(format!("missing column {name}")))
    }

    pub fn series(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c]).collect())
    }

    fn vec3(&self, row: usize, first: usize) -> Vector3<f64> {
        let r = &self.rows[row];
        Vector3::new(r[first], r[first + 1], r[first + 2])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows.len() * self.columns.len() * 24);
        s.push_str(LOG_SCHEMA);
        s.push('\n');
        s.push_str(&self.columns.join(","));
        s.push_str(",events\n");
        for (row, ev) in self.rows.iter().zip(&self.events) {
            for v in row {
                let _ = write!(s, "{v:.16e},");
            }
            s.push_str(ev);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_SCHEMA) {
            return Err(Error::SchemaError("missing or unknown schema line".into()));
        }
        let header = lines.next().ok_or_else(|| Error::SchemaError("missing header".into()))?;
        let mut columns: Vec<String> = header.split(',').map(str::to_string).collect();
        if columns.pop().as_deref() != Some("events") || columns.first().map(String::as_str) != Some("t") {
            return Err(Error::SchemaError("header must start with t and end with events".into()));
        }
        let mut rows = Vec::new();
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() + 1 {
                return Err(Error::SchemaError(format!("row {i} has {} fields", fields.len())));
            }
            let row = fields[..columns.len()]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| Error::SchemaError(format!("row {i}: bad number {f}"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some(prev) = rows.last().map(|r: &Vec<f64>| r[0]) {
                if !(row[0] > prev) {
                    return Err(Error::SchemaError(format!("row {i}: time is not increasing")));
                }
            }
            rows.push(row);
            events.push(fields[columns.len()].to_string());
        }
        Ok(RunLog { columns, rows, events })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_error_m: f64,
    pub peak_error_m: f64,
    pub rms_error_m: f64,
    pub mean_abs_axis_error_m: [f64; 3],
    pub max_tip_speed_m_per_s: f64,
    pub settling_time_s: Option<f64>,
    pub oscillation_amplitude_m: Option<f64>,
    pub min_obstacle_clearance_m: Option<f64>,
    pub goal_error_m: Option<Vec<(f64, f64)>>,
    pub samples: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Metrics from a log alone.
pub fn compute_metrics(log: &RunLog, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let t = log.column("t")?;
    let x = log.column("x_tip")?;
    let xd = log.column("x_des")?;
    let v = log.column("vx_tip")?;
    let rows: Vec<usize> = (0..log.rows.len()).filter(|&r| log.rows[r][t] >= cfg.from_s - 1e-12).collect();
    if rows.is_empty() {
        return Err(Error::SchemaError("no log rows inside the metrics window".into()));
    }
    let err: Vec<Vector3<f64>> = rows.iter().map(|&r| log.vec3(r, x) - log.vec3(r, xd)).collect();
    let n = err.len() as f64;
    let norms: Vec<f64> = err.iter().map(|e| e.norm()).collect();
    let mut axis = [0.0; 3];
    for e in &err {
        for k in 0..3 {
            axis[k] += e[k].abs() / n;
        }
    }
    let settling_time_s = cfg.settle_from_s.map(|t0| {
        let window: Vec<usize> = (0..log.rows.len()).filter(|&r| log.rows[r][t] >= t0 - 1e-12).collect();
        let t_end = window.last().map_or(t0, |&r| log.rows[r][t]);
        let tail: Vec<usize> = window
            .iter()
            .cloned()
            .filter(|&r| log.rows[r][t] >= t_end - SETTLE_TAIL_S)
            .collect();
        let rest = tail.iter().fold(Vector3::zeros(), |acc, &r| acc + log.vec3(r, x)) / tail.len().max(1) as f64;
        let after: Vec<(f64, f64)> = window.iter().map(|&r| (log.rows[r][t], (log.vec3(r, x) - rest).norm())).collect();
        let peak = after.iter().map(|p| p.1).fold(0.0, f64::max);
        // floor keeps rounding in the rest position from counting as motion
        let band = (0.05 * peak).max(1e-12);
        match after.iter().rposition(|p| p.1 > band) {
            Some(i) if i + 1 < after.len() => after[i + 1].0 - t0,
            Some(_) => f64::INFINITY,
            None => 0.0,
        }
    });
    let oscillation_amplitude_m = match cfg.oscillation_window_s {
        Some([a, b]) => {
            let pts: Vec<Vector3<f64>> = (0..log.rows.len())
                .filter(|&r| log.rows[r][t] >= a && log.rows[r][t] <= b)
                .map(|r| log.vec3(r, x))
                .collect();
            if pts.is_empty() {
                return Err(Error::SchemaError("oscillation window outside the log".into()));
            }
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            Some(pts.iter().map(|p| (p - mean).norm()).fold(0.0, f64::max))
        }
        None => None,
    };
    let min_obstacle_clearance_m = match log.column("clearance") {
        Ok(c) => Some(rows.iter().map(|&r| log.rows[r][c]).fold(f64::INFINITY, f64::min)),
        Err(_) => None,
    };
    let goal_error_m = cfg.goal_m.map(|g| {
        let g = Vector3::from(g);
        rows.iter().map(|&r| (log.rows[r][t], (log.vec3(r, x) - g).norm())).collect()
    });
    Ok(MetricsReport {
        mean_error_m: norms.iter().sum::<f64>() / n,
        peak_error_m: norms.iter().cloned().fold(0.0, f64::max),
        rms_error_m: (norms.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean_abs_axis_error_m: axis,
        max_tip_speed_m_per_s: rows.iter().map(|&r| log.vec3(r, v).norm()).fold(0.0, f64::max),
        settling_time_s,
        oscillation_amplitude_m,
        min_obstacle_clearance_m,
        goal_error_m,
        samples: rows.len(),
    })
}

/// First time after which the goal error stays below `tol`, from a metrics
/// goal-error series.
pub fn time_within(series: &[(f64, f64)], tol: f64) -> Option<f64> {
    match series.iter().rposition(|p| p.1 >= tol) {
        None => series.first().map(|p| p.0),
        Some(i) if i + 1 < series.len() => Some(series[i + 1].0),
        Some(_) => None,
    }
}

enum Controller {
    Dynamic(OperationalSpaceController),
    Quasistatic(QuasistaticController),
}

fn log_columns(n_seg: usize, with_clearance: bool) -> Vec<String> {
    let mut c = vec!["t".to_string()];
    let nq = 2 * n_seg;
    c.extend((0..nq).map(|i| format!("q{i}")));
    c.extend((0..nq).map(|i| format!("qd{i}")));
    for name in ["x_tip", "y_tip", "z_tip", "vx_tip", "vy_tip", "vz_tip", "x_meas", "y_meas", "z_meas", "x_des", "y_des", "z_des"] {
        c.push(name.to_string());
    }
    c.extend((0..3 * n_seg).map(|i| format!("p{i}")));
    c.extend((0..n_seg).map(|i| format!("sat{i}")));
    c.extend((0..nq).map(|i| format!("tau{i}")));
    c.push("null_torque".into());
    c.push("null_residual".into());
    c.push("payload_kg".into());
    if with_clearance {
        c.push("clearance".into());
    }
    c
}

fn clearance(x: &Vector3<f64>, obstacles: &[ObstacleSphere]) -> f64 {
    obstacles
        .iter()
        .map(|o| (x - o.center()).norm() - o.radius_m)
        .fold(f64::INFINITY, f64::min)
}

/// Model used by a scenario.
pub fn resolve_model(s: &Scenario) -> Result<ActuationElasticityModel> {
    let model = match &s.model {
        ModelSource::Analytic { stiffness_nm_per_rad, damping_nms_per_rad } => {
            let mut m = ActuationElasticityModel::analytic_estimate(&s.geometry, stiffness_nm_per_rad, damping_nms_per_rad);
            m.pressure_max_pa = s.plant.pressure_max_pa;
            m
        }
        ModelSource::Truth => truth_model(&s.plant, &s.geometry)?,
        ModelSource::Identified => identify(&s.geometry, &s.plant, &s.sysid, &IdentifyOptions::default())?.model,
        ModelSource::File { path } => ModelFile::load(path)?.model,
    };
    model.validate(s.geometry.n_segments())?;
    Ok(model)
}

/// Result of one run.
pub struct RunOutput {
    pub log: RunLog,
    pub metrics: MetricsReport,
}

/// Run `s` with an already resolved model.
pub fn run_with_model(s: &Scenario, model: &ActuationElasticityModel) -> Result<RunOutput> {
    s.validate()?;
    let n_seg = s.geometry.n_segments();
    let nq = s.geometry.n_q();
    let gravity = s.plant.gravity.vector();
    let model = if s.controller.corrections { model.clone() } else { model.without_corrections() };
    let traj = s.trajectory.compile()?;
    let duration = s.duration_s.unwrap_or(traj.duration());
    if !(duration > 0.0) {
        return Err(Error::ConfigError("scenario has zero duration".into()));
    }
    let mut plant = Plant::new(&s.geometry, &s.plant)?;
    let mut sensor = Sensor::new(s.sensor.clone(), s.seed);
    let ctrl_dt = 1.0 / s.controller.rate_hz;
    let substeps = (ctrl_dt / s.dt_s).round() as usize;

    let start = traj.sample(0.0).x;
    let seed_q = DVector::from_fn(nq, |r, _| if r % 2 == 0 { 0.05 } else { 0.0 });
    let q0 = s.geometry.inverse_tip(&start, &seed_q)?;
    let payload0 = s.plant.payload_kg;
    let known_payload = |kg: f64| match s.controller.load_compensation {
        LoadCompensation::Model => (kg, Vector3::zeros()),
        LoadCompensation::TipForce => (0.0, -gravity * kg),
        LoadCompensation::None => (0.0, Vector3::zeros()),
    };
    let (model_payload, mut load_force) = known_payload(payload0);
    let dynamics = AugmentedModel::with_payload(&s.geometry, model_payload);
    let hold_tau = dynamics.gravity_torque(&q0, &gravity) + model.elastic_torque(&q0) - s.geometry.task_jacobian(&q0).transpose() * load_force;
    let p0 = model.allocate(&model.phase_adjust_all(&hold_tau)).pressures;
    plant.set_state(q0.clone(), DVector::zeros(nq));
    plant.set_applied_pressure(&p0);
    sensor.reset(&q0, &DVector::zeros(nq));

    let mut controller = match s.controller.kind {
        ControllerKind::Dynamic => {
            let mut c = OperationalSpaceController::new(model.clone(), dynamics, gravity, s.controller.gains.clone());
            c.projector = s.controller.projector;
            c.pinv_damping = s.controller.pinv_damping;
            Controller::Dynamic(c)
        }
        ControllerKind::Quasistatic => {
            let mut c = QuasistaticController::new(model.clone(), dynamics, s.controller.quasistatic.clone(), hold_tau);
            c.pinv_damping = s.controller.pinv_damping;
            Controller::Quasistatic(c)
        }
    };
    let mut commanded_force = Vector3::zeros();

    let step_controller = |controller: &mut Controller,
                               sensor: &mut Sensor,
                               q_true: &DVector<f64>,
                               x_des: &Vector3<f64>,
                               xd_des: &Vector3<f64>,
                               xdd_des: &Vector3<f64>,
                               f_supp: &Vector3<f64>|
     -> Result<(ControlOutput, Vector3<f64>)> {
        let (q, qd) = sensor.sense(q_true);
        let x = s.geometry.tip_position(&q);
        let out = match controller {
            Controller::Dynamic(c) => {
                let xd = s.geometry.tip_velocity(&q, &qd);
                let pot = potential_acceleration(&x, &s.obstacles, &s.controller.potential);
                let acc = pd_reference(&x, &xd, x_des, xd_des, xdd_des, &pot, &c.gains);
                c.command(&q, &qd, &acc, f_supp)?
            }
            Controller::Quasistatic(c) => c.update(&q, x_des, ctrl_dt),
        };
        Ok((out, x))
    };

    // Closed-loop hold at the start before logging.
    let pre_ticks = (s.preroll_s / ctrl_dt).round() as usize;
    let zero = Vector3::zeros();
    for _ in 0..pre_ticks {
        let q = plant.state.q.clone();
        let (out, _) = step_controller(&mut controller, &mut sensor, &q, &start, &zero, &zero, &load_force)?;
        for _ in 0..substeps {
            plant.step(&out.pressures, &Vector3::zeros(), s.dt_s)?;
        }
    }
    plant.state.t = 0.0;

    let with_clearance = !s.obstacles.is_empty();
    let mut log = RunLog { columns: log_columns(n_seg, with_clearance), rows: Vec::new(), events: Vec::new() };
    let ticks = (duration / ctrl_dt).round() as usize;
    let mut disturbances: Vec<&Disturbance> = s.disturbances.iter().collect();
    disturbances.sort_by(|a, b| a.t_s.total_cmp(&b.t_s));
    let mut next_disturbance = 0;
    let mut min_clear = clearance(&plant.tip_position(), &s.obstacles);
    for k in 0..=ticks {
        let t = k as f64 * ctrl_dt;
        let lo = if k == 0 { f64::NEG_INFINITY } else { t - ctrl_dt };
        let events = traj.events_between(lo + 1e-12, t + 1e-12);
        let mut names = Vec::new();
        for ev in &events {
            match ev {
                Event::Grasp { mass_kg } => {
                    plant.grasp(*mass_kg);
                    names.push("grasp");
                }
                Event::Release => {
                    plant.release_payload().map_err(|e| Error::ScriptError(format!("release at {t:.3} s: {e}")))?;
                    names.push("release");
                }
                Event::ForceOn { force_n } => {
                    commanded_force = Vector3::from(*force_n);
                    names.push("force_on");
                }
                Event::ForceOff => {
                    commanded_force = Vector3::zeros();
                    names.push("force_off");
                }
            }
            if matches!(ev, Event::Grasp { .. } | Event::Release) {
                let (mp, lf) = known_payload(plant.payload_kg);
                load_force = lf;
                match &mut controller {
                    Controller::Dynamic(c) => c.set_payload(mp),
                    Controller::Quasistatic(c) => c.dynamics = AugmentedModel::with_payload(&s.geometry, mp),
                }
            }
        }
        let r = traj.sample(t);
        let q = plant.state.q.clone();
        let f_supp = load_force + commanded_force;
        let (out, x_meas) = step_controller(&mut controller, &mut sensor, &q, &r.x, &r.xd, &r.xdd, &f_supp)
            .map_err(|e| Error::NumericalFailureAt { tick: k, reason: e.to_string() })?;
        let mut row = Vec::with_capacity(log.columns.len());
        row.push(t);
        row.extend(plant.state.q.iter());
        row.extend(plant.state.qd.iter());
        row.extend(plant.tip_position().iter());
        row.extend(plant.tip_velocity().iter());
        row.extend(x_meas.iter());
        row.extend(r.x.iter());
        row.extend(out.pressures.iter());
        row.extend(out.saturated.iter().map(|&b| b as u8 as f64));
        row.extend(out.tau_ref.iter());
        row.push(out.nullspace_torque.norm());
        row.push(out.nullspace_accel_residual);
        row.push(plant.payload_kg);
        if with_clearance {
            row.push(min_clear);
            min_clear = f64::INFINITY;
        }
        log.rows.push(row);
        log.events.push(names.join(";"));
        if k == ticks {
            break;
        }
        for _ in 0..substeps {
            while next_disturbance < disturbances.len() && disturbances[next_disturbance].t_s <= plant.state.t + 1e-12 {
                plant
                    .apply_disturbance(&DVector::from_vec(disturbances[next_disturbance].impulse.clone()))
                    .map_err(|e| Error::NumericalFailureAt { tick: k, reason: e.to_string() })?;
                next_disturbance += 1;
            }
            plant
                .step(&out.pressures, &Vector3::zeros(), s.dt_s)
                .map_err(|e| Error::NumericalFailureAt { tick: k, reason: e.to_string() })?;
            if with_clearance {
                min_clear = min_clear.min(clearance(&plant.tip_position(), &s.obstacles));
            }
        }
    }
    let metrics = compute_metrics(&log, &s.metrics)?;
    Ok(RunOutput { log, metrics })
}

pub fn run(s: &Scenario) -> Result<RunOutput> {
    let model = resolve_model(s)?;
    run_with_model(s, &model)
}

/// Knobs of the identification pipeline that are not part of the sweep
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifyOptions {
    /// Starting stiffness guess, N m / rad.
    pub initial_stiffness_nm_per_rad: Vec<f64>,
    pub passes: usize,
    /// Damping ratios tried in the damping grid search.
    pub damping_ratios: Vec<f64>,
    /// Tracking scenario used to score damping candidates.
    pub damping_period_s: f64,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        IdentifyOptions {
            initial_stiffness_nm_per_rad: vec![0.2],
            passes: 2,
            damping_ratios: vec![0.1, 0.25, 0.5],
            damping_period_s: 8.0,
        }
    }
}

/// Output of the identification pipeline, including the sweeps behind the
/// correction fits and the verification sweeps run with the final model.
pub struct Identification {
    pub model: ActuationElasticityModel,
    pub report: FitReport,
    pub magnitude_uncorrected: Vec<SweepPoint>,
    pub phase_uncorrected: Vec<SweepPoint>,
}

/// 8 s circle at `r = 0.15 m`, `z = -0.23 m`.
pub fn circle_scenario(name: &str, period: f64, turns: f64) -> Scenario {
    Scenario::new(name, Script::circle(0.15, period, -0.23, turns))
}

/// Collect, fit K, fit A, reidentify, fit the magnitude and phase
/// corrections, then pick damping on the circle-tracking scenario.
pub fn identify(
    geometry: &ArmGeometry,
    spec: &PlantSpec,
    cfg: &SysIdConfig,
    opts: &IdentifyOptions,
) -> Result<Identification> {
    let n = geometry.n_segments();
    let mut plant = Plant::new(geometry, spec)?;
    let mut sensor = Sensor::new(cfg.sensor.clone(), cfg.seed);
    let k0: Vec<f64> = (0..n).map(|i| opts.initial_stiffness_nm_per_rad[i.min(opts.initial_stiffness_nm_per_rad.len() - 1)]).collect();
    let mut model = ActuationElasticityModel::analytic_estimate(geometry, &k0, &vec![0.0; n]);
    model.pressure_max_pa = spec.pressure_max_pa;
    let k_data = collect_static_poses(&mut plant, &stiffness_stage_pressures(&model, cfg), cfg, &mut sensor)?;
    let a_data = collect_static_poses(&mut plant, &actuation_stage_pressures(&model, cfg), cfg, &mut sensor)?;
    let maps: Vec<_> = (0..n).map(|i| model.chamber_map(i)).collect();
    let mut report = reidentify(&k_data, &a_data, &maps, &k0, opts.passes.max(1))?;
    model.stiffness_nm_per_rad = report.stiffness_nm_per_rad.clone();
    for (i, a) in report.chamber_maps.iter().enumerate() {
        model.set_chamber_map(i, &crate::actuation::rows_to_matrix(a));
    }
    plant.set_state(DVector::zeros(geometry.n_q()), DVector::zeros(geometry.n_q()));
    let magnitude = magnitude_sweep(&mut plant, &model, cfg, &mut sensor)?;
    let phase = phase_sweep(&mut plant, &model, cfg, &mut sensor, false)?;
    model.magnitude_polys = fit_magnitude_polynomial(&magnitude, &model.stiffness_nm_per_rad)?;
    model.phase_polys = fit_phase_polynomial(&phase, n)?;
    report.magnitude_sweep_samples = magnitude.len();
    report.phase_sweep_samples = phase.len();

    let candidates = opts.damping_ratios.clone();
    let (zeta, curve) = tune_damping(&candidates, |zeta| {
        let mut m = model.clone();
        m.damping_nms_per_rad = damping_from_ratio(geometry, &m.stiffness_nm_per_rad, zeta);
        let mut sc = circle_scenario("damping", opts.damping_period_s, 1.0);
        sc.geometry = geometry.clone();
        sc.plant = spec.clone();
        sc.sensor = cfg.sensor.clone();
        sc.seed = cfg.seed;
        Ok(run_with_model(&sc, &m)?.metrics.rms_error_m)
    })?;
    model.damping_nms_per_rad = damping_from_ratio(geometry, &model.stiffness_nm_per_rad, zeta);
    report.damping_curve = curve;
    Ok(Identification { model, report, magnitude_uncorrected: magnitude, phase_uncorrected: phase })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepKind {
    Phase,
    Magnitude,
}

/// Verification sweep with and without the model's corrections.
pub struct SweepComparison {
    pub kind: SweepKind,
    pub uncorrected: Vec<SweepPoint>,
    pub corrected: Vec<SweepPoint>,
}

impl SweepComparison {
    /// (mean, peak) error of the uncorrected and corrected sweeps: degrees
    /// for phase, centimetres for magnitude.
    pub fn stats(&self) -> ((f64, f64), (f64, f64)) {
        match self.kind {
            SweepKind::Phase => (angle_error_stats(&self.uncorrected), angle_error_stats(&self.corrected)),
            SweepKind::Magnitude => (radial_error_stats(&self.uncorrected), radial_error_stats(&self.corrected)),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        match self.kind {
            SweepKind::Phase => {
                s.push_str("segment,phi_des_deg,phi_meas_uncorrected_deg,phi_meas_corrected_deg,error_uncorrected_deg,error_corrected_deg\n");
                for (u, c) in self.uncorrected.iter().zip(&self.corrected) {
                    let _ = writeln!(
                        s,
                        "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                        u.segment,
                        u.phi_des.to_degrees(),
                        u.phi_meas.to_degrees(),
                        c.phi_meas.to_degrees(),
                        wrap_pi(u.phi_des - u.phi_meas).to_degrees(),
                        wrap_pi(c.phi_des - c.phi_meas).to_degrees()
                    );
                }
            }
            SweepKind::Magnitude => {
                s.push_str("segment,phi_des_deg,theta_des,theta_meas_uncorrected,theta_meas_corrected,radial_des_m,radial_meas_uncorrected_m,radial_meas_corrected_m\n");
                for (u, c) in self.uncorrected.iter().zip(&self.corrected) {
                    let _ = writeln!(
                        s,
                        "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                        u.segment,
                        u.phi_des.to_degrees(),
                        u.theta_des,
                        u.theta_meas,
                        c.theta_meas,
                        u.tip_radial_des_m,
                        u.tip_radial_meas_m,
                        c.tip_radial_meas_m
                    );
                }
            }
        }
        s
    }
}

pub fn sweep(
    geometry: &ArmGeometry,
    spec: &PlantSpec,
    model: &ActuationElasticityModel,
    cfg: &SysIdConfig,
    kind: SweepKind,
) -> Result<SweepComparison> {
    let mut plant = Plant::new(geometry, spec)?;
    let mut sensor = Sensor::new(cfg.sensor.clone(), cfg.seed.wrapping_add(1));
    let plain = model.without_corrections();
    let (uncorrected, corrected) = match kind {
        SweepKind::Phase => (
            phase_sweep(&mut plant, &plain, cfg, &mut sensor, false)?,
            phase_sweep(&mut plant, model, cfg, &mut sensor, true)?,
        ),
        SweepKind::Magnitude => (
            magnitude_sweep(&mut plant, &plain, cfg, &mut sensor)?,
            magnitude_sweep(&mut plant, model, cfg, &mut sensor)?,
        ),
    };
    Ok(SweepComparison { kind, uncorrected, corrected })
}

/// Metrics table and per-run plot data for a set of logs.
pub struct Report {
    pub table_csv: String,
    pub plot_data: Vec<(String, String)>,
}

pub fn report(logs: &[(String, RunLog)], cfg: &MetricsConfig) -> Result<Report> {
    if logs.is_empty() {
        return Err(Error::SchemaError("report needs at least one log".into()));
    }
    let mut table = String::from("run,mean_error_cm,peak_error_cm,rms_error_cm,mean_abs_x_cm,mean_abs_y_cm,mean_abs_z_cm,max_tip_speed_m_per_s,settling_time_s");
    let any_obstacles = logs.iter().any(|(_, l)| l.column("clearance").is_ok());
    if any_obstacles {
        table.push_str(",min_clearance_cm");
    }
    table.push('\n');
    let mut plot_data = Vec::new();
    for (name, log) in logs {
        let m = compute_metrics(log, cfg)?;
        let _ = write!(
            table,
            "{name},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            100.0 * m.mean_error_m,
            100.0 * m.peak_error_m,
            100.0 * m.rms_error_m,
            100.0 * m.mean_abs_axis_error_m[0],
            100.0 * m.mean_abs_axis_error_m[1],
            100.0 * m.mean_abs_axis_error_m[2],
            m.max_tip_speed_m_per_s,
            m.settling_time_s.map_or(String::new(), |v| format!("{v:.3}"))
        );
        if any_obstacles {
            let _ = write!(table, ",{}", m.min_obstacle_clearance_m.map_or(String::new(), |v| format!("{:.4}", 100.0 * v)));
        }
        table.push('\n');
        let cols = ["t", "x_tip", "y_tip", "z_tip", "x_des", "y_des", "z_des"];
        let idx = cols.iter().map(|c| log.column(c)).collect::<Result<Vec<_>>>()?;
        let mut data = cols.join(",");
        data.push_str(",error_m\n");
        for r in &log.rows {
            let e = Vector3::new(r[idx[1]] - r[idx[4]], r[idx[2]] - r[idx[5]], r[idx[3]] - r[idx[6]]).norm();
            let vals: Vec<String> = idx.iter().map(|&i| format!("{:.16e}", r[i])).collect();
            let _ = writeln!(data, "{},{e:.16e}", vals.join(","));
        }
        plot_data.push((format!("{name}_tip.csv"), data));
    }
    Ok(Report { table_csv: table, plot_data })
}
