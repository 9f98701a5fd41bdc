//! Hierarchical identification from quasistatic poses: stiffness first, then
//! the chamber maps, then the azimuth-dependent magnitude and phase
//! corrections, and finally a damping grid search.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

use crate::actuation::{rotation2, ActuationElasticityModel};
use crate::dynamics::AugmentedModel;
use crate::kinematics::{from_polar, to_polar, wrap_pi, ArmGeometry};
use crate::plant::{Plant, Sensor, SensorModel};
use crate::polynomial::PiecewiseCubic;
use crate::{Error, Result};

/// Joint speed below which a pose counts as settled, rad/s.
pub const SETTLE_SPEED: f64 = 1e-3;

/// Common-mode pressure steps added to the actuation stage, as a fraction of
/// the maximum pressure.
const COMMON_MODE_STEP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SysIdConfig {
    /// Maximum time each pose is held before it must be at rest.
    pub settle_time_s: f64,
    pub dt_s: f64,
    pub stiffness_poses_per_segment: usize,
    pub actuation_directions: usize,
    /// Pressure magnitudes (as fractions of the maximum) of the actuation stage.
    pub actuation_levels: Vec<f64>,
    /// Sweep angles for the correction fits.
    pub sweep_angles: usize,
    /// Equal-magnitude pressure level of the phase sweep, Pa.
    pub phase_sweep_pressure_pa: f64,
    /// Bend angle commanded in the magnitude sweep, rad.
    pub magnitude_sweep_theta_rad: f64,
    pub sensor: SensorModel,
    pub seed: u64,
}

impl Default for SysIdConfig {
    fn default() -> Self {
        SysIdConfig {
            settle_time_s: 10.0,
            dt_s: 5e-3,
            stiffness_poses_per_segment: 40,
            actuation_directions: 120,
            actuation_levels: vec![0.3, 0.55, 0.8],
            sweep_angles: 360,
            phase_sweep_pressure_pa: 35_000.0,
            magnitude_sweep_theta_rad: 0.45,
            sensor: SensorModel::default(),
            seed: 7,
        }
    }
}

/// One settled pose.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// Segment whose chambers were driven.
    pub segment: usize,
    pub p_meas: DVector<f64>,
    pub q_meas: DVector<f64>,
    /// Model gravity torque at `q_meas`.
    pub g_meas: DVector<f64>,
    pub settled: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PoseSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One row per sample and segment.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.to_string()))?;
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record([
            "sample_id", "segment", "p1_pa", "p2_pa", "p3_pa", "theta_x", "theta_y", "g_x", "g_y",
            "settled",
        ])
        .map_err(io)?;
        for (id, s) in self.samples.iter().enumerate() {
            for seg in 0..s.q_meas.len() / 2 {
                let f = |v: f64| format!("{v:.16e}");
                w.write_record([
                    id.to_string(),
                    seg.to_string(),
                    f(s.p_meas[3 * seg]),
                    f(s.p_meas[3 * seg + 1]),
                    f(s.p_meas[3 * seg + 2]),
                    f(s.q_meas[2 * seg]),
                    f(s.q_meas[2 * seg + 1]),
                    f(s.g_meas[2 * seg]),
                    f(s.g_meas[2 * seg + 1]),
                    (s.settled as u8).to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Nominal pressures for a torque request on one segment, other chambers off.
fn segment_pressures(model: &ActuationElasticityModel, seg: usize, tau: Vector2<f64>) -> DVector<f64> {
    let n = model.n_segments();
    let mut t = DVector::zeros(2 * n);
    t[2 * seg] = tau.x;
    t[2 * seg + 1] = tau.y;
    let alloc = model.allocate(&t);
    let mut p = DVector::zeros(3 * n);
    p.fixed_rows_mut::<3>(3 * seg)
        .copy_from(&alloc.pressures.fixed_rows::<3>(3 * seg));
    p
}

/// Stiffness-stage pressures: directions interleaved over two magnitudes.
pub fn stiffness_stage_pressures(
    nominal: &ActuationElasticityModel,
    cfg: &SysIdConfig,
) -> Vec<(usize, DVector<f64>)> {
    let pmax = nominal.pressure_max_pa;
    let mut out = Vec::new();
    for seg in 0..nominal.n_segments() {
        let gain = nominal.segment_chamber_gain(seg);
        let n = cfg.stiffness_poses_per_segment;
        for k in 0..n {
            let phi = 2.0 * PI * k as f64 / n as f64;
            let level = if k % 2 == 0 { 0.35 } else { 0.7 };
            let tau = Vector2::new(phi.cos(), phi.sin()) * (level * pmax * gain);
            out.push((seg, segment_pressures(nominal, seg, tau)));
        }
    }
    out
}

/// Actuation-stage pressures: `directions x levels` per segment, ordered by
/// direction so consecutive poses are close.
pub fn actuation_stage_pressures(
    nominal: &ActuationElasticityModel,
    cfg: &SysIdConfig,
) -> Vec<(usize, DVector<f64>)> {
    let pmax = nominal.pressure_max_pa;
    let mut out = Vec::new();
    for seg in 0..nominal.n_segments() {
        let gain = nominal.segment_chamber_gain(seg);
        for k in 0..cfg.actuation_directions {
            let phi = 2.0 * PI * k as f64 / cfg.actuation_directions as f64;
            for (j, &level) in cfg.actuation_levels.iter().enumerate() {
                let tau = Vector2::new(phi.cos(), phi.sin()) * (level * pmax * gain);
                let mut p = segment_pressures(nominal, seg, tau);
                let top = p.rows(3 * seg, 3).max();
                let offset = (COMMON_MODE_STEP * ((k + j) % 3) as f64 * pmax).min(pmax - top);
                p.rows_mut(3 * seg, 3).add_scalar_mut(offset.max(0.0));
                out.push((seg, p));
            }
        }
    }
    out
}

/// Hold each pressure until the arm is at rest and record a sample.
pub fn collect_static_poses(
    plant: &mut Plant,
    pressures: &[(usize, DVector<f64>)],
    cfg: &SysIdConfig,
    sensor: &mut Sensor,
) -> Result<Dataset> {
    let model = AugmentedModel::new(&plant.geometry);
    let gravity = plant.truth.gravity;
    let mut samples = Vec::with_capacity(pressures.len());
    for (index, (seg, p)) in pressures.iter().enumerate() {
        if p.iter().any(|v| *v < 0.0 || *v > plant.truth.pressure_max_pa) {
            return Err(Error::ConfigError(format!("pose {index}: pressure outside [0, p_max]")));
        }
        let speed = plant.settle(p, cfg.dt_s, cfg.settle_time_s, SETTLE_SPEED)?;
        if speed >= SETTLE_SPEED {
            return Err(Error::NotSettled {
                index,
                speed,
                settle_time_s: cfg.settle_time_s,
            });
        }
        let (q_meas, _) = sensor.sense(&plant.state.q);
        let g_meas = model.gravity_torque(&q_meas, &gravity);
        samples.push(PoseSample {
            segment: *seg,
            p_meas: p.clone(),
            q_meas,
            g_meas,
            settled: true,
        });
    }
    Ok(Dataset { samples })
}

/// One stiffness scalar per segment for `K q = A p - g`. The configuration
/// carries sensor noise and unmodeled anisotropy, so the fit uses the
/// commanded torque `A p` as instrument: `K = sum (A p).(A p - g) / sum (A p).q`.
pub fn fit_stiffness(data: &Dataset, chamber_maps: &[Matrix2x3<f64>]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::RankDeficient("empty dataset".into()));
    }
    let n = chamber_maps.len();
    let mut k = vec![0.0; n];
    for (seg, a) in chamber_maps.iter().enumerate() {
        let mut zy = 0.0;
        let mut zq = 0.0;
        let mut scale = 0.0;
        for s in &data.samples {
            let q = Vector2::new(s.q_meas[2 * seg], s.q_meas[2 * seg + 1]);
            let z = a * s.p_meas.fixed_rows::<3>(3 * seg);
            let y = z - Vector2::new(s.g_meas[2 * seg], s.g_meas[2 * seg + 1]);
            zy += z.dot(&y);
            zq += z.dot(&q);
            scale += z.norm() * q.norm();
        }
        if !(zq > 1e-9 * scale) || !(scale > 0.0) {
            return Err(Error::RankDeficient(format!(
                "segment {seg}: no actuated bending in the stiffness dataset"
            )));
        }
        k[seg] = zy / zq;
    }
    Ok(k)
}

/// Chamber maps given stiffness: least squares of `A p = g + K q`.
/// Requires a stiffness estimate.
pub fn fit_actuation(data: &Dataset, stiffness: Option<&[f64]>) -> Result<Vec<Matrix2x3<f64>>> {
    let stiffness = stiffness.ok_or_else(|| {
        Error::MissingDependency("the actuation fit needs an identified stiffness".into())
    })?;
    if data.is_empty() {
        return Err(Error::RankDeficient("empty dataset".into()));
    }
    let mut out = Vec::with_capacity(stiffness.len());
    for (seg, &k) in stiffness.iter().enumerate() {
        let m = data.samples.len();
        let p = DMatrix::from_fn(m, 3, |r, c| data.samples[r].p_meas[3 * seg + c]);
        let y = DMatrix::from_fn(m, 2, |r, c| {
            let s = &data.samples[r];
            s.g_meas[2 * seg + c] + k * s.q_meas[2 * seg + c]
        });
        let svd = p.clone().svd(true, true);
        let sv = &svd.singular_values;
        if !(sv.min() > 1e-9 * sv.max()) {
            return Err(Error::RankDeficient(format!(
                "segment {seg}: pressures do not excite all three chambers"
            )));
        }
        let at = svd
            .solve(&y, 0.0)
            .map_err(|e| Error::NumericalFailure(e.to_string()))?;
        out.push(Matrix2x3::from_fn(|r, c| at[(c, r)]));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassChange {
    pub pass: usize,
    /// Relative change of the stiffness vector, percent.
    pub stiffness_change_pct: f64,
    /// Relative (Frobenius) change of the chamber maps, percent.
    pub actuation_change_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stiffness_nm_per_rad: Vec<f64>,
    pub chamber_maps: Vec<[[f64; 3]; 2]>,
    pub stiffness_residual: f64,
    pub actuation_residual: f64,
    pub history: Vec<PassChange>,
    pub stiffness_samples: usize,
    pub actuation_samples: usize,
    #[serde(default)]
    pub magnitude_sweep_samples: usize,
    #[serde(default)]
    pub phase_sweep_samples: usize,
    #[serde(default)]
    pub damping_curve: Vec<(f64, f64)>,
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = old.iter().map(|b| b * b).sum::<f64>().sqrt();
    100.0 * num / den.max(1e-300)
}

fn flatten(maps: &[Matrix2x3<f64>]) -> Vec<f64> {
    maps.iter().flat_map(|a| a.iter().cloned().collect::<Vec<_>>()).collect()
}

fn stiffness_residual(data: &Dataset, k: &[f64], maps: &[Matrix2x3<f64>]) -> f64 {
    let mut r = 0.0;
    for s in &data.samples {
        for (seg, a) in maps.iter().enumerate() {
            let q = Vector2::new(s.q_meas[2 * seg], s.q_meas[2 * seg + 1]);
            let g = Vector2::new(s.g_meas[2 * seg], s.g_meas[2 * seg + 1]);
            let e = a * s.p_meas.fixed_rows::<3>(3 * seg) - g - q * k[seg];
            r += e.norm_squared();
        }
    }
    r.sqrt()
}

/// Stiffness and actuation fits alternated for `passes` rounds starting
/// from an initial chamber-map estimate.
pub fn reidentify(
    stiffness_data: &Dataset,
    actuation_data: &Dataset,
    initial_maps: &[Matrix2x3<f64>],
    initial_stiffness: &[f64],
    passes: usize,
) -> Result<FitReport> {
    let mut maps = initial_maps.to_vec();
    let mut k = initial_stiffness.to_vec();
    let mut history = Vec::new();
    for pass in 1..=passes {
        let k_new = fit_stiffness(stiffness_data, &maps)?;
        let maps_new = fit_actuation(actuation_data, Some(&k_new))?;
        history.push(PassChange {
            pass,
            stiffness_change_pct: rel_change(&k_new, &k),
            actuation_change_pct: rel_change(&flatten(&maps_new), &flatten(&maps)),
        });
        k = k_new;
        maps = maps_new;
    }
    Ok(FitReport {
        stiffness_residual: stiffness_residual(stiffness_data, &k, &maps),
        actuation_residual: stiffness_residual(actuation_data, &k, &maps),
        stiffness_nm_per_rad: k,
        chamber_maps: maps.iter().map(crate::actuation::matrix_to_rows).collect(),
        history,
        stiffness_samples: stiffness_data.len(),
        actuation_samples: actuation_data.len(),
        magnitude_sweep_samples: 0,
        phase_sweep_samples: 0,
        damping_curve: Vec::new(),
    })
}

/// One settled point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub segment: usize,
    pub phi_des: f64,
    pub phi_meas: f64,
    pub theta_des: f64,
    pub theta_meas: f64,
    /// Pressure-torque magnitude `|A p|` the model predicts for the command.
    pub torque_nm: f64,
    /// Model gravity torque at the measured pose, projected on the bending direction.
    pub gravity_radial_nm: f64,
    /// Horizontal tip distance from the base axis, desired and measured.
    pub tip_radial_des_m: f64,
    pub tip_radial_meas_m: f64,
    pub q_meas: Vec<f64>,
}

fn settle_and_measure(
    plant: &mut Plant,
    p: &DVector<f64>,
    cfg: &SysIdConfig,
    sensor: &mut Sensor,
    index: usize,
) -> Result<DVector<f64>> {
    let speed = plant.settle(p, cfg.dt_s, cfg.settle_time_s, SETTLE_SPEED)?;
    if speed >= SETTLE_SPEED {
        return Err(Error::NotSettled {
            index,
            speed,
            settle_time_s: cfg.settle_time_s,
        });
    }
    Ok(sensor.sense(&plant.state.q).0)
}

/// Equal-magnitude pressure sweep of each segment (other segments off):
/// pressures `A+ (k a (cos phi, sin phi))` with `a` the segment's mean chamber gain.
pub fn phase_sweep(
    plant: &mut Plant,
    model: &ActuationElasticityModel,
    cfg: &SysIdConfig,
    sensor: &mut Sensor,
    corrected: bool,
) -> Result<Vec<SweepPoint>> {
    let n_seg = model.n_segments();
    let mut out = Vec::new();
    for seg in 0..n_seg {
        let magnitude = cfg.phase_sweep_pressure_pa * model.segment_chamber_gain(seg);
        for k in 0..cfg.sweep_angles {
            let phi = 2.0 * PI * k as f64 / cfg.sweep_angles as f64;
            let mut tau = Vector2::new(phi.cos(), phi.sin()) * magnitude;
            if corrected {
                tau = model.phase_adjust(seg, &tau);
            }
            let p = segment_pressures(model, seg, tau);
            let q = settle_and_measure(plant, &p, cfg, sensor, out.len())?;
            let (theta_meas, phi_meas) = to_polar(q[2 * seg], q[2 * seg + 1]);
            out.push(SweepPoint {
                segment: seg,
                phi_des: phi,
                phi_meas,
                theta_des: f64::NAN,
                theta_meas,
                torque_nm: magnitude,
                gravity_radial_nm: 0.0,
                tip_radial_des_m: f64::NAN,
                tip_radial_meas_m: f64::NAN,
                q_meas: q.iter().cloned().collect(),
            });
        }
    }
    Ok(out)
}

/// Feedforward pressures holding `q_des` according to `model`.
pub fn feedforward_pressures(
    model: &ActuationElasticityModel,
    dynamics: &AugmentedModel,
    gravity: &Vector3<f64>,
    q_des: &DVector<f64>,
) -> DVector<f64> {
    let tau = dynamics.gravity_torque(q_des, gravity) + model.elastic_torque(q_des);
    model.allocate(&model.phase_adjust_all(&tau)).pressures
}

/// Constant-curvature sweep of the whole arm: every segment is commanded to
/// `q_des = k (cos phi, sin phi)` through `A+ (g(q_des) + K q_des)`. One point
/// per segment and angle.
pub fn magnitude_sweep(
    plant: &mut Plant,
    model: &ActuationElasticityModel,
    cfg: &SysIdConfig,
    sensor: &mut Sensor,
) -> Result<Vec<SweepPoint>> {
    let geometry = plant.geometry.clone();
    let dynamics = AugmentedModel::new(&geometry);
    let gravity = plant.truth.gravity;
    let n_seg = model.n_segments();
    let theta = cfg.magnitude_sweep_theta_rad;
    let mut out = Vec::new();
    for k in 0..cfg.sweep_angles {
        let phi = 2.0 * PI * k as f64 / cfg.sweep_angles as f64;
        let (x, y) = from_polar(theta, phi);
        let q_des = DVector::from_fn(2 * n_seg, |r, _| if r % 2 == 0 { x } else { y });
        let p = feedforward_pressures(model, &dynamics, &gravity, &q_des);
        let q = settle_and_measure(plant, &p, cfg, sensor, k)?;
        let tau = model.pressure_to_torque(&p);
        let g = dynamics.gravity_torque(&q, &gravity);
        let radial_des = geometry.tip_position(&q_des).xy().norm();
        let radial_meas = geometry.tip_position(&q).xy().norm();
        for seg in 0..n_seg {
            let (theta_meas, phi_meas) = to_polar(q[2 * seg], q[2 * seg + 1]);
            let dir = Vector2::new(phi_meas.cos(), phi_meas.sin());
            out.push(SweepPoint {
                segment: seg,
                phi_des: phi,
                phi_meas,
                theta_des: theta,
                theta_meas,
                torque_nm: Vector2::new(tau[2 * seg], tau[2 * seg + 1]).norm(),
                gravity_radial_nm: dir.dot(&Vector2::new(g[2 * seg], g[2 * seg + 1])),
                tip_radial_des_m: radial_des,
                tip_radial_meas_m: radial_meas,
                q_meas: q.iter().cloned().collect(),
            });
        }
    }
    Ok(out)
}

/// Mean and peak absolute tip radial error of a magnitude sweep, cm.
pub fn radial_error_stats(points: &[SweepPoint]) -> (f64, f64) {
    let errs: Vec<f64> = points
        .iter()
        .filter(|p| p.segment == 0)
        .map(|p| 100.0 * (p.tip_radial_meas_m - p.tip_radial_des_m).abs())
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    (mean, errs.iter().cloned().fold(0.0, f64::max))
}

/// Phase correction per segment: cubic fit of `phi_des - phi_meas` against
/// the realised azimuth, so that commanding `phi + g(phi)` realises `phi`.
pub fn fit_phase_polynomial(points: &[SweepPoint], n_seg: usize) -> Result<Vec<PiecewiseCubic>> {
    (0..n_seg)
        .map(|seg| {
            let samples: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.segment == seg)
                .map(|p| (p.phi_meas, wrap_pi(p.phi_des - p.phi_meas)))
                .collect();
            PiecewiseCubic::fit(&samples)
        })
        .collect()
}

/// Magnitude correction per segment from a constant-curvature sweep. Each
/// point gives the ratio between the stiffness the model assumes and the
/// stiffness that balances the measured pose:
/// `f = K theta_meas / (|A p| - g_radial(q_meas))`.
pub fn fit_magnitude_polynomial(
    points: &[SweepPoint],
    stiffness: &[f64],
) -> Result<Vec<PiecewiseCubic>> {
    (0..stiffness.len())
        .map(|seg| {
            let samples: Vec<(f64, f64)> = points
                .iter()
                .filter(|p| p.segment == seg)
                .map(|p| {
                    let elastic = p.torque_nm - p.gravity_radial_nm;
                    (p.phi_meas, stiffness[seg] * p.theta_meas / elastic)
                })
                .collect();
            PiecewiseCubic::fit(&samples)
        })
        .collect()
}

/// Mean and peak absolute azimuth error of a sweep, degrees.
pub fn angle_error_stats(points: &[SweepPoint]) -> (f64, f64) {
    let errs: Vec<f64> = points
        .iter()
        .map(|p| wrap_pi(p.phi_des - p.phi_meas).abs().to_degrees())
        .collect();
    let mean = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    (mean, errs.iter().cloned().fold(0.0, f64::max))
}

/// Grid search: evaluate every candidate and return the one with the
/// smallest error together with the full error curve.
pub fn tune_damping<F>(candidates: &[f64], mut evaluate: F) -> Result<(f64, Vec<(f64, f64)>)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if candidates.is_empty() || candidates.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::ConfigError("damping candidates must be nonempty and nonnegative".into()));
    }
    if candidates.len() == 1 {
        return Ok((candidates[0], Vec::new()));
    }
    let mut curve = Vec::with_capacity(candidates.len());
    for &c in candidates {
        curve.push((c, evaluate(c)?));
    }
    let best = curve
        .iter()
        .filter(|(_, e)| e.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| *c)
        .ok_or_else(|| Error::NumericalFailure("every damping candidate failed".into()))?;
    Ok((best, curve))
}

/// Damping per segment for a damping ratio `zeta`, using the straight-arm
/// inertia diagonal and the stiffness.
pub fn damping_from_ratio(geometry: &ArmGeometry, stiffness: &[f64], zeta: f64) -> Vec<f64> {
    let dynamics = AugmentedModel::new(geometry);
    let n = geometry.n_q();
    let b = dynamics
        .terms(&DVector::zeros(n), &DVector::zeros(n), &Vector3::zeros())
        .b;
    (0..geometry.n_segments())
        .map(|i| 2.0 * zeta * (stiffness[i] * b[(2 * i, 2 * i)]).sqrt())
        .collect()
}

/// Rotation that `model` applies to the request at `phi`, for reporting.
pub fn correction_angle(model: &ActuationElasticityModel, seg: usize, phi: f64) -> f64 {
    let v = rotation2(phi) * Vector2::x();
    let w = model.phase_adjust(seg, &v);
    wrap_pi(w.y.atan2(w.x) - phi)
}
