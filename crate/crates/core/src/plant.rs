//! Simulated arm standing in for the hardware: forward dynamics with the
//! true (anisotropic) actuation and stiffness, payload handling, impulsive
//! disturbances and a motion-capture style sensor.

use nalgebra::{DVector, Matrix2x3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::actuation::{
    chamber_matrix, pressure_to_torque, rotation2, DEFAULT_P_MAX_PA, NOMINAL_CHAMBER_ANGLES,
    TORQUE_FLOOR,
};
use crate::dynamics::{beam_gravity, stalactite_gravity, AugmentedModel, DynamicTerms};
use crate::kinematics::{to_polar, ArmGeometry, THETA_EPS};
use crate::polynomial::PiecewiseCubic;
use crate::{Error, Result};

/// Smooth 2 pi periodic function of an angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnisotropyProfile {
    None,
    /// `peak * exp(concentration * (cos(a - center) - 1))`, optionally with
    /// its circular mean removed.
    VonMises {
        peak: f64,
        center_deg: f64,
        concentration: f64,
        #[serde(default)]
        zero_mean: bool,
    },
    /// `amplitude * cos(order * (a - phase))`
    Harmonic {
        amplitude: f64,
        order: u32,
        phase_deg: f64,
    },
    Cubic { poly: PiecewiseCubic },
}

impl AnisotropyProfile {
    pub fn eval(&self, a: f64) -> f64 {
        match self {
            AnisotropyProfile::None => 0.0,
            AnisotropyProfile::VonMises { peak, center_deg, concentration, zero_mean } => {
                let bump = (concentration * ((a - center_deg.to_radians()).cos() - 1.0)).exp();
                let mean = if *zero_mean {
                    (-concentration).exp() * bessel_i0(*concentration)
                } else {
                    0.0
                };
                peak * (bump - mean)
            }
            AnisotropyProfile::Harmonic { amplitude, order, phase_deg } => {
                amplitude * (*order as f64 * (a - phase_deg.to_radians())).cos()
            }
            AnisotropyProfile::Cubic { poly } => poly.eval(a),
        }
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let q = 0.25 * x * x;
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GravitySetting {
    /// Arm hangs along gravity.
    Stalactite,
    /// Gravity perpendicular to the straight arm.
    Beam,
    None,
}

impl GravitySetting {
    pub fn vector(&self) -> Vector3<f64> {
        match self {
            GravitySetting::Stalactite => stalactite_gravity(),
            GravitySetting::Beam => beam_gravity(),
            GravitySetting::None => Vector3::zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    SemiImplicitEuler,
    Rk4,
}

/// Parameters of the ground-truth arm as written in scenario files. Missing
/// fields take the values of the default two-segment arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantSpec {
    /// Nominal chamber gain per segment.
    pub chamber_gain_nm_per_pa: Vec<f64>,
    /// Per-segment multiplicative gain error of each chamber.
    pub chamber_gain_scale: Vec<[f64; 3]>,
    /// Per-segment deviation of each chamber's bending direction from nominal.
    pub chamber_angle_offset_deg: Vec<[f64; 3]>,
    pub stiffness_nm_per_rad: Vec<f64>,
    pub damping_nms_per_rad: Vec<f64>,
    /// Relative stiffness variation: the true stiffness is `K / (1 + profile(phi))`.
    pub stiffness_profile: Vec<AnisotropyProfile>,
    /// Rotation (radians) of the realised torque direction as a function of
    /// the commanded one.
    pub phase_profile: Vec<AnisotropyProfile>,
    /// Curvature stiffening per segment: the true stiffness is scaled by
    /// `1 + c theta^2`. Empty means none.
    #[serde(default)]
    pub stiffening_per_rad2: Vec<f64>,
    pub gravity: GravitySetting,
    #[serde(default)]
    pub payload_kg: f64,
    #[serde(default)]
    pub valve_time_constant_s: f64,
    #[serde(default = "default_p_max")]
    pub pressure_max_pa: f64,
    #[serde(default)]
    pub integrator: Integrator,
}

const STIFFENING_DEFAULT: f64 = 0.0;

impl Default for PlantSpec {
    fn default() -> Self {
        Self::default_two_segment()
    }
}

fn default_p_max() -> f64 {
    DEFAULT_P_MAX_PA
}

impl PlantSpec {
    /// Two-segment arm with the calibrated anisotropy.
    pub fn default_two_segment() -> Self {
        PlantSpec {
            chamber_gain_nm_per_pa: vec![1.2e-5, 8.0e-6],
            chamber_gain_scale: vec![[1.06, 0.93, 1.02], [0.95, 1.07, 0.98]],
            chamber_angle_offset_deg: vec![[2.0, -4.0, 3.0], [-3.0, 2.5, -1.5]],
            stiffness_nm_per_rad: vec![0.45, 0.18],
            damping_nms_per_rad: vec![0.022, 0.0047],
            stiffness_profile: vec![
                AnisotropyProfile::Harmonic { amplitude: 0.55, order: 1, phase_deg: 20.0 },
                AnisotropyProfile::Harmonic { amplitude: 0.336, order: 1, phase_deg: 50.0 },
            ],
            phase_profile: vec![
                AnisotropyProfile::VonMises {
                    peak: 28f64.to_radians(),
                    center_deg: 200.0,
                    concentration: 4.0,
                    zero_mean: true,
                },
                AnisotropyProfile::VonMises {
                    peak: 28f64.to_radians(),
                    center_deg: 80.0,
                    concentration: 4.0,
                    zero_mean: true,
                },
            ],
            stiffening_per_rad2: vec![STIFFENING_DEFAULT; 2],
            gravity: GravitySetting::Stalactite,
            payload_kg: 0.0,
            valve_time_constant_s: 0.0,
            pressure_max_pa: DEFAULT_P_MAX_PA,
            integrator: Integrator::SemiImplicitEuler,
        }
    }

    /// Same arm with ideal chambers, no anisotropy and no stiffening.
    pub fn isotropic(&self) -> Self {
        let n = self.stiffness_nm_per_rad.len();
        PlantSpec {
            chamber_gain_scale: vec![[1.0; 3]; n],
            chamber_angle_offset_deg: vec![[0.0; 3]; n],
            stiffness_profile: vec![AnisotropyProfile::None; n],
            phase_profile: vec![AnisotropyProfile::None; n],
            stiffening_per_rad2: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self, n_seg: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigError(format!("plant: {m}")));
        if self.chamber_gain_nm_per_pa.len() != n_seg
            || self.chamber_gain_scale.len() != n_seg
            || self.chamber_angle_offset_deg.len() != n_seg
            || self.stiffness_nm_per_rad.len() != n_seg
            || self.damping_nms_per_rad.len() != n_seg
            || self.stiffness_profile.len() != n_seg
            || self.phase_profile.len() != n_seg
            || !(self.stiffening_per_rad2.is_empty() || self.stiffening_per_rad2.len() == n_seg)
        {
            return bad("per-segment lists must match the number of segments");
        }
        if self.chamber_gain_nm_per_pa.iter().any(|g| !(*g > 0.0))
            || self.chamber_gain_scale.iter().flatten().any(|s| !(*s > 0.0))
        {
            return bad("chamber gains must be positive");
        }
        if self.chamber_angle_offset_deg.iter().flatten().any(|a| !(a.abs() <= 15.0)) {
            return bad("chamber directions must be within 15 degrees of nominal");
        }
        if self.stiffness_nm_per_rad.iter().any(|k| !(*k > 0.0)) {
            return bad("stiffness must be positive");
        }
        if self.damping_nms_per_rad.iter().any(|d| !(*d >= 0.0)) {
            return bad("damping must be nonnegative");
        }
        if self.stiffening_per_rad2.iter().any(|c| !(*c >= 0.0)) {
            return bad("stiffening must be nonnegative");
        }
        if !(self.payload_kg >= 0.0) || !(self.valve_time_constant_s >= 0.0) || !(self.pressure_max_pa > 0.0) {
            return bad("payload, valve lag and pressure limit must be nonnegative");
        }
        Ok(())
    }
}

/// Ground-truth parameters in evaluated form.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantTruth {
    pub chamber_maps: Vec<Matrix2x3<f64>>,
    pub stiffness: Vec<f64>,
    pub damping: Vec<f64>,
    pub stiffness_profile: Vec<AnisotropyProfile>,
    pub phase_profile: Vec<AnisotropyProfile>,
    pub stiffening: Vec<f64>,
    pub gravity: Vector3<f64>,
    pub valve_time_constant_s: f64,
    pub pressure_max_pa: f64,
    pub integrator: Integrator,
}

impl PlantTruth {
    pub fn from_spec(spec: &PlantSpec) -> Self {
        let chamber_maps = spec
            .chamber_gain_scale
            .iter()
            .zip(&spec.chamber_angle_offset_deg)
            .zip(&spec.chamber_gain_nm_per_pa)
            .map(|((s, o), gain)| {
                let gains = [0, 1, 2].map(|k| gain * s[k]);
                let angles = [0, 1, 2].map(|k| NOMINAL_CHAMBER_ANGLES[k] + o[k].to_radians());
                chamber_matrix(gains, angles)
            })
            .collect();
        PlantTruth {
            chamber_maps,
            stiffness: spec.stiffness_nm_per_rad.clone(),
            damping: spec.damping_nms_per_rad.clone(),
            stiffness_profile: spec.stiffness_profile.clone(),
            phase_profile: spec.phase_profile.clone(),
            stiffening: (0..spec.stiffness_nm_per_rad.len())
                .map(|i| spec.stiffening_per_rad2.get(i).cloned().unwrap_or(0.0))
                .collect(),
            gravity: spec.gravity.vector(),
            valve_time_constant_s: spec.valve_time_constant_s,
            pressure_max_pa: spec.pressure_max_pa,
            integrator: spec.integrator,
        }
    }

    /// True magnitude factor `f*` of segment `i`, blended to 1 near straight.
    pub fn magnitude_factor(&self, i: usize, theta: f64, phi: f64) -> f64 {
        let f = (1.0 + self.stiffness_profile[i].eval(phi)).max(0.05);
        let w = ((theta - THETA_EPS) / THETA_EPS).clamp(0.0, 1.0);
        1.0 + w * (f - 1.0)
    }

    /// Generalized torque produced by chamber pressures.
    pub fn actuation_torque(&self, p: &DVector<f64>) -> DVector<f64> {
        let mut tau = pressure_to_torque(p, &self.chamber_maps);
        for i in 0..self.chamber_maps.len() {
            let v = Vector2::new(tau[2 * i], tau[2 * i + 1]);
            if v.norm() < TORQUE_FLOOR {
                continue;
            }
            let (_, psi) = to_polar(v.x, v.y);
            let r = rotation2(self.phase_profile[i].eval(psi)) * v;
            tau[2 * i] = r.x;
            tau[2 * i + 1] = r.y;
        }
        tau
    }

    pub fn elastic_torque(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(q.len());
        for i in 0..self.stiffness.len() {
            let (theta, phi) = to_polar(q[2 * i], q[2 * i + 1]);
            let k = self.stiffness[i] * (1.0 + self.stiffening[i] * theta * theta)
                / self.magnitude_factor(i, theta, phi);
            out[2 * i] = k * q[2 * i];
            out[2 * i + 1] = k * q[2 * i + 1];
        }
        out
    }

    pub fn damping_torque(&self, qd: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(qd.len(), |r, _| self.damping[r / 2] * qd[r])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
    pub t: f64,
}

/// Released payload flying under gravity alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Projectile {
    pub release_time_s: f64,
    pub mass_kg: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gravity: Vector3<f64>,
}

impl Projectile {
    pub fn position_at(&self, t: f64) -> Vector3<f64> {
        let s = t - self.release_time_s;
        self.position + self.velocity * s + self.gravity * (0.5 * s * s)
    }

    /// Time after release at which the projectile has dropped `drop_m` below
    /// its release point along gravity.
    pub fn time_to_drop(&self, drop_m: f64) -> f64 {
        let g = self.gravity.norm();
        let down = self.gravity / g;
        let v = self.velocity.dot(&down);
        (-v + (v * v + 2.0 * g * drop_m).sqrt()) / g
    }

    /// Horizontal distance covered before dropping `drop_m`.
    pub fn range(&self, drop_m: f64) -> f64 {
        let down = self.gravity.normalize();
        let t = self.time_to_drop(drop_m);
        let d = self.velocity * t;
        (d - down * d.dot(&down)).norm()
    }
}

/// Obstacle for the potential field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSphere {
    pub center_m: [f64; 3],
    /// Radius of the object.
    pub radius_m: f64,
    /// Radius beyond which the field is off.
    pub cutoff_m: f64,
}

impl ObstacleSphere {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center_m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_m > 0.0 && self.radius_m < self.cutoff_m) {
            return Err(Error::ConfigError("obstacle needs 0 < radius < cutoff".into()));
        }
        Ok(())
    }
}

pub struct Plant {
    pub truth: PlantTruth,
    pub geometry: ArmGeometry,
    model: AugmentedModel,
    pub state: PlantState,
    pub payload_kg: f64,
    /// Pressures acting on the arm after the valve lag.
    pub applied_pressure: DVector<f64>,
    pub projectiles: Vec<Projectile>,
    theta_max: f64,
}

impl Plant {
    pub fn new(geometry: &ArmGeometry, spec: &PlantSpec) -> Result<Self> {
        geometry.validate()?;
        spec.validate(geometry.n_segments())?;
        let n = geometry.n_q();
        Ok(Plant {
            truth: PlantTruth::from_spec(spec),
            geometry: geometry.clone(),
            model: AugmentedModel::with_payload(geometry, spec.payload_kg),
            state: PlantState {
                q: DVector::zeros(n),
                qd: DVector::zeros(n),
                t: 0.0,
            },
            payload_kg: spec.payload_kg,
            applied_pressure: DVector::zeros(3 * geometry.n_segments()),
            projectiles: Vec::new(),
            theta_max: geometry.theta_max_rad,
        })
    }

    pub fn n_q(&self) -> usize {
        self.geometry.n_q()
    }

    pub fn model(&self) -> &AugmentedModel {
        &self.model
    }

    pub fn set_state(&mut self, q: DVector<f64>, qd: DVector<f64>) {
        self.state.q = q;
        self.state.qd = qd;
    }

    /// Set chamber pressures immediately, bypassing the valve lag.
    pub fn set_applied_pressure(&mut self, p: &DVector<f64>) {
        self.applied_pressure = p.map(|v| v.clamp(0.0, self.truth.pressure_max_pa));
    }

    pub fn terms(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DynamicTerms {
        self.model.terms(q, qd, &self.truth.gravity)
    }

    /// Generalized acceleration for the given state and applied pressures.
    pub fn forward_dynamics(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        p: &DVector<f64>,
        f_ext: &Vector3<f64>,
    ) -> Result<DVector<f64>> {
        let t = self.terms(q, qd);
        let mut rhs = self.truth.actuation_torque(p) - &t.c - &t.g
            - self.truth.elastic_torque(q)
            - self.truth.damping_torque(qd);
        if f_ext.norm() > 0.0 {
            rhs += self.geometry.task_jacobian(q).transpose() * f_ext;
        }
        solve_spd(t.b, rhs)
    }

    /// Advance by `dt` with commanded pressures `p_cmd` held constant.
    pub fn step(&mut self, p_cmd: &DVector<f64>, f_ext: &Vector3<f64>, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt <= 1e-2) {
            return Err(Error::ConfigError(format!("plant step {dt} outside (0, 0.01]")));
        }
        let p_cmd = p_cmd.map(|v| v.clamp(0.0, self.truth.pressure_max_pa));
        if self.truth.valve_time_constant_s > 0.0 {
            let a = 1.0 - (-dt / self.truth.valve_time_constant_s).exp();
            self.applied_pressure += (&p_cmd - &self.applied_pressure) * a;
        } else {
            self.applied_pressure = p_cmd;
        }
        let p = self.applied_pressure.clone();
        let (q, qd) = (&self.state.q, &self.state.qd);
        let (q_new, qd_new) = match self.truth.integrator {
            Integrator::SemiImplicitEuler => {
                let qdd = self.forward_dynamics(q, qd, &p, f_ext)?;
                let qd_new = qd + qdd * dt;
                (q + &qd_new * dt, qd_new)
            }
            Integrator::Rk4 => {
                let f = |q: &DVector<f64>, qd: &DVector<f64>| self.forward_dynamics(q, qd, &p, f_ext);
                let a1 = f(q, qd)?;
                let (q2, v2) = (q + qd * (0.5 * dt), qd + &a1 * (0.5 * dt));
                let a2 = f(&q2, &v2)?;
                let (q3, v3) = (q + &v2 * (0.5 * dt), qd + &a2 * (0.5 * dt));
                let a3 = f(&q3, &v3)?;
                let (q4, v4) = (q + &v3 * dt, qd + &a3 * dt);
                let a4 = f(&q4, &v4)?;
                let q_new = q + (qd + &v2 * 2.0 + &v3 * 2.0 + &v4) * (dt / 6.0);
                let qd_new = qd + (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
                (q_new, qd_new)
            }
        };
        if q_new.iter().chain(qd_new.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite plant state".into()));
        }
        self.state.q = q_new;
        self.state.qd = qd_new;
        self.enforce_bend_limit();
        self.state.t += dt;
        Ok(())
    }

    fn enforce_bend_limit(&mut self) {
        for i in 0..self.geometry.n_segments() {
            let v = Vector2::new(self.state.q[2 * i], self.state.q[2 * i + 1]);
            let theta = v.norm();
            if theta > self.theta_max {
                let u = v / theta;
                let w = Vector2::new(self.state.qd[2 * i], self.state.qd[2 * i + 1]);
                let radial = w.dot(&u).max(0.0);
                let w = w - u * radial;
                self.state.q[2 * i] = u.x * self.theta_max;
                self.state.q[2 * i + 1] = u.y * self.theta_max;
                self.state.qd[2 * i] = w.x;
                self.state.qd[2 * i + 1] = w.y;
            }
        }
    }

    /// Instantaneous generalized impulse: `qd += B^-1 impulse`.
    pub fn apply_disturbance(&mut self, impulse: &DVector<f64>) -> Result<()> {
        let b = self.terms(&self.state.q, &DVector::zeros(self.n_q())).b;
        let dv = solve_spd(b, impulse.clone())?;
        self.state.qd += dv;
        Ok(())
    }

    pub fn tip_position(&self) -> Vector3<f64> {
        self.geometry.tip_position(&self.state.q)
    }

    pub fn tip_velocity(&self) -> Vector3<f64> {
        self.geometry.tip_velocity(&self.state.q, &self.state.qd)
    }

    /// Attach a payload at the tip.
    pub fn grasp(&mut self, mass_kg: f64) {
        self.payload_kg += mass_kg;
        self.model = AugmentedModel::with_payload(&self.geometry, self.payload_kg);
    }

    /// Detach the payload, returning its ballistic initial condition.
    pub fn release_payload(&mut self) -> Result<Projectile> {
        if self.payload_kg <= 0.0 {
            return Err(Error::NoPayload);
        }
        let proj = Projectile {
            release_time_s: self.state.t,
            mass_kg: self.payload_kg,
            position: self.tip_position(),
            velocity: self.tip_velocity(),
            gravity: self.truth.gravity,
        };
        self.payload_kg = 0.0;
        self.model = AugmentedModel::new(&self.geometry);
        self.projectiles.push(proj.clone());
        Ok(proj)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.model.kinetic_energy(&self.state.q, &self.state.qd)
    }

    pub fn gravity_energy(&self) -> f64 {
        self.model.potential_energy(&self.state.q, &self.truth.gravity)
    }

    /// `K (theta^2 / 2 + c theta^4 / 4) / f*` summed over segments.
    pub fn elastic_energy(&self) -> f64 {
        let q = &self.state.q;
        (0..self.geometry.n_segments())
            .map(|i| {
                let (theta, phi) = to_polar(q[2 * i], q[2 * i + 1]);
                let t2 = theta * theta;
                self.truth.stiffness[i] * (0.5 * t2 + 0.25 * self.truth.stiffening[i] * t2 * t2)
                    / self.truth.magnitude_factor(i, theta, phi)
            })
            .sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy() + self.gravity_energy() + self.elastic_energy()
    }

    /// Integrate with constant pressures until the arm is at rest or
    /// `max_time` has elapsed. Returns the final joint speed.
    pub fn settle(&mut self, p: &DVector<f64>, dt: f64, max_time: f64, speed_tol: f64) -> Result<f64> {
        let steps = (max_time / dt).ceil() as usize;
        let mut still = 0usize;
        for _ in 0..steps {
            self.step(p, &Vector3::zeros(), dt)?;
            if self.state.qd.amax() < 0.1 * speed_tol {
                still += 1;
                if still as f64 * dt > 0.1 {
                    break;
                }
            } else {
                still = 0;
            }
        }
        Ok(self.state.qd.amax())
    }
}

/// Solve `B x = rhs` for symmetric positive definite `B`.
pub fn solve_spd(b: nalgebra::DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    let chol = b
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("inertia matrix is not positive definite".into()))?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min_pivot * min_pivot < 1e-12 {
        return Err(Error::NumericalFailure(format!(
            "inertia matrix nearly singular (pivot {min_pivot:e})"
        )));
    }
    Ok(chol.solve(&rhs))
}

/// Motion-capture style measurement model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub noise_std_rad: f64,
    pub rate_hz: f64,
    pub filter_time_constant_s: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            noise_std_rad: 1e-3,
            rate_hz: 100.0,
            filter_time_constant_s: 0.02,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) || !(self.noise_std_rad >= 0.0) || !(self.filter_time_constant_s >= 0.0) {
            return Err(Error::ConfigError("sensor: rate > 0, noise >= 0, filter >= 0".into()));
        }
        Ok(())
    }
}

/// Stateful sensor: noisy configuration plus a low-pass filtered finite
/// difference for the rate.
pub struct Sensor {
    pub model: SensorModel,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    last: Option<DVector<f64>>,
    rate: Option<DVector<f64>>,
}

impl Sensor {
    pub fn new(model: SensorModel, seed: u64) -> Self {
        let noise = (model.noise_std_rad > 0.0).then(|| Normal::new(0.0, model.noise_std_rad).unwrap());
        Sensor {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            last: None,
            rate: None,
        }
    }

    pub fn period(&self) -> f64 {
        1.0 / self.model.rate_hz
    }

    /// Take one sample; must be called once per sensor period.
    pub fn sense(&mut self, q: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let q_meas = match &self.noise {
            Some(n) => q.map(|v| v + n.sample(&mut self.rng)),
            None => q.clone(),
        };
        let period = self.period();
        let alpha = period / (self.model.filter_time_constant_s + period);
        let rate = match (&self.last, &self.rate) {
            (Some(last), Some(prev)) => {
                let raw = (&q_meas - last) / period;
                prev + (raw - prev) * alpha
            }
            _ => DVector::zeros(q.len()),
        };
        self.last = Some(q_meas.clone());
        self.rate = Some(rate.clone());
        (q_meas, rate)
    }

    /// Start the filter from a known state (e.g. after a preroll).
    pub fn reset(&mut self, q: &DVector<f64>, qd: &DVector<f64>) {
        self.last = Some(q.clone());
        self.rate = Some(qd.clone());
    }
}
