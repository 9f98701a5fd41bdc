//! Task-space controllers: the operational-space law with obstacle
//! potential field and nullspace straightening, and the incremental
//! Jacobian (quasistatic) law it is compared against.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::actuation::ActuationElasticityModel;
use crate::dynamics::AugmentedModel;
use crate::plant::{solve_spd, ObstacleSphere};
use crate::{Error, Result};

pub const DEFAULT_PINV_DAMPING: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGains {
    /// 1/s^2
    pub k_p: f64,
    /// 1/s
    pub k_d: f64,
    /// m/s^2
    pub accel_saturation: f64,
    /// Nullspace straightening gain (alpha).
    pub null_stiffness: f64,
    /// Nullspace damping gain (beta).
    pub null_damping: f64,
}

impl Default for TaskGains {
    fn default() -> Self {
        TaskGains {
            k_p: 400.0,
            k_d: 40.0,
            accel_saturation: 50.0,
            null_stiffness: 0.02,
            null_damping: 0.002,
        }
    }
}

impl TaskGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_p > 0.0 && self.k_d > 0.0 && self.accel_saturation > 0.0)
            || !(self.null_stiffness >= 0.0 && self.null_damping >= 0.0)
        {
            return Err(Error::ConfigError("gains: k_p, k_d, saturation > 0; alpha, beta >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialParams {
    pub k_pot: f64,
    /// m/s^2
    pub saturation: f64,
}

impl Default for PotentialParams {
    fn default() -> Self {
        PotentialParams { k_pot: 0.05, saturation: 20.0 }
    }
}

impl PotentialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_pot >= 0.0 && self.saturation > 0.0) {
            return Err(Error::ConfigError("potential field: k_pot >= 0, saturation > 0".into()));
        }
        Ok(())
    }
}

pub fn saturate_norm(v: &Vector3<f64>, limit: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > limit {
        v * (limit / n)
    } else {
        *v
    }
}

/// Reference tip acceleration of the PD law, norm-saturated.
pub fn pd_reference(
    x: &Vector3<f64>,
    xd: &Vector3<f64>,
    x_des: &Vector3<f64>,
    xd_des: &Vector3<f64>,
    xdd_des: &Vector3<f64>,
    xdd_pot: &Vector3<f64>,
    gains: &TaskGains,
) -> Vector3<f64> {
    let raw = (x_des - x) * gains.k_p + (xd_des - xd) * gains.k_d + xdd_des + xdd_pot;
    saturate_norm(&raw, gains.accel_saturation)
}

/// Repulsive acceleration `k_pot / (|rho| - r0) * rho / |rho|` inside each
/// obstacle's cutoff sphere, zero outside. The field does not vanish at the
/// cutoff; it jumps to zero there.
pub fn potential_acceleration(
    x: &Vector3<f64>,
    obstacles: &[ObstacleSphere],
    params: &PotentialParams,
) -> Vector3<f64> {
    let mut acc = Vector3::zeros();
    for ob in obstacles {
        let rho = x - ob.center();
        let d = rho.norm();
        if d >= ob.cutoff_m {
            continue;
        }
        let dir = if d > 0.0 { rho / d } else { Vector3::z() };
        if d <= ob.radius_m {
            acc += dir * params.saturation;
        } else {
            acc += dir * (params.k_pot / (d - ob.radius_m));
        }
    }
    saturate_norm(&acc, params.saturation)
}

/// `J^T (J J^T + lambda^2 I)^-1`
pub fn damped_pinv(j: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let m = j * j.transpose() + DMatrix::identity(j.nrows(), j.nrows()) * (lambda * lambda);
    let inv = m.try_inverse().unwrap_or_else(|| DMatrix::zeros(j.nrows(), j.nrows()));
    j.transpose() * inv
}

/// Inertia-weighted inverse `B^-1 J^T (J B^-1 J^T + lambda^2 I)^-1`.
pub fn dynamically_consistent_pinv(j: &DMatrix<f64>, b: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>> {
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("inertia matrix is not positive definite".into()))?;
    let binv_jt = chol.solve(&j.transpose());
    let m = j * &binv_jt + DMatrix::identity(j.nrows(), j.nrows()) * (lambda * lambda);
    let inv = m
        .try_inverse()
        .ok_or_else(|| Error::NumericalFailure("singular operational-space inertia".into()))?;
    Ok(binv_jt * inv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Projector {
    Damped,
    #[default]
    DynamicallyConsistent,
}

/// Everything the operational-space law computed on one tick.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub pressures: DVector<f64>,
    /// Generalized torque request before phase adjustment and allocation.
    pub tau_ref: DVector<f64>,
    pub saturated: Vec<bool>,
    pub nullspace_torque: DVector<f64>,
    /// `|J B^-1 N tau_null|`, zero up to rounding for the inertia-weighted projector.
    pub nullspace_accel_residual: f64,
}

#[derive(Clone, Debug)]
pub struct OperationalSpaceController {
    pub model: ActuationElasticityModel,
    pub dynamics: AugmentedModel,
    pub gravity: Vector3<f64>,
    pub gains: TaskGains,
    pub projector: Projector,
    pub pinv_damping: f64,
}

impl OperationalSpaceController {
    pub fn new(
        model: ActuationElasticityModel,
        dynamics: AugmentedModel,
        gravity: Vector3<f64>,
        gains: TaskGains,
    ) -> Self {
        OperationalSpaceController {
            model,
            dynamics,
            gravity,
            gains,
            projector: Projector::default(),
            pinv_damping: DEFAULT_PINV_DAMPING,
        }
    }

    /// Change the payload the controller's inertia and gravity model carries.
    pub fn set_payload(&mut self, kg: f64) {
        self.dynamics = AugmentedModel::with_payload(&self.dynamics.geometry, kg);
    }

    /// `B J+ (xdd_ref - Jdot qd) + g + c + K(phi) q + D qd + N tau_null + J^T f_supp`
    pub fn torque_request(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        xdd_ref: &Vector3<f64>,
        f_supp: &Vector3<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let geometry = &self.dynamics.geometry;
        let n = q.len();
        let terms = self.dynamics.terms(q, qd, &self.gravity);
        let j = geometry.task_jacobian(q);
        let jd = geometry.jacobian_rate(q, qd);
        let jp = match self.projector {
            Projector::Damped => damped_pinv(&j, self.pinv_damping),
            Projector::DynamicallyConsistent => dynamically_consistent_pinv(&j, &terms.b, self.pinv_damping)?,
        };
        let task = &terms.b * (&jp * (xdd_ref - &jd * qd));
        let null = DMatrix::identity(n, n) - j.transpose() * jp.transpose();
        let tau_null = -(q * self.gains.null_stiffness) - qd * self.gains.null_damping;
        let null_tau = &null * tau_null;
        let residual = (&j * solve_spd(terms.b.clone(), null_tau.clone())?).norm();
        let tau = task
            + &terms.g
            + &terms.c
            + self.model.elastic_torque(q)
            + self.model.damping_torque(qd)
            + &null_tau
            + j.transpose() * f_supp;
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("non-finite torque request".into()));
        }
        Ok((tau, null_tau, residual))
    }

    pub fn command(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        xdd_ref: &Vector3<f64>,
        f_supp: &Vector3<f64>,
    ) -> Result<ControlOutput> {
        let (tau, null_tau, residual) = self.torque_request(q, qd, xdd_ref, f_supp)?;
        let alloc = self.model.allocate(&self.model.phase_adjust_all(&tau));
        Ok(ControlOutput {
            pressures: alloc.pressures,
            tau_ref: tau,
            saturated: alloc.saturated,
            nullspace_torque: null_tau,
            nullspace_accel_residual: residual,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasistaticGains {
    /// Integration rate, 1/s. Scaled per segment by the model stiffness.
    pub alpha_per_s: f64,
    /// Componentwise limit on the tip error, m.
    pub error_saturation_m: f64,
    /// Fraction of the configuration pulled back toward straight through
    /// the Jacobian nullspace on each step. Zero disables it.
    #[serde(default)]
    pub null_pull: f64,
}

impl Default for QuasistaticGains {
    fn default() -> Self {
        QuasistaticGains { alpha_per_s: 5.0, error_saturation_m: 0.05, null_pull: 1.0 }
    }
}

impl QuasistaticGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_per_s > 0.0 && self.error_saturation_m > 0.0 && self.null_pull >= 0.0) {
            return Err(Error::ConfigError(
                "quasistatic: alpha > 0, error saturation > 0 and null pull >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `p + gain .* J+ sat(x_des - x)`, with the error clipped componentwise.
pub fn quasistatic_step(
    p_prev: &DVector<f64>,
    x: &Vector3<f64>,
    x_des: &Vector3<f64>,
    jacobian: &DMatrix<f64>,
    gain: &DVector<f64>,
    error_saturation: f64,
    pinv_damping: f64,
) -> DVector<f64> {
    let e = (x_des - x).map(|v| v.clamp(-error_saturation, error_saturation));
    let dq = damped_pinv(jacobian, pinv_damping) * e;
    p_prev + gain.component_mul(&dq)
}

/// Incremental controller. The per-segment 2-vector pressure intermediate is
/// kept in torque units and integrated; allocation maps it to chambers.
#[derive(Clone, Debug)]
pub struct QuasistaticController {
    pub model: ActuationElasticityModel,
    pub dynamics: AugmentedModel,
    pub gains: QuasistaticGains,
    pub pinv_damping: f64,
    pub p_xy: DVector<f64>,
}

impl QuasistaticController {
    pub fn new(
        model: ActuationElasticityModel,
        dynamics: AugmentedModel,
        gains: QuasistaticGains,
        p_xy: DVector<f64>,
    ) -> Self {
        QuasistaticController { model, dynamics, gains, pinv_damping: DEFAULT_PINV_DAMPING, p_xy }
    }

    pub fn update(&mut self, q: &DVector<f64>, x_des: &Vector3<f64>, dt: f64) -> ControlOutput {
        let geometry = &self.dynamics.geometry;
        let x = geometry.tip_position(q);
        let j = geometry.task_jacobian(q);
        let gain = DVector::from_fn(q.len(), |r, _| {
            self.gains.alpha_per_s * dt * self.model.stiffness_nm_per_rad[r / 2]
        });
        let mut next = quasistatic_step(
            &self.p_xy,
            &x,
            x_des,
            &j,
            &gain,
            self.gains.error_saturation_m,
            self.pinv_damping,
        );
        if self.gains.null_pull > 0.0 {
            let n = DMatrix::identity(q.len(), q.len()) - damped_pinv(&j, self.pinv_damping) * &j;
            next -= gain.component_mul(&(n * q)) * self.gains.null_pull;
        }
        let alloc = self.model.allocate(&self.model.phase_adjust_all(&next));
        for (i, sat) in alloc.saturated.iter().enumerate() {
            if !sat {
                self.p_xy[2 * i] = next[2 * i];
                self.p_xy[2 * i + 1] = next[2 * i + 1];
            }
        }
        let n = q.len();
        ControlOutput {
            pressures: alloc.pressures,
            tau_ref: next,
            saturated: alloc.saturated,
            nullspace_torque: DVector::zeros(n),
            nullspace_accel_residual: 0.0,
        }
    }
}

/// Per-segment 2-vector view of a stacked vector.
pub fn segment_pair(v: &DVector<f64>, seg: usize) -> Vector2<f64> {
    Vector2::new(v[2 * seg], v[2 * seg + 1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::stalactite_gravity;
    use crate::kinematics::ArmGeometry;
    use approx::assert_relative_eq;

    fn obstacle() -> ObstacleSphere {
        ObstacleSphere { center_m: [0.0, 0.0, 0.0], radius_m: 0.03, cutoff_m: 0.08 }
    }

    #[test]
    fn pd_reference_is_zero_on_target() {
        let x = Vector3::new(0.1, 0.0, -0.2);
        let z = Vector3::zeros();
        assert_eq!(pd_reference(&x, &z, &x, &z, &z, &z, &TaskGains::default()), z);
    }

    #[test]
    fn pd_reference_linear_and_saturated() {
        let g = TaskGains::default();
        let z = Vector3::zeros();
        let e = Vector3::new(0.01, -0.02, 0.005);
        let out = pd_reference(&z, &z, &e, &z, &z, &z, &g);
        assert_relative_eq!(out, e * g.k_p, epsilon = 1e-15);
        let big = Vector3::new(1.0, 2.0, -2.0).normalize() * (2.0 * g.accel_saturation / g.k_p);
        let out = pd_reference(&z, &z, &big, &z, &z, &z, &g);
        assert_relative_eq!(out.norm(), g.accel_saturation, epsilon = 1e-12);
        assert_relative_eq!(out.normalize(), big.normalize(), epsilon = 1e-12);
    }

    #[test]
    fn potential_field_inverts() {
        let p = PotentialParams { k_pot: 0.05, saturation: 20.0 };
        let a = 3.0;
        let d = 0.03 + p.k_pot / a;
        let dir = Vector3::new(1.0, -1.0, 0.5).normalize();
        let acc = potential_acceleration(&(dir * d), &[obstacle()], &p);
        assert_relative_eq!(acc, dir * a, epsilon = 1e-12);
    }

    #[test]
    fn potential_field_cutoff_and_saturation() {
        let p = PotentialParams::default();
        let outside = Vector3::new(0.08, 0.0, 0.0);
        assert_eq!(potential_acceleration(&outside, &[obstacle()], &p), Vector3::zeros());
        let inside = Vector3::new(0.0799, 0.0, 0.0);
        let jump = potential_acceleration(&inside, &[obstacle()], &p).norm();
        assert!(jump > 0.5, "field just inside cutoff is {jump}");
        let near = Vector3::new(0.0, 0.030001, 0.0);
        assert_relative_eq!(potential_acceleration(&near, &[obstacle()], &p).norm(), p.saturation);
    }

    #[test]
    fn damped_pinv_is_right_inverse_for_full_rank() {
        let j = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, -1.0]);
        let jp = damped_pinv(&j, 0.0);
        assert_relative_eq!(&j * &jp, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    fn controller() -> OperationalSpaceController {
        let g = ArmGeometry::default_two_segment();
        let model = ActuationElasticityModel::analytic_estimate(&g, &[0.45, 0.18], &[0.02, 0.005]);
        OperationalSpaceController::new(model, AugmentedModel::new(&g), stalactite_gravity(), TaskGains::default())
    }

    #[test]
    fn static_balance_is_reproduced() {
        let mut c = controller();
        c.gains.null_stiffness = 0.0;
        c.gains.null_damping = 0.0;
        let q = DVector::from_vec(vec![0.2, -0.1, 0.3, 0.25]);
        let qd = DVector::zeros(4);
        let out = c.command(&q, &qd, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        let balance = c.dynamics.gravity_torque(&q, &c.gravity) + c.model.elastic_torque(&q);
        for seg in 0..2 {
            let a = c.model.chamber_map(seg);
            let p = out.pressures.fixed_rows::<3>(3 * seg).into_owned();
            let want = segment_pair(&balance, seg);
            assert!(((a * p) - want).norm() < 1e-8 * want.norm());
            // The allocation differs from the minimum-norm solution only along the null direction.
            let min_norm = a.svd(true, true).solve(&want, 1e-14).unwrap();
            let d = p - min_norm;
            let n = crate::actuation::null_direction(&a);
            assert!((d - n * n.dot(&d)).norm() < 1e-8 * p.norm());
        }
    }

    #[test]
    fn inertia_weighted_nullspace_does_not_move_the_tip() {
        let mut c = controller();
        c.projector = Projector::DynamicallyConsistent;
        c.gains.null_stiffness = 0.5;
        c.pinv_damping = 0.0;
        let q = DVector::from_vec(vec![0.3, 0.1, -0.4, 0.2]);
        let qd = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.05]);
        let (_, null_tau, residual) = c.torque_request(&q, &qd, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        assert!(null_tau.norm() > 1e-3);
        assert!(residual < 1e-9, "residual {residual}");
    }

    #[test]
    fn supplementary_force_adds_jacobian_transpose() {
        let c = controller();
        let q = DVector::from_vec(vec![0.2, 0.1, 0.3, -0.2]);
        let qd = DVector::zeros(4);
        let f = Vector3::new(0.0, 0.0, -1.0);
        let (a, _, _) = c.torque_request(&q, &qd, &Vector3::zeros(), &Vector3::zeros()).unwrap();
        let (b, _, _) = c.torque_request(&q, &qd, &Vector3::zeros(), &f).unwrap();
        let jt_f = c.dynamics.geometry.task_jacobian(&q).transpose() * f;
        assert_relative_eq!(b - a, jt_f, epsilon = 1e-14);
    }

    #[test]
    fn quasistatic_step_holds_on_target_and_moves_along_pinv() {
        let g = ArmGeometry::default_two_segment();
        let q = DVector::from_vec(vec![0.2, 0.1, 0.3, -0.2]);
        let j = g.task_jacobian(&q);
        let x = g.tip_position(&q);
        let p0 = DVector::from_vec(vec![0.01, 0.02, 0.03, 0.04]);
        let gain = DVector::from_element(4, 0.5);
        assert_eq!(quasistatic_step(&p0, &x, &x, &j, &gain, 0.05, 1e-3), p0);
        let target = x + Vector3::new(0.01, 0.0, 0.0);
        let p1 = quasistatic_step(&p0, &x, &target, &j, &gain, 0.05, 1e-3);
        let p2 = quasistatic_step(&p1, &x, &target, &j, &gain, 0.05, 1e-3);
        assert_relative_eq!(&p2 - &p1, &p1 - &p0, epsilon = 1e-15);
        let far = x + Vector3::new(1.0, 0.0, 0.0);
        let clipped = quasistatic_step(&p0, &x, &far, &j, &gain, 0.05, 1e-3);
        let five_cm = quasistatic_step(&p0, &x, &(x + Vector3::new(0.05, 0.0, 0.0)), &j, &gain, 0.05, 1e-3);
        assert_eq!(clipped, five_cm);
    }

    #[test]
    fn quasistatic_pressures_stay_in_range() {
        let g = ArmGeometry::default_two_segment();
        let model = ActuationElasticityModel::analytic_estimate(&g, &[0.45, 0.18], &[0.02, 0.005]);
        let mut c = QuasistaticController::new(model, AugmentedModel::new(&g), QuasistaticGains::default(), DVector::zeros(4));
        let q = DVector::from_vec(vec![0.2, 0.1, 0.3, -0.2]);
        for _ in 0..500 {
            let out = c.update(&q, &Vector3::new(0.5, 0.5, 0.0), 0.01);
            assert!(out.pressures.iter().all(|p| (0.0..=c.model.pressure_max_pa).contains(p)));
        }
    }
}
