//! Stiffness, damping and actuation maps with the azimuth-dependent
//! magnitude and phase corrections, plus allocation of three chamber
//! pressures per segment.

use nalgebra::{DVector, Matrix2, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::kinematics::{to_polar, ArmGeometry, THETA_EPS};
use crate::polynomial::PiecewiseCubic;
use crate::{Error, Result};

/// 600 mbar.
pub const DEFAULT_P_MAX_PA: f64 = 60_000.0;

/// Relative torque error above which an allocation is reported as saturated.
pub const SATURATION_TOLERANCE: f64 = 0.05;

/// Below this torque magnitude the request has no usable direction.
pub const TORQUE_FLOOR: f64 = 1e-12;

/// Bending directions of the three chambers of an ideal segment.
pub const NOMINAL_CHAMBER_ANGLES: [f64; 3] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

/// Chamber map built from per-chamber gains and bending directions.
pub fn chamber_matrix(gains: [f64; 3], angles: [f64; 3]) -> Matrix2x3<f64> {
    Matrix2x3::from_fn(|r, c| gains[c] * if r == 0 { angles[c].cos() } else { angles[c].sin() })
}

pub fn rotation2(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Calibrated (or estimated) model of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActuationElasticityModel {
    /// Bending stiffness per segment, N m / rad, used on both axes.
    pub stiffness_nm_per_rad: Vec<f64>,
    /// Damping per segment, N m s / rad.
    pub damping_nms_per_rad: Vec<f64>,
    /// Chamber maps, row-major 2 x 3, N m / Pa.
    pub chamber_maps: Vec<[[f64; 3]; 2]>,
    pub magnitude_polys: Vec<PiecewiseCubic>,
    pub phase_polys: Vec<PiecewiseCubic>,
    pub magnitude_clamp: (f64, f64),
    pub pressure_max_pa: f64,
}

impl ActuationElasticityModel {
    /// Model with ideal chamber layout and no corrections.
    pub fn uniform(n_seg: usize, stiffness: f64, damping: f64, chamber_gain: f64) -> Self {
        let a = chamber_matrix([chamber_gain; 3], NOMINAL_CHAMBER_ANGLES);
        ActuationElasticityModel {
            stiffness_nm_per_rad: vec![stiffness; n_seg],
            damping_nms_per_rad: vec![damping; n_seg],
            chamber_maps: vec![matrix_to_rows(&a); n_seg],
            magnitude_polys: vec![PiecewiseCubic::constant(1.0); n_seg],
            phase_polys: vec![PiecewiseCubic::constant(0.0); n_seg],
            magnitude_clamp: (0.5, 2.0),
            pressure_max_pa: DEFAULT_P_MAX_PA,
        }
    }

    /// Estimate from geometry: gain = chamber area x lever arm.
    pub fn analytic_estimate(geometry: &ArmGeometry, stiffness: &[f64], damping: &[f64]) -> Self {
        let n = geometry.n_segments();
        let mut m = Self::uniform(n, 0.0, 0.0, 0.0);
        for i in 0..n {
            let s = &geometry.segments[i];
            let gain = s.chamber_area_m2 * s.chamber_lever_m;
            m.chamber_maps[i] = matrix_to_rows(&chamber_matrix([gain; 3], NOMINAL_CHAMBER_ANGLES));
            m.stiffness_nm_per_rad[i] = stiffness[i.min(stiffness.len() - 1)];
            m.damping_nms_per_rad[i] = damping[i.min(damping.len() - 1)];
        }
        m
    }

    pub fn n_segments(&self) -> usize {
        self.chamber_maps.len()
    }

    pub fn chamber_map(&self, seg: usize) -> Matrix2x3<f64> {
        rows_to_matrix(&self.chamber_maps[seg])
    }

    pub fn set_chamber_map(&mut self, seg: usize, a: &Matrix2x3<f64>) {
        self.chamber_maps[seg] = matrix_to_rows(a);
    }

    /// Same model with the magnitude and phase corrections switched off.
    pub fn without_corrections(&self) -> Self {
        let n = self.n_segments();
        ActuationElasticityModel {
            magnitude_polys: vec![PiecewiseCubic::constant(1.0); n],
            phase_polys: vec![PiecewiseCubic::constant(0.0); n],
            ..self.clone()
        }
    }

    /// Mean chamber gain of one segment, N m / Pa.
    pub fn segment_chamber_gain(&self, seg: usize) -> f64 {
        let a = self.chamber_map(seg);
        (0..3).map(|c| a.column(c).norm()).sum::<f64>() / 3.0
    }

    pub fn validate(&self, n_seg: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigError(m.to_string()));
        if self.chamber_maps.len() != n_seg
            || self.stiffness_nm_per_rad.len() != n_seg
            || self.damping_nms_per_rad.len() != n_seg
            || self.magnitude_polys.len() != n_seg
            || self.phase_polys.len() != n_seg
        {
            return bad("model has the wrong number of segments");
        }
        if self.stiffness_nm_per_rad.iter().any(|k| !(*k > 0.0)) {
            return bad("stiffness must be positive");
        }
        if self.damping_nms_per_rad.iter().any(|d| !(*d >= 0.0)) {
            return bad("damping must be nonnegative");
        }
        let (lo, hi) = self.magnitude_clamp;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return bad("magnitude clamp must bracket 1");
        }
        if !(self.pressure_max_pa > 0.0) {
            return bad("pressure limit must be positive");
        }
        for i in 0..n_seg {
            let a = self.chamber_map(i);
            let s = a.svd(false, false).singular_values;
            if !(s.min() > 1e-9 * s.max()) {
                return Err(Error::ConfigError(format!("chamber map {i} is not rank 2")));
            }
        }
        Ok(())
    }

    /// Magnitude factor `f` of segment `seg` at bend `(theta, phi)`, clamped, and
    /// blended to 1 over `[THETA_EPS, 2 THETA_EPS]`.
    pub fn magnitude_factor(&self, seg: usize, theta: f64, phi: f64) -> f64 {
        let (lo, hi) = self.magnitude_clamp;
        let f = self.magnitude_polys[seg].eval(phi).clamp(lo, hi);
        let w = ((theta - THETA_EPS) / THETA_EPS).clamp(0.0, 1.0);
        1.0 + w * (f - 1.0)
    }

    /// `(1/f(phi_i)) K_i q_i` per segment.
    pub fn elastic_torque(&self, q: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(q.len());
        for i in 0..self.n_segments() {
            let (theta, phi) = to_polar(q[2 * i], q[2 * i + 1]);
            let k = self.stiffness_nm_per_rad[i] / self.magnitude_factor(i, theta, phi);
            out[2 * i] = k * q[2 * i];
            out[2 * i + 1] = k * q[2 * i + 1];
        }
        out
    }

    pub fn damping_torque(&self, qd: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(qd.len(), |r, _| self.damping_nms_per_rad[r / 2] * qd[r])
    }

    /// Rotate a per-segment torque request so that the realised bending plane
    /// matches the requested one. The rotation angle is `g` evaluated at the
    /// request's own azimuth; the magnitude is untouched.
    pub fn phase_adjust(&self, seg: usize, v: &Vector2<f64>) -> Vector2<f64> {
        let norm = v.norm();
        if norm < TORQUE_FLOOR {
            return *v;
        }
        let (_, phi) = to_polar(v.x, v.y);
        rotation2(self.phase_polys[seg].eval(phi)) * v
    }

    pub fn phase_adjust_all(&self, tau: &DVector<f64>) -> DVector<f64> {
        let mut out = tau.clone();
        for i in 0..self.n_segments() {
            let v = self.phase_adjust(i, &Vector2::new(tau[2 * i], tau[2 * i + 1]));
            out[2 * i] = v.x;
            out[2 * i + 1] = v.y;
        }
        out
    }

    /// Allocate chamber pressures for every segment.
    pub fn allocate(&self, tau: &DVector<f64>) -> ArmAllocation {
        let n = self.n_segments();
        let mut p = DVector::zeros(3 * n);
        let mut achieved = DVector::zeros(2 * n);
        let mut saturated = vec![false; n];
        for i in 0..n {
            let a = allocate_pressures(
                &Vector2::new(tau[2 * i], tau[2 * i + 1]),
                &self.chamber_map(i),
                self.pressure_max_pa,
            );
            p.fixed_rows_mut::<3>(3 * i).copy_from(&a.pressures);
            achieved.fixed_rows_mut::<2>(2 * i).copy_from(&a.achieved);
            saturated[i] = a.saturated;
        }
        ArmAllocation { pressures: p, achieved, saturated }
    }

    /// `A p` per segment (no phase adjustment).
    pub fn pressure_to_torque(&self, p: &DVector<f64>) -> DVector<f64> {
        pressure_to_torque(p, &self.chamber_maps.iter().map(rows_to_matrix).collect::<Vec<_>>())
    }
}

pub fn pressure_to_torque(p: &DVector<f64>, maps: &[Matrix2x3<f64>]) -> DVector<f64> {
    let mut out = DVector::zeros(2 * maps.len());
    for (i, a) in maps.iter().enumerate() {
        let t = a * p.fixed_rows::<3>(3 * i);
        out.fixed_rows_mut::<2>(2 * i).copy_from(&t);
    }
    out
}

pub fn matrix_to_rows(a: &Matrix2x3<f64>) -> [[f64; 3]; 2] {
    [[a[(0, 0)], a[(0, 1)], a[(0, 2)]], [a[(1, 0)], a[(1, 1)], a[(1, 2)]]]
}

pub fn rows_to_matrix(r: &[[f64; 3]; 2]) -> Matrix2x3<f64> {
    Matrix2x3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub pressures: Vector3<f64>,
    pub achieved: Vector2<f64>,
    /// Clamping moved the achieved torque by more than 5 % of the request.
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmAllocation {
    pub pressures: DVector<f64>,
    pub achieved: DVector<f64>,
    pub saturated: Vec<bool>,
}

impl ArmAllocation {
    pub fn any_saturated(&self) -> bool {
        self.saturated.iter().any(|s| *s)
    }
}

/// Null direction of a 2 x 3 chamber map, oriented to have positive sum.
pub fn null_direction(a: &Matrix2x3<f64>) -> Vector3<f64> {
    let r0 = Vector3::new(a[(0, 0)], a[(0, 1)], a[(0, 2)]);
    let r1 = Vector3::new(a[(1, 0)], a[(1, 1)], a[(1, 2)]);
    let n = r0.cross(&r1).normalize();
    if n.sum() < 0.0 {
        -n
    } else {
        n
    }
}

/// Minimum-norm pressures, shifted along the null direction until
/// nonnegative, then clamped to `[0, p_max]`.
pub fn allocate_pressures(tau: &Vector2<f64>, a: &Matrix2x3<f64>, p_max: f64) -> Allocation {
    let aat = a * a.transpose();
    let p0 = match aat.try_inverse() {
        Some(inv) => a.transpose() * (inv * tau),
        None => Vector3::zeros(),
    };
    let n = null_direction(a);
    let mut shift: f64 = 0.0;
    let mut feasible = true;
    for k in 0..3 {
        if p0[k] < 0.0 {
            if n[k] > 1e-12 {
                shift = shift.max(-p0[k] / n[k]);
            } else {
                feasible = false;
            }
        }
    }
    let mut p = if feasible { p0 + n * shift } else { p0 };
    for k in 0..3 {
        p[k] = p[k].clamp(0.0, p_max);
    }
    let achieved = a * p;
    let err = (achieved - tau).norm();
    Allocation {
        pressures: p,
        achieved,
        saturated: err > SATURATION_TOLERANCE * tau.norm().max(TORQUE_FLOOR),
    }
}
