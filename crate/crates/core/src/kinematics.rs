//! Piecewise-constant-curvature kinematics.
//!
//! Each segment is described by its curvature coordinates `(theta_x, theta_y)`,
//! i.e. `theta * (cos phi, sin phi)` where `theta` is the total bend angle and
//! `phi` the azimuth of the bending plane. The base frame has gravity along
//! `-z` and the straight arm hangs along `-z`.
//!
//! The segment map is written in a form that is analytic in the curvature
//! coordinates:
//!
//! ```text
//! R = I + b(u) W + a(u) W^2,   W = [(theta_y, -theta_x, 0)]x
//! p = L * (a(u) (theta_x, theta_y, 0) - b(u) e_z)
//! ```
//!
//! with `u = theta^2`, `a = (1 - cos theta) / theta^2` and `b = sin theta / theta`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Below this bend angle the arc coefficients switch to their Taylor expansion.
pub const THETA_EPS: f64 = 1e-4;

/// Geometry of one soft segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentGeometry {
    pub arc_length_m: f64,
    #[serde(default = "default_chambers")]
    pub chambers: usize,
    /// Distance of a chamber centroid from the segment axis.
    pub chamber_lever_m: f64,
    /// Internal surface area of one chamber, used for the analytic actuation estimate.
    pub chamber_area_m2: f64,
    pub segment_mass_kg: f64,
}

fn default_chambers() -> usize {
    3
}

/// Rigid connector piece mounted after a segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectorGeometry {
    pub length_m: f64,
    pub mass_kg: f64,
    pub diameter_m: f64,
}

/// Measured geometry of the whole arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    pub segments: Vec<SegmentGeometry>,
    /// One connector after each segment (zero length allowed).
    pub connectors: Vec<ConnectorGeometry>,
    /// Distance from the last connector to the controlled tip point (gripper).
    pub tip_offset_m: f64,
    /// Point mass at the tip (gripper).
    pub tip_mass_kg: f64,
    #[serde(default = "default_theta_max")]
    pub theta_max_rad: f64,
}

fn default_theta_max() -> f64 {
    PI
}

impl ArmGeometry {
    /// Two-segment arm with 0.27 m body length, 0.299 kg total mass including a
    /// 24 g gripper.
    pub fn default_two_segment() -> Self {
        let seg = SegmentGeometry {
            arc_length_m: 0.12,
            chambers: 3,
            chamber_lever_m: 0.0095,
            chamber_area_m2: 1.26e-3,
            segment_mass_kg: 0.12,
        };
        let distal = SegmentGeometry {
            chamber_area_m2: 8.4e-4,
            ..seg.clone()
        };
        ArmGeometry {
            segments: vec![seg, distal],
            connectors: vec![
                ConnectorGeometry {
                    length_m: 0.015,
                    mass_kg: 0.02,
                    diameter_m: 0.035,
                },
                ConnectorGeometry {
                    length_m: 0.015,
                    mass_kg: 0.015,
                    diameter_m: 0.035,
                },
            ],
            tip_offset_m: 0.04,
            tip_mass_kg: 0.024,
            theta_max_rad: PI,
        }
    }

    /// Single segment of the given length, no connectors, no tip offset.
    pub fn single_segment(length: f64, mass: f64) -> Self {
        ArmGeometry {
            segments: vec![SegmentGeometry {
                arc_length_m: length,
                chambers: 3,
                chamber_lever_m: 0.0095,
                chamber_area_m2: 8.4e-4,
                segment_mass_kg: mass,
            }],
            connectors: vec![ConnectorGeometry {
                length_m: 0.0,
                mass_kg: 0.0,
                diameter_m: 0.0,
            }],
            tip_offset_m: 0.0,
            tip_mass_kg: 0.0,
            theta_max_rad: PI,
        }
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn n_q(&self) -> usize {
        2 * self.segments.len()
    }

    /// Arm length along the backbone, including connectors and the tip offset.
    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.arc_length_m).sum::<f64>()
            + self.connectors.iter().map(|c| c.length_m).sum::<f64>()
            + self.tip_offset_m
    }

    pub fn total_mass(&self) -> f64 {
        self.segments.iter().map(|s| s.segment_mass_kg).sum::<f64>()
            + self.connectors.iter().map(|c| c.mass_kg).sum::<f64>()
            + self.tip_mass_kg
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error::ConfigError;
        if self.segments.is_empty() {
            return Err(ConfigError("arm has no segments".into()));
        }
        if self.connectors.len() != self.segments.len() {
            return Err(ConfigError(
                "exactly one connector entry is required per segment".into(),
            ));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.arc_length_m > 0.0) || !(s.segment_mass_kg > 0.0) || s.chambers != 3 {
                return Err(ConfigError(format!(
                    "segment {i}: arc length and mass must be positive and chambers = 3"
                )));
            }
        }
        for c in &self.connectors {
            if c.length_m < 0.0 || c.mass_kg < 0.0 || c.diameter_m < 0.0 {
                return Err(ConfigError("connector dimensions must be nonnegative".into()));
            }
        }
        if self.tip_offset_m < 0.0 || self.tip_mass_kg < 0.0 {
            return Err(ConfigError("tip offset and mass must be nonnegative".into()));
        }
        Ok(())
    }

    /// Frame at the end of each segment (before its connector), and the tip frame.
    pub fn frames(&self, q: &DVector<f64>) -> (Vec<Frame>, Frame) {
        let mut f = Frame::identity();
        let mut ends = Vec::with_capacity(self.n_segments());
        for (i, seg) in self.segments.iter().enumerate() {
            f = f.compose(&segment_transform(q[2 * i], q[2 * i + 1], seg.arc_length_m));
            ends.push(f);
            f = f.compose(&Frame::translation_z(-self.connectors[i].length_m));
        }
        let tip = f.compose(&Frame::translation_z(-self.tip_offset_m));
        (ends, tip)
    }

    pub fn tip_position(&self, q: &DVector<f64>) -> Vector3<f64> {
        self.frames(q).1.translation
    }

    /// Analytic task Jacobian `d x_tip / d q` (3 x 2N).
    pub fn task_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_segments();
        let mut jac = DMatrix::zeros(3, 2 * n);
        let (ends, tip) = self.frames(q);
        let x = tip.translation;
        let mut base = Frame::identity();
        for i in 0..n {
            let seg = &self.segments[i];
            let partials = segment_partials(q[2 * i], q[2 * i + 1], seg.arc_length_m);
            let end = ends[i];
            // Tip expressed in the segment end frame.
            let r_local = end.rotation.transpose() * (x - end.translation);
            for (k, (d_rot, d_pos)) in partials.iter().enumerate() {
                let col = base.rotation * (d_pos + d_rot * r_local);
                jac.fixed_view_mut::<3, 1>(0, 2 * i + k).copy_from(&col);
            }
            base = end.compose(&Frame::translation_z(-self.connectors[i].length_m));
        }
        jac
    }

    pub fn tip_velocity(&self, q: &DVector<f64>, qd: &DVector<f64>) -> Vector3<f64> {
        let v = self.task_jacobian(q) * qd;
        Vector3::new(v[0], v[1], v[2])
    }

    /// Configuration reaching `target`, by damped Gauss-Newton from `q0` with a
    /// small pull toward the straight arm in the redundant direction.
    pub fn inverse_tip(&self, target: &Vector3<f64>, q0: &DVector<f64>) -> crate::Result<DVector<f64>> {
        let mut q = q0.clone();
        let n = q.len();
        for it in 0..300 {
            let e = target - self.tip_position(&q);
            if e.norm() < 1e-12 {
                return Ok(q);
            }
            let pull = if it < 150 { 0.1 } else { 0.0 };
            let j = self.task_jacobian(&q);
            let jjt = &j * j.transpose() + DMatrix::identity(3, 3) * 1e-8;
            let jp = j.transpose() * jjt.try_inverse().unwrap_or_else(|| DMatrix::zeros(3, 3));
            let null = DMatrix::identity(n, n) - &jp * &j;
            let e = DVector::from_column_slice(e.as_slice());
            let step = &jp * e - null * &q * pull;
            let scale = (0.3 / step.amax()).min(1.0);
            q += step * scale;
        }
        let e = (target - self.tip_position(&q)).norm();
        if e < 1e-9 {
            Ok(q)
        } else {
            Err(crate::Error::ConfigError(format!(
                "target {:?} is out of reach (residual {e:.3e} m)",
                target.as_slice()
            )))
        }
    }

    /// `dJ/dt` from central differences of the analytic Jacobian, one
    /// coordinate at a time (exactly linear in `qd`).
    pub fn jacobian_rate(&self, q: &DVector<f64>, qd: &DVector<f64>) -> DMatrix<f64> {
        const H: f64 = 1e-6;
        let mut out = DMatrix::zeros(3, q.len());
        for i in 0..q.len() {
            if qd[i] == 0.0 {
                continue;
            }
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += H;
            qm[i] -= H;
            let dj = (self.task_jacobian(&qp) - self.task_jacobian(&qm)) / (2.0 * H);
            out += dj * qd[i];
        }
        out
    }
}

/// Rigid transform stored as rotation matrix plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation_z(z: f64) -> Self {
        Frame {
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, z),
        }
    }

    pub fn compose(&self, other: &Frame) -> Frame {
        Frame {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation * p
    }
}

/// Polar form `(theta, phi)` of a segment's curvature coordinates, with
/// `phi` in `[0, 2 pi)` and `phi = 0` for a (numerically) straight segment.
pub fn to_polar(theta_x: f64, theta_y: f64) -> (f64, f64) {
    let theta = theta_x.hypot(theta_y);
    if theta < THETA_EPS {
        return (theta, 0.0);
    }
    (theta, wrap_angle(theta_y.atan2(theta_x)))
}

pub fn from_polar(theta: f64, phi: f64) -> (f64, f64) {
    (theta * phi.cos(), theta * phi.sin())
}

/// Wrap to `[0, 2 pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Wrap to `(-pi, pi]`.
pub fn wrap_pi(a: f64) -> f64 {
    let w = wrap_angle(a + PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Arc coefficients `a = (1 - cos t)/t^2` and `b = sin t / t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcCoefficients {
    pub a: f64,
    pub b: f64,
}

pub fn arc_coefficients(theta: f64) -> ArcCoefficients {
    if theta.abs() < THETA_EPS {
        arc_coefficients_taylor(theta)
    } else {
        arc_coefficients_exact(theta)
    }
}

/// Closed form; `1 - cos t` is written as `2 sin^2(t/2)` to avoid cancellation.
pub fn arc_coefficients_exact(theta: f64) -> ArcCoefficients {
    let s = (0.5 * theta).sin();
    ArcCoefficients {
        a: 2.0 * s * s / (theta * theta),
        b: theta.sin() / theta,
    }
}

/// Fourth-order Taylor expansion around the straight configuration.
pub fn arc_coefficients_taylor(theta: f64) -> ArcCoefficients {
    let u = theta * theta;
    ArcCoefficients {
        a: 0.5 - u / 24.0 + u * u / 720.0,
        b: 1.0 - u / 6.0 + u * u / 120.0,
    }
}

const SERIES_TERMS: usize = 24;

/// Derivatives of `a` and `b` with respect to `u = theta^2`, summed as
/// power series (the closed forms cancel catastrophically near zero).
pub fn arc_coefficient_derivatives(u: f64) -> (f64, f64) {
    // a(u) = sum (-1)^n u^n / (2n+2)!,  b(u) = sum (-1)^n u^n / (2n+1)!
    let mut da = 0.0;
    let mut db = 0.0;
    let mut upow = 1.0; // u^(n-1)
    let mut fact_odd = 1.0; // (2n+1)!
    let mut fact_even = 2.0; // (2n+2)!
    for n in 1..SERIES_TERMS {
        let nf = n as f64;
        fact_odd *= (2.0 * nf) * (2.0 * nf + 1.0);
        fact_even *= (2.0 * nf + 1.0) * (2.0 * nf + 2.0);
        let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
        da += sign * nf * upow / fact_even;
        db += sign * nf * upow / fact_odd;
        upow *= u;
    }
    (da, db)
}

/// `b(u) = sin(sqrt u)/sqrt u` and its first two derivatives in `u`, by power series.
pub fn sinc_series(u: f64) -> (f64, f64, f64) {
    let mut b = 1.0;
    let mut db = 0.0;
    let mut ddb = 0.0;
    let mut fact = 1.0;
    for n in 1..SERIES_TERMS {
        let nf = n as f64;
        fact *= (2.0 * nf) * (2.0 * nf + 1.0);
        let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
        let c = sign / fact;
        b += c * u.powi(n as i32);
        db += c * nf * u.powi(n as i32 - 1);
        if n >= 2 {
            ddb += c * nf * (nf - 1.0) * u.powi(n as i32 - 2);
        }
    }
    (b, db, ddb)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Constant-curvature arc map of one segment.
pub fn segment_transform(theta_x: f64, theta_y: f64, length: f64) -> Frame {
    let theta = theta_x.hypot(theta_y);
    let c = arc_coefficients(theta);
    let w = skew(&Vector3::new(theta_y, -theta_x, 0.0));
    Frame {
        rotation: Matrix3::identity() + w * c.b + w * w * c.a,
        translation: Vector3::new(c.a * theta_x, c.a * theta_y, -c.b) * length,
    }
}

/// Partial derivatives `(dR, dp)` of the segment map with respect to
/// `theta_x` and `theta_y`.
pub fn segment_partials(
    theta_x: f64,
    theta_y: f64,
    length: f64,
) -> [(Matrix3<f64>, Vector3<f64>); 2] {
    let u = theta_x * theta_x + theta_y * theta_y;
    let c = arc_coefficients(u.sqrt());
    let (da, db) = arc_coefficient_derivatives(u);
    let w = skew(&Vector3::new(theta_y, -theta_x, 0.0));
    let w2 = w * w;
    let dw = [
        skew(&Vector3::new(0.0, -1.0, 0.0)),
        skew(&Vector3::new(1.0, 0.0, 0.0)),
    ];
    let comps = [theta_x, theta_y];
    let mut out = [(Matrix3::zeros(), Vector3::zeros()); 2];
    for k in 0..2 {
        let du = 2.0 * comps[k];
        let d_rot = w * (db * du) + dw[k] * c.b + w2 * (da * du) + (dw[k] * w + w * dw[k]) * c.a;
        let unit = if k == 0 {
            Vector3::new(1.0, 0.0, 0.0)
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        };
        let d_pos = (Vector3::new(theta_x, theta_y, 0.0) * (da * du) + unit * c.a
            - Vector3::new(0.0, 0.0, db * du))
            * length;
        out[k] = (d_rot, d_pos);
    }
    out
}
