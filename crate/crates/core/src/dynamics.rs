//! Dynamics in curvature coordinates through an equivalent rigid chain.
//!
//! Every constant-curvature segment is replaced by five joints
//! `[phi, theta/2, d, theta/2, -phi]` (rotation about z, rotation about -y,
//! slide along -z, rotation about -y, rotation about z) whose end pose equals
//! the arc's end pose. `d = 2 (L/theta) sin(theta/2)` is the chord. The chain
//! dynamics are pulled back with `J_m = d xi / d q`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::kinematics::{arc_coefficients, sinc_series, to_polar, ArmGeometry};
use crate::rigid::{cylinder_inertia, Body, Chain, Joint};

/// Segments bent less than this are handled by interpolation between
/// neighbouring bent configurations, where the azimuth is well defined.
pub const THETA_REG: f64 = 1e-4;

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Gravity pointing along the straight arm (the arm hangs).
pub fn stalactite_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -STANDARD_GRAVITY)
}

/// Gravity perpendicular to the straight arm.
pub fn beam_gravity() -> Vector3<f64> {
    Vector3::new(-STANDARD_GRAVITY, 0.0, 0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicTerms {
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub g: DVector<f64>,
}

impl DynamicTerms {
    fn zeros(n: usize) -> Self {
        DynamicTerms {
            b: DMatrix::zeros(n, n),
            c: DVector::zeros(n),
            g: DVector::zeros(n),
        }
    }

    fn axpy(&mut self, s: f64, other: &DynamicTerms) {
        self.b += &other.b * s;
        self.c += &other.c * s;
        self.g += &other.g * s;
    }
}

/// Joint values of the equivalent rigid chain.
pub fn augment_map(q: &DVector<f64>, geometry: &ArmGeometry) -> DVector<f64> {
    let n = geometry.n_segments();
    let mut xi = DVector::zeros(5 * n);
    for i in 0..n {
        let (theta, phi) = to_polar(q[2 * i], q[2 * i + 1]);
        let d = geometry.segments[i].arc_length_m * arc_coefficients(0.5 * theta).b;
        xi[5 * i] = phi;
        xi[5 * i + 1] = 0.5 * theta;
        xi[5 * i + 2] = d;
        xi[5 * i + 3] = 0.5 * theta;
        xi[5 * i + 4] = -phi;
    }
    xi
}

/// `d xi / d q`. The azimuth rows evaluate at `max(theta, THETA_REG)`.
pub fn mapping_jacobian(q: &DVector<f64>, geometry: &ArmGeometry) -> DMatrix<f64> {
    let n = geometry.n_segments();
    let mut jm = DMatrix::zeros(5 * n, 2 * n);
    for i in 0..n {
        let (tx, ty) = (q[2 * i], q[2 * i + 1]);
        let u = tx * tx + ty * ty;
        let theta = u.sqrt().max(THETA_REG);
        let l = geometry.segments[i].arc_length_m;
        let (_, db, _) = sinc_series(0.25 * u);
        let (r, c) = (5 * i, 2 * i);
        let ur = theta * theta;
        jm[(r, c)] = -ty / ur;
        jm[(r, c + 1)] = tx / ur;
        jm[(r + 4, c)] = ty / ur;
        jm[(r + 4, c + 1)] = -tx / ur;
        jm[(r + 1, c)] = tx / (2.0 * theta);
        jm[(r + 1, c + 1)] = ty / (2.0 * theta);
        jm[(r + 3, c)] = tx / (2.0 * theta);
        jm[(r + 3, c + 1)] = ty / (2.0 * theta);
        jm[(r + 2, c)] = 0.5 * l * db * tx;
        jm[(r + 2, c + 1)] = 0.5 * l * db * ty;
    }
    jm
}

/// Time derivative of [`mapping_jacobian`] along `qd`, differentiated analytically.
pub fn mapping_jacobian_rate(
    q: &DVector<f64>,
    qd: &DVector<f64>,
    geometry: &ArmGeometry,
) -> DMatrix<f64> {
    let n = geometry.n_segments();
    let mut out = DMatrix::zeros(5 * n, 2 * n);
    for i in 0..n {
        let (tx, ty) = (q[2 * i], q[2 * i + 1]);
        let (vx, vy) = (qd[2 * i], qd[2 * i + 1]);
        let u = tx * tx + ty * ty;
        let ud = 2.0 * (tx * vx + ty * vy);
        let l = geometry.segments[i].arc_length_m;
        let (_, db, ddb) = sinc_series(0.25 * u);
        let (r, c) = (5 * i, 2 * i);

        let (ur, urd) = if u.sqrt() >= THETA_REG {
            (u, ud)
        } else {
            (THETA_REG * THETA_REG, 0.0)
        };
        let phi_x = -vy / ur + ty * urd / (ur * ur);
        let phi_y = vx / ur - tx * urd / (ur * ur);
        out[(r, c)] = phi_x;
        out[(r, c + 1)] = phi_y;
        out[(r + 4, c)] = -phi_x;
        out[(r + 4, c + 1)] = -phi_y;

        let theta = ur.sqrt();
        let thetad = 0.5 * urd / theta;
        let hx = vx / (2.0 * theta) - tx * thetad / (2.0 * theta * theta);
        let hy = vy / (2.0 * theta) - ty * thetad / (2.0 * theta * theta);
        out[(r + 1, c)] = hx;
        out[(r + 1, c + 1)] = hy;
        out[(r + 3, c)] = hx;
        out[(r + 3, c + 1)] = hy;

        out[(r + 2, c)] = 0.5 * l * (0.25 * ddb * ud * tx + db * vx);
        out[(r + 2, c + 1)] = 0.5 * l * (0.25 * ddb * ud * ty + db * vy);
    }
    out
}

/// Equivalent rigid chain with the masses of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedModel {
    pub geometry: ArmGeometry,
    pub chain: Chain,
    /// Body carrying the gripper and any payload.
    pub tip_body: usize,
    pub payload_kg: f64,
}

impl AugmentedModel {
    pub fn new(geometry: &ArmGeometry) -> Self {
        Self::with_payload(geometry, 0.0)
    }

    pub fn with_payload(geometry: &ArmGeometry, payload_kg: f64) -> Self {
        let n = geometry.n_segments();
        let z = Vector3::z();
        let neg_y = -Vector3::y();
        let neg_z = -Vector3::z();
        let mut bodies = Vec::new();
        let mut prev: Option<usize> = None;
        let mut prev_offset = Vector3::zeros();
        for i in 0..n {
            let seg = &geometry.segments[i];
            let con = &geometry.connectors[i];
            let k = 5 * i;
            bodies.push(Body::massless(
                "azimuth",
                prev,
                prev_offset,
                Joint::Revolute { axis: z, coord: k, ratio: 1.0 },
            ));
            let j1 = bodies.len() - 1;
            bodies.push(Body::massless(
                "bend_in",
                Some(j1),
                Vector3::zeros(),
                Joint::Revolute { axis: neg_y, coord: k + 1, ratio: 1.0 },
            ));
            let j2 = bodies.len() - 1;
            let mut mid = Body::massless(
                "segment_mass",
                Some(j2),
                Vector3::zeros(),
                Joint::Prismatic { axis: neg_z, coord: k + 2, ratio: 0.5 },
            );
            mid.mass = seg.segment_mass_kg;
            bodies.push(mid);
            bodies.push(Body::massless(
                "chord",
                Some(j2),
                Vector3::zeros(),
                Joint::Prismatic { axis: neg_z, coord: k + 2, ratio: 1.0 },
            ));
            let j3 = bodies.len() - 1;
            bodies.push(Body::massless(
                "bend_out",
                Some(j3),
                Vector3::zeros(),
                Joint::Revolute { axis: neg_y, coord: k + 3, ratio: 1.0 },
            ));
            let j4 = bodies.len() - 1;
            let mut j5 = Body::massless(
                "connector",
                Some(j4),
                Vector3::zeros(),
                Joint::Revolute { axis: z, coord: k + 4, ratio: 1.0 },
            );
            j5.mass = con.mass_kg;
            j5.com = Vector3::new(0.0, 0.0, -0.5 * con.length_m);
            j5.inertia = cylinder_inertia(con.mass_kg, con.diameter_m, con.length_m);
            bodies.push(j5);
            prev = Some(bodies.len() - 1);
            prev_offset = Vector3::new(0.0, 0.0, -con.length_m);
        }
        let mut tip = Body::massless(
            "tip",
            prev,
            prev_offset + Vector3::new(0.0, 0.0, -geometry.tip_offset_m),
            Joint::Fixed,
        );
        tip.mass = geometry.tip_mass_kg + payload_kg;
        tip.inertia = Matrix3::zeros();
        bodies.push(tip);
        let tip_body = bodies.len() - 1;
        AugmentedModel {
            geometry: geometry.clone(),
            chain: Chain::new(bodies, 5 * n),
            tip_body,
            payload_kg,
        }
    }

    pub fn n_q(&self) -> usize {
        self.geometry.n_q()
    }

    /// Joint-space inertia of the rigid chain.
    pub fn rigid_inertia(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        self.chain.mass_matrix(xi)
    }

    /// Velocity-product and gravity torques of the rigid chain.
    pub fn rigid_bias_and_gravity(
        &self,
        xi: &DVector<f64>,
        xid: &DVector<f64>,
        gravity: &Vector3<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let pose = self.chain.pose(xi);
        let zero = DVector::zeros(xi.len());
        let c = self.chain.inverse_dynamics_at(&pose, xid, &zero, &Vector3::zeros());
        let g = self.chain.inverse_dynamics_at(&pose, &zero, &zero, gravity);
        (c, g)
    }

    /// Tip position computed through the rigid chain.
    pub fn chain_tip_position(&self, q: &DVector<f64>) -> Vector3<f64> {
        let pose = self.chain.pose(&augment_map(q, &self.geometry));
        pose.origin[self.tip_body]
    }

    /// Linear Jacobian of the tip point with respect to the chain coordinates.
    pub fn chain_tip_jacobian(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let pose = self.chain.pose(xi);
        let tip = pose.origin[self.tip_body];
        self.chain.point_jacobian(&pose, self.tip_body, &tip).0
    }

    /// `B`, `c`, `g` without the straight-segment regularization.
    pub fn terms_unregularized(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        gravity: &Vector3<f64>,
    ) -> DynamicTerms {
        let xi = augment_map(q, &self.geometry);
        let jm = mapping_jacobian(q, &self.geometry);
        let pose = self.chain.pose(&xi);
        let bx = self.chain.mass_matrix_at(&pose);
        let jmt = jm.transpose();
        let b = &jmt * &bx * &jm;
        let zero = DVector::zeros(xi.len());
        let g = &jmt * self.chain.inverse_dynamics_at(&pose, &zero, &zero, gravity);
        let c = if qd.iter().all(|v| *v == 0.0) {
            DVector::zeros(q.len())
        } else {
            let xid = &jm * qd;
            let xidd = mapping_jacobian_rate(q, qd, &self.geometry) * qd;
            &jmt * self
                .chain
                .inverse_dynamics_at(&pose, &xid, &xidd, &Vector3::zeros())
        };
        DynamicTerms {
            b: 0.5 * (&b + b.transpose()),
            c,
            g,
        }
    }

    /// `B(q)`, `c(q, qd)` and `g(q)` in curvature coordinates.
    ///
    /// Segments with `theta < THETA_REG` are evaluated by linear interpolation
    /// from the four configurations `+-THETA_REG` along each axis.
    pub fn terms(&self, q: &DVector<f64>, qd: &DVector<f64>, gravity: &Vector3<f64>) -> DynamicTerms {
        self.terms_from(q, qd, gravity, 0)
    }

    fn terms_from(
        &self,
        q: &DVector<f64>,
        qd: &DVector<f64>,
        gravity: &Vector3<f64>,
        first: usize,
    ) -> DynamicTerms {
        let n = self.geometry.n_segments();
        let straight = (first..n).find(|&i| q[2 * i].hypot(q[2 * i + 1]) < THETA_REG);
        let Some(i) = straight else {
            return self.terms_unregularized(q, qd, gravity);
        };
        let r = THETA_REG;
        let (tx, ty) = (q[2 * i], q[2 * i + 1]);
        let eval = |x: f64, y: f64| {
            let mut qq = q.clone();
            qq[2 * i] = x;
            qq[2 * i + 1] = y;
            self.terms_from(&qq, qd, gravity, i + 1)
        };
        let px = eval(r, 0.0);
        let mx = eval(-r, 0.0);
        let py = eval(0.0, r);
        let my = eval(0.0, -r);
        let mut out = DynamicTerms::zeros(q.len());
        out.axpy(0.25 + 0.5 * tx / r, &px);
        out.axpy(0.25 - 0.5 * tx / r, &mx);
        out.axpy(0.25 + 0.5 * ty / r, &py);
        out.axpy(0.25 - 0.5 * ty / r, &my);
        out
    }

    pub fn gravity_torque(&self, q: &DVector<f64>, gravity: &Vector3<f64>) -> DVector<f64> {
        self.terms(q, &DVector::zeros(q.len()), gravity).g
    }

    pub fn kinetic_energy(&self, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
        let b = self.terms(q, &DVector::zeros(q.len()), &Vector3::zeros()).b;
        0.5 * qd.dot(&(b * qd))
    }

    pub fn potential_energy(&self, q: &DVector<f64>, gravity: &Vector3<f64>) -> f64 {
        let pose = self.chain.pose(&augment_map(q, &self.geometry));
        self.chain.potential_energy(&pose, gravity)
    }
}
