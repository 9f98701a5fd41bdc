//! Rigid kinematic trees with coupled joints.
//!
//! Each body hangs off a parent through a fixed offset followed by a single
//! joint. A joint is driven by one generalized coordinate scaled by a gear
//! ratio, so several bodies can share a coordinate. All quantities in the
//! recursions are expressed in the world frame.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Joint {
    Revolute { axis: Vector3<f64>, coord: usize, ratio: f64 },
    Prismatic { axis: Vector3<f64>, coord: usize, ratio: f64 },
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body {
    pub name: String,
    pub parent: Option<usize>,
    /// Translation from the parent frame to the joint origin, in parent coordinates.
    pub offset: Vector3<f64>,
    pub joint: Joint,
    pub mass: f64,
    /// Centre of mass in body coordinates.
    pub com: Vector3<f64>,
    /// Rotational inertia about the centre of mass, body coordinates.
    pub inertia: Matrix3<f64>,
}

impl Body {
    pub fn massless(name: &str, parent: Option<usize>, offset: Vector3<f64>, joint: Joint) -> Self {
        Body {
            name: name.to_string(),
            parent,
            offset,
            joint,
            mass: 0.0,
            com: Vector3::zeros(),
            inertia: Matrix3::zeros(),
        }
    }
}

/// Bodies listed parents-first.
#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    pub bodies: Vec<Body>,
    pub n_coords: usize,
}

/// World pose of every body.
#[derive(Clone, Debug)]
pub struct ChainPose {
    pub rotation: Vec<Matrix3<f64>>,
    pub origin: Vec<Vector3<f64>>,
    /// Joint axis in world coordinates (zero for fixed joints).
    pub axis: Vec<Vector3<f64>>,
}

impl ChainPose {
    pub fn com(&self, chain: &Chain, i: usize) -> Vector3<f64> {
        self.origin[i] + self.rotation[i] * chain.bodies[i].com
    }
}

impl Chain {
    pub fn new(bodies: Vec<Body>, n_coords: usize) -> Self {
        for (i, b) in bodies.iter().enumerate() {
            if let Some(p) = b.parent {
                assert!(p < i, "bodies must be ordered parents first");
            }
        }
        Chain { bodies, n_coords }
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    pub fn scale_masses(&mut self, s: f64) {
        for b in &mut self.bodies {
            b.mass *= s;
            b.inertia *= s;
        }
    }

    pub fn pose(&self, xi: &DVector<f64>) -> ChainPose {
        let n = self.bodies.len();
        let mut rotation = Vec::with_capacity(n);
        let mut origin = Vec::with_capacity(n);
        let mut axis = Vec::with_capacity(n);
        for b in &self.bodies {
            let (pr, po) = match b.parent {
                Some(p) => (rotation[p], origin[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            let joint_origin = po + pr * b.offset;
            match b.joint {
                Joint::Revolute { axis: a, coord, ratio } => {
                    let r = Rotation3::from_axis_angle(&Unit::new_normalize(a), ratio * xi[coord]);
                    rotation.push(pr * r.matrix());
                    origin.push(joint_origin);
                    axis.push(pr * a.normalize());
                }
                Joint::Prismatic { axis: a, coord, ratio } => {
                    let s = pr * a.normalize();
                    rotation.push(pr);
                    origin.push(joint_origin + s * (ratio * xi[coord]));
                    axis.push(s);
                }
                Joint::Fixed => {
                    rotation.push(pr);
                    origin.push(joint_origin);
                    axis.push(Vector3::zeros());
                }
            }
        }
        ChainPose { rotation, origin, axis }
    }

    /// Linear Jacobian of a world point rigidly attached to body `i`, and the
    /// angular Jacobian of body `i`.
    pub fn point_jacobian(
        &self,
        pose: &ChainPose,
        i: usize,
        point: &Vector3<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut jv = DMatrix::zeros(3, self.n_coords);
        let mut jw = DMatrix::zeros(3, self.n_coords);
        let mut k = Some(i);
        while let Some(j) = k {
            let s = pose.axis[j];
            match self.bodies[j].joint {
                Joint::Revolute { coord, ratio, .. } => {
                    let v = s.cross(&(point - pose.origin[j])) * ratio;
                    for r in 0..3 {
                        jv[(r, coord)] += v[r];
                        jw[(r, coord)] += s[r] * ratio;
                    }
                }
                Joint::Prismatic { coord, ratio, .. } => {
                    for r in 0..3 {
                        jv[(r, coord)] += s[r] * ratio;
                    }
                }
                Joint::Fixed => {}
            }
            k = self.bodies[j].parent;
        }
        (jv, jw)
    }

    /// Joint-space inertia `sum_i m_i Jv_i^T Jv_i + Jw_i^T I_i Jw_i`.
    pub fn mass_matrix(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let pose = self.pose(xi);
        self.mass_matrix_at(&pose)
    }

    pub fn mass_matrix_at(&self, pose: &ChainPose) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_coords, self.n_coords);
        for (i, b) in self.bodies.iter().enumerate() {
            if b.mass == 0.0 && b.inertia == Matrix3::zeros() {
                continue;
            }
            let (jv, jw) = self.point_jacobian(pose, i, &pose.com(self, i));
            let iw = pose.rotation[i] * b.inertia * pose.rotation[i].transpose();
            m += jv.transpose() * &jv * b.mass + jw.transpose() * iw * &jw;
        }
        0.5 * (&m + m.transpose())
    }

    /// Recursive Newton-Euler inverse dynamics. `gravity` is the gravitational
    /// acceleration vector in world coordinates.
    pub fn inverse_dynamics(
        &self,
        xi: &DVector<f64>,
        xid: &DVector<f64>,
        xidd: &DVector<f64>,
        gravity: &Vector3<f64>,
    ) -> DVector<f64> {
        let pose = self.pose(xi);
        self.inverse_dynamics_at(&pose, xid, xidd, gravity)
    }

    pub fn inverse_dynamics_at(
        &self,
        pose: &ChainPose,
        xid: &DVector<f64>,
        xidd: &DVector<f64>,
        gravity: &Vector3<f64>,
    ) -> DVector<f64> {
        let n = self.bodies.len();
        let mut w = vec![Vector3::zeros(); n];
        let mut wd = vec![Vector3::zeros(); n];
        let mut a_origin = vec![Vector3::zeros(); n];
        let mut f = vec![Vector3::zeros(); n];
        let mut torque = vec![Vector3::zeros(); n];

        for (i, b) in self.bodies.iter().enumerate() {
            let (pw, pwd, pa, po) = match b.parent {
                Some(p) => (w[p], wd[p], a_origin[p], pose.origin[p]),
                None => (Vector3::zeros(), Vector3::zeros(), -gravity, Vector3::zeros()),
            };
            let d = pose.origin[i] - po;
            let mut acc = pa + pwd.cross(&d) + pw.cross(&pw.cross(&d));
            let s = pose.axis[i];
            match b.joint {
                Joint::Revolute { coord, ratio, .. } => {
                    let rate = ratio * xid[coord];
                    w[i] = pw + s * rate;
                    wd[i] = pwd + s * (ratio * xidd[coord]) + pw.cross(&(s * rate));
                }
                Joint::Prismatic { coord, ratio, .. } => {
                    let rate = ratio * xid[coord];
                    w[i] = pw;
                    wd[i] = pwd;
                    acc += s * (ratio * xidd[coord]) + 2.0 * pw.cross(&(s * rate));
                }
                Joint::Fixed => {
                    w[i] = pw;
                    wd[i] = pwd;
                }
            }
            a_origin[i] = acc;
            let rc = pose.rotation[i] * b.com;
            let a_com = acc + wd[i].cross(&rc) + w[i].cross(&w[i].cross(&rc));
            let iw = pose.rotation[i] * b.inertia * pose.rotation[i].transpose();
            f[i] = a_com * b.mass;
            torque[i] = iw * wd[i] + w[i].cross(&(iw * w[i])) + rc.cross(&f[i]);
        }

        let mut tau = DVector::zeros(self.n_coords);
        for i in (0..n).rev() {
            let b = &self.bodies[i];
            match b.joint {
                Joint::Revolute { coord, ratio, .. } => tau[coord] += ratio * pose.axis[i].dot(&torque[i]),
                Joint::Prismatic { coord, ratio, .. } => tau[coord] += ratio * pose.axis[i].dot(&f[i]),
                Joint::Fixed => {}
            }
            if let Some(p) = b.parent {
                let d = pose.origin[i] - pose.origin[p];
                let fi = f[i];
                let ti = torque[i];
                torque[p] += ti + d.cross(&fi);
                f[p] += fi;
            }
        }
        tau
    }

    /// Gravitational potential energy, `-sum m g . c`.
    pub fn potential_energy(&self, pose: &ChainPose, gravity: &Vector3<f64>) -> f64 {
        (0..self.bodies.len())
            .map(|i| -self.bodies[i].mass * gravity.dot(&pose.com(self, i)))
            .sum()
    }
}

/// Solid cylinder of diameter `d` and length `l` with its axis along local z.
pub fn cylinder_inertia(mass: f64, diameter: f64, length: f64) -> Matrix3<f64> {
    let r = 0.5 * diameter;
    let axial = 0.5 * mass * r * r;
    let transverse = mass * (3.0 * r * r + length * length) / 12.0;
    Matrix3::from_diagonal(&Vector3::new(transverse, transverse, axial))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Planar double pendulum in the x-z plane with point masses at the link ends.
    fn double_pendulum(m1: f64, m2: f64, l1: f64, l2: f64) -> Chain {
        let y = Vector3::y();
        let mut b1 = Body::massless(
            "l1",
            None,
            Vector3::zeros(),
            Joint::Revolute { axis: y, coord: 0, ratio: 1.0 },
        );
        b1.mass = m1;
        b1.com = Vector3::new(0.0, 0.0, -l1);
        let mut b2 = Body::massless(
            "l2",
            Some(0),
            Vector3::new(0.0, 0.0, -l1),
            Joint::Revolute { axis: y, coord: 1, ratio: 1.0 },
        );
        b2.mass = m2;
        b2.com = Vector3::new(0.0, 0.0, -l2);
        Chain::new(vec![b1, b2], 2)
    }

    #[test]
    fn double_pendulum_matches_textbook_terms() {
        let (m1, m2, l1, l2) = (0.7, 0.3, 0.5, 0.4);
        let chain = double_pendulum(m1, m2, l1, l2);
        let q = DVector::from_vec(vec![0.4, -0.9]);
        let qd = DVector::from_vec(vec![1.1, 0.6]);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let b = chain.mass_matrix(&q);
        let c2 = q[1].cos();
        assert_relative_eq!(b[(0, 0)], m1 * l1 * l1 + m2 * (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * c2), epsilon = 1e-12);
        assert_relative_eq!(b[(0, 1)], m2 * (l2 * l2 + l1 * l2 * c2), epsilon = 1e-12);
        assert_relative_eq!(b[(1, 1)], m2 * l2 * l2, epsilon = 1e-12);

        // Angles about +y measured from the downward vertical; x = l sin q, z = -l cos q.
        let tau_g = chain.inverse_dynamics(&q, &DVector::zeros(2), &DVector::zeros(2), &g);
        let gv = 9.81;
        let g1 = (m1 + m2) * gv * l1 * q[0].sin() + m2 * gv * l2 * (q[0] + q[1]).sin();
        let g2 = m2 * gv * l2 * (q[0] + q[1]).sin();
        assert_relative_eq!(tau_g[0], g1, epsilon = 1e-12);
        assert_relative_eq!(tau_g[1], g2, epsilon = 1e-12);

        let zero = Vector3::zeros();
        let tau_c = chain.inverse_dynamics(&q, &qd, &DVector::zeros(2), &zero);
        let h = m2 * l1 * l2 * q[1].sin();
        assert_relative_eq!(tau_c[0], -h * (2.0 * qd[0] * qd[1] + qd[1] * qd[1]), epsilon = 1e-12);
        assert_relative_eq!(tau_c[1], h * qd[0] * qd[0], epsilon = 1e-12);
    }

    #[test]
    fn inverse_dynamics_is_linear_in_acceleration() {
        let chain = double_pendulum(0.5, 0.2, 0.3, 0.25);
        let q = DVector::from_vec(vec![0.2, 0.7]);
        let qd = DVector::from_vec(vec![-0.4, 1.3]);
        let qdd = DVector::from_vec(vec![2.0, -1.0]);
        let g = Vector3::new(0.3, 0.0, -9.81);
        let full = chain.inverse_dynamics(&q, &qd, &qdd, &g);
        let bias = chain.inverse_dynamics(&q, &qd, &DVector::zeros(2), &g);
        let b = chain.mass_matrix(&q);
        assert_relative_eq!(full, b * qdd + bias, epsilon = 1e-12);
    }

    #[test]
    fn cylinder_inertia_is_diagonal() {
        let i = cylinder_inertia(2.0, 0.2, 0.3);
        assert_relative_eq!(i[(2, 2)], 0.01, epsilon = 1e-15);
        assert_relative_eq!(i[(0, 0)], 2.0 * (0.03 + 0.09) / 12.0, epsilon = 1e-15);
    }
}
