#![allow(dead_code)]

use nalgebra::{DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softarm_core::actuation::{allocate_pressures, null_direction};
use softarm_core::dynamics::{stalactite_gravity, AugmentedModel};
use softarm_core::kinematics::{from_polar, skew, ArmGeometry};
use softarm_core::sysid::{Dataset, PoseSample};
use std::f64::consts::PI;

pub fn random_q(rng: &mut ChaCha8Rng, n_seg: usize, lo: f64, hi: f64) -> DVector<f64> {
    let mut q = DVector::zeros(2 * n_seg);
    for i in 0..n_seg {
        let theta = rng.gen_range(lo..hi);
        let phi = rng.gen_range(0.0..2.0 * PI);
        let (x, y) = from_polar(theta, phi);
        q[2 * i] = x;
        q[2 * i + 1] = y;
    }
    q
}

/// Integrates the backbone `p' = R (0,0,-1)`, `R' = R [k]x` with classical RK4.
pub fn arc_quadrature(segments: &[(f64, f64, f64)]) -> Vector3<f64> {
    let (p, _) = integrate_backbone(Vector3::zeros(), Matrix3::identity(), segments, &[]);
    p
}

/// Same, with a straight piece of the given length after each segment.
pub fn integrate_backbone(
    mut p: Vector3<f64>,
    mut r: Matrix3<f64>,
    segments: &[(f64, f64, f64)],
    straight: &[f64],
) -> (Vector3<f64>, Matrix3<f64>) {
    let t = Vector3::new(0.0, 0.0, -1.0);
    for (i, &(tx, ty, l)) in segments.iter().enumerate() {
        let k = skew(&Vector3::new(ty, -tx, 0.0)) / l;
        let steps = 4000;
        let h = l / steps as f64;
        for _ in 0..steps {
            let f = |rr: &Matrix3<f64>| (rr * t, rr * k);
            let (p1, r1) = f(&r);
            let (p2, r2) = f(&(r + r1 * (0.5 * h)));
            let (p3, r3) = f(&(r + r2 * (0.5 * h)));
            let (p4, r4) = f(&(r + r3 * h));
            p += (p1 + 2.0 * p2 + 2.0 * p3 + p4) * (h / 6.0);
            r += (r1 + 2.0 * r2 + 2.0 * r3 + r4) * (h / 6.0);
        }
        if let Some(s) = straight.get(i) {
            p += r * t * *s;
        }
    }
    (p, r)
}

/// Tip of a full arm geometry by backbone quadrature, including connectors
/// and the tip offset.
pub fn tip_by_quadrature(g: &ArmGeometry, q: &DVector<f64>) -> Vector3<f64> {
    let segs: Vec<_> = g.segments.iter().enumerate().map(|(i, s)| (q[2 * i], q[2 * i + 1], s.arc_length_m)).collect();
    let mut straight: Vec<f64> = g.connectors.iter().map(|c| c.length_m).collect();
    *straight.last_mut().unwrap() += g.tip_offset_m;
    integrate_backbone(Vector3::zeros(), Matrix3::identity(), &segs, &straight).0
}

/// Kinetic energy assembled body by body from the rigid chain poses along
/// `xi_of(s)` near `s = 0`, with fourth-order central differences.
pub fn body_energy_along<F: Fn(f64) -> DVector<f64>>(m: &AugmentedModel, xi_of: F) -> f64 {
    let h = 1e-5;
    let poses: Vec<_> = [-2.0, -1.0, 1.0, 2.0].iter().map(|k| m.chain.pose(&xi_of(k * h))).collect();
    let p0 = m.chain.pose(&xi_of(0.0));
    let stencil = |f: &dyn Fn(usize) -> nalgebra::Matrix3<f64>| (f(0) - f(3) + (f(2) - f(1)) * 8.0) / (12.0 * h);
    let mut e = 0.0;
    for (i, b) in m.chain.bodies.iter().enumerate() {
        let v = (poses[0].com(&m.chain, i) - poses[3].com(&m.chain, i)
            + (poses[2].com(&m.chain, i) - poses[1].com(&m.chain, i)) * 8.0)
            / (12.0 * h);
        let rd = stencil(&|k| poses[k].rotation[i]);
        let wx = rd * p0.rotation[i].transpose();
        let w = Vector3::new(wx[(2, 1)], wx[(0, 2)], wx[(1, 0)]);
        let iw = p0.rotation[i] * b.inertia * p0.rotation[i].transpose();
        e += 0.5 * b.mass * v.norm_squared() + 0.5 * w.dot(&(iw * w));
    }
    e
}

/// Static poses satisfying `A p = g(q) + K q` exactly: pick q, solve for the
/// pressures, then lift along the chamber null direction.
pub fn exact_static_dataset(k: &[f64], maps: &[Matrix2x3<f64>], n: usize, p_max: f64, seed: u64) -> Dataset {
    let geometry = ArmGeometry::default_two_segment();
    let dynamics = AugmentedModel::new(&geometry);
    let gravity = stalactite_gravity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    while samples.len() < n {
        let q = DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5));
        let g = dynamics.gravity_torque(&q, &gravity);
        let mut p = DVector::zeros(6);
        let mut ok = true;
        for (seg, a) in maps.iter().enumerate() {
            let tau = Vector2::new(g[2 * seg], g[2 * seg + 1]) + Vector2::new(q[2 * seg], q[2 * seg + 1]) * k[seg];
            let alloc = allocate_pressures(&tau, a, p_max);
            let v = alloc.pressures + null_direction(a) * rng.gen_range(0.0..0.3 * p_max);
            ok &= !alloc.saturated && v.max() <= p_max;
            p.fixed_rows_mut::<3>(3 * seg).copy_from(&v);
        }
        if ok {
            samples.push(PoseSample { segment: 0, p_meas: p, q_meas: q, g_meas: g, settled: true });
        }
    }
    Dataset { samples }
}
