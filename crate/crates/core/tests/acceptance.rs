mod common;

use common::{body_energy_along, exact_static_dataset, random_q, tip_by_quadrature};
use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softarm_core::actuation::{chamber_matrix, ActuationElasticityModel, NOMINAL_CHAMBER_ANGLES};
use softarm_core::control::{potential_acceleration, PotentialParams};
use softarm_core::dynamics::{augment_map, stalactite_gravity, AugmentedModel};
use softarm_core::harness::{
    circle_scenario, identify, run, run_with_model, sweep, time_within, ControllerKind, Disturbance, IdentifyOptions,
    LoadCompensation, MetricsReport, ModelSource, Scenario, SweepKind,
};
use softarm_core::kinematics::{ArmGeometry, THETA_EPS};
use softarm_core::plant::{Integrator, ObstacleSphere, Plant, PlantSpec};
use softarm_core::sysid::{fit_actuation, fit_stiffness, reidentify, SysIdConfig};
use softarm_core::trajectory::{Motion, Phase, Script, DEFAULT_RELEASE_FRACTION};
use std::f64::consts::PI;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn kinematics() -> Outcome {
    let g = ArmGeometry::default_two_segment();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let mut col_err: f64 = 0.0;
    let mut tip_err: f64 = 0.0;
    for _ in 0..100 {
        let q = random_q(&mut rng, 2, 0.0, PI);
        let j = g.task_jacobian(&q);
        for k in 0..4 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += h;
            qm[k] -= h;
            let fd = (g.tip_position(&qp) - g.tip_position(&qm)) / (2.0 * h);
            col_err = col_err.max((j.column(k) - fd).norm() / fd.norm().max(1e-12));
        }
        tip_err = tip_err.max((g.tip_position(&q) - tip_by_quadrature(&g, &q)).norm());
    }
    check(
        col_err < 1e-6 && tip_err < 1e-8,
        format!("max Jacobian column error {col_err:.2e}, max tip error {tip_err:.2e} m"),
    )
}

fn dynamics() -> Outcome {
    let g = ArmGeometry::default_two_segment();
    let m = AugmentedModel::new(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut min_eig = f64::INFINITY;
    let mut asym: f64 = 0.0;
    let mut pullback: f64 = 0.0;
    for _ in 0..200 {
        let q = random_q(&mut rng, 2, THETA_EPS, PI);
        let qd = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        let b = m.terms(&q, &qd, &stalactite_gravity()).b;
        asym = asym.max((&b - b.transpose()).amax());
        min_eig = min_eig.min(b.clone().symmetric_eigen().eigenvalues.min());
        if q[0].hypot(q[1]) > 1e-3 && q[2].hypot(q[3]) > 1e-3 {
            let e = 0.5 * qd.dot(&(&b * &qd));
            let oracle = body_energy_along(&m, |s| augment_map(&(&q + &qd * s), &g));
            pullback = pullback.max((e - oracle).abs() / oracle);
        }
    }
    let mut spec = PlantSpec::default_two_segment().isotropic();
    spec.damping_nms_per_rad = vec![0.0; 2];
    spec.integrator = Integrator::Rk4;
    let mut plant = Plant::new(&g, &spec).unwrap();
    plant.set_state(DVector::from_vec(vec![0.6, -0.2, 0.3, 0.8]), DVector::from_vec(vec![0.0, 1.0, -0.5, 0.0]));
    let e0 = plant.total_energy();
    let zero = DVector::zeros(6);
    let mut drift: f64 = 0.0;
    for _ in 0..50_000 {
        plant.step(&zero, &Vector3::zeros(), 1e-4).unwrap();
        drift = drift.max((plant.total_energy() - e0).abs());
    }
    check(
        asym < 1e-12 && min_eig > 0.0 && pullback < 1e-8 && drift < 1e-4,
        format!(
            "min eig(B) {min_eig:.3e}, asymmetry {asym:.1e}, pullback error {pullback:.2e}, RK4 drift {drift:.2e} J over 5 s"
        ),
    )
}

fn identification(report: &softarm_core::sysid::FitReport) -> Outcome {
    let k = [0.45, 0.18];
    let maps = vec![
        chamber_matrix([1.3e-5, 1.1e-5, 1.2e-5], NOMINAL_CHAMBER_ANGLES.map(|a| a + 0.03)),
        chamber_matrix([0.8e-5, 0.85e-5, 0.75e-5], NOMINAL_CHAMBER_ANGLES.map(|a| a - 0.05)),
    ];
    let data = exact_static_dataset(&k, &maps, 80, 60_000.0, 303);
    let k_fit = fit_stiffness(&data, &maps).unwrap();
    let a_fit = fit_actuation(&data, Some(&k)).unwrap();
    let k_err = k_fit.iter().zip(&k).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    let a_err = a_fit.iter().zip(&maps).map(|(a, b)| (a - b).norm() / b.norm()).fold(0.0, f64::max);
    let alt = reidentify(&data, &data, &maps, &k, 2).unwrap();
    let alt_err = alt.stiffness_nm_per_rad.iter().zip(&k).map(|(a, b)| ((a - b) / b).abs()).fold(0.0, f64::max);
    let second = report.history.iter().find(|h| h.pass == 2);
    let (dk, da) = second.map_or((f64::INFINITY, f64::INFINITY), |h| (h.stiffness_change_pct, h.actuation_change_pct));
    check(
        k_err < 1e-10 && a_err < 1e-10 && alt_err < 1e-10 && dk < 1.0 && da < 1.0,
        format!(
            "synthetic K error {k_err:.1e}, A error {a_err:.1e}, alternation error {alt_err:.1e}; default plant pass-2 change K {dk:.2}%, A {da:.2}%"
        ),
    )
}

fn corrections(model: &ActuationElasticityModel) -> Outcome {
    let g = ArmGeometry::default_two_segment();
    let spec = PlantSpec::default_two_segment();
    let cfg = SysIdConfig::default();
    let phase = sweep(&g, &spec, model, &cfg, SweepKind::Phase).unwrap();
    let mag = sweep(&g, &spec, model, &cfg, SweepKind::Magnitude).unwrap();
    let ((pu_mean, pu_peak), (pc_mean, pc_peak)) = phase.stats();
    let ((ru_mean, _), (rc_mean, _)) = mag.stats();
    let calibrated = (pu_mean - 7.0).abs() <= 1.5 && (pu_peak - 23.0).abs() <= 5.0 && (ru_mean - 1.8).abs() <= 0.4;
    check(
        calibrated && pc_mean <= 2.0 && rc_mean <= 0.5,
        format!(
            "phase mean/peak {pu_mean:.2}/{pu_peak:.2} deg -> {pc_mean:.2}/{pc_peak:.2} deg, radial mean {ru_mean:.2} -> {rc_mean:.2} cm"
        ),
    )
}

fn circle(model: &ActuationElasticityModel, period: f64, kind: ControllerKind, payload: f64) -> MetricsReport {
    let mut sc = circle_scenario("circle", period, 1.0);
    sc.controller.kind = kind;
    sc.controller.load_compensation = LoadCompensation::TipForce;
    sc.plant.payload_kg = payload;
    run_with_model(&sc, model).unwrap().metrics
}

fn tracking(model: &ActuationElasticityModel) -> Outcome {
    let d8 = circle(model, 8.0, ControllerKind::Dynamic, 0.0).rms_error_m;
    let q8 = circle(model, 8.0, ControllerKind::Quasistatic, 0.0).rms_error_m;
    let d45 = circle(model, 45.0, ControllerKind::Dynamic, 0.0).rms_error_m;
    let q45 = circle(model, 45.0, ControllerKind::Quasistatic, 0.0).rms_error_m;
    check(
        d8 < 0.01 && q8 >= 3.0 * d8 && (q45 - d45).abs() <= 0.5 * d45,
        format!(
            "8 s RMS dynamic {:.2} cm, quasistatic {:.2} cm ({:.1}x); 45 s RMS dynamic {:.2} cm, quasistatic {:.2} cm",
            100.0 * d8,
            100.0 * q8,
            q8 / d8,
            100.0 * d45,
            100.0 * q45
        ),
    )
}

fn load(model: &ActuationElasticityModel) -> Outcome {
    let kg = 0.37 / 9.81;
    let d0 = circle(model, 45.0, ControllerKind::Dynamic, 0.0).mean_error_m;
    let d1 = circle(model, 45.0, ControllerKind::Dynamic, kg).mean_error_m;
    let q0 = circle(model, 45.0, ControllerKind::Quasistatic, 0.0).mean_error_m;
    let q1 = circle(model, 45.0, ControllerKind::Quasistatic, kg).mean_error_m;
    let dc = (d1 - d0).abs() / d0;
    let qc = (q1 - q0) / q0;
    check(
        dc < 0.2 && qc >= 0.5,
        format!(
            "mean error dynamic {:.2} -> {:.2} cm ({:+.0}%), quasistatic {:.2} -> {:.2} cm ({:+.0}%)",
            100.0 * d0,
            100.0 * d1,
            100.0 * (d1 - d0) / d0,
            100.0 * q0,
            100.0 * q1,
            100.0 * qc
        ),
    )
}

fn hold_then(second: Motion) -> Script {
    Script {
        start_m: [0.1, 0.0, -0.22],
        phases: vec![
            Phase { start_s: None, motion: Motion::Hold { duration_s: 2.0, at_m: None }, events: vec![] },
            Phase { start_s: None, motion: second, events: vec![] },
        ],
    }
}

fn settling(model: &ActuationElasticityModel, mut sc: Scenario) -> (f64, f64) {
    sc.metrics.settle_from_s = Some(2.0);
    let mut times = [0.0; 2];
    for (i, kind) in [ControllerKind::Dynamic, ControllerKind::Quasistatic].into_iter().enumerate() {
        sc.controller.kind = kind;
        times[i] = run_with_model(&sc, model).unwrap().metrics.settling_time_s.unwrap();
    }
    (times[0], times[1])
}

fn step_response(model: &ActuationElasticityModel) -> Outcome {
    let step = Scenario::new("step", hold_then(Motion::Hold { duration_s: 6.0, at_m: Some([0.0, 0.1, -0.22]) }));
    let (sd, sq) = settling(model, step);
    let mut imp = Scenario::new("impulse", hold_then(Motion::Hold { duration_s: 6.0, at_m: None }));
    imp.disturbances.push(Disturbance { t_s: 2.0, impulse: vec![0.01, -0.01, 0.01, 0.01] });
    let (id, iq) = settling(model, imp);
    check(
        sd <= sq / 5.0 && id <= iq / 5.0,
        format!("settling after step dynamic {sd:.2} s, quasistatic {sq:.2} s; after impulse dynamic {id:.2} s, quasistatic {iq:.2} s"),
    )
}

fn throw(model: &ActuationElasticityModel) -> Outcome {
    let az = 305f64.to_radians();
    let (r, z) = (0.16, -0.2);
    let start = [-r * az.cos(), -r * az.sin(), z];
    let goal = [r * az.cos(), r * az.sin(), z];
    let line_s = 2.0 * r / 0.5;
    let mut pass = true;
    let mut parts = Vec::new();
    for grams in [11.0, 24.0, 40.0] {
        let mut sc = Scenario::new("throw", Script::throw(start, goal, 0.5, DEFAULT_RELEASE_FRACTION, 6.0));
        sc.plant.payload_kg = grams / 1000.0;
        sc.metrics.goal_m = Some(goal);
        sc.metrics.oscillation_window_s = Some([4.5, 5.5]);
        let corrected = run_with_model(&sc, model).unwrap().metrics;
        sc.controller.corrections = false;
        let plain = run_with_model(&sc, model).unwrap().metrics;
        let back = time_within(corrected.goal_error_m.as_ref().unwrap(), 0.01).map(|t| t - line_s);
        let (oc, ou) = (corrected.oscillation_amplitude_m.unwrap(), plain.oscillation_amplitude_m.unwrap());
        pass &= back.is_some_and(|t| t <= 3.0) && ou >= 3.0 * oc;
        parts.push(format!(
            "{grams:.0} g: within 1 cm {} s after the line, oscillation {:.2} mm vs {:.1} mm uncorrected",
            back.map_or("never".into(), |t| format!("{t:.2}")),
            1000.0 * oc,
            1000.0 * ou
        ));
    }
    check(pass, parts.join("; "))
}

fn avoidance(model: &ActuationElasticityModel) -> Outcome {
    let obstacles = vec![
        ObstacleSphere { center_m: [0.04, 0.06, -0.25], radius_m: 0.015, cutoff_m: 0.045 },
        ObstacleSphere { center_m: [-0.05, 0.04, -0.25], radius_m: 0.015, cutoff_m: 0.045 },
    ];
    let script = Script {
        start_m: [0.12, 0.05, -0.25],
        phases: vec![
            Phase { start_s: None, motion: Motion::Line { to_m: [-0.12, 0.05, -0.25], duration_s: 12.0 }, events: vec![] },
            Phase { start_s: None, motion: Motion::Hold { duration_s: 2.0, at_m: None }, events: vec![] },
        ],
    };
    let mut sc = Scenario::new("obstacles", script);
    sc.obstacles = obstacles.clone();
    let out = run_with_model(&sc, model).unwrap();
    let clearance = out.metrics.min_obstacle_clearance_m.unwrap();
    // the line passes through both spheres, so the field must engage
    let engaged = clearance < obstacles[0].cutoff_m - obstacles[0].radius_m;
    let params = PotentialParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut outside_zero = true;
    let mut inside_nonzero = true;
    let ob = &obstacles[0];
    for k in 0..10_000 {
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        // every tenth point sits on the cutoff sphere itself
        let r = if k % 10 == 0 { ob.cutoff_m } else { rng.gen_range(ob.radius_m..ob.cutoff_m + 0.05) };
        let x = ob.center() + dir * r;
        let field = potential_acceleration(&x, &obstacles[..1], &params);
        if (x - ob.center()).norm() >= ob.cutoff_m {
            outside_zero &= field == Vector3::zeros();
        } else {
            inside_nonzero &= field.norm() > 0.0;
        }
    }
    check(
        clearance > 0.0 && engaged && outside_zero && inside_nonzero,
        format!(
            "closest approach {:.2} mm outside the obstacle surface, field zero beyond the cutoff: {outside_zero}, nonzero inside: {inside_nonzero}",
            1000.0 * clearance
        ),
    )
}

fn determinism() -> Outcome {
    let mut sc = Scenario::new("repeat", Script::throw([0.1, 0.05, -0.21], [-0.1, -0.05, -0.21], 0.5, DEFAULT_RELEASE_FRACTION, 1.0));
    sc.model = ModelSource::Truth;
    sc.plant.payload_kg = 0.024;
    sc.sensor.noise_std_rad = 1e-3;
    sc.seed = 17;
    sc.preroll_s = 0.5;
    let a = run(&sc).unwrap().log.to_csv();
    let b = run(&sc).unwrap().log.to_csv();
    sc.seed = 18;
    let c = run(&sc).unwrap().log.to_csv();
    check(
        a.as_bytes() == b.as_bytes() && a != c,
        format!("{} bytes, identical on repeat: {}, differs with another seed: {}", a.len(), a == b, a != c),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, f64, f64, Outcome)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, limit: f64, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let out = f();
        let secs = t0.elapsed().as_secs_f64();
        let ok = out.pass && secs < limit;
        println!(
            "criterion {n:>2} {name:<22} {} ({secs:.1} s, limit {limit:.0} s): {}",
            if ok { "PASS" } else { "FAIL" },
            out.detail
        );
        results.push((n, name, secs, limit, Outcome { pass: ok, detail: out.detail }));
    };

    timed(1, "kinematics", 5.0, &mut kinematics);
    timed(2, "dynamics", 30.0, &mut dynamics);

    let mut ident = None;
    timed(3, "identification", 60.0, &mut || {
        let id = identify(
            &ArmGeometry::default_two_segment(),
            &PlantSpec::default_two_segment(),
            &SysIdConfig::default(),
            &IdentifyOptions::default(),
        )
        .unwrap();
        let out = identification(&id.report);
        ident = Some(id);
        out
    });
    let model = ident.expect("identification ran").model;

    timed(4, "correction elements", 60.0, &mut || corrections(&model));
    timed(5, "circle tracking", 120.0, &mut || tracking(&model));
    timed(6, "load invariance", 120.0, &mut || load(&model));
    timed(7, "step and impulse", 60.0, &mut || step_response(&model));
    timed(8, "throw stabilization", 60.0, &mut || throw(&model));
    timed(9, "obstacle avoidance", 60.0, &mut || avoidance(&model));
    timed(10, "determinism", f64::INFINITY, &mut determinism);

    let failed: Vec<u32> = results.iter().filter(|r| !r.4.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
