use proptest::prelude::*;

use svcalib::calibration::{
    calibrate, decode_params, encode_params, objective, reprojection_error, rig_heights, CalibrationProblem,
    GradientMode, KeypointPair, PreparedObjective, SolverConfig,
};
use svcalib::camera::PixelPoint;
use svcalib::experiment::{build_scenario, run_recovery, ScenarioConfig};
use svcalib::geometry::{Camera, CameraId, CameraRig, Extrinsics};
use svcalib::metrics::{mde, DistanceBin};
use svcalib::optimize::{central_gradient, Termination};
use svcalib::synthetic::{generate_keypoints, mount_rotation, perturb_rig, SyntheticRigSpec};
use svcalib::Error;

fn scenario(seed: u64) -> svcalib::experiment::Scenario {
    build_scenario(&SyntheticRigSpec::default(), &ScenarioConfig { seed, ..Default::default() }).unwrap()
}

fn problem_for(rig: &CameraRig, keypoints: &[KeypointPair], gt: &CameraRig) -> CalibrationProblem {
    CalibrationProblem::new(rig.clone(), keypoints.to_vec(), rig_heights(gt), SolverConfig::default()).unwrap()
}

#[test]
fn objective_vanishes_at_ground_truth() {
    let sc = scenario(1);
    let p = problem_for(&sc.ground_truth, &sc.calibration.keypoints, &sc.ground_truth);
    assert!(objective(&encode_params(&sc.ground_truth), &p).unwrap() < 1e-6);
}

#[test]
fn objective_is_sum_of_pair_errors() {
    let sc = scenario(2);
    let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
    let x = encode_params(&sc.initial);
    let rig = decode_params(&sc.initial, &x, &p.fixed_heights).unwrap();
    let direct: f64 = sc
        .calibration
        .keypoints
        .iter()
        .map(|kp| reprojection_error(kp, &rig).unwrap())
        .sum();
    assert!((objective(&x, &p).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn identical_reprojections_give_zero() {
    let intr = svcalib::synthetic::default_intrinsics();
    let e = Extrinsics::from_pose(&mount_rotation(0.0, 45.0, 0.0), nalgebra::Vector3::new(0.0, 0.0, 1.0));
    let cams = CameraId::ALL.iter().map(|&id| Camera::new(id, intr, e)).collect();
    let rig = CameraRig::with_default_adjacency(cams).unwrap();
    let px = PixelPoint::new(640.0, 600.0);
    let kps: Vec<KeypointPair> = rig
        .adjacency()
        .iter()
        .map(|&(a, b)| KeypointPair::new("f", a, b, px, px))
        .collect();
    let p = CalibrationProblem::with_rig_heights(rig.clone(), kps, SolverConfig::default()).unwrap();
    assert_eq!(objective(&encode_params(&rig), &p).unwrap(), 0.0);
}

#[test]
fn prepared_objective_agrees_with_direct_route() {
    for seed in 0..5 {
        let sc = scenario(10 + seed);
        let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
        let prepared = PreparedObjective::new(&p).unwrap();
        let x = encode_params(&sc.initial);
        let a = prepared.value(&x);
        let b = objective(&x, &p).unwrap();
        assert!((a - b).abs() < 1e-12 * b.max(1.0), "{a} vs {b}");
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    for seed in 0..5 {
        let sc = scenario(20 + seed);
        let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
        let prepared = PreparedObjective::new(&p).unwrap();
        let mut x = encode_params(&sc.initial);
        // unnormalized quaternions exercise the normalization path
        x[2] *= 1.3;
        x[9] *= 0.7;
        let exact = prepared.gradient(&x);
        let numeric = central_gradient(&|v: &[f64]| objective(v, &p).unwrap(), &x, 1e-6);
        for (k, (a, b)) in exact.iter().zip(&numeric).enumerate() {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "component {k}: {a} vs {b}");
        }
    }
}

#[test]
fn recovers_ground_truth() {
    let sc = scenario(3);
    let out = run_recovery(&sc, SolverConfig::default()).unwrap();
    assert!(out.result.objective_final < 1e-4);
    assert!(out.pose_error.max_translation() < 1e-3);
    assert!(out.pose_error.max_angle() < 0.01);
    assert!(out.result.converged);
}

#[test]
fn finite_difference_mode_makes_progress() {
    let sc = scenario(4);
    let solver = SolverConfig { gradient: GradientMode::CentralDifference, ..SolverConfig::default() };
    let p = CalibrationProblem::new(sc.initial.clone(), sc.calibration.keypoints.clone(), rig_heights(&sc.ground_truth), solver).unwrap();
    let res = calibrate(&p).unwrap();
    assert!(res.objective_final < 0.1 * res.objective_initial);
}

#[test]
fn already_optimal_start() {
    let sc = scenario(5);
    let p = problem_for(&sc.ground_truth, &sc.calibration.keypoints, &sc.ground_truth);
    let res = calibrate(&p).unwrap();
    assert!(res.converged);
    assert!(res.iterations <= 2, "{} iterations", res.iterations);
    assert!(res.objective_initial < 1e-9 && res.objective_final <= res.objective_initial);
}

#[test]
fn pixel_noise_keeps_near_range_accurate() {
    let cfg = ScenarioConfig { seed: 6, pixel_noise: 0.5, ..Default::default() };
    let sc = build_scenario(&SyntheticRigSpec::default(), &cfg).unwrap();
    let out = run_recovery(&sc, SolverConfig::default()).unwrap();
    assert!(out.result.objective_final > 0.0);
    let near = out.mde.bin(DistanceBin::Near).expect("near keypoints present");
    assert!(near < 0.05, "near-range MDE {near}");
}

#[test]
fn result_invariants_and_monotone_progress() {
    let sc = scenario(7);
    let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
    let res = calibrate(&p).unwrap();
    assert!(res.objective_final <= res.objective_initial);
    assert!(res.trajectory.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(res.per_keypoint_errors.len(), p.keypoints.len());
    let sum: f64 = res.per_keypoint_errors.iter().sum();
    assert!((sum - res.objective_final).abs() < 1e-12);
    for (a, b) in sc.initial.cameras().iter().zip(res.rig_optimized.cameras()) {
        assert_eq!(a.extrinsics.center().z, b.extrinsics.center().z);
        assert!(b.extrinsics.q.to_array()[0] >= 0.0);
    }
    assert_ne!(res.termination, Termination::MaxIterations);
}

#[test]
fn calibration_is_deterministic() {
    let cfg = ScenarioConfig { seed: 8, pixel_noise: 0.5, ..Default::default() };
    let sc = build_scenario(&SyntheticRigSpec::default(), &cfg).unwrap();
    let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
    let a = calibrate(&p).unwrap();
    let b = calibrate(&p).unwrap();
    assert_eq!(a.trajectory.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.trajectory.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(encode_params(&a.rig_optimized), encode_params(&b.rig_optimized));
}

#[test]
fn upward_looking_rig_is_a_bad_initialization() {
    let sc = scenario(9);
    let flipped: Vec<Extrinsics> = sc
        .ground_truth
        .cameras()
        .iter()
        .map(|c| {
            let r = mount_rotation(0.0, -60.0, 0.0);
            Extrinsics::from_pose(&r, c.extrinsics.center())
        })
        .collect();
    let rig = sc.ground_truth.with_extrinsics(&flipped);
    let p = CalibrationProblem::with_rig_heights(rig, sc.calibration.keypoints.clone(), SolverConfig::default()).unwrap();
    assert!(matches!(calibrate(&p), Err(Error::BadInitialization { .. })));
}

#[test]
fn rejects_invalid_solver_settings() {
    let sc = scenario(10);
    let bad = SolverConfig { max_iterations: 0, ..SolverConfig::default() };
    assert!(CalibrationProblem::new(sc.initial, sc.calibration.keypoints, rig_heights(&sc.ground_truth), bad).is_err());
}

#[test]
fn held_out_error_drops_after_calibration() {
    let sc = scenario(11);
    let before = mde(&sc.evaluation.keypoints, &sc.initial).unwrap().total;
    let after = run_recovery(&sc, SolverConfig::default()).unwrap().mde.total;
    assert!(after < 1e-3 * before);
}

#[test]
fn keypoints_from_every_zone_are_generated() {
    let rig = SyntheticRigSpec::default().build_rig().unwrap();
    let kps = generate_keypoints(&rig, 12, 2.0, 15.0, 3, "f").unwrap();
    assert_eq!(kps.len(), 48);
    for kp in &kps.keypoints {
        kp.validate(&rig).unwrap();
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_encode(seed in 0u64..1000, t in 0.0f64..0.5, r in 0.0f64..20.0) {
        let gt = SyntheticRigSpec::default().build_rig().unwrap();
        let rig = perturb_rig(&gt, t, r, seed);
        let back = decode_params(&rig, &encode_params(&rig), &rig_heights(&rig)).unwrap();
        for (a, b) in rig.cameras().iter().zip(back.cameras()) {
            prop_assert!((a.extrinsics.center() - b.extrinsics.center()).norm() < 1e-12);
            prop_assert!((a.extrinsics.rotation() - b.extrinsics.rotation()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn quaternion_sign_does_not_change_objective(seed in 0u64..200) {
        let sc = scenario(seed);
        let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
        let x = encode_params(&sc.initial);
        let mut y = x.clone();
        for v in &mut y[2..6] {
            *v = -*v;
        }
        let (a, b) = (objective(&x, &p).unwrap(), objective(&y, &p).unwrap());
        prop_assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }
}

#[test]
fn degenerate_quaternion_is_penalized() {
    let sc = scenario(12);
    let p = problem_for(&sc.initial, &sc.calibration.keypoints, &sc.ground_truth);
    let mut x = encode_params(&sc.initial);
    x[2..6].copy_from_slice(&[0.0; 4]);
    let j = objective(&x, &p).unwrap();
    assert_eq!(j, p.keypoints.len() as f64 * svcalib::calibration::INFEASIBLE_PENALTY);
}
