use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use svcalib::calibration::{ground_reprojections, KeypointPair};
use svcalib::metrics::{mde, DistanceBin};
use svcalib::synthetic::{generate_keypoints, perturb_rig, SyntheticRigSpec};
use svcalib::Error;

fn setup() -> (svcalib::geometry::CameraRig, Vec<KeypointPair>) {
    let gt = SyntheticRigSpec::default().build_rig().unwrap();
    let eval = generate_keypoints(&gt, 15, 1.0, 18.0, 5, "eval").unwrap();
    (perturb_rig(&gt, 0.2, 1.0, 6), eval.keypoints)
}

#[test]
fn mde_matches_hand_computed_bins() {
    let (rig, kps) = setup();
    let report = mde(&kps, &rig).unwrap();
    let mut sums = [0.0; 3];
    let mut counts = [0usize; 3];
    for kp in &kps {
        let (a, b) = ground_reprojections(kp, &rig).unwrap();
        let d = ((a.x + b.x) / 2.0).hypot((a.y + b.y) / 2.0);
        let k = if d < 5.0 { 0 } else if d < 10.0 { 1 } else { 2 };
        sums[k] += a.distance(&b);
        counts[k] += 1;
    }
    for (k, bin) in DistanceBin::ALL.iter().enumerate() {
        match report.bin(*bin) {
            Some(v) => assert!((v - sums[k] / counts[k] as f64).abs() < 1e-12),
            None => assert_eq!(counts[k], 0),
        }
    }
    let total = sums.iter().sum::<f64>() / kps.len() as f64;
    assert!((report.total - total).abs() < 1e-12);
    assert_eq!(report.n_keypoints, kps.len());
}

#[test]
fn empty_bins_are_absent() {
    let gt = SyntheticRigSpec::default().build_rig().unwrap();
    let near = generate_keypoints(&gt, 5, 2.5, 4.5, 9, "f").unwrap();
    let report = mde(&near.keypoints, &gt).unwrap();
    assert!(report.bin(DistanceBin::Far).is_none());
    assert!(!report.per_bin.contains_key(&DistanceBin::Far));
    let json = serde_json::to_value(&report).unwrap();
    assert!(json["per_bin"].get(">10m").is_none());
}

#[test]
fn empty_evaluation_set_is_undefined() {
    let (rig, _) = setup();
    assert!(matches!(mde(&[], &rig), Err(Error::UndefinedMetric(_))));
}

#[test]
fn report_table_has_header_row() {
    let (rig, kps) = setup();
    let text = mde(&kps, &rig).unwrap().to_string();
    let header = text.lines().next().unwrap();
    for label in ["0-5m", "5-10m", ">10m", "Total"] {
        assert!(header.contains(label));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mde_ignores_keypoint_order(seed in any::<u64>()) {
        let (rig, kps) = setup();
        let mut shuffled = kps.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = mde(&kps, &rig).unwrap();
        let b = mde(&shuffled, &rig).unwrap();
        prop_assert!((a.total - b.total).abs() < 1e-12);
        prop_assert_eq!(&a.per_bin_count, &b.per_bin_count);
        for bin in DistanceBin::ALL {
            match (a.bin(bin), b.bin(bin)) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (None, None) => {}
                _ => prop_assert!(false, "bin presence differs"),
            }
        }
    }
}
