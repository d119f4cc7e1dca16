//! End-to-end synthetic experiments: ground-truth recovery and the
//! ground-roughness robustness study.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, rig_heights, CalibrationProblem, CalibrationResult, SolverConfig};
use crate::error::Result;
use crate::geometry::{CameraRig, GroundPoint};
use crate::metrics::{mde, MdeReport};
use crate::synthetic::{
    add_pixel_noise, align_planar, apply_height_noise, derive_seed, generate_keypoints,
    perturb_rig, pose_error, reobserve, MaxMean, PoseErrorReport, RoughnessMode, RoughnessSpec,
    SyntheticKeypoints, SyntheticRigSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Calibration keypoints per overlap zone and frame.
    pub n_per_zone: usize,
    /// Held-out keypoints per overlap zone.
    pub eval_per_zone: usize,
    pub min_range: f64,
    pub max_range: f64,
    pub frames: usize,
    /// Standard deviation of the Gaussian noise added to calibration pixels.
    pub pixel_noise: f64,
    pub perturb_translation: f64,
    pub perturb_rotation_deg: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_per_zone: 10,
            eval_per_zone: 5,
            min_range: 2.0,
            max_range: 15.0,
            frames: 1,
            pixel_noise: 0.0,
            perturb_translation: 0.10,
            perturb_rotation_deg: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub ground_truth: CameraRig,
    pub initial: CameraRig,
    /// Calibration keypoints, one frame id per frame, pixel noise applied.
    pub calibration: SyntheticKeypoints,
    /// Noise-free held-out keypoints.
    pub evaluation: SyntheticKeypoints,
}

fn frame_id(k: usize) -> String {
    format!("frame{k:03}")
}

/// Generates GT rig, perturbed initial rig, calibration and held-out keypoints.
/// Frame `k` draws the same points regardless of the total frame count.
pub fn build_scenario(spec: &SyntheticRigSpec, cfg: &ScenarioConfig) -> Result<Scenario> {
    let ground_truth = spec.build_rig()?;
    let mut calibration = SyntheticKeypoints::default();
    for k in 0..cfg.frames.max(1) {
        calibration.extend(generate_keypoints(
            &ground_truth,
            cfg.n_per_zone,
            cfg.min_range,
            cfg.max_range,
            derive_seed(cfg.seed, 100 + k as u64),
            &frame_id(k),
        )?);
    }
    calibration.keypoints = add_pixel_noise(
        &calibration.keypoints,
        cfg.pixel_noise,
        derive_seed(cfg.seed, 2),
    );
    let evaluation = generate_keypoints(
        &ground_truth,
        cfg.eval_per_zone,
        cfg.min_range,
        cfg.max_range,
        derive_seed(cfg.seed, 1),
        "eval",
    )?;
    let initial = perturb_rig(
        &ground_truth,
        cfg.perturb_translation,
        cfg.perturb_rotation_deg,
        derive_seed(cfg.seed, 3),
    );
    Ok(Scenario {
        ground_truth,
        initial,
        calibration,
        evaluation,
    })
}

#[derive(Debug, Clone)]
pub struct RecoveryOutcome {
    pub result: CalibrationResult,
    /// Optimized rig after planar alignment onto the ground truth.
    pub aligned: CameraRig,
    pub pose_error: PoseErrorReport,
    pub mde: MdeReport,
}

/// Calibrates from the scenario's initial rig with GT heights held fixed,
/// then scores the result against the ground truth.
pub fn run_recovery(scenario: &Scenario, solver: SolverConfig) -> Result<RecoveryOutcome> {
    let problem = CalibrationProblem::new(
        scenario.initial.clone(),
        scenario.calibration.keypoints.clone(),
        rig_heights(&scenario.ground_truth),
        solver,
    )?;
    let result = calibrate(&problem)?;
    let aligned = align_planar(&result.rig_optimized, &scenario.ground_truth)?;
    let pose_error = pose_error(&scenario.ground_truth, &aligned)?;
    let mde = mde(&scenario.evaluation.keypoints, &result.rig_optimized)?;
    Ok(RecoveryOutcome {
        result,
        aligned,
        pose_error,
        mde,
    })
}

/// Replaces every generating point with its roughened 3D position and
/// re-observes it in both cameras.
pub fn roughen(rig: &CameraRig, keypoints: &SyntheticKeypoints, spec: &RoughnessSpec) -> SyntheticKeypoints {
    let ground: Vec<GroundPoint> = keypoints
        .points
        .iter()
        .map(|p| GroundPoint::new(p[0], p[1]))
        .collect();
    let lifted: Vec<Vector3<f64>> = apply_height_noise(&ground, spec);
    reobserve(rig, keypoints, &lifted)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoughnessRun {
    pub seed: u64,
    pub pose_error: PoseErrorReport,
    pub mde: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub label: String,
    pub delta_z: f64,
    pub tx: MaxMean,
    pub ty: MaxMean,
    pub roll: MaxMean,
    pub pitch: MaxMean,
    pub yaw: MaxMean,
    pub mde: f64,
    pub runs: Vec<RoughnessRun>,
}

impl RobustnessRow {
    fn from_runs(label: String, delta_z: f64, runs: Vec<RoughnessRun>) -> Self {
        let agg = |f: fn(&PoseErrorReport) -> MaxMean| {
            let n = runs.len().max(1) as f64;
            MaxMean {
                max: runs.iter().map(|r| f(&r.pose_error).max).fold(0.0, f64::max),
                mean: runs.iter().map(|r| f(&r.pose_error).mean).sum::<f64>() / n,
            }
        };
        RobustnessRow {
            tx: agg(|p| p.tx),
            ty: agg(|p| p.ty),
            roll: agg(|p| p.roll),
            pitch: agg(|p| p.pitch),
            yaw: agg(|p| p.yaw),
            mde: runs.iter().map(|r| r.mde).sum::<f64>() / runs.len().max(1) as f64,
            label,
            delta_z,
            runs,
        }
    }

    pub fn max_translation(&self) -> f64 {
        self.tx.max.max(self.ty.max)
    }

    pub fn max_angle(&self) -> f64 {
        self.roll.max.max(self.pitch.max).max(self.yaw.max)
    }
}

/// Robustness table: one row per ground type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl fmt::Display for RobustnessReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} | {:<17} | {:<17} | {:<17} | {:<17} | {:<17} | MDE",
            "Ground Type",
            "Δt_x(max/mean)",
            "Δt_y(max/mean)",
            "Δroll(max/mean)",
            "Δpitch(max/mean)",
            "Δyaw(max/mean)",
        )?;
        for row in &self.rows {
            let m = |v: MaxMean| format!("{:.2}m / {:.2}m", v.max, v.mean);
            let d = |v: MaxMean| format!("{:.2}° / {:.2}°", v.max, v.mean);
            writeln!(
                f,
                "{:<14} | {:<17} | {:<17} | {:<17} | {:<17} | {:<17} | {:.2}m",
                row.label,
                m(row.tx),
                m(row.ty),
                d(row.roll),
                d(row.pitch),
                d(row.yaw),
                row.mde
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoughnessExperiment {
    pub scenario: ScenarioConfig,
    pub mode: RoughnessMode,
    pub delta_z: f64,
    pub range: f64,
    pub iri: f64,
    pub seeds: Vec<u64>,
    /// Adds a zero-roughness reference row computed on the same seeds.
    pub include_baseline: bool,
}

impl RoughnessExperiment {
    fn roughness(&self, mode: RoughnessMode, delta_z: f64, seed: u64, spec: &SyntheticRigSpec) -> RoughnessSpec {
        RoughnessSpec {
            mode,
            delta_z,
            range: self.range,
            iri: self.iri,
            seed: derive_seed(seed, 4),
            footprint: spec.footprint(),
        }
    }

    fn run_one(
        &self,
        spec: &SyntheticRigSpec,
        mode: RoughnessMode,
        delta_z: f64,
        seed: u64,
        solver: SolverConfig,
    ) -> Result<RoughnessRun> {
        let cfg = ScenarioConfig {
            seed,
            ..self.scenario
        };
        let mut scenario = build_scenario(spec, &cfg)?;
        let roughness = self.roughness(mode, delta_z, seed, spec);
        // Pixel noise, if any, is applied after the height displacement.
        let clean = SyntheticKeypoints {
            keypoints: scenario.calibration.keypoints.clone(),
            points: scenario.calibration.points.clone(),
        };
        let mut rough = roughen(&scenario.ground_truth, &clean, &roughness);
        rough.keypoints = add_pixel_noise(&rough.keypoints, cfg.pixel_noise, derive_seed(seed, 2));
        scenario.calibration = rough;
        scenario.evaluation = roughen(
            &scenario.ground_truth,
            &scenario.evaluation,
            &RoughnessSpec {
                seed: derive_seed(seed, 5),
                ..roughness
            },
        );
        let outcome = run_recovery(&scenario, solver)?;
        Ok(RoughnessRun {
            seed,
            pose_error: outcome.pose_error,
            mde: outcome.mde.total,
            iterations: outcome.result.iterations,
            converged: outcome.result.converged,
        })
    }

    pub fn run(&self, spec: &SyntheticRigSpec, solver: SolverConfig) -> Result<RobustnessReport> {
        let mut rows = Vec::new();
        if self.include_baseline {
            let runs = self
                .seeds
                .iter()
                .map(|&s| self.run_one(spec, self.mode, 0.0, s, solver))
                .collect::<Result<Vec<_>>>()?;
            rows.push(RobustnessRow::from_runs("No noise".into(), 0.0, runs));
        }
        let runs = self
            .seeds
            .iter()
            .map(|&s| self.run_one(spec, self.mode, self.delta_z, s, solver))
            .collect::<Result<Vec<_>>>()?;
        let label = match self.mode {
            RoughnessMode::Slope => "Slope noise",
            RoughnessMode::Random => "Random noise",
        };
        rows.push(RobustnessRow::from_runs(label.into(), self.delta_z, runs));
        Ok(RobustnessReport { rows })
    }
}
