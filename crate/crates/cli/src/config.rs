//! The run configuration: one JSON document with a section per module.
//!
//! Lengths are meters and angles are degrees throughout this file format;
//! conversion to radians happens when a section is turned into a library type.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use softply::control::{ControllerSpec, HumanTrajectory, LoopConfig};
use softply::dataset::{GenerationConfig, NoiseSpec, SplitPlan};
use softply::geometry::{DeformationState, PoseGridSpec, RestConfiguration};
use softply::plysim::{GraspConfig, PhysicsSpec};
use softply::preprocess::PreprocessSpec;
use softply::render::CameraSpec;
use softply::tinynn::{NetSpec, OptimizerSpec};
use softply::training::{AblationConfig, TrainSchedule};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta_deg: f64,
    pub gamma_deg: f64,
}

impl Default for RestPose {
    fn default() -> Self {
        Self::from(&RestConfiguration::default())
    }
}

impl From<&RestConfiguration> for RestPose {
    fn from(r: &RestConfiguration) -> Self {
        let d = &r.desired;
        Self { x: d.x, y: d.y, z: d.z, theta_deg: d.theta.to_degrees(), gamma_deg: d.gamma.to_degrees() }
    }
}

impl RestPose {
    pub fn configuration(&self) -> RestConfiguration {
        RestConfiguration {
            desired: DeformationState::new(self.x, self.y, self.z, self.theta_deg.to_radians(), self.gamma_deg.to_radians()),
        }
    }
}

/// Symmetric lattice around the rest pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub half_range_m: f64,
    pub step_m: f64,
    pub half_range_deg: f64,
    pub step_deg: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { half_range_m: 0.105, step_m: 0.0525, half_range_deg: 20.0, step_deg: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub grid: GridSection,
    pub grasps: Vec<GraspConfig>,
    pub physics: PhysicsSpec,
    pub camera: CameraSpec,
    pub noise: NoiseSpec,
    pub images_per_pose: usize,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let g = GenerationConfig::default();
        Self {
            grid: GridSection::default(),
            grasps: g.grasps,
            physics: g.physics,
            camera: g.camera,
            noise: g.noise,
            images_per_pose: g.images_per_pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub unused_pose_fraction: f64,
    pub held_out_grasp_ids: Vec<u32>,
    /// Share of the remaining poses that go to training; the rest are the test set.
    pub train_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let p = SplitPlan::default();
        Self { unused_pose_fraction: p.unused_pose_fraction, held_out_grasp_ids: p.held_out_grasp_ids, train_fraction: p.train_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub architecture: String,
    pub ensemble_size: usize,
    /// Fraction of the training poses actually used.
    pub data_fraction: f64,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerSpec,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            architecture: "conv-small".into(),
            ensemble_size: 3,
            data_fraction: 1.0,
            schedule: TrainSchedule::default(),
            optimizer: OptimizerSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub architectures: Vec<String>,
    pub fractions: Vec<f64>,
    pub grasp_counts: Vec<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        let a = AblationConfig::default();
        Self { architectures: a.architectures, fractions: a.fractions, grasp_counts: a.grasp_counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub gains: [f64; 5],
    pub deadband_m: f64,
    pub deadband_deg: f64,
    pub max_linear: f64,
    pub max_angular: f64,
    pub control_rate_hz: f64,
    pub estimator_rate_hz: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = ControllerSpec::default();
        Self {
            gains: c.gains,
            deadband_m: c.deadband[0],
            deadband_deg: c.deadband[3].to_degrees(),
            max_linear: c.max_linear,
            max_angular: c.max_angular,
            control_rate_hz: c.control_rate_hz,
            estimator_rate_hz: c.estimator_rate_hz,
        }
    }
}

impl ControllerSection {
    pub fn spec(&self) -> ControllerSpec {
        let (m, r) = (self.deadband_m, self.deadband_deg.to_radians());
        ControllerSpec {
            gains: self.gains,
            deadband: [m, m, m, r, r],
            max_linear: self.max_linear,
            max_angular: self.max_angular,
            control_rate_hz: self.control_rate_hz,
            estimator_rate_hz: self.estimator_rate_hz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopSection {
    pub duration_s: f64,
    /// Grasp the simulated human holds during the run.
    pub grasp_id: u32,
    /// Default trajectory when no file is given: move along x, then hold.
    pub ramp_distance_m: f64,
    pub ramp_speed_mps: f64,
}

impl Default for ClosedLoopSection {
    fn default() -> Self {
        Self { duration_s: 11.0, grasp_id: 0, ramp_distance_m: 0.08, ramp_speed_mps: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub generation: u64,
    pub split: u64,
    /// Ensemble member k trains with `training + k`.
    pub training: u64,
    pub estimator: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { generation: 2024, split: 7, training: 1, estimator: 99 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub rest: RestPose,
    pub generation: GenerationSection,
    pub preprocess: PreprocessSpec,
    pub split: SplitSection,
    pub training: TrainingSection,
    pub ablation: AblationSection,
    pub controller: ControllerSection,
    pub closed_loop: ClosedLoopSection,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            rest: RestPose::default(),
            generation: GenerationSection::default(),
            preprocess: PreprocessSpec::default(),
            split: SplitSection::default(),
            training: TrainingSection::default(),
            ablation: AblationSection::default(),
            controller: ControllerSection::default(),
            closed_loop: ClosedLoopSection::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = Self::parse(&text).with_context(|| format!("in {}", path.display()))?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| anyhow::anyhow!("schema error at `{}`: {}", e.path(), e.inner()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version);
        }
        let ids: BTreeSet<u32> = self.generation.grasps.iter().map(|g| g.id).collect();
        for id in &self.split.held_out_grasp_ids {
            if !ids.contains(id) {
                bail!("split.held_out_grasp_ids: grasp {id} is not defined in generation.grasps");
            }
        }
        if !ids.contains(&self.closed_loop.grasp_id) {
            bail!("closed_loop.grasp_id: grasp {} is not defined in generation.grasps", self.closed_loop.grasp_id);
        }
        let size = self.preprocess.out_size;
        NetSpec::preset(&self.training.architecture, size).context("training.architecture")?;
        for a in &self.ablation.architectures {
            NetSpec::preset(a, size).context("ablation.architectures")?;
        }
        if let Some(g) = self.ablation.grasp_counts.iter().find(|&&g| g == 0 || g > ids.len()) {
            bail!("ablation.grasp_counts: {g} outside 1..={}", ids.len());
        }
        if self.training.ensemble_size == 0 {
            bail!("training.ensemble_size must be positive");
        }
        if !(self.training.data_fraction > 0.0 && self.training.data_fraction <= 1.0) {
            bail!("training.data_fraction must lie in (0, 1]");
        }
        self.generation().validate().context("generation")?;
        self.controller.spec().validate().context("controller")?;
        Ok(())
    }

    pub fn grid(&self) -> PoseGridSpec {
        let g = &self.generation.grid;
        PoseGridSpec::around(&self.rest.configuration(), g.half_range_m, g.step_m, g.half_range_deg, g.step_deg)
    }

    pub fn generation(&self) -> GenerationConfig {
        let g = &self.generation;
        GenerationConfig {
            grid: self.grid(),
            grasps: g.grasps.clone(),
            physics: g.physics,
            camera: g.camera,
            noise: g.noise,
            images_per_pose: g.images_per_pose,
            master_seed: self.seeds.generation,
        }
    }

    pub fn split_plan(&self) -> SplitPlan {
        SplitPlan {
            unused_pose_fraction: self.split.unused_pose_fraction,
            train_fraction: self.split.train_fraction,
            held_out_grasp_ids: self.split.held_out_grasp_ids.clone(),
            seed: self.seeds.split,
        }
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            architectures: self.ablation.architectures.clone(),
            fractions: self.ablation.fractions.clone(),
            grasp_counts: self.ablation.grasp_counts.clone(),
            schedule: self.training.schedule,
            optimizer: self.training.optimizer,
            split: self.split_plan(),
            seed: self.seeds.training,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig { controller: self.controller.spec(), rest: self.rest.configuration(), duration_s: self.closed_loop.duration_s }
    }

    pub fn default_trajectory(&self) -> HumanTrajectory {
        let c = &self.closed_loop;
        HumanTrajectory::ramp_x(&self.rest.configuration(), c.ramp_distance_m, c.ramp_speed_mps)
    }

    pub fn grasp(&self, id: u32) -> Option<&GraspConfig> {
        self.generation.grasps.iter().find(|g| g.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_desk_setup() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.generation().expected_records(), 3125 * 9);
        assert_eq!(cfg.grid(), PoseGridSpec::desk(&RestConfiguration::default()));
        assert_eq!(cfg.controller.spec(), ControllerSpec::default());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = RunConfig::parse(r#"{"training": {"ensemble_sise": 2}}"#).unwrap_err().to_string();
        assert!(err.contains("training") && err.contains("ensemble_sise"), "{err}");
        let err = RunConfig::parse(r#"{"generation": {"camera": {"fx": "wide"}}}"#).unwrap_err().to_string();
        assert!(err.contains("generation.camera.fx"), "{err}");
    }

    #[test]
    fn rejects_wrong_version_and_dangling_ids() {
        assert!(RunConfig::parse(r#"{"schema_version": 2}"#).is_err());
        let err = RunConfig::parse(r#"{"split": {"held_out_grasp_ids": [42]}}"#).unwrap_err().to_string();
        assert!(err.contains("42"), "{err}");
        assert!(RunConfig::parse(r#"{"closed_loop": {"grasp_id": 9}}"#).is_err());
        assert!(RunConfig::parse(r#"{"training": {"architecture": "resnet"}}"#).is_err());
        assert!(RunConfig::parse(r#"{"ablation": {"grasp_counts": [10]}}"#).is_err());
    }

    #[test]
    fn shipped_configs_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::load(&dir.join("desk.json")).unwrap(), RunConfig::default());
        let full = RunConfig::load(&dir.join("full-grid.json")).unwrap();
        assert_eq!(full.grid(), PoseGridSpec::full(&RestConfiguration::default()));
        assert_eq!(full.generation().expected_records(), 41472 * 9);
    }
}
