//! Proportional follower: estimated deformation state to gripper twist, and a
//! simulated-time closed loop with separate estimator and control rates.

use std::fs;
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{record_seed, NoiseSpec};
use crate::geometry::{delta, from_transform_projected, to_transform, DeformationState, RestConfiguration, RigidTransform};
use crate::plysim::{build_mesh, GraspConfig, PhysicsSpec, PlyMesh, SimError};
use crate::preprocess::pipeline;
use crate::render::{apply_noise, project_anchors, rasterize, CameraModel, CameraSpec, RenderError};
use crate::training::{predict_ensemble, Ensemble};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid controller: {0}")]
    Spec(String),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// Gripper-frame velocity; `angular[0]` is always zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TwistCommand {
    pub linear: [f64; 3],
    pub angular: [f64; 3],
}

impl TwistCommand {
    pub fn is_zero(&self) -> bool {
        self.linear.iter().chain(&self.angular).all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    /// Per-axis gains (x, y, z, theta, gamma), 1/s.
    pub gains: [f64; 5],
    /// Deviations at or below these (meters, radians) command nothing.
    pub deadband: [f64; 5],
    pub max_linear: f64,
    pub max_angular: f64,
    pub control_rate_hz: f64,
    pub estimator_rate_hz: f64,
}

impl Default for ControllerSpec {
    fn default() -> Self {
        let db_rot = 0.5f64.to_radians();
        Self {
            gains: [0.8; 5],
            deadband: [0.005, 0.005, 0.005, db_rot, db_rot],
            max_linear: 0.1,
            max_angular: 0.3,
            control_rate_hz: 20.0,
            estimator_rate_hz: 30.0,
        }
    }
}

impl ControllerSpec {
    /// Same rates, no deadband and no saturation.
    pub fn linear_only(gain: f64) -> Self {
        Self { gains: [gain; 5], deadband: [0.0; 5], max_linear: f64::INFINITY, max_angular: f64::INFINITY, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let ok = self.gains.iter().all(|g| *g >= 0.0 && g.is_finite())
            && self.deadband.iter().all(|d| *d >= 0.0)
            && self.max_linear > 0.0
            && self.max_angular > 0.0
            && self.control_rate_hz > 0.0
            && self.control_rate_hz.is_finite()
            && self.estimator_rate_hz > 0.0
            && self.estimator_rate_hz.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ControlError::Spec(format!("{self:?}")))
        }
    }
}

/// Deviation from rest mapped through deadband, gain and saturation. A
/// positive deviation commands motion along the same axis, closing the gap.
pub fn control_law(estimated: &DeformationState, rest: &RestConfiguration, spec: &ControllerSpec) -> TwistCommand {
    let d = delta(estimated, &rest.desired);
    let v: [f64; 5] = std::array::from_fn(|i| {
        if d[i].abs() <= spec.deadband[i] {
            return 0.0;
        }
        let limit = if i < 3 { spec.max_linear } else { spec.max_angular };
        (spec.gains[i] * d[i]).clamp(-limit, limit)
    });
    TwistCommand { linear: [v[0], v[1], v[2]], angular: [0.0, v[3], v[4]] }
}

/// Constant gripper-frame twist applied for `dt` seconds.
pub fn integrate_robot(pose: &RigidTransform, twist: &TwistCommand, dt: f64) -> RigidTransform {
    assert!(dt > 0.0, "dt must be positive");
    let v = Vector3::from(twist.linear);
    let w = Vector3::from(twist.angular);
    RigidTransform {
        rotation: pose.rotation * Rotation3::new(w * dt).into_inner(),
        translation: pose.translation + pose.rotation * v * dt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta_deg: f64,
    pub gamma_deg: f64,
}

impl Waypoint {
    pub fn from_state(t: f64, s: &DeformationState) -> Self {
        Self { t, x: s.x, y: s.y, z: s.z, theta_deg: s.theta.to_degrees(), gamma_deg: s.gamma.to_degrees() }
    }

    pub fn state(&self) -> DeformationState {
        DeformationState::new(self.x, self.y, self.z, self.theta_deg.to_radians(), self.gamma_deg.to_radians())
    }
}

/// World-frame pose of the human grasp proxy, linearly interpolated and held
/// constant outside the waypoint span.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanTrajectory {
    waypoints: Vec<Waypoint>,
    max_speed: f64,
}

impl HumanTrajectory {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self, ControlError> {
        if waypoints.is_empty() {
            return Err(ControlError::Trajectory("no waypoints".into()));
        }
        let finite = |w: &Waypoint| [w.t, w.x, w.y, w.z, w.theta_deg, w.gamma_deg].iter().all(|v| v.is_finite());
        if let Some(i) = waypoints.iter().position(|w| !finite(w)) {
            return Err(ControlError::Trajectory(format!("waypoint {i} is not finite")));
        }
        let mut max_speed: f64 = 0.0;
        for (i, pair) in waypoints.windows(2).enumerate() {
            let dt = pair[1].t - pair[0].t;
            if dt <= 0.0 {
                return Err(ControlError::Trajectory(format!("waypoint {} time does not increase", i + 1)));
            }
            let (a, b) = (pair[0], pair[1]);
            let dist = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2) + (b.z - a.z).powi(2)).sqrt();
            max_speed = max_speed.max(dist / dt);
        }
        Ok(Self { waypoints, max_speed })
    }

    pub fn hold(state: &DeformationState) -> Self {
        Self::new(vec![Waypoint::from_state(0.0, state)]).expect("single finite waypoint")
    }

    /// Rest, then a move of `distance` along x at `speed`, then hold.
    pub fn ramp_x(rest: &RestConfiguration, distance: f64, speed: f64) -> Self {
        let start = rest.desired;
        let end = DeformationState { x: start.x + distance, ..start };
        Self::new(vec![Waypoint::from_state(0.0, &start), Waypoint::from_state(distance.abs() / speed, &end)])
            .expect("valid ramp")
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    /// Largest translational speed between waypoints, m/s.
    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints.last().map_or(0.0, |w| w.t)
    }

    pub fn state_at(&self, t: f64) -> DeformationState {
        let w = &self.waypoints;
        if t <= w[0].t {
            return w[0].state();
        }
        let i = w.partition_point(|p| p.t <= t);
        if i >= w.len() {
            return w[w.len() - 1].state();
        }
        let (a, b) = (w[i - 1].state().to_array(), w[i].state().to_array());
        let s = (t - w[i - 1].t) / (w[i].t - w[i - 1].t);
        DeformationState::from_array(std::array::from_fn(|k| a[k] + s * (b[k] - a[k])))
    }

    pub fn load(path: &Path) -> Result<Self, ControlError> {
        let text = fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let waypoints: Vec<Waypoint> = serde_path_to_error::deserialize(de)
            .map_err(|e| ControlError::Trajectory(format!("{}: {e}", path.display())))?;
        Self::new(waypoints)
    }

    pub fn save(&self, path: &Path) -> Result<(), ControlError> {
        let text = serde_json::to_string_pretty(&self.waypoints).expect("plain data");
        fs::write(path, text)?;
        Ok(())
    }
}

/// What an estimator may observe at its tick.
pub struct PlantView<'a> {
    pub tick: u32,
    /// Human proxy pose in the gripper frame.
    pub relative: &'a RigidTransform,
    /// Gripper pose in the world frame.
    pub robot: &'a RigidTransform,
}

pub trait Estimator {
    fn estimate(&mut self, view: &PlantView<'_>) -> Result<DeformationState, String>;
}

/// Reads the relative state straight from the simulation.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthEstimator;

impl Estimator for GroundTruthEstimator {
    fn estimate(&mut self, view: &PlantView<'_>) -> Result<DeformationState, String> {
        Ok(from_transform_projected(view.relative).0)
    }
}

/// Settles the ply, renders a noisy depth image from the gripper camera,
/// preprocesses it and runs the ensemble.
pub struct CnnEstimator {
    ensemble: Ensemble,
    camera: CameraModel,
    physics: PhysicsSpec,
    mesh: PlyMesh,
    noise: NoiseSpec,
    grasp_id: u32,
    seed: u64,
}

impl CnnEstimator {
    pub fn new(
        ensemble: Ensemble,
        camera: &CameraSpec,
        physics: PhysicsSpec,
        grasp: &GraspConfig,
        noise: NoiseSpec,
        seed: u64,
    ) -> Result<Self, ControlError> {
        let camera = CameraModel::from_spec(camera)?;
        let mesh = build_mesh(&physics.material, grasp)?;
        Ok(Self { ensemble, camera, physics, mesh, noise, grasp_id: grasp.id, seed })
    }
}

impl Estimator for CnnEstimator {
    fn estimate(&mut self, view: &PlantView<'_>) -> Result<DeformationState, String> {
        let gravity = view.robot.rotation.transpose() * self.physics.gravity_vector();
        self.physics.settle_frame(&mut self.mesh, view.relative, &gravity).map_err(|e| e.to_string())?;
        let clean = rasterize(&self.camera, &self.mesh);
        let anchors = project_anchors(&self.camera, &self.mesh).map_err(|e| e.to_string())?;
        let noise = self.noise.model(record_seed(self.seed, self.grasp_id, view.tick, 0));
        let img = apply_noise(&clean, &noise, self.camera.z_near, self.camera.z_far);
        let grid = pipeline(&img, anchors, self.ensemble.preprocess()).map_err(|e| e.to_string())?;
        Ok(DeformationState::from_array(predict_ensemble(&self.ensemble, &grid.values, 1)[0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopConfig {
    pub controller: ControllerSpec,
    pub rest: RestConfiguration,
    pub duration_s: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { controller: ControllerSpec::default(), rest: RestConfiguration::default(), duration_s: 10.0 }
    }
}

/// One row per control tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub true_state: DeformationState,
    pub estimate: DeformationState,
    pub twist: TwistCommand,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub control_ticks: usize,
    pub estimator_ticks: usize,
}

pub const LOG_HEADER: &str =
    "t,true_x,true_y,true_z,true_th,true_ga,est_x,est_y,est_z,est_th,est_ga,vx,vy,vz,wy,wz";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let mut fields = vec![r.t];
            fields.extend(r.true_state.to_array());
            fields.extend(r.estimate.to_array());
            fields.extend(r.twist.linear);
            fields.extend(&r.twist.angular[1..]);
            out.push_str(&fields.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ControlError> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Error)]
#[error("closed loop failed at t = {t:.3} s: {reason}")]
pub struct LoopFailure {
    pub t: f64,
    pub reason: String,
    pub partial: RunLog,
}

/// Time of tick `k` at `rate_hz`, in integer nanoseconds.
pub fn tick_time_ns(k: u64, rate_hz: f64) -> u64 {
    (k as f64 * 1e9 / rate_hz).round() as u64
}

/// Simulated-time loop starting with the gripper at the world origin. Ticks
/// due at the same instant run estimator first; the control tick uses the
/// latest latched estimate. Ticks at or after `duration_s` are not run.
pub fn run_closed_loop(
    estimator: &mut dyn Estimator,
    trajectory: &HumanTrajectory,
    config: &LoopConfig,
) -> Result<RunLog, LoopFailure> {
    let spec = &config.controller;
    let fail = |t: f64, reason: String, partial: RunLog| LoopFailure { t, reason, partial };
    if let Err(e) = spec.validate() {
        return Err(fail(0.0, e.to_string(), RunLog::default()));
    }
    if !(config.duration_s >= 0.0 && config.duration_s.is_finite()) {
        return Err(fail(0.0, "duration must be finite and non-negative".into(), RunLog::default()));
    }
    let end_ns = (config.duration_s * 1e9).round() as u64;
    let mut log = RunLog::default();
    let mut robot = RigidTransform::identity();
    let mut twist = TwistCommand::default();
    let mut latched: Option<DeformationState> = None;
    let mut now_ns = 0u64;
    loop {
        let next_est = tick_time_ns(log.estimator_ticks as u64, spec.estimator_rate_hz);
        let next_ctl = tick_time_ns(log.control_ticks as u64, spec.control_rate_hz);
        let t_ns = next_est.min(next_ctl);
        if t_ns >= end_ns {
            return Ok(log);
        }
        if t_ns > now_ns {
            robot = integrate_robot(&robot, &twist, (t_ns - now_ns) as f64 * 1e-9).renormalized();
            now_ns = t_ns;
        }
        let t = t_ns as f64 * 1e-9;
        let human = to_transform(&trajectory.state_at(t));
        let relative = robot.inverse().compose(&human);
        if next_est == t_ns {
            let view = PlantView { tick: log.estimator_ticks as u32, relative: &relative, robot: &robot };
            match estimator.estimate(&view) {
                Ok(s) if s.is_finite() => latched = Some(s),
                Ok(s) => return Err(fail(t, format!("non-finite estimate {s:?}"), log)),
                Err(e) => return Err(fail(t, e, log)),
            }
            log.estimator_ticks += 1;
        }
        if next_ctl == t_ns {
            let estimate = latched.expect("estimator ticks at time zero");
            twist = control_law(&estimate, &config.rest, spec);
            let true_state = from_transform_projected(&relative).0;
            log.rows.push(LogRow { t, true_state, estimate, twist });
            log.control_ticks += 1;
        }
    }
}
