//! Training with a plateau learning-rate schedule, error reports, ensembles
//! and the architecture x data-fraction x grasp-count ablation matrix.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{open_dataset, split, subsample, DatasetError, DatasetManifest, SplitAssignment, SplitPlan, SplitTag};
use crate::geometry::{wrap_angle, PoseGridSpec};
use crate::preprocess::{pipeline, PreprocessError, PreprocessSpec};
use crate::tinynn::{
    adam_step, init_params, load_model, mse_loss, save_model, AdamState, ModelHeader, NetSpec, Network, NnError,
    OptimizerSpec, Tensor, POSE_OUTPUTS,
};

pub const AXIS_NAMES: [&str; 5] = ["x", "y", "z", "theta", "gamma"];
pub const ABLATION_FORMAT_VERSION: u32 = 1;
const INFER_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("record {index}: {source}")]
    Preprocess { index: usize, source: PreprocessError },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged in epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty {0} set")]
    Empty(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid model: {0}")]
    Model(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    /// Epochs without a strictly lower validation loss that make a plateau.
    pub patience: usize,
    pub lr_divisor: f64,
    pub max_epochs: usize,
    /// Share of train poses held back for validation.
    pub validation_fraction: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { initial_lr: 1e-4, patience: 5, lr_divisor: 10.0, max_epochs: 45, validation_fraction: 0.1 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Schedule(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_divisor > 1.0) {
            return bad("lr_divisor must exceed 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SecondPlateau,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Waiting,
    LrDropped,
    Stop(StopReason),
}

/// Run at the initial rate, divide it once on the first plateau, stop on the second.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    schedule: TrainSchedule,
    lr: f64,
    best: f64,
    stale: usize,
    drops: usize,
    epochs: usize,
    stopped: bool,
}

impl PlateauScheduler {
    pub fn new(schedule: TrainSchedule) -> Self {
        Self { lr: schedule.initial_lr, schedule, best: f64::INFINITY, stale: 0, drops: 0, epochs: 0, stopped: false }
    }

    /// Learning rate for the next epoch.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped
    }

    /// Feeds the validation loss of the epoch just finished.
    pub fn observe(&mut self, validation_loss: f64) -> ScheduleEvent {
        assert!(!self.stopped, "scheduler already stopped");
        self.epochs += 1;
        let mut event = if validation_loss < self.best {
            self.best = validation_loss;
            self.stale = 0;
            ScheduleEvent::Improved
        } else {
            self.stale += 1;
            ScheduleEvent::Waiting
        };
        if self.stale >= self.schedule.patience {
            if self.drops == 0 {
                self.drops = 1;
                self.stale = 0;
                self.lr /= self.schedule.lr_divisor;
                event = ScheduleEvent::LrDropped;
            } else {
                self.stopped = true;
                return ScheduleEvent::Stop(StopReason::SecondPlateau);
            }
        }
        if self.epochs >= self.schedule.max_epochs {
            self.stopped = true;
            return ScheduleEvent::Stop(StopReason::MaxEpochs);
        }
        event
    }
}

/// Preprocessed network inputs with their labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Samples {
    /// Side of the square input grid.
    pub size: usize,
    /// `len() * size * size` values, one grid per sample.
    pub inputs: Vec<f32>,
    pub labels: Vec<[f64; 5]>,
    pub grasp_ids: Vec<u32>,
    pub pose_indices: Vec<u32>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, input: &[f32], label: [f64; 5], grasp_id: u32, pose_index: u32) {
        assert_eq!(input.len(), self.size * self.size, "input grid size");
        self.inputs.extend_from_slice(input);
        self.labels.push(label);
        self.grasp_ids.push(grasp_id);
        self.pose_indices.push(pose_index);
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let mut out = Samples { size: self.size, ..Default::default() };
        out.inputs.reserve(indices.len() * self.size * self.size);
        for &i in indices {
            out.push(self.input(i), self.labels[i], self.grasp_ids[i], self.pose_indices[i]);
        }
        out
    }
}

/// A dataset with every record already run through preprocessing, in file order.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub manifest: DatasetManifest,
    pub samples: Samples,
}

const PREPARE_CHUNK: usize = 512;

/// Loads `dir` and preprocesses every record; `jobs = 0` uses all cores.
pub fn prepare(dir: &Path, preprocess: &PreprocessSpec, jobs: usize) -> Result<PreparedDataset, TrainError> {
    let (data_path, manifest_path) = crate::dataset::dataset_paths(dir);
    let manifest = DatasetManifest::load(&manifest_path)?;
    let keys = manifest.record_keys();
    let mut reader = open_dataset(&data_path)?;
    if reader.header.record_count != keys.len() {
        return Err(DatasetError::Manifest(format!(
            "manifest lists {} records, data file holds {}",
            keys.len(),
            reader.header.record_count
        ))
        .into());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Model(e.to_string()))?;
    let mut samples = Samples { size: preprocess.out_size, ..Default::default() };
    let mut start = 0;
    while start < keys.len() {
        let chunk: Vec<_> = reader.by_ref().take(PREPARE_CHUNK).collect::<Result<_, _>>()?;
        let grids: Vec<_> = pool.install(|| {
            chunk
                .par_iter()
                .enumerate()
                .map(|(k, r)| {
                    pipeline(&r.depth, r.anchor_pixels(), preprocess)
                        .map_err(|source| TrainError::Preprocess { index: start + k, source })
                })
                .collect::<Result<_, _>>()
        })?;
        for (k, (r, g)) in chunk.iter().zip(grids).enumerate() {
            samples.push(&g.values, r.label.map(f64::from), r.grasp_id, keys[start + k].pose_index);
        }
        start += chunk.len();
    }
    reader.expect_end()?;
    Ok(PreparedDataset { manifest, samples })
}

/// Record indices per role once validation has been carved out of the train poses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub unused_pose: Vec<usize>,
    pub unused_grasp: Vec<usize>,
}

/// Holds back `validation_fraction` of the train poses, then keeps `train_fraction`
/// of the rest. Validation does not depend on `train_fraction`.
pub fn split_indices(
    assignment: &SplitAssignment,
    pose_indices: &[u32],
    validation_fraction: f64,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitIndices, TrainError> {
    if assignment.tags.len() != pose_indices.len() {
        return Err(TrainError::Model("split assignment does not match the dataset".into()));
    }
    let mut poses = assignment.train_poses.clone();
    poses.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((validation_fraction * poses.len() as f64).round() as usize).clamp(1, poses.len().max(1));
    if poses.len() < 2 {
        return Err(TrainError::Empty("train".into()));
    }
    let val: BTreeSet<u32> = poses[..n_val].iter().copied().collect();
    let mut rest: Vec<u32> = poses[n_val..].to_vec();
    rest.sort_unstable();
    let kept: BTreeSet<u32> = subsample(&rest, train_fraction, seed.wrapping_add(1)).into_iter().collect();
    let mut out = SplitIndices::default();
    for (i, (tag, pose)) in assignment.tags.iter().zip(pose_indices).enumerate() {
        match tag {
            SplitTag::Train if val.contains(pose) => out.validation.push(i),
            SplitTag::Train if kept.contains(pose) => out.train.push(i),
            SplitTag::Train => {}
            SplitTag::Test => out.test.push(i),
            SplitTag::UnusedPose => out.unused_pose.push(i),
            SplitTag::UnusedGrasp => out.unused_grasp.push(i),
        }
    }
    Ok(out)
}

/// Affine map between poses and network targets: `target = (pose - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetNorm {
    pub center: [f64; 5],
    pub scale: [f64; 5],
}

impl TargetNorm {
    pub fn from_grid(grid: &PoseGridSpec) -> Self {
        Self { center: grid.centers(), scale: grid.half_ranges().map(|h| if h > 0.0 { h } else { 1.0 }) }
    }

    pub fn encode(&self, pose: &[f64; 5]) -> [f32; 5] {
        std::array::from_fn(|k| ((pose[k] - self.center[k]) / self.scale[k]) as f32)
    }

    pub fn decode(&self, out: &[f32]) -> [f64; 5] {
        std::array::from_fn(|k| f64::from(out[k]) * self.scale[k] + self.center[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorMeta {
    target: TargetNorm,
    preprocess: PreprocessSpec,
}

/// A trained network plus what is needed to turn its outputs into poses.
#[derive(Debug, Clone)]
pub struct PoseRegressor {
    pub net: Network,
    pub params: Vec<f32>,
    pub norm: TargetNorm,
    pub preprocess: PreprocessSpec,
}

impl PoseRegressor {
    pub fn new(spec: &NetSpec, params: Vec<f32>, norm: TargetNorm, preprocess: PreprocessSpec) -> Result<Self, TrainError> {
        spec.validate_regressor()?;
        if spec.input.c != 1 || spec.input.h != preprocess.out_size || spec.input.w != preprocess.out_size {
            return Err(TrainError::Model(format!(
                "network input {} does not match {}x{} preprocessed grids",
                spec.input, preprocess.out_size, preprocess.out_size
            )));
        }
        let net = Network::new(spec)?;
        if params.len() != net.param_count() {
            return Err(TrainError::Model(format!("{} parameters for {}", params.len(), net.param_count())));
        }
        Ok(Self { net, params, norm, preprocess })
    }

    /// Poses for `count` grids stored back to back in `inputs`.
    pub fn predict(&self, inputs: &[f32], count: usize) -> Vec<[f64; 5]> {
        let n = self.net.input_shape().len();
        assert_eq!(inputs.len(), n * count, "input length");
        let mut out = Vec::with_capacity(count);
        for start in (0..count).step_by(INFER_BATCH) {
            let b = INFER_BATCH.min(count - start);
            let x = Tensor { batch: b, shape: self.net.input_shape(), values: inputs[start * n..(start + b) * n].to_vec() };
            let y = self.net.infer(&self.params, &x).expect("shapes checked at construction");
            out.extend(y.values.chunks_exact(POSE_OUTPUTS).map(|o| self.norm.decode(o)));
        }
        out
    }

    pub fn header(&self) -> ModelHeader {
        let meta = RegressorMeta { target: self.norm, preprocess: self.preprocess };
        ModelHeader { net: self.net.spec().clone(), meta: serde_json::to_value(meta).expect("plain data") }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(save_model(path, &self.header(), &self.params)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (header, params) = load_model(path)?;
        let meta: RegressorMeta = serde_json::from_value(header.meta)
            .map_err(|e| TrainError::Model(format!("{}: metadata: {e}", path.display())))?;
        Self::new(&header.net, params, meta.target, meta.preprocess)
    }
}

/// Regressors with one architecture whose outputs are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<PoseRegressor>,
}

impl Ensemble {
    pub fn new(members: Vec<PoseRegressor>) -> Result<Self, TrainError> {
        let first = members.first().ok_or_else(|| TrainError::Empty("ensemble".into()))?;
        for m in &members[1..] {
            if m.net.spec() != first.net.spec() || m.preprocess != first.preprocess {
                return Err(TrainError::Model("ensemble members differ in architecture or preprocessing".into()));
            }
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[PoseRegressor] {
        &self.members
    }

    pub fn preprocess(&self) -> &PreprocessSpec {
        &self.members[0].preprocess
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self, TrainError> {
        Self::new(paths.iter().map(|p| PoseRegressor::load(p.as_ref())).collect::<Result<_, _>>()?)
    }
}

impl From<PoseRegressor> for Ensemble {
    fn from(m: PoseRegressor) -> Self {
        Self { members: vec![m] }
    }
}

/// Mean of the member predictions for `count` grids.
pub fn predict_ensemble(ensemble: &Ensemble, inputs: &[f32], count: usize) -> Vec<[f64; 5]> {
    let mut sum = vec![[0.0; 5]; count];
    for m in &ensemble.members {
        for (acc, p) in sum.iter_mut().zip(m.predict(inputs, count)) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
    }
    let n = ensemble.members.len() as f64;
    sum.into_iter().map(|a| a.map(|v| v / n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: Vec<f32>,
    pub log: Vec<EpochRecord>,
    pub best_validation: f64,
    pub stop: StopReason,
}

fn targets(samples: &Samples, norm: &TargetNorm) -> Vec<f32> {
    samples.labels.iter().flat_map(|l| norm.encode(l)).collect()
}

fn validation_loss(net: &Network, params: &[f32], samples: &Samples, targets: &[f32]) -> f64 {
    let n = net.input_shape().len();
    let mut total = 0.0;
    for start in (0..samples.len()).step_by(INFER_BATCH) {
        let b = INFER_BATCH.min(samples.len() - start);
        let x = Tensor { batch: b, shape: net.input_shape(), values: samples.inputs[start * n..(start + b) * n].to_vec() };
        let y = net.infer(params, &x).expect("shapes checked");
        let (loss, _) = mse_loss(&y.values, &targets[start * 5..(start + b) * 5], &[1.0; 5]);
        total += loss * b as f64;
    }
    total / samples.len() as f64
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Minibatch Adam under the plateau schedule.
pub fn train(
    spec: &NetSpec,
    train_set: &Samples,
    validation: &Samples,
    norm: &TargetNorm,
    schedule: &TrainSchedule,
    optimizer: &OptimizerSpec,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    schedule.validate()?;
    optimizer.validate()?;
    spec.validate_regressor()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty("train".into()));
    }
    if validation.is_empty() {
        return Err(TrainError::Empty("validation".into()));
    }
    let net = Network::new(spec)?;
    let n_in = net.input_shape().len();
    if train_set.size * train_set.size != n_in || validation.size != train_set.size {
        return Err(TrainError::Model(format!("samples of {0}x{0} for network input {1}", train_set.size, spec.input)));
    }
    let train_targets = targets(train_set, norm);
    let val_targets = targets(validation, norm);
    let mut params: Vec<f32> = init_params(&net, seed);
    let mut best_params = params.clone();
    let mut grads = vec![0.0f32; params.len()];
    let mut adam = AdamState::new(params.len());
    let mut sched = PlateauScheduler::new(*schedule);
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let bs = optimizer.batch_size;
    loop {
        let epoch = sched.epochs() + 1;
        let lr = sched.lr();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
        let mut loss_sum = 0.0;
        for batch in order.chunks(bs) {
            let mut x = Tensor { batch: batch.len(), shape: net.input_shape(), values: Vec::with_capacity(batch.len() * n_in) };
            let mut t = Vec::with_capacity(batch.len() * 5);
            for &i in batch {
                x.values.extend_from_slice(train_set.input(i));
                t.extend_from_slice(&train_targets[i * 5..i * 5 + 5]);
            }
            let (y, saved) = net.forward(&params, &x)?;
            let (loss, g) = mse_loss(&y.values, &t, &[1.0; 5]);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            grads.iter_mut().for_each(|v| *v = 0.0);
            net.backward(&params, &saved, &Tensor { batch: batch.len(), shape: y.shape, values: g }, &mut grads)?;
            step += 1;
            adam_step(&mut params, &grads, &mut adam, optimizer, lr, step);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = validation_loss(&net, &params, validation, &val_targets);
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, loss: val_loss });
        }
        log.push(EpochRecord { epoch, lr, train_loss, validation_loss: val_loss });
        info!("epoch {epoch}: lr {lr:.1e} train {train_loss:.5} validation {val_loss:.5}");
        let event = sched.observe(val_loss);
        if val_loss <= sched.best() {
            best_params.copy_from_slice(&params);
        }
        if let ScheduleEvent::Stop(stop) = event {
            return Ok(TrainOutcome { params: best_params, log, best_validation: sched.best(), stop });
        }
    }
}

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,lr,train_loss,validation_loss\n");
    for r in log {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.lr, r.train_loss, r.validation_loss));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Five-number summary (Tukey hinges) plus mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Hinges are the medians of the lower and upper halves, both including the
/// middle value when the count is odd.
pub fn summarize(values: &[f64]) -> Summary {
    assert!(!values.is_empty(), "summary of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let half = n.div_ceil(2);
    Summary {
        min: v[0],
        q1: median_sorted(&v[..half]),
        median: median_sorted(&v),
        q3: median_sorted(&v[n - half..]),
        max: v[n - 1],
        mean: v.iter().sum::<f64>() / n as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisErrors {
    pub axis: String,
    /// Prediction minus label, meters or radians.
    pub signed: Summary,
    pub absolute: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub split: String,
    pub count: usize,
    pub axes: Vec<AxisErrors>,
    /// Euclidean norm of the translation error, meters.
    pub cartesian: Summary,
}

impl ErrorReport {
    pub fn axis(&self, name: &str) -> Option<&AxisErrors> {
        self.axes.iter().find(|a| a.axis == name)
    }
}

pub fn error_report(split: &str, predictions: &[[f64; 5]], labels: &[[f64; 5]]) -> Result<ErrorReport, TrainError> {
    assert_eq!(predictions.len(), labels.len());
    if labels.is_empty() {
        return Err(TrainError::Empty(split.to_string()));
    }
    let errors: Vec<[f64; 5]> = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| std::array::from_fn(|k| if k < 3 { p[k] - l[k] } else { wrap_angle(p[k] - l[k]) }))
        .collect();
    let axes = AXIS_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let col: Vec<f64> = errors.iter().map(|e| e[k]).collect();
            let abs: Vec<f64> = col.iter().map(|v| v.abs()).collect();
            AxisErrors { axis: name.to_string(), signed: summarize(&col), absolute: summarize(&abs) }
        })
        .collect();
    let cart: Vec<f64> = errors.iter().map(|e| (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt()).collect();
    Ok(ErrorReport { split: split.to_string(), count: labels.len(), axes, cartesian: summarize(&cart) })
}

pub fn evaluate(ensemble: &Ensemble, samples: &Samples, split: &str) -> Result<ErrorReport, TrainError> {
    let preds = predict_ensemble(ensemble, &samples.inputs, samples.len());
    error_report(split, &preds, &samples.labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub architectures: Vec<String>,
    pub fractions: Vec<f64>,
    /// Grasp configurations used for training; the remaining ones form the unused-grasp set.
    pub grasp_counts: Vec<usize>,
    pub schedule: TrainSchedule,
    pub optimizer: OptimizerSpec,
    pub split: SplitPlan,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            architectures: vec!["conv-small".into(), "conv-dense".into()],
            fractions: vec![1.0, 0.75, 0.5, 0.25],
            grasp_counts: vec![9, 6, 4],
            schedule: TrainSchedule::default(),
            optimizer: OptimizerSpec::default(),
            split: SplitPlan::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Done { best_validation: f64, epochs: usize, reports: Vec<ErrorReport> },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub key: String,
    pub architecture: String,
    pub fraction: f64,
    pub grasp_count: usize,
    pub outcome: CellOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub format_version: u32,
    pub config: AblationConfig,
    pub cells: Vec<AblationCell>,
}

/// Every (architecture, fraction, grasp count) combination, in row-major order.
pub fn ablation_cells(config: &AblationConfig) -> Vec<(String, f64, usize)> {
    let mut cells = Vec::new();
    for a in &config.architectures {
        for &f in &config.fractions {
            for &g in &config.grasp_counts {
                cells.push((a.clone(), f, g));
            }
        }
    }
    cells
}

pub fn cell_key(architecture: &str, fraction: f64, grasp_count: usize) -> String {
    format!("{architecture}/f{fraction}/g{grasp_count}")
}

/// Trains one model and reports on every non-empty evaluation split.
pub fn run_cell(
    data: &PreparedDataset,
    config: &AblationConfig,
    architecture: &str,
    fraction: f64,
    grasp_count: usize,
    preprocess: &PreprocessSpec,
) -> Result<(TrainOutcome, Vec<ErrorReport>), TrainError> {
    let ids: Vec<u32> = data.manifest.generation.grasps.iter().map(|g| g.id).collect();
    if grasp_count == 0 || grasp_count > ids.len() {
        return Err(TrainError::Model(format!("grasp count {grasp_count} outside 1..={}", ids.len())));
    }
    let plan = SplitPlan { held_out_grasp_ids: ids[grasp_count..].to_vec(), ..config.split.clone() };
    let assignment = split(&data.manifest, &plan)?;
    let idx = split_indices(&assignment, &data.samples.pose_indices, config.schedule.validation_fraction, fraction, config.seed)?;
    let spec = NetSpec::preset(architecture, preprocess.out_size)?;
    let norm = TargetNorm::from_grid(&data.manifest.generation.grid);
    let s = &data.samples;
    let outcome = train(&spec, &s.subset(&idx.train), &s.subset(&idx.validation), &norm, &config.schedule, &config.optimizer, config.seed)?;
    let model: Ensemble = PoseRegressor::new(&spec, outcome.params.clone(), norm, *preprocess)?.into();
    let mut reports = Vec::new();
    for (name, set) in [("test", &idx.test), ("unused_pose", &idx.unused_pose), ("unused_grasp", &idx.unused_grasp)] {
        if !set.is_empty() {
            reports.push(evaluate(&model, &s.subset(set), name)?);
        }
    }
    Ok((outcome, reports))
}

/// Runs every cell; a failing cell is recorded and the rest continue.
pub fn run_ablation(data: &PreparedDataset, config: &AblationConfig, preprocess: &PreprocessSpec, jobs: usize) -> Result<AblationReport, TrainError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| TrainError::Model(e.to_string()))?;
    let cells = pool.install(|| {
        ablation_cells(config)
            .into_par_iter()
            .map(|(arch, fraction, grasp_count)| {
                let key = cell_key(&arch, fraction, grasp_count);
                info!("ablation cell {key}");
                let outcome = match run_cell(data, config, &arch, fraction, grasp_count, preprocess) {
                    Ok((o, reports)) => CellOutcome::Done { best_validation: o.best_validation, epochs: o.log.len(), reports },
                    Err(e) => {
                        warn!("ablation cell {key} failed: {e}");
                        CellOutcome::Failed { error: e.to_string() }
                    }
                };
                AblationCell { key, architecture: arch, fraction, grasp_count, outcome }
            })
            .collect()
    });
    Ok(AblationReport { format_version: ABLATION_FORMAT_VERSION, config: config.clone(), cells })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| TrainError::Model(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(())
}
