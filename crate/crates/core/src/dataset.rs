//! Synthetic pose-grid dataset: generation, binary storage, splits by pose.
//!
//! Binary layout (little-endian): `SPLYDS01`, u32 version, u32 height,
//! u32 width, u32 record count, then per record u32 grasp id, 5 x f32 label,
//! u64 noise seed, 4 x f32 anchor pixels and height x width f32 depths.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{enumerate_grid, DeformationState, GeometryError, PoseGridSpec, RestConfiguration};
use crate::plysim::{build_mesh, GraspConfig, PhysicsSpec, PlyMesh, SimError};
use crate::preprocess::PreprocessSpec;
use crate::render::{apply_noise, project_anchors, rasterize, CameraModel, CameraSpec, DepthImage, NoiseModel, RenderError};

pub const MAGIC: &[u8; 8] = b"SPLYDS01";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_BYTES: u64 = 24;
pub const DATA_FILE: &str = "dataset.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Largest tolerated share of poses lost to solver failures.
pub const MAX_SKIP_FRACTION: f64 = 0.001;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("record {index} truncated at byte {offset}")]
    Truncated { index: usize, offset: u64 },
    #[error("{skipped} of {total} poses failed to settle (limit {limit})")]
    TooManySkips { skipped: usize, total: usize, limit: usize },
    #[error("split leaves no training poses")]
    EmptyTrain,
    #[error("invalid split plan: {0}")]
    InvalidPlan(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Depth noise parameters; the per-image seed comes from [`record_seed`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_per_meter: f64,
    pub dropout_prob: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        let n = NoiseModel::default();
        Self { sigma_per_meter: n.sigma_per_meter, dropout_prob: n.dropout_prob }
    }
}

impl NoiseSpec {
    pub fn model(&self, seed: u64) -> NoiseModel {
        NoiseModel { sigma_per_meter: self.sigma_per_meter, dropout_prob: self.dropout_prob, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub grid: PoseGridSpec,
    pub grasps: Vec<GraspConfig>,
    pub physics: PhysicsSpec,
    pub camera: CameraSpec,
    pub noise: NoiseSpec,
    pub images_per_pose: usize,
    pub master_seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            grid: PoseGridSpec::desk(&RestConfiguration::default()),
            grasps: GraspConfig::default_set(),
            physics: PhysicsSpec::default(),
            camera: CameraSpec::default(),
            noise: NoiseSpec::default(),
            images_per_pose: 1,
            master_seed: 2024,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.grid.validate()?;
        CameraModel::from_spec(&self.camera)?;
        if self.images_per_pose == 0 {
            return Err(DatasetError::InvalidConfig("images_per_pose must be positive".into()));
        }
        let ids: BTreeSet<u32> = self.grasps.iter().map(|g| g.id).collect();
        if ids.len() != self.grasps.len() {
            return Err(DatasetError::InvalidConfig("grasp ids must be unique".into()));
        }
        for g in &self.grasps {
            build_mesh(&self.physics.material, g)?;
        }
        Ok(())
    }

    /// Records a complete run would produce: poses x grasps x images per pose.
    pub fn expected_records(&self) -> usize {
        self.grid.pose_count() * self.grasps.len() * self.images_per_pose
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub grasp_id: u32,
    /// Pose in meters and radians.
    pub label: [f32; 5],
    pub noise_seed: u64,
    /// (u, v) of the two clip anchors.
    pub anchors: [f32; 4],
    pub depth: DepthImage,
}

impl DatasetRecord {
    pub fn label_state(&self) -> DeformationState {
        DeformationState::from_array(self.label.map(f64::from))
    }

    pub fn anchor_pixels(&self) -> [(f64, f64); 2] {
        let a = self.anchors.map(f64::from);
        [(a[0], a[1]), (a[2], a[3])]
    }

    fn byte_len(height: usize, width: usize) -> u64 {
        (4 + 20 + 8 + 16 + 4 * height * width) as u64
    }
}

/// Position of a record in the generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordKey {
    pub grasp_id: u32,
    pub pose_index: u32,
    pub image: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkippedPose {
    pub grasp_id: u32,
    pub pose_index: u32,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    UnusedPose,
    UnusedGrasp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPlan {
    /// Share of pose labels withheld from both train and test.
    pub unused_pose_fraction: f64,
    /// Share of the remaining poses used for training; the rest is test.
    pub train_fraction: f64,
    pub held_out_grasp_ids: Vec<u32>,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self { unused_pose_fraction: 0.2, train_fraction: 0.8, held_out_grasp_ids: vec![6, 7, 8], seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitAssignment {
    pub plan: SplitPlan,
    pub unused_poses: Vec<u32>,
    pub train_poses: Vec<u32>,
    pub test_poses: Vec<u32>,
    /// One tag per record, in file order.
    pub tags: Vec<SplitTag>,
}

impl SplitAssignment {
    pub fn count(&self, tag: SplitTag) -> usize {
        self.tags.iter().filter(|t| **t == tag).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generation: GenerationConfig,
    /// Preprocessing the images were framed for.
    pub preprocess: PreprocessSpec,
    pub poses_per_grasp: usize,
    pub record_count: usize,
    pub skipped: Vec<SkippedPose>,
    pub split: Option<SplitAssignment>,
}

impl DatasetManifest {
    /// Keys of the stored records in file order (skipped poses left out).
    pub fn record_keys(&self) -> Vec<RecordKey> {
        let skipped: BTreeSet<(u32, u32)> = self.skipped.iter().map(|s| (s.grasp_id, s.pose_index)).collect();
        let mut keys = Vec::with_capacity(self.record_count);
        for g in &self.generation.grasps {
            for p in 0..self.poses_per_grasp as u32 {
                if skipped.contains(&(g.id, p)) {
                    continue;
                }
                for image in 0..self.generation.images_per_pose as u32 {
                    keys.push(RecordKey { grasp_id: g.id, pose_index: p, image });
                }
            }
        }
        keys
    }

    pub fn poses(&self) -> Result<Vec<DeformationState>, DatasetError> {
        Ok(enumerate_grid(&self.generation.grid)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| DatasetError::Manifest(format!("{}: {e}", path.display())))?;
        if m.format_version != FORMAT_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported manifest version {}", m.format_version)));
        }
        Ok(m)
    }
}

/// Deterministic per-image noise seed (splitmix64 finalizer over the packed key).
pub fn record_seed(master: u64, grasp_id: u32, pose_index: u32, image: u32) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut h = mix(master);
    for part in [u64::from(grasp_id), u64::from(pose_index), u64::from(image)] {
        h = mix(h ^ part);
    }
    h
}

pub struct DatasetWriter<W: Write + Seek> {
    out: W,
    height: usize,
    width: usize,
    written: u32,
}

impl<W: Write + Seek> DatasetWriter<W> {
    pub fn new(mut out: W, height: usize, width: usize) -> Result<Self, DatasetError> {
        out.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, height as u32, width as u32, 0] {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(Self { out, height, width, written: 0 })
    }

    pub fn push(&mut self, r: &DatasetRecord) -> Result<(), DatasetError> {
        if r.depth.height != self.height || r.depth.width != self.width {
            return Err(DatasetError::Format {
                offset: HEADER_BYTES + u64::from(self.written) * DatasetRecord::byte_len(self.height, self.width),
                reason: format!("record image is {}x{}, file is {}x{}", r.depth.width, r.depth.height, self.width, self.height),
            });
        }
        let mut buf = Vec::with_capacity(DatasetRecord::byte_len(self.height, self.width) as usize);
        buf.extend_from_slice(&r.grasp_id.to_le_bytes());
        r.label.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        buf.extend_from_slice(&r.noise_seed.to_le_bytes());
        r.anchors.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        r.depth.data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        self.out.write_all(&buf)?;
        self.written += 1;
        Ok(())
    }

    /// Patches the record count into the header.
    pub fn finish(mut self) -> Result<W, DatasetError> {
        self.out.seek(SeekFrom::Start(20))?;
        self.out.write_all(&self.written.to_le_bytes())?;
        self.out.seek(SeekFrom::End(0))?;
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub height: usize,
    pub width: usize,
    pub record_count: usize,
}

/// Streaming reader; yields records in file order.
pub struct DatasetReader<R: Read> {
    input: R,
    pub header: DatasetHeader,
    index: usize,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut input: R) -> Result<Self, DatasetError> {
        let mut head = [0u8; HEADER_BYTES as usize];
        let got = read_full(&mut input, &mut head)?;
        if got < 8 || &head[..8] != MAGIC {
            return Err(DatasetError::Format { offset: 0, reason: "bad magic, not a dataset file".into() });
        }
        if got < head.len() {
            return Err(DatasetError::Format { offset: got as u64, reason: "header truncated".into() });
        }
        let word = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        if word(0) != FORMAT_VERSION {
            return Err(DatasetError::Format { offset: 8, reason: format!("unsupported version {}", word(0)) });
        }
        let header = DatasetHeader { height: word(1) as usize, width: word(2) as usize, record_count: word(3) as usize };
        Ok(Self { input, header, index: 0 })
    }

    fn offset(&self) -> u64 {
        HEADER_BYTES + self.index as u64 * DatasetRecord::byte_len(self.header.height, self.header.width)
    }

    pub fn next_record(&mut self) -> Option<Result<DatasetRecord, DatasetError>> {
        if self.index >= self.header.record_count {
            return None;
        }
        let (h, w) = (self.header.height, self.header.width);
        let mut buf = vec![0u8; DatasetRecord::byte_len(h, w) as usize];
        let start = self.offset();
        match read_full(&mut self.input, &mut buf) {
            Err(e) => return Some(Err(e.into())),
            Ok(n) if n < buf.len() => {
                return Some(Err(DatasetError::Truncated { index: self.index, offset: start + n as u64 }));
            }
            Ok(_) => {}
        }
        let f = |i: usize| f32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let record = DatasetRecord {
            grasp_id: u32::from_le_bytes(buf[0..4].try_into().unwrap()),
            label: std::array::from_fn(|k| f(4 + 4 * k)),
            noise_seed: u64::from_le_bytes(buf[24..32].try_into().unwrap()),
            anchors: std::array::from_fn(|k| f(32 + 4 * k)),
            depth: DepthImage { width: w, height: h, data: buf[48..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect() },
        };
        self.index += 1;
        Some(Ok(record))
    }

    /// Fails if bytes remain after the declared records.
    pub fn expect_end(&mut self) -> Result<(), DatasetError> {
        let mut probe = [0u8; 1];
        if read_full(&mut self.input, &mut probe)? != 0 {
            return Err(DatasetError::Format { offset: self.offset(), reason: "trailing bytes after last record".into() });
        }
        Ok(())
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<DatasetRecord, DatasetError>;
    fn next(&mut self) -> Option<Self::Item> {
        self.next_record()
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

pub fn open_dataset(path: &Path) -> Result<DatasetReader<BufReader<File>>, DatasetError> {
    DatasetReader::new(BufReader::with_capacity(1 << 20, File::open(path)?))
}

/// Reads a whole dataset file into memory.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>), DatasetError> {
    let mut reader = open_dataset(path)?;
    let records = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    reader.expect_end()?;
    Ok((reader.header, records))
}

pub fn write_dataset(path: &Path, height: usize, width: usize, records: &[DatasetRecord]) -> Result<(), DatasetError> {
    let mut w = DatasetWriter::new(BufWriter::new(File::create(path)?), height, width)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()?;
    Ok(())
}

/// Paths of the data file and manifest inside a dataset directory.
pub fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(DATA_FILE), dir.join(MANIFEST_FILE))
}

fn render_pose(
    config: &GenerationConfig,
    cam: &CameraModel,
    mesh: &mut PlyMesh,
    grasp_id: u32,
    pose_index: u32,
    pose: &DeformationState,
) -> Result<Vec<DatasetRecord>, String> {
    config.physics.settle(mesh, pose).map_err(|e| e.to_string())?;
    let clean = rasterize(cam, mesh);
    let anchors = project_anchors(cam, mesh).map_err(|e| e.to_string())?;
    let label = pose.to_array().map(|v| v as f32);
    let anchors = [anchors[0].0, anchors[0].1, anchors[1].0, anchors[1].1].map(|v| v as f32);
    Ok((0..config.images_per_pose as u32)
        .map(|image| {
            let noise_seed = record_seed(config.master_seed, grasp_id, pose_index, image);
            let depth = apply_noise(&clean, &config.noise.model(noise_seed), cam.z_near, cam.z_far);
            DatasetRecord { grasp_id, label, noise_seed, anchors, depth }
        })
        .collect())
}

/// Poses rendered per parallel batch; bounds peak memory.
const GEN_CHUNK: usize = 128;

/// Renders every grasp x pose x image into `out_dir`, then writes the manifest.
/// `jobs = 0` uses all cores.
pub fn generate(
    config: &GenerationConfig,
    preprocess: &PreprocessSpec,
    out_dir: &Path,
    jobs: usize,
) -> Result<DatasetManifest, DatasetError> {
    config.validate()?;
    let cam = CameraModel::from_spec(&config.camera)?;
    let poses = enumerate_grid(&config.grid)?;
    fs::create_dir_all(out_dir)?;
    let (data_path, manifest_path) = dataset_paths(out_dir);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DatasetError::InvalidConfig(e.to_string()))?;
    let mut writer = DatasetWriter::new(BufWriter::new(File::create(&data_path)?), cam.height, cam.width)?;
    let mut skipped = Vec::new();
    for grasp in &config.grasps {
        info!("grasp {}: {} poses", grasp.id, poses.len());
        let indexed: Vec<(u32, &DeformationState)> = poses.iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
        for chunk in indexed.chunks(GEN_CHUNK) {
            let results: Vec<_> = pool.install(|| {
                chunk
                    .par_iter()
                    .map_init(
                        || build_mesh(&config.physics.material, grasp).expect("validated"),
                        |mesh, &(i, pose)| (i, render_pose(config, &cam, mesh, grasp.id, i, pose)),
                    )
                    .collect()
            });
            for (pose_index, result) in results {
                match result {
                    Ok(records) => records.iter().try_for_each(|r| writer.push(r))?,
                    Err(reason) => {
                        warn!("grasp {} pose {pose_index} skipped: {reason}", grasp.id);
                        skipped.push(SkippedPose { grasp_id: grasp.id, pose_index, reason });
                    }
                }
            }
        }
    }
    writer.finish()?;
    let total = poses.len() * config.grasps.len();
    let limit = (MAX_SKIP_FRACTION * total as f64).floor() as usize;
    if skipped.len() > limit {
        return Err(DatasetError::TooManySkips { skipped: skipped.len(), total, limit });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        generation: config.clone(),
        preprocess: *preprocess,
        poses_per_grasp: poses.len(),
        record_count: (total - skipped.len()) * config.images_per_pose,
        skipped,
        split: None,
    };
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

fn shuffled(n: usize, seed: u64) -> Vec<u32> {
    let mut v: Vec<u32> = (0..n as u32).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Assigns every record to exactly one split. Held-out grasps go to
/// unused-grasp; pose labels are then divided into unused / train / test,
/// the same way for every remaining grasp.
pub fn split(manifest: &DatasetManifest, plan: &SplitPlan) -> Result<SplitAssignment, DatasetError> {
    if !(0.0..1.0).contains(&plan.unused_pose_fraction) || !(0.0..=1.0).contains(&plan.train_fraction) {
        return Err(DatasetError::InvalidPlan(format!(
            "fractions out of range: unused {} train {}",
            plan.unused_pose_fraction, plan.train_fraction
        )));
    }
    let ids: BTreeSet<u32> = manifest.generation.grasps.iter().map(|g| g.id).collect();
    if let Some(bad) = plan.held_out_grasp_ids.iter().find(|id| !ids.contains(id)) {
        return Err(DatasetError::InvalidPlan(format!("held-out grasp {bad} is not in the dataset")));
    }
    let n = manifest.poses_per_grasp;
    let order = shuffled(n, plan.seed);
    let n_unused = (plan.unused_pose_fraction * n as f64).round() as usize;
    let n_train = (plan.train_fraction * (n - n_unused) as f64).round() as usize;
    let mut unused_poses = order[..n_unused].to_vec();
    let mut train_poses = order[n_unused..n_unused + n_train].to_vec();
    let mut test_poses = order[n_unused + n_train..].to_vec();
    let held: BTreeSet<u32> = plan.held_out_grasp_ids.iter().copied().collect();
    if train_poses.is_empty() || held.len() == ids.len() {
        return Err(DatasetError::EmptyTrain);
    }
    let mut pose_tag = vec![SplitTag::Test; n];
    unused_poses.iter().for_each(|&p| pose_tag[p as usize] = SplitTag::UnusedPose);
    train_poses.iter().for_each(|&p| pose_tag[p as usize] = SplitTag::Train);
    let tags = manifest
        .record_keys()
        .iter()
        .map(|k| if held.contains(&k.grasp_id) { SplitTag::UnusedGrasp } else { pose_tag[k.pose_index as usize] })
        .collect();
    unused_poses.sort_unstable();
    train_poses.sort_unstable();
    test_poses.sort_unstable();
    Ok(SplitAssignment { plan: plan.clone(), unused_poses, train_poses, test_poses, tags })
}

/// Seeded subset of `poses` holding `round(fraction * len)` of them; for one
/// seed smaller fractions always give subsets of larger ones.
pub fn subsample(poses: &[u32], fraction: f64, seed: u64) -> Vec<u32> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction must be in (0, 1]");
    let keep = ((fraction * poses.len() as f64).round() as usize).min(poses.len());
    let order = shuffled(poses.len(), seed);
    let mut out: Vec<u32> = order[..keep].iter().map(|&i| poses[i as usize]).collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AxisGrid;
    use std::io::Cursor;

    fn record(i: u32, h: usize, w: usize) -> DatasetRecord {
        DatasetRecord {
            grasp_id: i % 3,
            label: [0.1 * i as f32, 0.6, -0.05, 0.2, -0.3],
            noise_seed: u64::MAX - u64::from(i),
            anchors: [10.5, 3.25, 50.0, 4.0],
            depth: DepthImage { width: w, height: h, data: (0..h * w).map(|k| (k as f32 + i as f32) * 0.01).collect() },
        }
    }

    fn to_bytes(records: &[DatasetRecord], h: usize, w: usize) -> Vec<u8> {
        let mut wr = DatasetWriter::new(Cursor::new(Vec::new()), h, w).unwrap();
        records.iter().for_each(|r| wr.push(r).unwrap());
        wr.finish().unwrap().into_inner()
    }

    #[test]
    fn roundtrip_bit_exact() {
        let recs: Vec<_> = (0..4).map(|i| record(i, 3, 5)).collect();
        let bytes = to_bytes(&recs, 3, 5);
        assert_eq!(bytes.len() as u64, HEADER_BYTES + 4 * DatasetRecord::byte_len(3, 5));
        let mut reader = DatasetReader::new(&bytes[..]).unwrap();
        let back: Vec<_> = reader.by_ref().map(Result::unwrap).collect();
        reader.expect_end().unwrap();
        assert_eq!(back, recs);
        assert_eq!(to_bytes(&back, 3, 5), bytes);
    }

    #[test]
    fn empty_dataset_roundtrips() {
        let bytes = to_bytes(&[], 4, 4);
        let mut reader = DatasetReader::new(&bytes[..]).unwrap();
        assert_eq!(reader.header.record_count, 0);
        assert!(reader.next().is_none());
    }

    #[test]
    fn truncation_names_the_record() {
        let recs: Vec<_> = (0..3).map(|i| record(i, 2, 2)).collect();
        let bytes = to_bytes(&recs, 2, 2);
        let cut = &bytes[..bytes.len() - 5];
        let err = DatasetReader::new(cut).unwrap().collect::<Result<Vec<_>, _>>().unwrap_err();
        assert!(matches!(err, DatasetError::Truncated { index: 2, .. }), "{err}");
        assert!(err.to_string().contains("record 2"));
    }

    #[test]
    fn bad_header_rejected() {
        let bytes = to_bytes(&[record(0, 2, 2)], 2, 2);
        let mut bad = bytes.clone();
        bad[3] = b'?';
        assert!(matches!(DatasetReader::new(&bad[..]), Err(DatasetError::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(matches!(DatasetReader::new(&bad[..]), Err(DatasetError::Format { offset: 8, .. })));
        assert!(DatasetReader::new(&bytes[..12]).is_err());
        let mut extra = bytes;
        extra.push(1);
        let mut r = DatasetReader::new(&extra[..]).unwrap();
        r.next().unwrap().unwrap();
        assert!(r.expect_end().is_err());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = record_seed(1, 0, 0, 0);
        assert_eq!(a, record_seed(1, 0, 0, 0));
        let all: BTreeSet<u64> = (0..4)
            .flat_map(|g| (0..50).flat_map(move |p| (0..2).map(move |i| record_seed(1, g, p, i))))
            .collect();
        assert_eq!(all.len(), 400);
        assert_ne!(a, record_seed(2, 0, 0, 0));
    }

    fn fake_manifest(poses: usize, grasps: usize, images: usize) -> DatasetManifest {
        let generation = GenerationConfig {
            grid: PoseGridSpec {
                x: AxisGrid::new(0.0, 0.0, 1.0),
                y: AxisGrid::new(0.6, 0.0, 1.0),
                z: AxisGrid::new(0.0, 0.0, 1.0),
                theta: AxisGrid::new(0.0, 0.0, 1.0),
                gamma: AxisGrid::new(0.0, (poses - 1) as f64 * 0.5, 1.0),
            },
            grasps: GraspConfig::default_set().into_iter().take(grasps).collect(),
            images_per_pose: images,
            ..Default::default()
        };
        assert_eq!(generation.grid.pose_count(), poses);
        DatasetManifest {
            format_version: FORMAT_VERSION,
            preprocess: PreprocessSpec::default(),
            poses_per_grasp: poses,
            record_count: poses * grasps * images,
            generation,
            skipped: vec![],
            split: None,
        }
    }

    #[test]
    fn split_counts_and_partition() {
        let m = fake_manifest(3125, 9, 1);
        let plan = SplitPlan::default();
        let s = split(&m, &plan).unwrap();
        assert_eq!(s.unused_poses.len(), 625);
        assert_eq!(s.train_poses.len() + s.test_poses.len(), 2500);
        assert_eq!(s.train_poses.len(), 2000);
        assert_eq!(s.tags.len(), m.record_count);
        assert_eq!(s.count(SplitTag::UnusedGrasp), 3 * 3125);
        assert_eq!(s.count(SplitTag::UnusedPose), 6 * 625);
        assert_eq!(s.count(SplitTag::Train), 6 * 2000);
        let mut all: Vec<u32> = s.unused_poses.iter().chain(&s.train_poses).chain(&s.test_poses).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..3125).collect::<Vec<_>>());
    }

    #[test]
    fn no_held_out_grasps_means_no_unused_grasp_records() {
        let m = fake_manifest(40, 3, 2);
        let plan = SplitPlan { held_out_grasp_ids: vec![], ..Default::default() };
        let s = split(&m, &plan).unwrap();
        assert_eq!(s.count(SplitTag::UnusedGrasp), 0);
        // both images of a pose share a split
        for pair in s.tags.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
    }

    #[test]
    fn split_errors() {
        let m = fake_manifest(10, 2, 1);
        let bad = SplitPlan { unused_pose_fraction: 1.0, held_out_grasp_ids: vec![], ..Default::default() };
        assert!(matches!(split(&m, &bad), Err(DatasetError::InvalidPlan(_))));
        let bad = SplitPlan { held_out_grasp_ids: vec![5], ..Default::default() };
        assert!(matches!(split(&m, &bad), Err(DatasetError::InvalidPlan(_))));
        let empty = SplitPlan { train_fraction: 0.0, held_out_grasp_ids: vec![], ..Default::default() };
        assert!(matches!(split(&m, &empty), Err(DatasetError::EmptyTrain)));
        let all_held = SplitPlan { held_out_grasp_ids: vec![0, 1], ..Default::default() };
        assert!(matches!(split(&m, &all_held), Err(DatasetError::EmptyTrain)));
    }

    #[test]
    fn subsample_nests() {
        let poses: Vec<u32> = (0..2000).map(|i| i * 3 + 1).collect();
        assert_eq!(subsample(&poses, 1.0, 9), poses);
        let quarter = subsample(&poses, 0.25, 9);
        assert_eq!(quarter.len(), 500);
        let half: BTreeSet<u32> = subsample(&poses, 0.5, 9).into_iter().collect();
        let three: BTreeSet<u32> = subsample(&poses, 0.75, 9).into_iter().collect();
        assert!(quarter.iter().all(|p| half.contains(p)));
        assert!(half.is_subset(&three));
    }

    #[test]
    fn full_grid_record_count() {
        let config = GenerationConfig {
            grid: PoseGridSpec::full(&RestConfiguration::default()),
            images_per_pose: 2,
            ..Default::default()
        };
        assert_eq!(config.grid.pose_count(), 41472);
        assert_eq!(config.expected_records(), 746_496);
    }
}
