use std::fs;
use std::path::Path;

use softply::control::{run_closed_loop, CnnEstimator, GroundTruthEstimator, HumanTrajectory, LoopConfig};
use softply::dataset::{generate, read_dataset, split, write_dataset, DatasetError, GenerationConfig, SplitPlan, SplitTag};
use softply::geometry::{enumerate_grid, AxisGrid, PoseGridSpec, RestConfiguration};
use softply::plysim::GraspConfig;
use softply::preprocess::PreprocessSpec;
use softply::tinynn::{NetSpec, OptimizerSpec};
use softply::training::{
    evaluate, prepare, split_indices, train, Ensemble, PoseRegressor, TargetNorm, TrainSchedule,
};

fn tiny_config() -> GenerationConfig {
    let rest = RestConfiguration::default().desired;
    GenerationConfig {
        grid: PoseGridSpec {
            x: AxisGrid::new(rest.x, 0.05, 0.05),
            y: AxisGrid::new(rest.y, 0.0, 1.0),
            z: AxisGrid::new(rest.z, 0.0, 1.0),
            theta: AxisGrid::new(rest.theta, 0.0, 1.0),
            gamma: AxisGrid::new(rest.gamma, 10f64.to_radians(), 10f64.to_radians()),
        },
        grasps: GraspConfig::default_set().into_iter().take(2).collect(),
        images_per_pose: 2,
        ..Default::default()
    }
}

fn small_preprocess() -> PreprocessSpec {
    PreprocessSpec { out_size: 16, ..Default::default() }
}

#[test]
fn generate_is_deterministic_and_labels_are_grid_poses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let m = generate(&cfg, &small_preprocess(), &a, 1).unwrap();
    generate(&cfg, &small_preprocess(), &b, 0).unwrap();
    assert_eq!(m.record_count, 9 * 2 * 2);
    assert_eq!(m.record_count, cfg.expected_records());
    assert!(m.skipped.is_empty());
    for f in ["dataset.bin", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (header, records) = read_dataset(&a.join("dataset.bin")).unwrap();
    assert_eq!(header.record_count, 36);
    let poses = enumerate_grid(&cfg.grid).unwrap();
    for (r, key) in records.iter().zip(m.record_keys()) {
        assert_eq!(r.grasp_id, key.grasp_id);
        let want = poses[key.pose_index as usize].to_array().map(|v| v as f32);
        assert_eq!(r.label.map(f32::to_bits), want.map(f32::to_bits));
        assert!(r.depth.valid_count() > 1000);
    }
    // the two images of a pose differ only by noise
    assert_ne!(records[0].depth, records[1].depth);
    assert_ne!(records[0].noise_seed, records[1].noise_seed);
    let copy = dir.path().join("copy.bin");
    write_dataset(&copy, header.height, header.width, &records).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(a.join("dataset.bin")).unwrap());
}

#[test]
fn single_pose_single_image() {
    let dir = tempfile::tempdir().unwrap();
    let rest = RestConfiguration::default();
    let cfg = GenerationConfig {
        grid: PoseGridSpec::around(&rest, 0.0, 1.0, 0.0, 1.0),
        grasps: vec![GraspConfig::new(4, -0.3, 0.3)],
        ..Default::default()
    };
    let m = generate(&cfg, &small_preprocess(), dir.path(), 1).unwrap();
    assert_eq!(m.record_count, 1);
    let (_, records) = read_dataset(&dir.path().join("dataset.bin")).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].grasp_id, 4);
}

#[test]
fn corrupted_dataset_reports_location() {
    let dir = tempfile::tempdir().unwrap();
    let rest = RestConfiguration::default();
    let cfg = GenerationConfig { grid: PoseGridSpec::around(&rest, 0.0, 1.0, 0.0, 1.0), ..Default::default() };
    generate(&cfg, &small_preprocess(), dir.path(), 1).unwrap();
    let path = dir.path().join("dataset.bin");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
    let err = read_dataset(&path).unwrap_err();
    assert!(matches!(err, DatasetError::Truncated { index: 8, .. }), "{err}");
    assert!(prepare(dir.path(), &small_preprocess(), 1).is_err());
}

fn train_tiny(root: &Path) -> (PoseRegressor, softply::training::PreparedDataset, Vec<usize>) {
    let cfg = tiny_config();
    generate(&cfg, &small_preprocess(), root, 1).unwrap();
    let data = prepare(root, &small_preprocess(), 1).unwrap();
    let plan = SplitPlan { unused_pose_fraction: 0.2, train_fraction: 0.8, held_out_grasp_ids: vec![1], seed: 3 };
    let assignment = split(&data.manifest, &plan).unwrap();
    assert_eq!(assignment.count(SplitTag::UnusedGrasp), 18);
    let idx = split_indices(&assignment, &data.samples.pose_indices, 0.2, 1.0, 3).unwrap();
    assert!(!idx.train.is_empty() && !idx.validation.is_empty());
    let spec = NetSpec::preset("conv-small", 16).unwrap();
    let norm = TargetNorm::from_grid(&cfg.grid);
    let sched = TrainSchedule { initial_lr: 1e-3, max_epochs: 4, ..Default::default() };
    let opt = OptimizerSpec { batch_size: 4, ..Default::default() };
    let s = &data.samples;
    let out = train(&spec, &s.subset(&idx.train), &s.subset(&idx.validation), &norm, &sched, &opt, 5).unwrap();
    assert_eq!(out.log.len(), 4);
    let model = PoseRegressor::new(&spec, out.params, norm, small_preprocess()).unwrap();
    let unused = idx.unused_grasp.clone();
    (model, data, unused)
}

#[test]
fn train_evaluate_and_close_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let (model, data, unused) = train_tiny(dir.path());
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let ensemble = Ensemble::load(&[&path]).unwrap();
    let report = evaluate(&ensemble, &data.samples.subset(&unused), "unused_grasp").unwrap();
    assert_eq!(report.count, 18);
    assert!(report.axes.iter().all(|a| a.absolute.q1 <= a.absolute.median && a.absolute.median <= a.absolute.q3));

    let gen = tiny_config();
    let loop_cfg = LoopConfig { duration_s: 0.5, ..Default::default() };
    let trajectory = HumanTrajectory::ramp_x(&RestConfiguration::default(), 0.02, 0.02);
    let run = |ens: Ensemble| {
        let mut est = CnnEstimator::new(ens, &gen.camera, gen.physics, &gen.grasps[0], gen.noise, 9).unwrap();
        run_closed_loop(&mut est, &trajectory, &loop_cfg).unwrap()
    };
    let a = run(ensemble.clone());
    let b = run(ensemble);
    assert_eq!(a.control_ticks, 10);
    assert_eq!(a.estimator_ticks, 15);
    assert_eq!(a.to_csv(), b.to_csv());
    let gt = run_closed_loop(&mut GroundTruthEstimator, &trajectory, &loop_cfg).unwrap();
    assert_eq!(gt.rows[0].estimate, gt.rows[0].true_state);
}
