mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::RunConfig;
use softply::control::{run_closed_loop, CnnEstimator, Estimator, GroundTruthEstimator, HumanTrajectory};
use softply::dataset::{generate, split};
use softply::tinynn::{check_layer_kinds, check_network, LayerKind, NetSpec};
use softply::training::{
    error_report, evaluate, prepare, split_indices, train, write_epoch_log, write_json, Ensemble, PoseRegressor,
    PreparedDataset, SplitIndices, StopReason, TargetNorm,
};

const GRADCHECK_LIMIT: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "softply", version, about = "Synthetic soft-ply perception and follower control")]
struct Cli {
    /// Worker threads for parallel stages; 0 uses every core.
    #[arg(long, global = true, env = "SOFTPLY_JOBS", default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate, render and write a labeled depth-image dataset.
    Gen {
        /// Run configuration (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per ensemble member.
    Train {
        /// Run configuration (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for model files and epoch logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write error statistics for every split of a dataset.
    Eval {
        /// Run configuration (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        estimator: EstimatorArgs,
        #[arg(long)]
        data: PathBuf,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every architecture, data fraction and grasp count.
    Ablate {
        /// Run configuration (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the simulated follower against a human trajectory.
    Closedloop {
        /// Run configuration (JSON); built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        estimator: EstimatorArgs,
        /// Trajectory file (JSON waypoints); defaults to the ramp in the config.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// Per-control-tick CSV log.
        #[arg(long)]
        log: PathBuf,
    },
    /// Finite-difference check of every layer's gradients.
    Gradcheck {
        /// Random networks per layer kind.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also check a whole preset network at this input size.
        #[arg(long, requires = "size")]
        network: Option<String>,
        #[arg(long)]
        size: Option<usize>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EstimatorArgs {
    /// Model file; repeat to average an ensemble.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    /// Use the true deformation state instead of a model.
    #[arg(long)]
    ground_truth: bool,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn indices(cfg: &RunConfig, data: &PreparedDataset) -> Result<SplitIndices> {
    let assignment = split(&data.manifest, &cfg.split_plan())?;
    let t = &cfg.training;
    Ok(split_indices(&assignment, &data.samples.pose_indices, t.schedule.validation_fraction, t.data_fraction, cfg.seeds.split)?)
}

fn cmd_gen(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<()> {
    let manifest = generate(&cfg.generation(), &cfg.preprocess, out, jobs)?;
    println!("{} records, {} skipped poses, in {}", manifest.record_count, manifest.skipped.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path, jobs: usize) -> Result<()> {
    let data = prepare(data_dir, &cfg.preprocess, jobs)?;
    let idx = indices(cfg, &data)?;
    let s = &data.samples;
    let (train_set, val_set) = (s.subset(&idx.train), s.subset(&idx.validation));
    let t = &cfg.training;
    let spec = NetSpec::preset(&t.architecture, cfg.preprocess.out_size)?;
    let norm = TargetNorm::from_grid(&data.manifest.generation.grid);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    info!("{} training and {} validation images", train_set.len(), val_set.len());
    for k in 0..t.ensemble_size {
        let seed = cfg.seeds.training + k as u64;
        let outcome = train(&spec, &train_set, &val_set, &norm, &t.schedule, &t.optimizer, seed)?;
        let model = PoseRegressor::new(&spec, outcome.params, norm, cfg.preprocess)?;
        let path = out.join(format!("member{k}.bin"));
        model.save(&path)?;
        write_epoch_log(&out.join(format!("member{k}_epochs.csv")), &outcome.log)?;
        let stop = match outcome.stop {
            StopReason::SecondPlateau => "second plateau",
            StopReason::MaxEpochs => "epoch cap",
        };
        println!("{}: {} epochs ({stop}), best validation loss {:.6}", path.display(), outcome.log.len(), outcome.best_validation);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, est: &EstimatorArgs, data_dir: &Path, out: &Path, jobs: usize) -> Result<()> {
    let ensemble = if est.ground_truth { None } else { Some(Ensemble::load(&est.models)?) };
    let preprocess = ensemble.as_ref().map_or(&cfg.preprocess, |e| e.preprocess());
    let data = prepare(data_dir, preprocess, jobs)?;
    let idx = indices(cfg, &data)?;
    let mut reports = Vec::new();
    let sets = [
        ("train", &idx.train),
        ("validation", &idx.validation),
        ("test", &idx.test),
        ("unused_pose", &idx.unused_pose),
        ("unused_grasp", &idx.unused_grasp),
    ];
    for (name, set) in sets {
        if set.is_empty() {
            continue;
        }
        let samples = data.samples.subset(set);
        let report = match &ensemble {
            Some(e) => evaluate(e, &samples, name)?,
            None => error_report(name, &samples.labels, &samples.labels)?,
        };
        println!("{name}: {} images, median cartesian error {:.4} m", report.count, report.cartesian.median);
        reports.push(report);
    }
    write_json(out, &reports)?;
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out: &Path, jobs: usize) -> Result<()> {
    let data = prepare(data_dir, &cfg.preprocess, jobs)?;
    let report = softply::training::run_ablation(&data, &cfg.ablation(), &cfg.preprocess, jobs)?;
    let failed = report.cells.iter().filter(|c| matches!(c.outcome, softply::training::CellOutcome::Failed { .. })).count();
    write_json(out, &report)?;
    println!("{} cells, {failed} failed", report.cells.len());
    if failed > 0 {
        bail!("{failed} ablation cells failed; see {}", out.display());
    }
    Ok(())
}

fn cmd_closedloop(cfg: &RunConfig, est: &EstimatorArgs, trajectory: Option<&Path>, log_path: &Path) -> Result<()> {
    let trajectory = match trajectory {
        Some(p) => HumanTrajectory::load(p)?,
        None => cfg.default_trajectory(),
    };
    let mut estimator: Box<dyn Estimator> = if est.ground_truth {
        Box::new(GroundTruthEstimator)
    } else {
        let g = &cfg.generation;
        let grasp = cfg.grasp(cfg.closed_loop.grasp_id).expect("validated");
        Box::new(CnnEstimator::new(Ensemble::load(&est.models)?, &g.camera, g.physics, grasp, g.noise, cfg.seeds.estimator)?)
    };
    match run_closed_loop(estimator.as_mut(), &trajectory, &cfg.loop_config()) {
        Ok(log) => {
            log.write_csv(log_path)?;
            println!("{} control ticks, {} estimator ticks", log.control_ticks, log.estimator_ticks);
            Ok(())
        }
        Err(failure) => {
            failure.partial.write_csv(log_path)?;
            Err(failure.into())
        }
    }
}

fn cmd_gradcheck(instances: usize, eps: f64, seed: u64, network: Option<(&str, usize)>) -> Result<()> {
    let mut reports = check_layer_kinds(&LayerKind::ALL, instances, eps, seed);
    if let Some((name, size)) = network {
        reports.push(check_network(&NetSpec::preset(name, size)?, eps, seed, Some(200))?);
    }
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{:<12} instances {:>3}  checked {:>6}  skipped {:>4}  max rel error {:.3e}", r.name, r.instances, r.checked, r.skipped, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if !(worst <= GRADCHECK_LIMIT) {
        bail!("gradient check failed: {worst:.3e} exceeds {GRADCHECK_LIMIT:e}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    match &cli.command {
        Command::Gen { config, out } => cmd_gen(&load_config(config.as_deref())?, out, jobs),
        Command::Train { config, data, out } => cmd_train(&load_config(config.as_deref())?, data, out, jobs),
        Command::Eval { config, estimator, data, out } => cmd_eval(&load_config(config.as_deref())?, estimator, data, out, jobs),
        Command::Ablate { config, data, out } => cmd_ablate(&load_config(config.as_deref())?, data, out, jobs),
        Command::Closedloop { config, estimator, trajectory, log } => {
            cmd_closedloop(&load_config(config.as_deref())?, estimator, trajectory.as_deref(), log)
        }
        Command::Gradcheck { instances, eps, seed, network, size } => {
            cmd_gradcheck(*instances, *eps, *seed, network.as_deref().zip(*size))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
