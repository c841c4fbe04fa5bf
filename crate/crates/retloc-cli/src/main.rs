//! Command-line front end: builds the retrieval artifacts from a JSON
//! config, runs simulated localization episodes, and evaluates logs.
//!
//! The artifact pipeline is deterministic in the config seed: every
//! command regenerates the same synthetic world and mapping drive, so
//! `build-vocab`, `build-map` and `train-gmm` compose without hidden
//! state. Exit codes: 0 success, 2 bad usage or config, 3 data error,
//! 4 failed quality assertion.

use clap::{Parser, Subcommand, ValueEnum};
use retloc::config::PipelineConfig;
use retloc::fusion::{train_from_dataset, GmmParams, OdometryInput};
use retloc::io::{load_feature_log, load_vocabulary, save_feature_log, save_vocabulary};
use retloc::mapdb::MapDatabase;
use retloc::metrics::{eval_metrics, load_episode_csv, save_episode_csv};
use retloc::pipeline::{Localizer, LocalizerConfig};
use retloc::posest::HypothesisConfig;
use retloc::sim::{
    run_augmentation_experiment, run_closed_loop, run_mapping, run_open_loop, EpisodeLog,
    MappingRun, SensorNoise, SteerDisturbance, World, SIM_DT,
};
use retloc::vocab::kmeans_fit;
use serde::{Deserialize, Serialize};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "retloc", version, about = "Retrieval-based monocular localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Controller follows ground truth; the localizer runs passively.
    OpenLoop,
    /// Controller follows the localization estimate.
    ClosedLoop,
    /// Closed-loop baseline, disturbance drive merged into the map,
    /// closed-loop rerun on the augmented map.
    Augmentation,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseProfile {
    Zero,
    Moderate,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the visual vocabulary from the synthetic mapping drive.
    BuildVocab {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output vocabulary file.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the map database from the mapping drive.
    BuildMap {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary produced by `build-vocab`.
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the measurement-model parameters on the held-out split.
    TrainGmm {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Map database produced by `build-map`.
        #[arg(long)]
        map: PathBuf,
        /// Output parameter file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a localization episode and write it as CSV.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        map: PathBuf,
        /// Parameters produced by `train-gmm`.
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Episode CSV; augmentation mode additionally writes
        /// `<out>.after.csv` and `<out>.drive.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured lap count.
        #[arg(long)]
        laps: Option<usize>,
        /// Overrides the configured sensor noise.
        #[arg(long, value_enum)]
        noise_profile: Option<NoiseProfile>,
        /// Sinusoidal steering disturbance amplitude, radians.
        #[arg(long)]
        disturbance_amp: Option<f64>,
        /// Disturbance period, seconds.
        #[arg(long)]
        disturbance_period: Option<f64>,
        /// Laps driven for the augmentation recording.
        #[arg(long, default_value_t = 1)]
        aug_laps: usize,
        /// Also record the rendered features for `localize` replay.
        #[arg(long)]
        features_out: Option<PathBuf>,
    },
    /// Replay a recorded feature log against a map, frame by frame.
    Localize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        map: PathBuf,
        /// Parameters produced by `train-gmm`.
        #[arg(long)]
        gmm: PathBuf,
        /// Feature log written by `simulate --features-out`.
        #[arg(long)]
        features: PathBuf,
        /// Episode CSV supplying per-frame odometry; the vehicle is
        /// treated as stationary when absent.
        #[arg(long)]
        odometry: Option<PathBuf>,
        /// Per-frame estimate CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize an episode CSV, optionally asserting quality gates.
    Eval {
        #[arg(long)]
        episode: PathBuf,
        /// Error-CDF thresholds, meters (repeatable).
        #[arg(long = "threshold")]
        thresholds: Vec<f64>,
        /// Fail (exit 4) if position RMSE exceeds this, meters.
        #[arg(long)]
        max_rmse: Option<f64>,
        /// Fail (exit 4) if any frame's position error exceeds this.
        #[arg(long)]
        max_error: Option<f64>,
    },
}

/// Failures mapped to exit codes.
enum Failure {
    Config(String),
    Data(String),
    Assertion(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Assertion(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Data(m) | Failure::Assertion(m) => m,
        }
    }
}

fn config_err(e: impl Display) -> Failure {
    Failure::Config(e.to_string())
}

fn data_err(e: impl Display) -> Failure {
    Failure::Data(e.to_string())
}

/// Trained parameters as stored on disk, with provenance.
#[derive(Serialize, Deserialize)]
struct TrainedParams {
    seed: u64,
    params: GmmParams,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("RETLOC_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).map_err(config_err)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mapping_drive(cfg: &PipelineConfig) -> (World, MappingRun) {
    let world = World::generate(cfg.seed, cfg.world.n_landmarks);
    let (intr, mounting) = World::default_rig();
    let run = run_mapping(
        &world,
        &intr,
        &mounting,
        cfg.mapping.laps,
        cfg.mapping.spacing,
        &cfg.noise,
        cfg.mapping.mapping_fraction,
        cfg.seed,
    );
    (world, run)
}

fn write_episode(log: &EpisodeLog, path: &Path) -> Result<(), Failure> {
    save_episode_csv(log, path).map_err(data_err)?;
    let report = eval_metrics(log, &[0.06, 0.10]).map_err(data_err)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(data_err)?
    );
    Ok(())
}

fn write_feature_log(log: &EpisodeLog, path: &Option<PathBuf>) -> Result<(), Failure> {
    if let Some(p) = path {
        let frames: Vec<_> = log.frames.iter().map(|f| f.features.clone()).collect();
        save_feature_log(&frames, p).map_err(data_err)?;
    }
    Ok(())
}

/// One `localize` output row: the estimate and diagnostics for a replayed
/// frame (there is no ground truth in a feature log).
#[derive(Serialize)]
struct ReplayRow {
    frame_id: u32,
    t: f64,
    est_x: f64,
    est_y: f64,
    est_psi: f64,
    meas_x: Option<f64>,
    meas_y: Option<f64>,
    meas_psi: Option<f64>,
    n_hypotheses: usize,
    n_inliers: usize,
    dead_reckoned: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::BuildVocab { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let (_, run) = mapping_drive(&cfg);
            // Every 8th frame is plenty for a stable vocabulary.
            let mut descriptors = Vec::new();
            for (fs, _) in run.mapping_frames.iter().step_by(8) {
                descriptors.extend_from_slice(fs.descriptors());
            }
            let vocab = kmeans_fit(
                &descriptors,
                cfg.vocabulary_k,
                cfg.kmeans_max_iter,
                cfg.seed,
            )
            .map_err(data_err)?;
            save_vocabulary(&vocab, &out).map_err(data_err)?;
            println!(
                "vocabulary: k={} fitted on {} descriptors (seed {}) -> {}",
                cfg.vocabulary_k,
                descriptors.len(),
                cfg.seed,
                out.display()
            );
            Ok(())
        }
        Command::BuildMap {
            config,
            vocab,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let vocab = load_vocabulary(&vocab).map_err(data_err)?;
            let (_, run) = mapping_drive(&cfg);
            let (intr, mounting) = World::default_rig();
            let creation = format!(
                "retloc build-map seed={} spacing={} laps={} landmarks={}",
                cfg.seed, cfg.mapping.spacing, cfg.mapping.laps, cfg.world.n_landmarks
            );
            let (db, report) = MapDatabase::build(
                vocab,
                &run.mapping_frames,
                intr,
                mounting,
                cfg.knn_k,
                &creation,
            )
            .map_err(data_err)?;
            db.save(&out).map_err(data_err)?;
            println!(
                "map: {} entries ({} frames skipped, {} features dropped) -> {}",
                report.entries_built,
                report.frames_skipped,
                report.features_dropped,
                out.display()
            );
            Ok(())
        }
        Command::TrainGmm {
            config,
            map,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let db = MapDatabase::load(&map).map_err(data_err)?;
            let (_, run) = mapping_drive(&cfg);
            let params = train_from_dataset(
                &run.training_frames,
                &db,
                db.knn_k(),
                &HypothesisConfig::default(),
            )
            .map_err(data_err)?;
            let trained = TrainedParams {
                seed: cfg.seed,
                params,
            };
            std::fs::write(
                &out,
                serde_json::to_string_pretty(&trained).map_err(data_err)?,
            )
            .map_err(data_err)?;
            println!(
                "gmm: fitted on {} held-out frames (seed {}) -> {}",
                run.training_frames.len(),
                cfg.seed,
                out.display()
            );
            Ok(())
        }
        Command::Simulate {
            config,
            map,
            gmm,
            mode,
            out,
            seed,
            laps,
            noise_profile,
            disturbance_amp,
            disturbance_period,
            aug_laps,
            features_out,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(l) = laps {
                cfg.episode.laps = l;
            }
            if let Some(p) = noise_profile {
                cfg.noise = match p {
                    NoiseProfile::Zero => SensorNoise::zero(),
                    NoiseProfile::Moderate => SensorNoise::moderate(),
                };
            }
            let disturbance = match (disturbance_amp, disturbance_period) {
                (Some(a), Some(t)) => Some(SteerDisturbance {
                    amplitude: a,
                    period: t,
                }),
                (Some(a), None) => Some(SteerDisturbance {
                    amplitude: a,
                    period: 3.0,
                }),
                (None, Some(_)) => {
                    return Err(Failure::Config(
                        "--disturbance-period requires --disturbance-amp".into(),
                    ))
                }
                (None, None) => None,
            };

            let db = MapDatabase::load(&map).map_err(data_err)?;
            let trained: TrainedParams = serde_json::from_str(
                &std::fs::read_to_string(&gmm).map_err(data_err)?,
            )
            .map_err(data_err)?;
            let world = World::generate(cfg.seed, cfg.world.n_landmarks);
            let mut ep = cfg.episode_config(None);
            if let Some(d) = disturbance {
                ep.disturbance = Some(d);
            }

            match mode {
                Mode::OpenLoop => {
                    let log = run_open_loop(&world, &db, &trained.params, &cfg.noise, &ep);
                    write_feature_log(&log, &features_out)?;
                    write_episode(&log, &out)
                }
                Mode::ClosedLoop => {
                    let log = run_closed_loop(&world, &db, &trained.params, &cfg.noise, &ep);
                    write_feature_log(&log, &features_out)?;
                    write_episode(&log, &out)
                }
                Mode::Augmentation => {
                    let d = disturbance.unwrap_or(SteerDisturbance {
                        amplitude: 0.25,
                        period: 3.0,
                    });
                    // Both closed-loop runs face the same disturbance; the
                    // comparison isolates the effect of the extra map entries.
                    ep.disturbance = Some(d);
                    let outcome = run_augmentation_experiment(
                        &world,
                        &db,
                        &trained.params,
                        &cfg.noise,
                        &ep,
                        d,
                        aug_laps,
                    )
                    .map_err(data_err)?;
                    write_feature_log(&outcome.before, &features_out)?;
                    save_episode_csv(&outcome.before, &out).map_err(data_err)?;
                    save_episode_csv(&outcome.after, &out.with_extension("after.csv"))
                        .map_err(data_err)?;
                    save_episode_csv(&outcome.drive, &out.with_extension("drive.csv"))
                        .map_err(data_err)?;
                    let before = eval_metrics(&outcome.before, &[0.06, 0.10]).map_err(data_err)?;
                    let after = eval_metrics(&outcome.after, &[0.06, 0.10]).map_err(data_err)?;
                    println!(
                        "{}",
                        serde_json::to_string_pretty(&serde_json::json!({
                            "map_entries_before": db.len(),
                            "map_entries_after": outcome.augmented_db.len(),
                            "before": before,
                            "after": after,
                        }))
                        .map_err(data_err)?
                    );
                    Ok(())
                }
            }
        }
        Command::Localize {
            config,
            map,
            gmm,
            features,
            odometry,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let db = MapDatabase::load(&map).map_err(data_err)?;
            let trained: TrainedParams = serde_json::from_str(
                &std::fs::read_to_string(&gmm).map_err(data_err)?,
            )
            .map_err(data_err)?;
            let frames = load_feature_log(&features).map_err(data_err)?;
            let odom: Option<Vec<(f64, f64)>> = match &odometry {
                Some(p) => {
                    let ep = load_episode_csv(p).map_err(data_err)?;
                    if ep.frames.len() != frames.len() {
                        return Err(Failure::Data(format!(
                            "odometry has {} frames, feature log has {}",
                            ep.frames.len(),
                            frames.len()
                        )));
                    }
                    Some(ep.frames.iter().map(|f| f.odom).collect())
                }
                None => None,
            };

            let mut loc = Localizer::new(
                db,
                trained.params,
                LocalizerConfig {
                    seed: cfg.seed,
                    ..LocalizerConfig::default()
                },
            );
            let mut wtr = csv::Writer::from_path(&out).map_err(data_err)?;
            let mut measured = 0usize;
            let mut prev_t: Option<f64> = None;
            for (i, fs) in frames.iter().enumerate() {
                let dt = prev_t
                    .map(|p| fs.timestamp - p)
                    .filter(|d| *d > 0.0)
                    .unwrap_or(SIM_DT);
                prev_t = Some(fs.timestamp);
                let (v, g) = odom.as_ref().map_or((0.0, 0.0), |o| o[i]);
                let u = OdometryInput::new(v, g, dt, cfg.noise.v_bounds, cfg.noise.gamma_bounds)
                    .map_err(data_err)?;
                let (est, diag) = loc.localize_frame(fs, &u);
                measured += usize::from(diag.measurement.is_some());
                wtr.serialize(ReplayRow {
                    frame_id: fs.frame_id,
                    t: fs.timestamp,
                    est_x: est.x,
                    est_y: est.y,
                    est_psi: est.psi(),
                    meas_x: diag.measurement.map(|m| m.x),
                    meas_y: diag.measurement.map(|m| m.y),
                    meas_psi: diag.measurement.map(|m| m.psi()),
                    n_hypotheses: diag.n_hypotheses,
                    n_inliers: diag.n_inliers,
                    dead_reckoned: diag.dead_reckoned,
                })
                .map_err(data_err)?;
            }
            wtr.flush().map_err(data_err)?;
            println!(
                "localized {} frames ({} with measurements) -> {}",
                frames.len(),
                measured,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            episode,
            thresholds,
            max_rmse,
            max_error,
        } => {
            let log = load_episode_csv(&episode).map_err(data_err)?;
            let thresholds = if thresholds.is_empty() {
                vec![0.06, 0.10]
            } else {
                thresholds
            };
            let report = eval_metrics(&log, &thresholds).map_err(data_err)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(data_err)?
            );
            if let Some(m) = max_rmse {
                if report.rmse_position > m {
                    return Err(Failure::Assertion(format!(
                        "rmse {} exceeds bound {m}",
                        report.rmse_position
                    )));
                }
            }
            if let Some(m) = max_error {
                if report.max_error > m {
                    return Err(Failure::Assertion(format!(
                        "max error {} exceeds bound {m}",
                        report.max_error
                    )));
                }
            }
            Ok(())
        }
    }
}
