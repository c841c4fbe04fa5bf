//! Scratch calibration probe — not part of the suite, deleted before release.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retloc::fusion::{train_from_dataset, GmmParams};
use retloc::mapdb::MapDatabase;
use retloc::posest::HypothesisConfig;
use retloc::sim::{
    render, run_augmentation_experiment, run_closed_loop, run_mapping, run_open_loop,
    EpisodeConfig, EpisodeLog, SensorNoise, SteerDisturbance, World,
};
use retloc::vocab::{kmeans_fit, KMEANS_MAX_ITER, VOCAB_K};

fn sparse(gamma_bias: f64, dropout: f64, range: f64) -> SensorNoise {
    SensorNoise {
        gamma_bias,
        dropout_prob: dropout,
        max_range: Some(range),
        ..SensorNoise::sparse()
    }
}

fn trained(world: &World, spacing: f64, noise: &SensorNoise) -> (MapDatabase, GmmParams) {
    let (intr, mounting) = World::default_rig();
    let run = run_mapping(world, &intr, &mounting, 1, spacing, noise, 0.5, world.seed);
    let mut descriptors = Vec::new();
    for (fs, _) in run.mapping_frames.iter().step_by(2) {
        descriptors.extend_from_slice(fs.descriptors());
    }
    let vocab = kmeans_fit(&descriptors, VOCAB_K, KMEANS_MAX_ITER, world.seed).unwrap();
    let (db, _) =
        MapDatabase::build(vocab, &run.mapping_frames, intr, mounting, 10, "probe").unwrap();
    let params =
        train_from_dataset(&run.training_frames, &db, 10, &HypothesisConfig::default()).unwrap();
    (db, params)
}

fn rmse(log: &EpisodeLog) -> f64 {
    let sq: f64 = log.frames.iter().map(|f| f.gt.distance(&f.est).powi(2)).sum();
    (sq / log.frames.len() as f64).sqrt()
}

fn meas_rate(log: &EpisodeLog) -> f64 {
    log.frames.iter().filter(|f| f.measurement.is_some()).count() as f64 / log.frames.len() as f64
}

#[test]
fn probe_census() {
    let (intr, mounting) = World::default_rig();
    for (n, range) in [(2000usize, 3.0), (1000, 3.0), (700, 3.0), (700, 2.5), (500, 3.0)] {
        let world = World::generate(7, n);
        let noise = sparse(0.10, 0.0, range);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = Vec::new();
        let l = world.track.length();
        let steps = 200;
        for k in 0..steps {
            let pose = world.track.pose_at(l * k as f64 / steps as f64);
            let fs = render(
                &world, &pose, &intr, &mounting, &noise, &mut rng, false, k as u32, 0.0,
            );
            counts.push(fs.len());
        }
        counts.sort_unstable();
        println!(
            "CENSUS n={n} r={range}: min {} p10 {} med {} mean {:.1} max {}",
            counts[0],
            counts[steps / 10],
            counts[steps / 2],
            counts.iter().sum::<usize>() as f64 / steps as f64,
            counts[steps - 1]
        );
    }
}

#[test]
fn probe_sparse_degradation() {
    for (laps, dropout, gamma) in [(2usize, 0.20, 0.06), (3, 0.20, 0.05)] {
        let n = 2000usize;
        let noise = sparse(gamma, dropout, 2.5);
        let mut worse = 0;
        for seed in [41u64, 42, 43, 44, 45, 46, 47, 48, 49, 50] {
            let world = World::generate(seed, n);
            let (db, params) = trained(&world, 0.4, &noise);
            let cfg = EpisodeConfig {
                laps,
                seed,
                ..EpisodeConfig::default()
            };
            let open = run_open_loop(&world, &db, &params, &noise, &cfg);
            let closed = run_closed_loop(&world, &db, &params, &noise, &cfg);
            let (ro, rc) = (rmse(&open), rmse(&closed));
            if closed.diverged || rc > ro {
                worse += 1;
            }
            println!(
                "SPARSE l={laps} do={dropout} g={gamma} seed {seed}: entries {} open {ro:.4} (meas {:.2}) closed {rc:.4} (meas {:.2}) div {}",
                db.len(),
                meas_rate(&open),
                meas_rate(&closed),
                closed.diverged
            );
        }
        println!("SPARSE l={laps} do={dropout} g={gamma}: closed worse in {worse}/10");
    }
}

#[test]
fn probe_augmentation() {
    for (amp, period, aug_laps) in [(0.32, 2.5, 2usize)] {
        let d = SteerDisturbance { amplitude: amp, period };
        let noise = sparse(0.05, 0.20, 2.5);
        let (mut befores, mut afters) = (Vec::new(), Vec::new());
        let (mut spikes_b, mut spikes_a) = (0usize, 0usize);
        for seed in [56u64, 57, 58, 59, 60, 61, 62, 63] {
            let world = World::generate(seed, 2000);
            let (db, params) = trained(&world, 0.4, &noise);
            let cfg = EpisodeConfig {
                laps: 2,
                seed,
                disturbance: Some(d),
                ..EpisodeConfig::default()
            };
            let out = run_augmentation_experiment(&world, &db, &params, &noise, &cfg, d, aug_laps)
                .unwrap();
            let med = |log: &EpisodeLog| {
                let mut e: Vec<f64> = log.frames.iter().map(|f| f.gt.distance(&f.est)).collect();
                e.sort_by(f64::total_cmp);
                e[e.len() / 2]
            };
            let spikes = |log: &EpisodeLog| {
                let m = med(log);
                log.frames.iter().filter(|f| f.gt.distance(&f.est) > 3.0 * m).count()
            };
            println!(
                "AUG amp={amp} p={period} al={aug_laps} seed {seed}: before {:.4} (med {:.4} spk {}) after {:.4} (med {:.4} spk {}) div {}/{}",
                rmse(&out.before),
                med(&out.before),
                spikes(&out.before),
                rmse(&out.after),
                med(&out.after),
                spikes(&out.after),
                out.before.diverged,
                out.after.diverged,
            );
            befores.push(rmse(&out.before));
            afters.push(rmse(&out.after));
            spikes_b += spikes(&out.before);
            spikes_a += spikes(&out.after);
        }
        befores.sort_by(f64::total_cmp);
        afters.sort_by(f64::total_cmp);
        println!(
            "AUG amp={amp} p={period} al={aug_laps}: median before {:.4} after {:.4}, spikes {} -> {}",
            befores[befores.len() / 2],
            afters[afters.len() / 2],
            spikes_b,
            spikes_a
        );
    }
}
