//! Episode evaluation and CSV persistence.
//!
//! Turns an [`EpisodeLog`] into summary statistics (RMSE, error CDF,
//! per-step timing percentiles) and saves/loads logs as plain CSV for
//! offline analysis. Feature contents and wall-clock timings are
//! deliberately not persisted — the CSV carries poses, commands and
//! counters, so the same config and seed always writes the same bytes;
//! loaded logs come back with empty feature sets and zero `step_ms`.

use crate::geometry::{wrap_angle, PlanarPose};
use crate::sim::{EpisodeLog, FrameRecord};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("episode log has no frames")]
    EmptyLog,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Summary statistics for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub diverged: bool,
    /// Root-mean-square position error, meters.
    pub rmse_position: f64,
    /// Root-mean-square heading error, radians.
    pub rmse_heading: f64,
    pub mean_position_error: f64,
    /// Largest single-frame position error, meters.
    pub max_error: f64,
    /// `(threshold, fraction of frames with error ≤ threshold)`, one entry
    /// per requested threshold, in the order given.
    pub error_cdf: Vec<(f64, f64)>,
    /// Fraction of frames that produced a consensus measurement.
    pub measurement_rate: f64,
    pub mean_step_ms: f64,
    pub p99_step_ms: f64,
}

/// Evaluates a log against the given CDF thresholds.
pub fn eval_metrics(log: &EpisodeLog, thresholds: &[f64]) -> Result<MetricsReport, MetricsError> {
    if log.frames.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let n = log.frames.len() as f64;
    let pos_errors: Vec<f64> = log.frames.iter().map(|f| f.gt.distance(&f.est)).collect();
    let head_sq: f64 = log
        .frames
        .iter()
        .map(|f| wrap_angle(f.gt.psi() - f.est.psi()).powi(2))
        .sum();
    let pos_sq: f64 = pos_errors.iter().map(|e| e * e).sum();
    let error_cdf = thresholds
        .iter()
        .map(|&thr| {
            let within = pos_errors.iter().filter(|&&e| e <= thr).count();
            (thr, within as f64 / n)
        })
        .collect();
    let measured = log.frames.iter().filter(|f| f.measurement.is_some()).count();

    let mut step_ms: Vec<f64> = log.frames.iter().map(|f| f.step_ms).collect();
    step_ms.sort_by(f64::total_cmp);
    let p99_idx = ((0.99 * n).ceil() as usize).clamp(1, step_ms.len()) - 1;

    Ok(MetricsReport {
        frames: log.frames.len(),
        diverged: log.diverged,
        rmse_position: (pos_sq / n).sqrt(),
        rmse_heading: (head_sq / n).sqrt(),
        mean_position_error: pos_errors.iter().sum::<f64>() / n,
        max_error: pos_errors.iter().copied().fold(0.0, f64::max),
        error_cdf,
        measurement_rate: measured as f64 / n,
        mean_step_ms: step_ms.iter().sum::<f64>() / n,
        p99_step_ms: step_ms[p99_idx],
    })
}

/// One CSV row. Kept in sync with [`FrameRecord`] minus the features.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    frame_id: u32,
    t: f64,
    gt_x: f64,
    gt_y: f64,
    gt_psi: f64,
    est_x: f64,
    est_y: f64,
    est_psi: f64,
    meas_x: Option<f64>,
    meas_y: Option<f64>,
    meas_psi: Option<f64>,
    odom_v: f64,
    odom_gamma: f64,
    v_cmd: f64,
    steer_cmd: f64,
    n_hypotheses: usize,
    n_inliers: usize,
}

/// Writes an episode to CSV, one row per frame. The header row carries a
/// `# seed=…,diverged=…` comment-style first column so a log round-trips
/// through [`load_episode_csv`].
pub fn save_episode_csv(log: &EpisodeLog, path: &Path) -> Result<(), MetricsError> {
    let mut wtr = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    // Episode-level fields live in a single leading record so the format
    // stays one flat file.
    wtr.write_record(["seed", &log.seed.to_string(), "diverged", &log.diverged.to_string()])?;
    for f in &log.frames {
        wtr.serialize(CsvRow {
            frame_id: f.features.frame_id,
            t: f.t,
            gt_x: f.gt.x,
            gt_y: f.gt.y,
            gt_psi: f.gt.psi(),
            est_x: f.est.x,
            est_y: f.est.y,
            est_psi: f.est.psi(),
            meas_x: f.measurement.map(|m| m.x),
            meas_y: f.measurement.map(|m| m.y),
            meas_psi: f.measurement.map(|m| m.psi()),
            odom_v: f.odom.0,
            odom_gamma: f.odom.1,
            v_cmd: f.v_cmd,
            steer_cmd: f.steer_cmd,
            n_hypotheses: f.n_hypotheses,
            n_inliers: f.n_inliers,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads an episode written by [`save_episode_csv`]. Feature sets come
/// back empty (contents are not persisted).
pub fn load_episode_csv(path: &Path) -> Result<EpisodeLog, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut records = rdr.records();
    let header = records.next().ok_or(MetricsError::EmptyLog)??;
    let field = |i: usize, name: &str| -> Result<String, MetricsError> {
        header
            .get(i)
            .map(str::to_owned)
            .ok_or_else(|| MetricsError::Io(std::io::Error::other(format!("missing {name}"))))
    };
    let parse_err =
        |what: &str| MetricsError::Io(std::io::Error::other(format!("bad {what} in header")));
    let seed: u64 = field(1, "seed")?.parse().map_err(|_| parse_err("seed"))?;
    let diverged: bool = field(3, "diverged")?
        .parse()
        .map_err(|_| parse_err("diverged flag"))?;

    // Second line is the column header; deserialize the rest.
    let mut frames = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    for (i, rec) in rdr.records().enumerate() {
        if i < 2 {
            rec?;
            continue;
        }
        let row: CsvRow = rec?.deserialize(None)?;
        let measurement = match (row.meas_x, row.meas_y, row.meas_psi) {
            (Some(x), Some(y), Some(psi)) => Some(PlanarPose::new(x, y, psi)),
            _ => None,
        };
        frames.push(FrameRecord {
            t: row.t,
            gt: PlanarPose::new(row.gt_x, row.gt_y, row.gt_psi),
            est: PlanarPose::new(row.est_x, row.est_y, row.est_psi),
            measurement,
            features: crate::features::FeatureSet::new(row.frame_id, row.t, vec![], vec![], None)
                .expect("empty feature set is valid"),
            odom: (row.odom_v, row.odom_gamma),
            v_cmd: row.v_cmd,
            steer_cmd: row.steer_cmd,
            n_hypotheses: row.n_hypotheses,
            n_inliers: row.n_inliers,
            step_ms: 0.0,
        });
    }
    Ok(EpisodeLog {
        frames,
        diverged,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureSet;
    use approx::assert_abs_diff_eq;

    fn frame(t: f64, gt: PlanarPose, est: PlanarPose, step_ms: f64) -> FrameRecord {
        FrameRecord {
            t,
            gt,
            est,
            measurement: if t > 0.0 { Some(est) } else { None },
            features: FeatureSet::new((t / 0.1) as u32, t, vec![], vec![], None).unwrap(),
            odom: (1.0, 0.02),
            v_cmd: 1.0,
            steer_cmd: -0.05,
            n_hypotheses: 10,
            n_inliers: 42,
            step_ms,
        }
    }

    fn sample_log() -> EpisodeLog {
        // Position errors: 0.0, 0.1, 0.2, 0.3, 0.4 (along +x), one
        // wrapped heading discrepancy on the second frame.
        let frames = vec![
            frame(0.0, PlanarPose::new(0.0, 0.0, 0.0), PlanarPose::new(0.0, 0.0, 0.0), 5.0),
            frame(0.1, PlanarPose::new(1.0, 0.0, 3.1), PlanarPose::new(1.1, 0.0, -3.1), 7.0),
            frame(0.2, PlanarPose::new(2.0, 0.0, 0.0), PlanarPose::new(2.2, 0.0, 0.0), 6.0),
            frame(0.3, PlanarPose::new(3.0, 1.0, 0.0), PlanarPose::new(3.3, 1.0, 0.0), 9.0),
            frame(0.4, PlanarPose::new(4.0, 1.0, 0.0), PlanarPose::new(4.4, 1.0, 0.0), 8.0),
        ];
        EpisodeLog {
            frames,
            diverged: false,
            seed: 77,
        }
    }

    #[test]
    fn report_matches_hand_computed_values() {
        let log = sample_log();
        let report = eval_metrics(&log, &[0.05, 0.25, 1.0]).unwrap();
        assert_eq!(report.frames, 5);
        assert!(!report.diverged);
        // RMSE over {0, .1, .2, .3, .4}: sqrt(0.30/5).
        assert_abs_diff_eq!(report.rmse_position, (0.30f64 / 5.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_position_error, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(report.max_error, 0.4, epsilon = 1e-12);
        // Heading error only on frame 1: 3.1 − (−3.1) wraps to −0.08319.
        let dh = wrap_angle(6.2);
        assert_abs_diff_eq!(report.rmse_heading, (dh * dh / 5.0).sqrt(), epsilon = 1e-12);
        assert_eq!(report.error_cdf.len(), 3);
        assert_abs_diff_eq!(report.error_cdf[0].1, 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(report.error_cdf[1].1, 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(report.error_cdf[2].1, 1.0, epsilon = 1e-12);
        // Frame 0 carries no measurement.
        assert_abs_diff_eq!(report.measurement_rate, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_step_ms, 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.p99_step_ms, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_log_is_an_error() {
        let log = EpisodeLog::default();
        assert!(matches!(eval_metrics(&log, &[0.1]), Err(MetricsError::EmptyLog)));
    }

    #[test]
    fn perfect_tracking_scores_zero_error() {
        let pose = |i: f64| PlanarPose::new(i, 0.5, 0.1 * i);
        let frames: Vec<_> = (0..4)
            .map(|i| frame(0.1 * i as f64, pose(i as f64), pose(i as f64), 1.0))
            .collect();
        let log = EpisodeLog { frames, diverged: false, seed: 1 };
        let report = eval_metrics(&log, &[0.06, 0.10]).unwrap();
        assert_eq!(report.rmse_position, 0.0);
        assert_eq!(report.rmse_heading, 0.0);
        assert_eq!(report.mean_position_error, 0.0);
        assert_eq!(report.max_error, 0.0);
        assert!(report.error_cdf.iter().all(|&(_, frac)| frac == 1.0));
    }

    #[test]
    fn constant_offset_reads_back_as_rmse() {
        // Every estimate sits 0.3 m to the left of truth.
        let frames: Vec<_> = (0..6)
            .map(|i| {
                let gt = PlanarPose::new(i as f64, 0.0, 0.0);
                frame(0.1 * i as f64, gt, PlanarPose::new(i as f64, 0.3, 0.0), 1.0)
            })
            .collect();
        let log = EpisodeLog { frames, diverged: false, seed: 2 };
        let report = eval_metrics(&log, &[0.1, 0.3]).unwrap();
        assert_abs_diff_eq!(report.rmse_position, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_position_error, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(report.max_error, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(report.error_cdf[0].1, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.error_cdf[1].1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_roundtrip_preserves_log_content() {
        let log = sample_log();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episode.csv");
        save_episode_csv(&log, &path).unwrap();
        let loaded = load_episode_csv(&path).unwrap();
        assert_eq!(loaded.seed, 77);
        assert!(!loaded.diverged);
        assert_eq!(loaded.frames.len(), log.frames.len());
        // Exact float round-trip, including the absent measurement.
        // Wall-clock timings are not persisted and come back zeroed.
        for (a, b) in log.frames.iter().zip(&loaded.frames) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.gt, b.gt);
            assert_eq!(a.est, b.est);
            assert_eq!(a.measurement, b.measurement);
            assert_eq!(a.odom, b.odom);
            assert_eq!(a.v_cmd, b.v_cmd);
            assert_eq!(a.steer_cmd, b.steer_cmd);
            assert_eq!(a.n_hypotheses, b.n_hypotheses);
            assert_eq!(a.n_inliers, b.n_inliers);
            assert_eq!(b.step_ms, 0.0);
            assert_eq!(a.features.frame_id, b.features.frame_id);
            assert!(b.features.is_empty());
        }
        // Evaluation of the reloaded log matches the original on every
        // non-timing statistic.
        let thr = [0.05, 0.25, 1.0];
        let mut orig = eval_metrics(&log, &thr).unwrap();
        orig.mean_step_ms = 0.0;
        orig.p99_step_ms = 0.0;
        assert_eq!(orig, eval_metrics(&loaded, &thr).unwrap());
    }
}
