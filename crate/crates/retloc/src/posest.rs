//! Pairwise relative pose estimation and global pose hypotheses.
//!
//! For each retrieved map entry, the query image is matched against the
//! entry's features; the entry's camera-frame 3-d points and the query's
//! 2-d observations feed a P3P-RANSAC solve (with a fourth sample point to
//! disambiguate the up-to-four minimal solutions), followed by a
//! Levenberg–Marquardt polish on the inliers. Solutions that survive the
//! field-of-view gate are composed with the entry's global pose into
//! [`PoseHypothesis`] values; [`robust_average`] fuses the per-entry
//! hypotheses into one measurement for the filter.

mod p3p;

use crate::features::{match_bruteforce, FeatureSet};
use crate::geometry::{
    camera_to_planar, planar_to_camera, wrap_angle, CameraIntrinsics, MountingTransform,
    PlanarPose, RigidTransform3,
};
use crate::mapdb::MapDatabase;
use nalgebra::{Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// RANSAC and refinement parameters for [`solve_pnp_ransac`].
#[derive(Clone, Copy, Debug)]
pub struct RansacConfig {
    /// Hard cap on RANSAC iterations.
    pub max_iters: usize,
    /// Early-exit confidence for the adaptive iteration count.
    pub confidence: f64,
    /// Reprojection error below which a correspondence counts as an inlier.
    pub reproj_threshold_px: f64,
    /// Minimum inlier count for a solve to succeed.
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            confidence: 0.99,
            reproj_threshold_px: 3.0,
            min_inliers: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("PnP needs at least 4 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("no consensus: best model had {best} inliers, {needed} required")]
    NoConsensus { best: usize, needed: usize },
    #[error("3-d points ({points3d}) and 2-d observations ({points2d}) must be parallel lists")]
    MismatchedInputs { points3d: usize, points2d: usize },
}

/// A successful PnP solve.
#[derive(Clone, Debug)]
pub struct PnPResult {
    /// Rigid transform taking reference-camera coordinates to query-camera
    /// coordinates.
    pub relative: RigidTransform3,
    /// Indices (into the input correspondence list) of the RANSAC inliers.
    pub inlier_indices: Vec<usize>,
    /// Root-mean-square reprojection error of the refined pose over the
    /// inliers, in pixels.
    pub reprojection_rmse: f64,
}

impl PnPResult {
    pub fn inlier_count(&self) -> usize {
        self.inlier_indices.len()
    }
}

fn reprojection_error(
    pose: &RigidTransform3,
    p3: &Vector3<f64>,
    obs: &Vector2<f64>,
    intr: &CameraIntrinsics,
) -> Option<f64> {
    intr.project(&pose.transform_point(p3)).map(|px| (px - obs).norm())
}

/// Sum of squared reprojection errors; `None` if any point falls behind the
/// camera (used to reject LM trial steps that push points out of view).
fn cost_over(
    pose: &RigidTransform3,
    idx: &[usize],
    p3: &[Vector3<f64>],
    p2: &[Vector2<f64>],
    intr: &CameraIntrinsics,
) -> Option<f64> {
    let mut cost = 0.0;
    for &i in idx {
        let e = reprojection_error(pose, &p3[i], &p2[i], intr)?;
        cost += e * e;
    }
    Some(cost)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula for the rotation with axis-angle vector `w`.
fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-16 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * (k * k)
}

/// Levenberg–Marquardt refinement of `pose` on the given correspondences.
/// Only steps that lower the cost are accepted, so the result is never
/// worse than the input.
fn refine_pose(
    pose: &RigidTransform3,
    idx: &[usize],
    p3: &[Vector3<f64>],
    p2: &[Vector2<f64>],
    intr: &CameraIntrinsics,
) -> RigidTransform3 {
    let mut current = *pose;
    let Some(mut cost) = cost_over(&current, idx, p3, p2, intr) else {
        return current;
    };
    let mut lambda = 1e-3;
    for _ in 0..25 {
        // Normal equations with a left-multiplicative rotation update:
        // residual r = project(R p + t) - obs, d(Rp+t)/dw = -[Rp]x.
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for &i in idx {
            let pc = current.transform_point(&p3[i]);
            let Some(px) = intr.project(&pc) else { return current };
            let r = px - p2[i];
            let jp = intr.project_jacobian(&pc);
            let jw = jp * (-skew(&pc));
            let jt = jp;
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&jw);
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jt);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }

        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for d in 0..6 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = damped.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            let dt = Vector3::new(delta[3], delta[4], delta[5]);
            let trial = RigidTransform3::new_unchecked(
                so3_exp(&w) * current.rotation(),
                current.translation() + dt,
            );
            match cost_over(&trial, idx, p3, p2, intr) {
                Some(c) if c < cost => {
                    let rel_drop = (cost - c) / cost.max(1e-300);
                    current = trial;
                    cost = c;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = true;
                    if rel_drop < 1e-12 {
                        return current;
                    }
                    break;
                }
                _ => lambda *= 10.0,
            }
            if lambda > 1e10 {
                return current;
            }
        }
        if !improved {
            break;
        }
    }
    current
}

/// Solves for the pose of the query camera given reference-camera 3-d
/// points and their 2-d observations in the query image.
///
/// RANSAC samples four correspondences per iteration: P3P on three gives up
/// to four minimal solutions and the fourth picks the one that reprojects
/// the sample best. The iteration count adapts to the observed inlier ratio
/// at `cfg.confidence`, capped at `cfg.max_iters`. The best model is then
/// LM-refined over its inliers; the refined pose never has a higher inlier
/// RMSE than the unrefined one. Deterministic given `cfg.seed`.
pub fn solve_pnp_ransac(
    points3d_ref: &[Vector3<f64>],
    points2d_query: &[Vector2<f64>],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<PnPResult, PnpError> {
    let n = points3d_ref.len();
    if n != points2d_query.len() {
        return Err(PnpError::MismatchedInputs {
            points3d: n,
            points2d: points2d_query.len(),
        });
    }
    if n < 4 {
        return Err(PnpError::TooFewPoints(n));
    }

    let bearings: Vec<Vector3<f64>> = points2d_query
        .iter()
        .map(|px| {
            Vector3::new((px.x - intr.cx) / intr.fx, (px.y - intr.cy) / intr.fy, 1.0).normalize()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_inliers: Vec<usize> = Vec::new();
    let mut best_pose: Option<RigidTransform3> = None;
    let mut needed = cfg.max_iters;

    let mut iter = 0;
    while iter < needed.min(cfg.max_iters) {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let pts = [
            points3d_ref[sample[0]],
            points3d_ref[sample[1]],
            points3d_ref[sample[2]],
        ];
        let brs = [bearings[sample[0]], bearings[sample[1]], bearings[sample[2]]];

        // Disambiguate minimal solutions by reprojection over all four
        // sample points.
        let mut candidate: Option<(f64, RigidTransform3)> = None;
        for sol in p3p::solve(&pts, &brs) {
            let mut err = 0.0;
            let mut valid = true;
            for &si in &sample {
                match reprojection_error(&sol, &points3d_ref[si], &points2d_query[si], intr) {
                    Some(e) => err += e * e,
                    None => {
                        valid = false;
                        break;
                    }
                }
            }
            if valid && candidate.is_none_or(|(best_err, _)| err < best_err) {
                candidate = Some((err, sol));
            }
        }
        let Some((_, model)) = candidate else { continue };

        let inliers: Vec<usize> = (0..n)
            .filter(|&i| {
                reprojection_error(&model, &points3d_ref[i], &points2d_query[i], intr)
                    .is_some_and(|e| e < cfg.reproj_threshold_px)
            })
            .collect();

        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
            best_pose = Some(model);
            // Adaptive stopping: enough iterations that drawing four
            // inliers at once happened with the requested confidence.
            let w = best_inliers.len() as f64 / n as f64;
            let p_good = w.powi(4);
            if p_good >= 1.0 {
                needed = iter;
            } else if p_good > 0.0 {
                let est = (1.0 - cfg.confidence).ln() / (1.0 - p_good).ln();
                needed = est.ceil().max(1.0) as usize;
            }
        }
    }

    let Some(pose) = best_pose else {
        return Err(PnpError::NoConsensus {
            best: 0,
            needed: cfg.min_inliers,
        });
    };
    if best_inliers.len() < cfg.min_inliers {
        return Err(PnpError::NoConsensus {
            best: best_inliers.len(),
            needed: cfg.min_inliers,
        });
    }

    let refined = refine_pose(&pose, &best_inliers, points3d_ref, points2d_query, intr);
    let unrefined_cost = cost_over(&pose, &best_inliers, points3d_ref, points2d_query, intr);
    let refined_cost = cost_over(&refined, &best_inliers, points3d_ref, points2d_query, intr)
        .expect("refinement only accepts in-view poses");
    debug_assert!(
        refined_cost <= unrefined_cost.expect("best model projects its inliers") + 1e-9,
        "refinement must not raise the inlier cost"
    );
    let rmse = (refined_cost / best_inliers.len() as f64).sqrt();

    Ok(PnPResult {
        relative: refined,
        inlier_indices: best_inliers,
        reprojection_rmse: rmse,
    })
}

/// One global-pose hypothesis for the query frame, derived from a single
/// retrieved map entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseHypothesis {
    pub pose: PlanarPose,
    /// Entry id of the retrieved map tuple this hypothesis came from.
    pub source_entry: u32,
    /// PnP inlier count — used as a plausibility weight downstream.
    pub weight_features: u32,
    /// Frobenius distance between the query VLAD and the entry VLAD.
    pub vlad_distance: f64,
}

/// Matching and gating parameters for [`hypothesize`].
#[derive(Clone, Copy, Debug)]
pub struct HypothesisConfig {
    pub match_max_distance: u32,
    pub match_cross_check: bool,
    pub ransac: RansacConfig,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        Self {
            match_max_distance: crate::features::DEFAULT_MAX_DISTANCE,
            match_cross_check: true,
            ransac: RansacConfig::default(),
        }
    }
}

/// Turns retrieved entries into global pose hypotheses.
///
/// Per entry: brute-force match query↔entry descriptors, solve PnP-RANSAC
/// on the matched (3-d, 2-d) pairs, gate on success and on the relative
/// vehicle yaw staying inside the camera's horizontal field of view, then
/// compose the entry's global camera pose with the relative pose. Entries
/// are processed independently (in parallel) and the output preserves
/// retrieval order; rejected entries simply produce nothing.
pub fn hypothesize(
    db: &MapDatabase,
    query_fs: &FeatureSet,
    retrieved: &[(u32, f64)],
    intr: &CameraIntrinsics,
    mounting: &MountingTransform,
    cfg: &HypothesisConfig,
) -> Vec<PoseHypothesis> {
    let candidates: Vec<Option<PoseHypothesis>> = retrieved
        .par_iter()
        .map(|&(entry_id, vlad_distance)| {
            let entry = db.entry(entry_id)?;
            let matches = match_bruteforce(
                query_fs,
                &entry.features,
                cfg.match_max_distance,
                cfg.match_cross_check,
            );
            if matches.len() < 4 {
                return None;
            }
            let mut p3 = Vec::with_capacity(matches.len());
            let mut p2 = Vec::with_capacity(matches.len());
            for m in &matches {
                let p = entry.features.point3d(m.ref_idx)?; // present by construction
                p3.push(Vector3::new(p.x as f64, p.y as f64, p.z as f64));
                let kp = query_fs.keypoints()[m.query_idx];
                p2.push(Vector2::new(kp.u as f64, kp.v as f64));
            }
            // Decorrelate the per-entry RANSAC streams deterministically.
            let mut ransac = cfg.ransac;
            ransac.seed = cfg
                .ransac
                .seed
                .wrapping_add((entry_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let result = solve_pnp_ransac(&p3, &p2, intr, &ransac).ok()?;

            // FOV gate on the relative vehicle yaw.
            let rel_vehicle = mounting
                .camera_to_vehicle()
                .compose(&result.relative)
                .compose(mounting.vehicle_to_camera());
            let yaw = rel_vehicle.rotation()[(1, 0)].atan2(rel_vehicle.rotation()[(0, 0)]);
            if yaw.abs() > intr.hfov() {
                return None;
            }

            let cam_ref = planar_to_camera(&entry.pose, mounting);
            let cam_query = cam_ref.compose(&result.relative.inverse());
            Some(PoseHypothesis {
                pose: camera_to_planar(&cam_query, mounting),
                source_entry: entry_id,
                weight_features: result.inlier_count() as u32,
                vlad_distance,
            })
        })
        .collect();
    candidates.into_iter().flatten().collect()
}

#[derive(Debug, Error)]
#[error("no pose hypotheses to average")]
pub struct NoMeasurement;

/// Consensus average of pose hypotheses.
///
/// Every hypothesis proposes itself as the center; hypotheses within
/// `inlier_radius` (position) and `inlier_angle` (heading) of the center
/// are its inliers. The largest inlier set wins — ties prefer more total
/// feature inliers, then the lexicographically smallest inlier poses, which
/// makes the result independent of input order. The winning set is averaged
/// (arithmetic in x/y, circular in heading).
pub fn robust_average(
    hyps: &[PoseHypothesis],
    inlier_radius: f64,
    inlier_angle: f64,
) -> Result<PlanarPose, NoMeasurement> {
    if hyps.is_empty() {
        return Err(NoMeasurement);
    }

    let key = |p: &PlanarPose| (p.x, p.y, p.psi());
    let mut best: Option<(usize, u64, Vec<usize>)> = None; // (count, weight, sorted inliers)
    for center in hyps {
        let mut inliers: Vec<usize> = (0..hyps.len())
            .filter(|&j| {
                let h = &hyps[j];
                h.pose.distance(&center.pose) <= inlier_radius
                    && wrap_angle(h.pose.psi() - center.pose.psi()).abs() <= inlier_angle
            })
            .collect();
        inliers.sort_by(|&a, &b| {
            key(&hyps[a].pose)
                .partial_cmp(&key(&hyps[b].pose))
                .expect("finite poses")
        });
        let weight: u64 = inliers.iter().map(|&j| hyps[j].weight_features as u64).sum();
        let better = match &best {
            None => true,
            Some((bc, bw, bi)) => {
                (inliers.len(), weight) > (*bc, *bw)
                    || ((inliers.len(), weight) == (*bc, *bw)
                        && inliers
                            .iter()
                            .map(|&j| key(&hyps[j].pose))
                            .lt(bi.iter().map(|&j| key(&hyps[j].pose))))
            }
        };
        if better {
            best = Some((inliers.len(), weight, inliers));
        }
    }

    let (_, _, inliers) = best.expect("hyps is non-empty");
    let n = inliers.len() as f64;
    let x = inliers.iter().map(|&j| hyps[j].pose.x).sum::<f64>() / n;
    let y = inliers.iter().map(|&j| hyps[j].pose.y).sum::<f64>() / n;
    let angles: Vec<f64> = inliers.iter().map(|&j| hyps[j].pose.psi()).collect();
    // The angle gate keeps inliers well inside a half-circle, so the
    // circular mean is defined; the fallback is unreachable in practice.
    let psi = crate::geometry::circular_mean(&angles).unwrap_or(angles[0]);
    Ok(PlanarPose::new(x, y, psi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    use crate::testutil::test_intrinsics;

    /// Random pose whose frustum keeps the generated points visible.
    fn gentle_pose(rng: &mut impl Rng) -> RigidTransform3 {
        let w = Vector3::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        );
        let t = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        RigidTransform3::new_unchecked(so3_exp(&w), t)
    }

    /// Correspondences generated by projecting reference-frame points
    /// through a known relative pose.
    fn synthetic_scene(
        rng: &mut impl Rng,
        n: usize,
        truth: &RigidTransform3,
        intr: &CameraIntrinsics,
    ) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let mut p3 = Vec::with_capacity(n);
        let mut p2 = Vec::with_capacity(n);
        while p3.len() < n {
            let z = rng.random_range(2.0..6.0);
            let p = Vector3::new(
                z * rng.random_range(-0.4..0.4),
                z * rng.random_range(-0.3..0.3),
                z,
            );
            if let Some(px) = intr.project(&truth.transform_point(&p)) {
                if px.x >= 0.0 && px.x < 640.0 && px.y >= 0.0 && px.y < 480.0 {
                    p3.push(p);
                    p2.push(px);
                }
            }
        }
        (p3, p2)
    }

    fn pose_error(a: &RigidTransform3, b: &RigidTransform3) -> (f64, f64) {
        let dr = a.rotation() * b.rotation().transpose();
        let angle = ((dr.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        (angle, (a.translation() - b.translation()).norm())
    }

    #[test]
    fn pnp_recovers_exact_pose_from_noiseless_points() {
        let intr = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let truth = gentle_pose(&mut rng);
            let (p3, p2) = synthetic_scene(&mut rng, 20, &truth, &intr);
            let cfg = RansacConfig {
                seed: trial,
                ..RansacConfig::default()
            };
            let res = solve_pnp_ransac(&p3, &p2, &intr, &cfg).unwrap();
            let (rot_err, trans_err) = pose_error(&res.relative, &truth);
            assert!(rot_err < 1e-6, "rotation error {rot_err} (trial {trial})");
            assert!(trans_err < 1e-6, "translation error {trans_err} (trial {trial})");
            assert_eq!(res.inlier_count(), 20);
            assert!(res.reprojection_rmse < 1e-6);
        }
    }

    #[test]
    fn pnp_rejects_planted_outliers() {
        let intr = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = gentle_pose(&mut rng);
        let (p3, mut p2) = synthetic_scene(&mut rng, 30, &truth, &intr);
        // Corrupt 30%: indices 0, 10, 20 and six more.
        let outliers: Vec<usize> = (0..9).map(|i| i * 3).collect();
        for &i in &outliers {
            p2[i] = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            // Keep planted outliers genuinely wrong.
            let clean = intr.project(&truth.transform_point(&p3[i])).unwrap();
            if (p2[i] - clean).norm() < 30.0 {
                p2[i] += Vector2::new(60.0, 60.0);
            }
        }

        let res = solve_pnp_ransac(&p3, &p2, &intr, &RansacConfig::default()).unwrap();
        for &i in &outliers {
            assert!(
                !res.inlier_indices.contains(&i),
                "planted outlier {i} ended up an inlier"
            );
        }
        assert_eq!(res.inlier_count(), 30 - outliers.len());
        let (rot_err, trans_err) = pose_error(&res.relative, &truth);
        assert!(rot_err < 1e-3 && trans_err < 1e-3, "{rot_err}, {trans_err}");
    }

    #[test]
    fn pnp_too_few_points() {
        let intr = test_intrinsics();
        let p3 = vec![Vector3::new(0.0, 0.0, 2.0); 3];
        let p2 = vec![Vector2::new(320.0, 240.0); 3];
        assert!(matches!(
            solve_pnp_ransac(&p3, &p2, &intr, &RansacConfig::default()),
            Err(PnpError::TooFewPoints(3))
        ));
        assert!(matches!(
            solve_pnp_ransac(&p3, &p2[..2], &intr, &RansacConfig::default()),
            Err(PnpError::MismatchedInputs { .. })
        ));
    }

    #[test]
    fn pnp_no_consensus_on_garbage() {
        let intr = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p3: Vec<Vector3<f64>> = (0..30)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(1.0..8.0),
                )
            })
            .collect();
        let p2: Vec<Vector2<f64>> = (0..30)
            .map(|_| Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        assert!(matches!(
            solve_pnp_ransac(&p3, &p2, &intr, &RansacConfig::default()),
            Err(PnpError::NoConsensus { .. })
        ));
    }

    #[test]
    fn pnp_is_deterministic() {
        let intr = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = gentle_pose(&mut rng);
        let (p3, mut p2) = synthetic_scene(&mut rng, 40, &truth, &intr);
        for i in 0..8 {
            p2[i * 5] += Vector2::new(50.0, -40.0);
        }
        let cfg = RansacConfig::default();
        let a = solve_pnp_ransac(&p3, &p2, &intr, &cfg).unwrap();
        let b = solve_pnp_ransac(&p3, &p2, &intr, &cfg).unwrap();
        assert_eq!(a.relative, b.relative);
        assert_eq!(a.inlier_indices, b.inlier_indices);
        assert_eq!(a.reprojection_rmse.to_bits(), b.reprojection_rmse.to_bits());
    }

    #[test]
    fn refinement_improves_noisy_solutions() {
        let intr = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = gentle_pose(&mut rng);
        let (p3, mut p2) = synthetic_scene(&mut rng, 50, &truth, &intr);
        for px in p2.iter_mut() {
            *px += Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        }
        let res = solve_pnp_ransac(&p3, &p2, &intr, &RansacConfig::default()).unwrap();
        // With ~0.3 px noise the refined solution stays close to the truth
        // and the RMSE reflects the noise floor, not solver error.
        let (rot_err, trans_err) = pose_error(&res.relative, &truth);
        assert!(rot_err < 5e-3 && trans_err < 2e-2, "{rot_err}, {trans_err}");
        assert!(res.reprojection_rmse < 1.0);
    }

    fn hyp(x: f64, y: f64, psi: f64, weight: u32) -> PoseHypothesis {
        PoseHypothesis {
            pose: PlanarPose::new(x, y, psi),
            source_entry: 0,
            weight_features: weight,
            vlad_distance: 0.1,
        }
    }

    #[test]
    fn robust_average_identical_hypotheses() {
        let h = hyp(1.25, -0.5, 0.75, 10);
        let hyps = vec![h; 5];
        let avg = robust_average(&hyps, 0.3, 0.2).unwrap();
        assert_eq!(avg.x, 1.25);
        assert_eq!(avg.y, -0.5);
        assert_abs_diff_eq!(avg.psi(), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn robust_average_excludes_planted_outlier() {
        let eps = 1e-3;
        let hyps = vec![
            hyp(eps, 0.0, eps, 5),
            hyp(-eps, 0.0, -eps, 5),
            hyp(0.0, eps, 0.0, 5),
            hyp(0.0, -eps, 0.0, 5),
            hyp(50.0, 50.0, PI, 5),
        ];
        let avg = robust_average(&hyps, 0.3, 0.2).unwrap();
        assert_abs_diff_eq!(avg.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(avg.y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(avg.psi(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn robust_average_wraps_circular_mean() {
        let a = 175.0_f64.to_radians();
        let hyps = vec![hyp(0.0, 0.0, a, 5), hyp(0.0, 0.0, -a, 5)];
        let avg = robust_average(&hyps, 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(wrap_angle(avg.psi() - PI), 0.0, epsilon = 1e-9);
    }

    use crate::mapdb::MapDatabase;
    use crate::testutil::{render, tiny_vocab, wall_database, wall_landmarks};

    #[test]
    fn hypothesize_zero_motion_recovers_entry_pose() {
        let intr = test_intrinsics();
        let mounting = MountingTransform::forward_camera(1.0);
        let world = wall_landmarks();
        let entry_pose = PlanarPose::new(0.4, -0.3, 0.25);
        // Shift the wall into this pose's view by building it in the
        // entry's own frame.
        let to_world = crate::geometry::vehicle_to_world(&entry_pose);
        let world: Vec<Vector3<f64>> = world.iter().map(|p| to_world.transform_point(p)).collect();

        let (fs, _) = render(&world, &entry_pose, &mounting, &intr, 0);
        let frames = vec![(fs, entry_pose)];
        let (db, _) =
            MapDatabase::build(tiny_vocab(), &frames, intr, mounting, 10, "wall").unwrap();

        let (query, _) = render(&world, &entry_pose, &mounting, &intr, 7);
        let hyps = hypothesize(
            &db,
            &query,
            &[(0, 0.0)],
            &intr,
            &mounting,
            &HypothesisConfig::default(),
        );
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].source_entry, 0);
        assert_eq!(hyps[0].weight_features as usize, query.len());
        assert_abs_diff_eq!(hyps[0].pose.x, entry_pose.x, epsilon = 1e-6);
        assert_abs_diff_eq!(hyps[0].pose.y, entry_pose.y, epsilon = 1e-6);
        assert_abs_diff_eq!(
            wrap_angle(hyps[0].pose.psi() - entry_pose.psi()),
            0.0,
            epsilon = 1e-6
        );
    }

    #[test]
    fn hypothesize_gates_on_field_of_view() {
        let intr = test_intrinsics();
        let mounting = MountingTransform::forward_camera(1.0);
        let db = wall_database(&intr, &mounting);
        let world = wall_landmarks();
        let (_, entry_kept) = render(
            &world,
            &PlanarPose::new(0.0, 0.0, 0.0),
            &mounting,
            &intr,
            0,
        );

        // Same viewpoint, heading rotated past the horizontal FOV: plenty
        // of co-visible landmarks, but the relative yaw must be rejected.
        let over = PlanarPose::new(2.0, -2.0, 1.2 * intr.hfov());
        let (query, query_kept) = render(&world, &over, &mounting, &intr, 1);
        let covisible = query_kept
            .iter()
            .filter(|i| entry_kept.contains(i))
            .count();
        assert!(covisible >= 20, "need co-visible landmarks, got {covisible}");
        let hyps = hypothesize(
            &db,
            &query,
            &[(0, 0.0)],
            &intr,
            &mounting,
            &HypothesisConfig::default(),
        );
        assert!(hyps.is_empty(), "yaw beyond the FOV must be gated");

        // A modest rotation at the same spot passes the gate and recovers
        // the query pose.
        let mild = PlanarPose::new(2.0, -2.0, 20.0_f64.to_radians());
        let (query, _) = render(&world, &mild, &mounting, &intr, 2);
        let hyps = hypothesize(
            &db,
            &query,
            &[(0, 0.0)],
            &intr,
            &mounting,
            &HypothesisConfig::default(),
        );
        assert_eq!(hyps.len(), 1);
        assert_abs_diff_eq!(hyps[0].pose.x, mild.x, epsilon = 1e-4);
        assert_abs_diff_eq!(hyps[0].pose.y, mild.y, epsilon = 1e-4);
        assert_abs_diff_eq!(
            wrap_angle(hyps[0].pose.psi() - mild.psi()),
            0.0,
            epsilon = 1e-5
        );

        // Ids that aren't in the database are skipped, not an error.
        let hyps = hypothesize(
            &db,
            &query,
            &[(99, 0.0)],
            &intr,
            &mounting,
            &HypothesisConfig::default(),
        );
        assert!(hyps.is_empty());
    }

    #[test]
    fn robust_average_permutation_invariant_and_idempotent() {
        let hyps = vec![
            hyp(0.01, 0.02, 0.1, 3),
            hyp(-0.02, 0.01, 0.12, 7),
            hyp(0.0, 0.0, 0.09, 2),
            hyp(5.0, -5.0, -2.0, 9),
        ];
        let base = robust_average(&hyps, 0.3, 0.2).unwrap();
        let mut perm = hyps.clone();
        perm.reverse();
        assert_eq!(robust_average(&perm, 0.3, 0.2).unwrap(), base);
        let mut perm2 = hyps.clone();
        perm2.swap(0, 2);
        perm2.swap(1, 3);
        assert_eq!(robust_average(&perm2, 0.3, 0.2).unwrap(), base);

        let single = robust_average(&hyps[1..2], 0.3, 0.2).unwrap();
        assert_eq!(single, hyps[1].pose);

        assert!(robust_average(&[], 0.3, 0.2).is_err());
    }
}
