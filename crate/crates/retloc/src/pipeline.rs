//! The per-frame localization pipeline: retrieval → hypotheses → fused
//! measurement → particle filter.

use crate::features::FeatureSet;
use crate::fusion::{
    estimate, propagate, update, FrameMeasurement, GmmParams, OdometryInput, ParticleSet,
    PARTICLE_COUNT,
};
use crate::geometry::PlanarPose;
use crate::mapdb::MapDatabase;
use crate::posest::{hypothesize, robust_average, HypothesisConfig};
use crate::vocab::compute_vlad;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Knobs for [`Localizer`].
#[derive(Clone, Copy, Debug)]
pub struct LocalizerConfig {
    /// Retrieval depth; `None` uses the database's own k.
    pub knn_k: Option<usize>,
    pub hypothesis: HypothesisConfig,
    /// Position radius for the hypothesis consensus average.
    pub consensus_radius: f64,
    /// Heading window for the hypothesis consensus average.
    pub consensus_angle: f64,
    pub particle_count: usize,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            knn_k: None,
            hypothesis: HypothesisConfig::default(),
            consensus_radius: 0.5,
            consensus_angle: 0.35,
            particle_count: PARTICLE_COUNT,
            seed: 0,
        }
    }
}

/// Per-frame diagnostics, emitted on every call including dead-reckoning
/// frames.
#[derive(Clone, Copy, Debug, Default)]
pub struct FrameDiagnostics {
    /// Hypotheses that survived PnP and the FOV gate.
    pub n_hypotheses: usize,
    /// Total PnP inliers across surviving hypotheses.
    pub n_inliers: usize,
    /// The fused measurement, when one existed this frame.
    pub measurement: Option<PlanarPose>,
    /// True when the frame contributed no measurement and the filter ran
    /// on odometry alone.
    pub dead_reckoned: bool,
    pub resampled: bool,
    pub underflow: bool,
    /// Effective sample size after the weight update.
    pub ess: f64,
    /// Wall-clock time of this call, milliseconds.
    pub step_ms: f64,
}

/// Stateful frame-by-frame localizer against a fixed map.
pub struct Localizer {
    db: MapDatabase,
    params: GmmParams,
    cfg: LocalizerConfig,
    particles: Option<ParticleSet>,
    rng: ChaCha8Rng,
}

impl Localizer {
    pub fn new(db: MapDatabase, params: GmmParams, cfg: LocalizerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            db,
            params,
            cfg,
            particles: None,
            rng,
        }
    }

    pub fn database(&self) -> &MapDatabase {
        &self.db
    }

    pub fn params(&self) -> &GmmParams {
        &self.params
    }

    pub fn particles(&self) -> Option<&ParticleSet> {
        self.particles.as_ref()
    }

    /// Axis-aligned bounds of the mapped poses, padded by a margin — the
    /// prior for filter initialization without a first measurement.
    fn map_bounds(&self) -> ((f64, f64), (f64, f64)) {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y = (f64::INFINITY, f64::NEG_INFINITY);
        for e in self.db.entries() {
            x = (x.0.min(e.pose.x), x.1.max(e.pose.x));
            y = (y.0.min(e.pose.y), y.1.max(e.pose.y));
        }
        const MARGIN: f64 = 1.0;
        ((x.0 - MARGIN, x.1 + MARGIN), (y.0 - MARGIN, y.1 + MARGIN))
    }

    /// One filter step: retrieval, pose hypotheses, consensus measurement,
    /// then propagate/update/estimate. An empty frame, failed retrieval,
    /// or zero surviving hypotheses all fall back to dead reckoning.
    pub fn localize_frame(
        &mut self,
        fs: &FeatureSet,
        odom: &OdometryInput,
    ) -> (PlanarPose, FrameDiagnostics) {
        let started = Instant::now();
        let mut diag = FrameDiagnostics::default();

        let k = self.cfg.knn_k.unwrap_or_else(|| self.db.knn_k());
        let measurement = compute_vlad(self.db.vocabulary(), fs)
            .ok()
            .and_then(|vlad| self.db.knn_query(&vlad, k).ok())
            .map(|retrieved| {
                hypothesize(
                    &self.db,
                    fs,
                    &retrieved,
                    self.db.intrinsics(),
                    self.db.mounting(),
                    &self.cfg.hypothesis,
                )
            })
            .and_then(|hyps| {
                diag.n_hypotheses = hyps.len();
                diag.n_inliers = hyps.iter().map(|h| h.weight_features as usize).sum();
                let z = robust_average(
                    &hyps,
                    self.cfg.consensus_radius,
                    self.cfg.consensus_angle,
                )
                .ok()?;
                Some(FrameMeasurement::from_hypotheses(z, hyps))
            });
        diag.measurement = measurement.as_ref().map(|m| m.z);

        let prior = match self.particles.take() {
            Some(p) => p,
            None => match &measurement {
                Some(m) => ParticleSet::init_gaussian(
                    self.cfg.particle_count,
                    &m.z,
                    &self.params.sigma1,
                    &mut self.rng,
                ),
                None => {
                    let (xr, yr) = self.map_bounds();
                    ParticleSet::init_uniform(self.cfg.particle_count, xr, yr, &mut self.rng)
                }
            },
        };

        let moved = propagate(&prior, odom, &mut self.rng);
        let (posterior, fdiag) = update(&moved, &self.params, measurement.as_ref(), &mut self.rng);
        diag.dead_reckoned = measurement.is_none();
        diag.resampled = fdiag.resampled;
        diag.underflow = fdiag.underflow;
        diag.ess = fdiag.ess;

        let pose = estimate(&posterior);
        self.particles = Some(posterior);
        diag.step_ms = started.elapsed().as_secs_f64() * 1e3;
        (pose, diag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MountingTransform;
    use crate::testutil::{render, test_intrinsics, wall_database, wall_landmarks};
    use approx::assert_abs_diff_eq;

    fn converged_localizer() -> (Localizer, FeatureSet) {
        let intr = test_intrinsics();
        let mounting = MountingTransform::forward_camera(1.0);
        let db = wall_database(&intr, &mounting);
        let (query, _) = render(
            &wall_landmarks(),
            &PlanarPose::new(0.0, 0.0, 0.0),
            &mounting,
            &intr,
            1,
        );
        let loc = Localizer::new(db, GmmParams::nominal(), LocalizerConfig::default());
        (loc, query)
    }

    #[test]
    fn exact_revisit_converges_to_map_pose() {
        let (mut loc, query) = converged_localizer();
        let odom = OdometryInput::exact(0.0, 0.0, 0.1);
        let mut pose = PlanarPose::new(f64::NAN, f64::NAN, 0.0);
        for _ in 0..10 {
            let (p, diag) = loc.localize_frame(&query, &odom);
            assert!(!diag.dead_reckoned);
            assert_eq!(diag.n_hypotheses, 1);
            assert!(diag.n_inliers >= 8);
            assert!(diag.step_ms >= 0.0);
            pose = p;
        }
        assert_abs_diff_eq!(pose.x, 0.0, epsilon = 1e-3);
        assert_abs_diff_eq!(pose.y, 0.0, epsilon = 1e-3);
        // Heading converges more slowly: the coefficient Gaussian's angle
        // spread (σ ≈ 0.07 rad) gives weak per-round discrimination, so
        // ten rounds leave a few-milliradian cloud.
        assert_abs_diff_eq!(pose.psi(), 0.0, epsilon = 0.02);
    }

    #[test]
    fn empty_frame_dead_reckons_from_previous_estimate() {
        let (mut loc, query) = converged_localizer();
        let still = OdometryInput::exact(0.0, 0.0, 0.1);
        for _ in 0..10 {
            loc.localize_frame(&query, &still);
        }
        let (before, _) = loc.localize_frame(&query, &still);
        let prior: Vec<_> = loc.particles().unwrap().particles().to_vec();

        // Drive forward on odometry alone: with an empty frame every
        // particle must advance by exactly v·dt along its own heading with
        // its weight untouched.
        let empty = FeatureSet::new(2, 0.2, vec![], vec![], None).unwrap();
        let forward = OdometryInput::exact(1.0, 0.0, 0.1);
        let (after, diag) = loc.localize_frame(&empty, &forward);
        assert!(diag.dead_reckoned);
        assert_eq!(diag.n_hypotheses, 0);
        assert!(diag.measurement.is_none());
        for (p, q) in prior.iter().zip(loc.particles().unwrap().particles()) {
            let psi = p.pose.psi();
            assert_eq!(q.pose.x.to_bits(), (p.pose.x + 0.1 * psi.cos()).to_bits());
            assert_eq!(q.pose.y.to_bits(), (p.pose.y + 0.1 * psi.sin()).to_bits());
            assert_eq!(q.pose.psi().to_bits(), psi.to_bits());
            assert_eq!(q.weight.to_bits(), p.weight.to_bits());
        }
        // The cloud's weighted mean therefore moves with it (loose bound:
        // the mean of cos over the cloud differs from cos of the mean).
        assert_abs_diff_eq!(after.x, before.x + 0.1 * before.psi().cos(), epsilon = 1e-3);
        assert_abs_diff_eq!(after.y, before.y + 0.1 * before.psi().sin(), epsilon = 1e-3);
        assert_abs_diff_eq!(after.psi(), before.psi(), epsilon = 1e-9);
    }

    #[test]
    fn localizer_is_deterministic() {
        let run = || {
            let (mut loc, query) = converged_localizer();
            let odom = OdometryInput::exact(0.0, 0.0, 0.1);
            let mut track = Vec::new();
            for _ in 0..5 {
                let (p, _) = loc.localize_frame(&query, &odom);
                track.push((p.x.to_bits(), p.y.to_bits(), p.psi().to_bits()));
            }
            track
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn database_is_not_mutated_by_localization() {
        let (mut loc, query) = converged_localizer();
        let before = loc.database().clone();
        let odom = OdometryInput::exact(0.0, 0.0, 0.1);
        for _ in 0..3 {
            loc.localize_frame(&query, &odom);
        }
        assert_eq!(*loc.database(), before);
    }
}
