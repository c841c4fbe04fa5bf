//! Measurement fusion: the Gaussian-mixture measurement model, its
//! maximum-likelihood training, and the particle filter.
//!
//! The measurement model scores a pose `z` against the frame's pose
//! hypotheses as a mixture with one Gaussian component per hypothesis. The
//! mixture coefficients come from a second Gaussian over a 4-d error
//! vector — VLAD distance plus the hypothesis pose relative to the
//! *particle* — so particles far from any plausible hypothesis are
//! discounted even though the components themselves do not depend on the
//! particle. Both Gaussians are fit from a training drive where ground
//! truth is known.

use crate::features::FeatureSet;
use crate::geometry::{circular_mean_weighted, wrap_angle, PlanarPose};
use crate::mapdb::MapDatabase;
use crate::posest::{hypothesize, HypothesisConfig, PoseHypothesis};
use crate::vocab::compute_vlad;
use nalgebra::{Cholesky, Matrix3, Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default particle count.
pub const PARTICLE_COUNT: usize = 500;

/// Covariance floor: fitted covariances are nudged so their smallest
/// eigenvalue is at least this.
pub const SIGMA_EPS: f64 = 1e-9;

const SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("MLE fit needs at least 2 error samples, got {0}")]
    InsufficientSamples(usize),
    #[error("invalid odometry input: {0}")]
    InvalidOdometry(String),
    #[error("a particle set needs at least one particle, all weights finite and non-negative")]
    InvalidParticles,
}

/// Parameters of the measurement model: component Gaussian (3-d pose
/// error) and coefficient Gaussian (4-d VLAD-augmented error).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub mu1: Vector3<f64>,
    pub sigma1: Matrix3<f64>,
    pub mu2: Vector4<f64>,
    pub sigma2: Matrix4<f64>,
}

impl GmmParams {
    /// Hand-set fallback parameters (used before any training data exists
    /// and in tests): unbiased means, ~5 cm / ~2° pose spread, broad VLAD
    /// coefficient Gaussian.
    pub fn nominal() -> Self {
        Self {
            mu1: Vector3::zeros(),
            sigma1: Matrix3::from_diagonal(&Vector3::new(0.0025, 0.0025, 0.0012)),
            mu2: Vector4::new(1.0, 0.0, 0.0, 0.0),
            sigma2: Matrix4::from_diagonal(&Vector4::new(0.09, 0.01, 0.01, 0.0048)),
        }
    }
}

fn floor_eigenvalues3(m: Matrix3<f64>) -> Matrix3<f64> {
    let lam = m.symmetric_eigenvalues().min();
    if lam < SIGMA_EPS {
        m + Matrix3::identity() * (SIGMA_EPS - lam)
    } else {
        m
    }
}

fn floor_eigenvalues4(m: Matrix4<f64>) -> Matrix4<f64> {
    let lam = m.symmetric_eigenvalues().min();
    if lam < SIGMA_EPS {
        m + Matrix4::identity() * (SIGMA_EPS - lam)
    } else {
        m
    }
}

/// Fits [`GmmParams`] from pooled error vectors.
///
/// The default (`centered = false`) uses the raw second moment
/// `Σ = (1/k) Σᵢ eᵢeᵢᵀ`; `centered = true` gives the conventional MLE
/// covariance about the mean. Angle components must be pre-wrapped.
/// Either way the covariances are floored (smallest eigenvalue ≥
/// [`SIGMA_EPS`]) so they stay invertible.
pub fn mle_fit(
    errors3: &[Vector3<f64>],
    errors4: &[Vector4<f64>],
    centered: bool,
) -> Result<GmmParams, FusionError> {
    let short = errors3.len().min(errors4.len());
    if short < 2 {
        return Err(FusionError::InsufficientSamples(short));
    }

    let k3 = errors3.len() as f64;
    let mu1 = errors3.iter().sum::<Vector3<f64>>() / k3;
    let mut sigma1 = Matrix3::zeros();
    for e in errors3 {
        let d = if centered { e - mu1 } else { *e };
        sigma1 += d * d.transpose();
    }
    sigma1 /= k3;

    let k4 = errors4.len() as f64;
    let mu2 = errors4.iter().sum::<Vector4<f64>>() / k4;
    let mut sigma2 = Matrix4::zeros();
    for e in errors4 {
        let d = if centered { e - mu2 } else { *e };
        sigma2 += d * d.transpose();
    }
    sigma2 /= k4;

    Ok(GmmParams {
        mu1,
        sigma1: floor_eigenvalues3(sigma1),
        mu2,
        sigma2: floor_eigenvalues4(sigma2),
    })
}

/// Precomputed inverse and peak density of the coefficient Gaussian.
struct CoeffGaussian {
    mu: Vector4<f64>,
    inv: Matrix4<f64>,
    peak: f64,
}

impl CoeffGaussian {
    fn new(params: &GmmParams) -> Self {
        let chol = Cholesky::new(params.sigma2)
            .unwrap_or_else(|| Cholesky::new(floor_eigenvalues4(params.sigma2)).expect("floored"));
        let det = chol.determinant();
        Self {
            mu: params.mu2,
            inv: chol.inverse(),
            peak: 1.0 / ((2.0 * std::f64::consts::PI).powi(4) * det).sqrt(),
        }
    }

    fn density(&self, e: &Vector4<f64>) -> f64 {
        let mut d = e - self.mu;
        d[3] = wrap_angle(e[3] - self.mu[3]);
        self.peak * (-0.5 * (d.transpose() * self.inv * d)[0]).exp()
    }
}

/// Precomputed inverse and peak density of the mixture-component Gaussian.
struct ComponentGaussian {
    mu: Vector3<f64>,
    inv: Matrix3<f64>,
    peak: f64,
}

impl ComponentGaussian {
    fn new(params: &GmmParams) -> Self {
        let chol = Cholesky::new(params.sigma1)
            .unwrap_or_else(|| Cholesky::new(floor_eigenvalues3(params.sigma1)).expect("floored"));
        let det = chol.determinant();
        Self {
            mu: params.mu1,
            inv: chol.inverse(),
            peak: 1.0 / ((2.0 * std::f64::consts::PI).powi(3) * det).sqrt(),
        }
    }

    /// N(z; hyp + μ₁, Σ₁) with the heading difference wrapped.
    fn density(&self, z: &PlanarPose, hyp: &PlanarPose) -> f64 {
        let d = Vector3::new(
            z.x - hyp.x - self.mu.x,
            z.y - hyp.y - self.mu.y,
            wrap_angle(z.psi() - hyp.psi() - self.mu.z),
        );
        self.peak * (-0.5 * (d.transpose() * self.inv * d)[0]).exp()
    }
}

/// The mixture coefficient for error vector `e = [e_vlad, dx, dy, dψ]`:
/// the (normalized-form) Gaussian density at `e`, angle wrapped.
pub fn coefficient(params: &GmmParams, e: &Vector4<f64>) -> f64 {
    CoeffGaussian::new(params).density(e)
}

fn coefficient_error(hyp: &PoseHypothesis, particle: &PlanarPose, e_vlad: f64) -> Vector4<f64> {
    Vector4::new(
        e_vlad,
        hyp.pose.x - particle.x,
        hyp.pose.y - particle.y,
        wrap_angle(hyp.pose.psi() - particle.psi()),
    )
}

fn mixture_components(
    g: &ComponentGaussian,
    z: &PlanarPose,
    hyps: &[PoseHypothesis],
) -> Vec<f64> {
    hyps.iter().map(|h| g.density(z, &h.pose)).collect()
}

fn likelihood_with_components(
    coeff: &CoeffGaussian,
    components: &[f64],
    hyps: &[PoseHypothesis],
    particle: &PlanarPose,
    e_vlads: &[f64],
) -> f64 {
    let mut acc = 0.0;
    for i in 0..hyps.len() {
        acc += coeff.density(&coefficient_error(&hyps[i], particle, e_vlads[i])) * components[i];
    }
    acc
}

/// Likelihood of measurement `z` for a particle at `particle_pose`:
/// `Σᵢ cᵢ · N(z; hypᵢ + μ₁, Σ₁)` where the coefficient error of
/// hypothesis `i` is taken relative to the particle. `e_vlads` runs
/// parallel to `hyps`; an empty hypothesis list scores zero.
pub fn measurement_likelihood(
    params: &GmmParams,
    z: &PlanarPose,
    hyps: &[PoseHypothesis],
    particle_pose: &PlanarPose,
    e_vlads: &[f64],
) -> f64 {
    assert_eq!(
        hyps.len(),
        e_vlads.len(),
        "e_vlads must run parallel to hypotheses"
    );
    if hyps.is_empty() {
        return 0.0;
    }
    let coeff = CoeffGaussian::new(params);
    let comp = ComponentGaussian::new(params);
    let components = mixture_components(&comp, z, hyps);
    likelihood_with_components(&coeff, &components, hyps, particle_pose, e_vlads)
}

/// Measured speed and yaw rate over one step, with the bounds of the
/// uniform noise the filter adds on top.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryInput {
    pub v_meas: f64,
    pub gamma_meas: f64,
    pub dt: f64,
    pub v_noise: (f64, f64),
    pub gamma_noise: (f64, f64),
}

impl OdometryInput {
    pub fn new(
        v_meas: f64,
        gamma_meas: f64,
        dt: f64,
        v_noise: (f64, f64),
        gamma_noise: (f64, f64),
    ) -> Result<Self, FusionError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(FusionError::InvalidOdometry(format!("dt must be positive, got {dt}")));
        }
        if v_noise.0 > v_noise.1 || gamma_noise.0 > gamma_noise.1 {
            return Err(FusionError::InvalidOdometry(format!(
                "noise bounds must be ordered, got v {v_noise:?}, gamma {gamma_noise:?}"
            )));
        }
        if !(v_meas.is_finite() && gamma_meas.is_finite()) {
            return Err(FusionError::InvalidOdometry("non-finite measurement".into()));
        }
        Ok(Self {
            v_meas,
            gamma_meas,
            dt,
            v_noise,
            gamma_noise,
        })
    }

    /// Noise-free odometry (dead-reckoning tests, ideal-sensor runs).
    pub fn exact(v_meas: f64, gamma_meas: f64, dt: f64) -> Self {
        Self::new(v_meas, gamma_meas, dt, (0.0, 0.0), (0.0, 0.0)).expect("zero bounds are valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Particle {
    pub pose: PlanarPose,
    pub weight: f64,
}

/// A weighted particle population. `normalized` records whether the
/// weights currently sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    normalized: bool,
}

impl ParticleSet {
    pub fn from_particles(particles: Vec<Particle>) -> Result<Self, FusionError> {
        if particles.is_empty()
            || particles
                .iter()
                .any(|p| !p.weight.is_finite() || p.weight < 0.0)
        {
            return Err(FusionError::InvalidParticles);
        }
        let sum: f64 = particles.iter().map(|p| p.weight).sum();
        let normalized = (sum - 1.0).abs() <= 1e-9;
        Ok(Self {
            particles,
            normalized,
        })
    }

    /// `n` particles drawn from a Gaussian around `center` (covariance
    /// `sigma`, heading wrapped), uniform weights.
    pub fn init_gaussian(
        n: usize,
        center: &PlanarPose,
        sigma: &Matrix3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let chol = Cholesky::new(*sigma)
            .unwrap_or_else(|| Cholesky::new(floor_eigenvalues3(*sigma)).expect("floored"));
        let l = chol.l();
        let w = 1.0 / n as f64;
        let particles = (0..n)
            .map(|_| {
                let nvec = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let d = l * nvec;
                Particle {
                    pose: PlanarPose::new(center.x + d.x, center.y + d.y, center.psi() + d.z),
                    weight: w,
                }
            })
            .collect();
        Self {
            particles,
            normalized: true,
        }
    }

    /// `n` particles uniform over an axis-aligned box with uniform heading,
    /// uniform weights.
    pub fn init_uniform(
        n: usize,
        x_range: (f64, f64),
        y_range: (f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = 1.0 / n as f64;
        let span = |r: (f64, f64), rng: &mut ChaCha8Rng| {
            if r.0 == r.1 {
                r.0
            } else {
                rng.random_range(r.0..r.1)
            }
        };
        let particles = (0..n)
            .map(|_| Particle {
                pose: PlanarPose::new(
                    span(x_range, rng),
                    span(y_range, rng),
                    rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                ),
                weight: w,
            })
            .collect();
        Self {
            particles,
            normalized: true,
        }
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `1 / Σwᵢ²` over normalized weights — the usual degeneracy measure.
    pub fn effective_sample_size(&self) -> f64 {
        let sum: f64 = self.particles.iter().map(|p| p.weight).sum();
        if sum <= 0.0 {
            return 0.0;
        }
        let sq: f64 = self.particles.iter().map(|p| (p.weight / sum).powi(2)).sum();
        1.0 / sq
    }
}

fn sample_bounded(rng: &mut ChaCha8Rng, bounds: (f64, f64)) -> f64 {
    if bounds.0 == bounds.1 {
        bounds.0
    } else {
        rng.random_range(bounds.0..bounds.1)
    }
}

/// Propagates every particle through the unicycle motion model with
/// per-particle uniform noise on speed and yaw rate (Euler step, position
/// integrated with the pre-step heading). Weights are untouched.
///
/// The caller's `rng` seeds an independent stream per particle index, so
/// the result is identical whether particles are processed serially or in
/// parallel.
pub fn propagate(p: &ParticleSet, u: &OdometryInput, rng: &mut ChaCha8Rng) -> ParticleSet {
    debug_assert!(u.dt > 0.0 && u.v_noise.0 <= u.v_noise.1 && u.gamma_noise.0 <= u.gamma_noise.1);
    let base: u64 = rng.random();
    let particles: Vec<Particle> = p
        .particles
        .par_iter()
        .enumerate()
        .map(|(i, part)| {
            let mut r = ChaCha8Rng::seed_from_u64(base ^ (i as u64).wrapping_mul(SEED_STRIDE));
            let v = u.v_meas + sample_bounded(&mut r, u.v_noise);
            let g = u.gamma_meas + sample_bounded(&mut r, u.gamma_noise);
            let psi = part.pose.psi();
            Particle {
                pose: PlanarPose::new(
                    part.pose.x + v * psi.cos() * u.dt,
                    part.pose.y + v * psi.sin() * u.dt,
                    psi + g * u.dt,
                ),
                weight: part.weight,
            }
        })
        .collect();
    ParticleSet {
        particles,
        normalized: p.normalized,
    }
}

/// The per-frame measurement fed to [`update`]: the fused pose plus the
/// hypotheses (and their VLAD distances) it came from.
#[derive(Clone, Debug)]
pub struct FrameMeasurement {
    pub z: PlanarPose,
    pub hypotheses: Vec<PoseHypothesis>,
    pub e_vlads: Vec<f64>,
}

impl FrameMeasurement {
    /// Bundles a fused pose with its hypotheses, pulling the VLAD
    /// distances the hypotheses already carry.
    pub fn from_hypotheses(z: PlanarPose, hypotheses: Vec<PoseHypothesis>) -> Self {
        let e_vlads = hypotheses.iter().map(|h| h.vlad_distance).collect();
        Self {
            z,
            hypotheses,
            e_vlads,
        }
    }
}

/// What happened inside an [`update`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateDiag {
    /// Every particle's likelihood underflowed to zero; the prior weights
    /// were kept.
    pub underflow: bool,
    pub resampled: bool,
    /// Effective sample size after reweighting (before any resampling).
    pub ess: f64,
}

/// Systematic (low-variance) resampling: one uniform offset, `n` evenly
/// spaced selection points. Expects weights summing to one; every particle
/// comes back with weight `1/n`. A particle of weight `w` is copied
/// between `floor(n·w)` and `ceil(n·w)` times.
pub fn systematic_resample(particles: &[Particle], rng: &mut ChaCha8Rng) -> Vec<Particle> {
    let n = particles.len();
    let u0: f64 = rng.random_range(0.0..1.0 / n as f64);
    let mut out = Vec::with_capacity(n);
    let mut i = 0usize;
    let mut cum = particles[0].weight;
    for k in 0..n {
        let target = u0 + k as f64 / n as f64;
        while cum < target && i + 1 < n {
            i += 1;
            cum += particles[i].weight;
        }
        out.push(Particle {
            pose: particles[i].pose,
            weight: 1.0 / n as f64,
        });
    }
    out
}

/// Measurement update. Without a measurement (or with one that has no
/// hypotheses) the set is returned unchanged — pure dead reckoning. With
/// one, weights are multiplied by the per-particle likelihood and
/// renormalized; if every likelihood underflows to zero the old weights
/// are kept and flagged. Finally the set is systematically resampled when
/// the effective sample size drops below half the particle count.
pub fn update(
    p: &ParticleSet,
    params: &GmmParams,
    measurement: Option<&FrameMeasurement>,
    rng: &mut ChaCha8Rng,
) -> (ParticleSet, UpdateDiag) {
    let dead_reckon = |set: &ParticleSet| {
        (
            set.clone(),
            UpdateDiag {
                ess: set.effective_sample_size(),
                ..UpdateDiag::default()
            },
        )
    };
    let Some(m) = measurement else {
        return dead_reckon(p);
    };
    if m.hypotheses.is_empty() {
        return dead_reckon(p);
    }
    assert_eq!(m.hypotheses.len(), m.e_vlads.len());

    let coeff = CoeffGaussian::new(params);
    let comp = ComponentGaussian::new(params);
    let components = mixture_components(&comp, &m.z, &m.hypotheses);

    let weighted: Vec<f64> = p
        .particles
        .par_iter()
        .map(|part| {
            part.weight
                * likelihood_with_components(
                    &coeff,
                    &components,
                    &m.hypotheses,
                    &part.pose,
                    &m.e_vlads,
                )
        })
        .collect();

    let sum: f64 = weighted.iter().sum();
    if sum <= 0.0 || !sum.is_finite() {
        let (set, mut diag) = dead_reckon(p);
        diag.underflow = true;
        return (set, diag);
    }

    let particles: Vec<Particle> = p
        .particles
        .iter()
        .zip(&weighted)
        .map(|(part, &w)| Particle {
            pose: part.pose,
            weight: w / sum,
        })
        .collect();
    let mut set = ParticleSet {
        particles,
        normalized: true,
    };

    let ess = set.effective_sample_size();
    let mut diag = UpdateDiag {
        underflow: false,
        resampled: false,
        ess,
    };
    if ess < set.len() as f64 / 2.0 {
        set = ParticleSet {
            particles: systematic_resample(&set.particles, rng),
            normalized: true,
        };
        diag.resampled = true;
    }
    (set, diag)
}

/// Point estimate: weighted mean position, weighted circular-mean heading.
pub fn estimate(p: &ParticleSet) -> PlanarPose {
    let mut sum = p.particles.iter().map(|q| q.weight).sum::<f64>();
    let uniform = sum <= 0.0;
    if uniform {
        sum = p.particles.len() as f64;
    }
    let w = |q: &Particle| if uniform { 1.0 } else { q.weight };
    let x = p.particles.iter().map(|q| w(q) * q.pose.x).sum::<f64>() / sum;
    let y = p.particles.iter().map(|q| w(q) * q.pose.y).sum::<f64>() / sum;
    let angles: Vec<f64> = p.particles.iter().map(|q| q.pose.psi()).collect();
    let weights: Vec<f64> = p.particles.iter().map(|q| w(q)).collect();
    let psi = circular_mean_weighted(&angles, Some(&weights)).unwrap_or(angles[0]);
    PlanarPose::new(x, y, psi)
}

/// Fits [`GmmParams`] from a training drive with known poses.
///
/// Every frame is pushed through retrieval and hypothesis generation
/// against `db`; each hypothesis contributes a 3-d pose error (truth minus
/// hypothesis) and a 4-d coefficient error (VLAD distance, hypothesis
/// relative to truth — the same orientation the coefficient sees at
/// runtime, with the truth standing in for the particle). Frames that
/// yield no hypotheses contribute nothing; fewer than two pooled errors is
/// an error.
pub fn train_from_dataset(
    training_frames: &[(FeatureSet, PlanarPose)],
    db: &MapDatabase,
    k: usize,
    cfg: &HypothesisConfig,
) -> Result<GmmParams, FusionError> {
    let mut errors3 = Vec::new();
    let mut errors4 = Vec::new();
    for (fs, truth) in training_frames {
        let Ok(vlad) = compute_vlad(db.vocabulary(), fs) else {
            continue;
        };
        let Ok(retrieved) = db.knn_query(&vlad, k) else {
            continue;
        };
        let hyps = hypothesize(db, fs, &retrieved, db.intrinsics(), db.mounting(), cfg);
        for h in &hyps {
            errors3.push(Vector3::new(
                truth.x - h.pose.x,
                truth.y - h.pose.y,
                wrap_angle(truth.psi() - h.pose.psi()),
            ));
            errors4.push(coefficient_error(h, truth, h.vlad_distance));
        }
    }
    let mut params = mle_fit(&errors3, &errors4, false)?;
    apply_variance_floors(&mut params);
    Ok(params)
}

/// Variance floors for trained parameters: (3 cm)², (15 mrad)² and a
/// matching retrieval-distance floor.
///
/// The mixture weights compare hypothesis poses against *particles*, whose
/// dispersion is set by the odometry noise, not by the hypothesis errors
/// the training set measures. A front end more accurate than the cloud it
/// weighs yields a coefficient Gaussian so sharp that likelihoods
/// underflow and the filter degenerates to dead reckoning. Flooring the
/// fitted variances at the dispersion the odometry noise produces over a
/// ~1 s correction horizon keeps the model usable no matter how sharp the
/// training errors are.
pub const TRAINED_POSITION_VAR_FLOOR: f64 = 9e-4;
pub const TRAINED_HEADING_VAR_FLOOR: f64 = 2.25e-4;
pub const TRAINED_VLAD_VAR_FLOOR: f64 = 1e-4;

fn apply_variance_floors(params: &mut GmmParams) {
    let lift = |m: &mut f64, floor: f64| {
        if *m < floor {
            *m = floor;
        }
    };
    lift(&mut params.sigma1[(0, 0)], TRAINED_POSITION_VAR_FLOOR);
    lift(&mut params.sigma1[(1, 1)], TRAINED_POSITION_VAR_FLOOR);
    lift(&mut params.sigma1[(2, 2)], TRAINED_HEADING_VAR_FLOOR);
    lift(&mut params.sigma2[(0, 0)], TRAINED_VLAD_VAR_FLOOR);
    lift(&mut params.sigma2[(1, 1)], TRAINED_POSITION_VAR_FLOOR);
    lift(&mut params.sigma2[(2, 2)], TRAINED_POSITION_VAR_FLOOR);
    lift(&mut params.sigma2[(3, 3)], TRAINED_HEADING_VAR_FLOOR);
}
