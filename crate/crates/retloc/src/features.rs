//! Binary keypoint descriptors, per-frame feature sets, and brute-force
//! Hamming matching.
//!
//! A descriptor is 32 bytes. Two views of those bytes coexist deliberately:
//! matching treats them as 256 bits under the Hamming metric, while the
//! vocabulary/VLAD code embeds each byte as a real in `[0, 255]` (a 32-d
//! vector). [`Descriptor::hamming`] serves the first view,
//! [`Descriptor::embedded`] the second.

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

/// Descriptor length in bytes.
pub const DESCRIPTOR_LEN: usize = 32;

/// Upper bound on features kept per frame.
pub const MAX_FEATURES: usize = 1000;

/// Default Hamming acceptance threshold for [`match_bruteforce`] — a common
/// working point for 256-bit binary descriptors.
pub const DEFAULT_MAX_DISTANCE: u32 = 64;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("keypoints ({keypoints}), descriptors ({descriptors}) and 3-d points ({points3d:?}) must have equal lengths")]
    MismatchedLengths {
        keypoints: usize,
        descriptors: usize,
        points3d: Option<usize>,
    },
    #[error("feature set has {0} features, limit is {MAX_FEATURES}")]
    TooManyFeatures(usize),
    #[error("3-d point {index} has non-positive depth z={z}")]
    NonPositiveDepth { index: usize, z: f32 },
    #[error("keypoint {index} has non-finite coordinates ({u}, {v})")]
    NonFiniteKeypoint { index: usize, u: f32, v: f32 },
}

/// A 256-bit binary feature descriptor.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Descriptor(pub [u8; DESCRIPTOR_LEN]);

#[inline]
fn hamming_words(a: &[u64; 4], b: &[u64; 4]) -> u32 {
    (a[0] ^ b[0]).count_ones()
        + (a[1] ^ b[1]).count_ones()
        + (a[2] ^ b[2]).count_ones()
        + (a[3] ^ b[3]).count_ones()
}

impl Descriptor {
    pub const ZERO: Descriptor = Descriptor([0u8; DESCRIPTOR_LEN]);

    /// Hamming distance: the number of differing bits, in `0..=256`.
    pub fn hamming(&self, other: &Descriptor) -> u32 {
        hamming_words(&self.words(), &other.words())
    }

    /// The descriptor as four little-endian 64-bit words; the matcher
    /// precomputes these so the hot loop XORs words instead of bytes.
    fn words(&self) -> [u64; 4] {
        let mut w = [0u64; 4];
        for (i, chunk) in self.0.chunks_exact(8).enumerate() {
            w[i] = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        w
    }

    /// The byte-embedded view: each byte as a real in `[0, 255]`.
    pub fn embedded(&self) -> [f64; DESCRIPTOR_LEN] {
        let mut out = [0.0; DESCRIPTOR_LEN];
        for (o, &b) in out.iter_mut().zip(self.0.iter()) {
            *o = b as f64;
        }
        out
    }

    /// Flips `count` bits chosen by `bit_indices` (values taken mod 256).
    /// Repeated indices toggle back; the simulator uses this for bit noise.
    pub fn with_flipped_bits(&self, bit_indices: &[u16]) -> Descriptor {
        let mut bytes = self.0;
        for &i in bit_indices {
            let i = (i as usize) % (DESCRIPTOR_LEN * 8);
            bytes[i / 8] ^= 1 << (i % 8);
        }
        Descriptor(bytes)
    }
}

impl std::fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Full 32-byte dumps drown test output; show a short prefix.
        write!(
            f,
            "Descriptor({:02x}{:02x}{:02x}{:02x}..)",
            self.0[0], self.0[1], self.0[2], self.0[3]
        )
    }
}

/// An image-plane keypoint position in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub u: f32,
    pub v: f32,
}

/// All features extracted from one frame: keypoints, descriptors, and
/// (when the source provides depth) camera-frame 3-d points.
///
/// The lists are parallel: index `i` refers to the same feature in each.
/// The 3-d channel is absent for pure localization queries; when present,
/// individual features may still lack a point (depth recovery can fail per
/// feature), hence the inner `Option`. Construction validates the
/// invariants, so the accessors can be plain.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub frame_id: u32,
    pub timestamp: f64,
    keypoints: Vec<Keypoint>,
    descriptors: Vec<Descriptor>,
    points3d: Option<Vec<Option<Vector3<f32>>>>,
}

impl FeatureSet {
    /// Builds a feature set, enforcing the default [`MAX_FEATURES`] cap.
    pub fn new(
        frame_id: u32,
        timestamp: f64,
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
        points3d: Option<Vec<Option<Vector3<f32>>>>,
    ) -> Result<Self, FeatureError> {
        Self::with_limit(frame_id, timestamp, keypoints, descriptors, points3d, MAX_FEATURES)
    }

    /// As [`FeatureSet::new`] with an explicit feature-count limit, for
    /// callers that filter oversized raw detections afterwards.
    pub fn with_limit(
        frame_id: u32,
        timestamp: f64,
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
        points3d: Option<Vec<Option<Vector3<f32>>>>,
        limit: usize,
    ) -> Result<Self, FeatureError> {
        if keypoints.len() != descriptors.len()
            || points3d.as_ref().is_some_and(|p| p.len() != keypoints.len())
        {
            return Err(FeatureError::MismatchedLengths {
                keypoints: keypoints.len(),
                descriptors: descriptors.len(),
                points3d: points3d.as_ref().map(Vec::len),
            });
        }
        if keypoints.len() > limit {
            return Err(FeatureError::TooManyFeatures(keypoints.len()));
        }
        for (index, kp) in keypoints.iter().enumerate() {
            if !kp.u.is_finite() || !kp.v.is_finite() {
                return Err(FeatureError::NonFiniteKeypoint {
                    index,
                    u: kp.u,
                    v: kp.v,
                });
            }
        }
        if let Some(pts) = &points3d {
            for (index, p) in pts.iter().enumerate() {
                if let Some(p) = p {
                    if !(p.z > 0.0) {
                        return Err(FeatureError::NonPositiveDepth { index, z: p.z });
                    }
                }
            }
        }
        Ok(Self {
            frame_id,
            timestamp,
            keypoints,
            descriptors,
            points3d,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    pub fn points3d(&self) -> Option<&[Option<Vector3<f32>>]> {
        self.points3d.as_deref()
    }

    /// The 3-d point of feature `i`, if the channel exists and depth
    /// recovery succeeded for that feature.
    pub fn point3d(&self, i: usize) -> Option<Vector3<f32>> {
        self.points3d.as_ref().and_then(|p| p[i])
    }
}

/// A correspondence between a query feature and a reference feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Match {
    pub query_idx: usize,
    pub ref_idx: usize,
    /// Hamming distance in bits, `0..=256`.
    pub distance: u32,
}

/// Brute-force descriptor matching.
///
/// Each query descriptor is paired with its nearest reference descriptor by
/// Hamming distance (ties go to the lowest reference index). Pairs farther
/// than `max_distance` are dropped. With `cross_check` only mutual nearest
/// neighbors survive. The result is sorted by `(distance, ref_idx,
/// query_idx)`, which makes the output fully deterministic.
///
/// An empty query or reference set yields an empty match list.
pub fn match_bruteforce(
    query: &FeatureSet,
    reference: &FeatureSet,
    max_distance: u32,
    cross_check: bool,
) -> Vec<Match> {
    if query.is_empty() || reference.is_empty() {
        return Vec::new();
    }

    let qw: Vec<[u64; 4]> = query.descriptors().iter().map(Descriptor::words).collect();
    let rw: Vec<[u64; 4]> = reference.descriptors().iter().map(Descriptor::words).collect();
    let nearest = |d: &[u64; 4], pool: &[[u64; 4]]| -> (usize, u32) {
        let mut best = (0usize, u32::MAX);
        for (i, r) in pool.iter().enumerate() {
            let dist = hamming_words(d, r);
            if dist < best.1 {
                best = (i, dist);
            }
        }
        best
    };

    // Nearest reference per query; order of the collected vector follows the
    // query index, so the parallel run is indistinguishable from serial.
    let fwd: Vec<(usize, u32)> = qw.par_iter().map(|d| nearest(d, &rw)).collect();

    let bwd: Option<Vec<(usize, u32)>> =
        cross_check.then(|| rw.par_iter().map(|d| nearest(d, &qw)).collect());

    let mut matches: Vec<Match> = fwd
        .iter()
        .enumerate()
        .filter(|&(qi, &(ri, dist))| {
            dist <= max_distance
                && bwd.as_ref().is_none_or(|b| b[ri].0 == qi)
        })
        .map(|(qi, &(ri, dist))| Match {
            query_idx: qi,
            ref_idx: ri,
            distance: dist,
        })
        .collect();

    matches.sort_by_key(|m| (m.distance, m.ref_idx, m.query_idx));
    matches
}
