//! Visual vocabulary (k-means over byte-embedded descriptors) and VLAD
//! aggregation.
//!
//! Descriptors are embedded as 32-d real vectors with entries in `[0, 255]`
//! (see [`Descriptor::embedded`]); the vocabulary is the set of k-means
//! cluster centers in that space, k = 64 by default. A frame's VLAD matrix
//! stacks, per cluster, the summed residuals of the frame's descriptors
//! against their assigned centers, L2-normalizes each row
//! (intra-normalization), and finally normalizes the whole matrix to unit
//! Frobenius norm.

use crate::features::{Descriptor, FeatureSet, DESCRIPTOR_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use thiserror::Error;

/// Default vocabulary size.
pub const VOCAB_K: usize = 64;

/// Default Lloyd iteration cap.
pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("k-means needs at least k={k} distinct descriptors, got {distinct}")]
    InsufficientData { distinct: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("cannot compute a VLAD descriptor for an empty feature set")]
    EmptyFeatureSet,
    #[error("vocabulary has {0} centers with non-finite entries")]
    NonFiniteCenters(usize),
    #[error("vocabulary must have at least one center")]
    EmptyVocabulary,
}

type Embedded = [f64; DESCRIPTOR_LEN];

fn dist2(a: &Embedded, b: &Embedded) -> f64 {
    let mut acc = 0.0;
    for i in 0..DESCRIPTOR_LEN {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// A trained visual vocabulary: k cluster centers in embedded space.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    centers: Vec<Embedded>,
}

impl Vocabulary {
    /// Wraps precomputed centers (e.g. loaded from a map file).
    pub fn from_centers(centers: Vec<Embedded>) -> Result<Self, VocabError> {
        if centers.is_empty() {
            return Err(VocabError::EmptyVocabulary);
        }
        let bad = centers
            .iter()
            .filter(|c| c.iter().any(|x| !x.is_finite()))
            .count();
        if bad > 0 {
            return Err(VocabError::NonFiniteCenters(bad));
        }
        Ok(Self { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Embedded] {
        &self.centers
    }

    /// Index of the nearest center by Euclidean distance in embedded space;
    /// ties go to the lowest index.
    pub fn assign(&self, d: &Descriptor) -> usize {
        self.assign_embedded(&d.embedded())
    }

    fn assign_embedded(&self, e: &Embedded) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in self.centers.iter().enumerate() {
            let dj = dist2(e, c);
            if dj < best_d {
                best_d = dj;
                best = j;
            }
        }
        best
    }
}

/// A frame's VLAD descriptor: one row per vocabulary cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct VladMatrix {
    rows: Vec<Embedded>,
}

impl VladMatrix {
    pub fn from_rows(rows: Vec<Embedded>) -> Self {
        Self { rows }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Embedded] {
        &self.rows
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every element to f32 precision (still held as f64).
    ///
    /// Map files store VLADs as f32; quantizing at entry construction makes
    /// the in-memory value identical to what a save/load roundtrip yields.
    pub fn quantized(&self) -> VladMatrix {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut q = [0.0; DESCRIPTOR_LEN];
                for (qi, &x) in q.iter_mut().zip(r.iter()) {
                    *qi = x as f32 as f64;
                }
                q
            })
            .collect();
        VladMatrix { rows }
    }

    /// Frobenius norm of the elementwise difference. Panics on shape
    /// mismatch — VLADs from different vocabularies must never be compared.
    pub fn frobenius_distance(&self, other: &VladMatrix) -> f64 {
        assert_eq!(
            self.rows.len(),
            other.rows.len(),
            "VLAD shape mismatch: {} vs {} rows",
            self.rows.len(),
            other.rows.len()
        );
        let mut acc = 0.0;
        for (a, b) in self.rows.iter().zip(other.rows.iter()) {
            for i in 0..DESCRIPTOR_LEN {
                let d = a[i] - b[i];
                acc += d * d;
            }
        }
        acc.sqrt()
    }
}

/// Computes the VLAD matrix of a feature set under a vocabulary.
///
/// Row k is the sum of residuals `(embedded(d) - center_k)` over descriptors
/// assigned to cluster k; nonzero rows are then L2-normalized and the whole
/// matrix is scaled to unit Frobenius norm (an all-zero matrix stays zero).
///
/// Residual sums are accumulated as exact integer descriptor sums minus
/// `count * center`, so the result is bitwise invariant to descriptor order.
pub fn compute_vlad(vocab: &Vocabulary, fs: &FeatureSet) -> Result<VladMatrix, VocabError> {
    if fs.is_empty() {
        return Err(VocabError::EmptyFeatureSet);
    }
    let k = vocab.k();
    let mut sums = vec![[0i64; DESCRIPTOR_LEN]; k];
    let mut counts = vec![0i64; k];
    for d in fs.descriptors() {
        let j = vocab.assign(d);
        counts[j] += 1;
        for (s, &b) in sums[j].iter_mut().zip(d.0.iter()) {
            *s += b as i64;
        }
    }

    let mut rows = vec![[0.0; DESCRIPTOR_LEN]; k];
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let row = &mut rows[j];
        for i in 0..DESCRIPTOR_LEN {
            row[i] = sums[j][i] as f64 - counts[j] as f64 * vocab.centers[j][i];
        }
        // Intra-normalization; a residual sum of exactly zero stays zero.
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in row.iter_mut() {
                *x /= norm;
            }
        }
    }

    let mut vlad = VladMatrix { rows };
    let fro = vlad.frobenius_norm();
    if fro > 0.0 {
        for row in vlad.rows.iter_mut() {
            for x in row.iter_mut() {
                *x /= fro;
            }
        }
    }
    Ok(vlad)
}

/// Sum of squared distances from each descriptor to its assigned center.
pub fn inertia(vocab: &Vocabulary, descriptors: &[Descriptor]) -> f64 {
    descriptors
        .iter()
        .map(|d| {
            let e = d.embedded();
            dist2(&e, &vocab.centers[vocab.assign_embedded(&e)])
        })
        .sum()
}

/// Trains a vocabulary with Lloyd's algorithm on byte-embedded descriptors.
///
/// Seeding is k-means++ driven by `seed`; the run is deterministic and
/// bit-identical across thread counts (the parallel assignment step is a
/// pure per-point map). Iteration stops when no assignment changes or after
/// `max_iter` rounds. Clusters that lose all members are re-seeded to the
/// point currently farthest from its assigned center.
pub fn kmeans_fit(
    descriptors: &[Descriptor],
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<Vocabulary, VocabError> {
    Ok(kmeans_fit_detailed(descriptors, k, max_iter, seed)?.0)
}

/// As [`kmeans_fit`], also returning the per-iteration inertia sequence
/// (measured after each assignment step). Unit tests assert monotonicity.
pub(crate) fn kmeans_fit_detailed(
    descriptors: &[Descriptor],
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<(Vocabulary, Vec<f64>), VocabError> {
    if k == 0 {
        return Err(VocabError::ZeroK);
    }
    let distinct = descriptors.iter().collect::<HashSet<_>>().len();
    if distinct < k {
        return Err(VocabError::InsufficientData { distinct, k });
    }

    let points: Vec<Embedded> = descriptors.iter().map(Descriptor::embedded).collect();
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Greedy k-means++ seeding: the first center is uniform; every later
    // center is sampled `2 + floor(ln k)` times from the D^2 distribution
    // and the candidate that lowers the total potential most is kept. The
    // greedy variant rarely drops a cluster, which plain k-means++ does
    // often enough to hurt. Points coinciding with a chosen center carry
    // zero weight, so duplicates are never re-picked.
    let pick_by_cumsum = |d2: &[f64], target: f64| -> usize {
        let mut cum = 0.0;
        for (i, &w) in d2.iter().enumerate() {
            cum += w;
            if w > 0.0 && target < cum {
                return i;
            }
        }
        d2.iter().rposition(|&w| w > 0.0).expect("total > 0")
    };
    let n_candidates = 2 + (k as f64).ln().max(0.0) as usize;
    let mut centers: Vec<Embedded> = Vec::with_capacity(k);
    centers.push(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..n_candidates {
            let idx = pick_by_cumsum(&d2, rng.random_range(0.0..total));
            let potential: f64 = points
                .iter()
                .zip(d2.iter())
                .map(|(p, &w)| w.min(dist2(p, &points[idx])))
                .sum();
            if best.is_none_or(|(bp, _)| potential < bp) {
                best = Some((potential, idx));
            }
        }
        let chosen = best.expect("at least one candidate").1;
        centers.push(points[chosen]);
        for (w, p) in d2.iter_mut().zip(points.iter()) {
            *w = w.min(dist2(p, centers.last().unwrap()));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut inertia_history = Vec::new();
    for _ in 0..max_iter {
        // Assignment (parallel map; output order fixed by point index).
        let new_assignment: Vec<usize> = points
            .par_iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in centers.iter().enumerate() {
                    let dj = dist2(p, c);
                    if dj < best_d {
                        best_d = dj;
                        best = j;
                    }
                }
                best
            })
            .collect();

        let it: f64 = points
            .iter()
            .zip(new_assignment.iter())
            .map(|(p, &j)| dist2(p, &centers[j]))
            .sum();
        if let Some(&prev) = inertia_history.last() {
            debug_assert!(
                it <= prev * (1.0 + 1e-12) + 1e-9,
                "inertia increased: {prev} -> {it}"
            );
        }
        inertia_history.push(it);

        let converged = new_assignment == assignment;
        assignment = new_assignment;
        if converged {
            break;
        }

        // Update step: per-cluster means, accumulated in point order.
        let mut sums = vec![[0.0; DESCRIPTOR_LEN]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(assignment.iter()) {
            counts[j] += 1;
            for i in 0..DESCRIPTOR_LEN {
                sums[j][i] += p[i];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for i in 0..DESCRIPTOR_LEN {
                    centers[j][i] = sums[j][i] / counts[j] as f64;
                }
            }
        }

        // Empty-cluster repair: move each empty center onto the point
        // farthest from its assigned center (lowest index wins ties), one
        // point per repaired cluster.
        let mut taken: HashSet<usize> = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far_i = None;
            let mut far_d = -1.0;
            for (i, (p, &a)) in points.iter().zip(assignment.iter()).enumerate() {
                if taken.contains(&i) {
                    continue;
                }
                let d = dist2(p, &centers[a]);
                if d > far_d {
                    far_d = d;
                    far_i = Some(i);
                }
            }
            if let Some(i) = far_i {
                centers[j] = points[i];
                taken.insert(i);
            }
        }
    }

    Ok((Vocabulary { centers }, inertia_history))
}
