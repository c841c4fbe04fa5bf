//! The map database: geo-tagged tuples of (features with 3-d coordinates,
//! VLAD matrix, global pose) plus exact KNN retrieval over VLADs.
//!
//! Retrieval is a brute-force scan: at the scales this engine targets
//! (thousands of entries) an exact scan over flattened VLADs is both faster
//! to beat and easier to trust than an approximate index. The database is
//! immutable once built; [`MapDatabase::augment`] returns a new value, which
//! is how recovery data gets layered onto an existing map.

use crate::features::{FeatureSet, MAX_FEATURES};
use crate::geometry::{CameraIntrinsics, MountingTransform, PlanarPose};
use crate::io::{self, ByteReader, ByteWriter, FileError};
use crate::vocab::{compute_vlad, VladMatrix, VocabError, Vocabulary};
use rayon::prelude::*;
use std::path::Path;
use thiserror::Error;

/// Default number of neighbors returned by retrieval.
pub const DEFAULT_KNN_K: usize = 10;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("no usable features: every feature in frame {frame_id} lacks a 3-d point")]
    NoUsableFeatures { frame_id: u32 },
    #[error("cannot query an empty map database")]
    EmptyDatabase,
    #[error("entry {index} was built under a different vocabulary (its VLAD does not reproduce)")]
    VocabularyMismatch { index: usize },
    #[error("knn_k must be at least 1")]
    ZeroKnnK,
    #[error(transparent)]
    File(#[from] FileError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// One map tuple: a frame's kept features (all with 3-d points), its VLAD
/// under the database vocabulary, and the vehicle pose where it was taken.
#[derive(Clone, Debug, PartialEq)]
pub struct MapEntry {
    /// Assigned by the database (dense, in insertion order).
    pub entry_id: u32,
    pub pose: PlanarPose,
    pub vlad: VladMatrix,
    pub features: FeatureSet,
}

/// Builds a map entry from a frame: drops features without 3-d points,
/// caps the rest at [`MAX_FEATURES`], and computes the VLAD of what's kept
/// (quantized to the file format's f32 precision). Returns the entry and
/// the number of dropped features. The entry id is assigned on insertion,
/// not here.
pub fn build_entry(
    fs: &FeatureSet,
    pose: PlanarPose,
    vocab: &Vocabulary,
) -> Result<(MapEntry, usize), MapError> {
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    let mut points = Vec::new();
    for i in 0..fs.len() {
        let Some(p) = fs.point3d(i) else { continue };
        if keypoints.len() == MAX_FEATURES {
            break;
        }
        keypoints.push(fs.keypoints()[i]);
        descriptors.push(fs.descriptors()[i]);
        points.push(Some(p));
    }
    if keypoints.is_empty() {
        return Err(MapError::NoUsableFeatures {
            frame_id: fs.frame_id,
        });
    }
    let dropped = fs.len() - keypoints.len();
    let filtered = FeatureSet::new(fs.frame_id, fs.timestamp, keypoints, descriptors, Some(points))
        .expect("filtered subset of a valid feature set is valid");
    let vlad = compute_vlad(vocab, &filtered)?.quantized();
    Ok((
        MapEntry {
            entry_id: 0,
            pose,
            vlad,
            features: filtered,
        },
        dropped,
    ))
}

/// Counts reported by [`MapDatabase::build`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub entries_built: usize,
    /// Frames skipped entirely because no feature had a 3-d point.
    pub frames_skipped: usize,
    /// Features dropped across all built entries (no 3-d point or over cap).
    pub features_dropped: usize,
}

/// The image-retrieval map: entries, the vocabulary they were encoded
/// under, and the camera setup the map was recorded with.
#[derive(Clone, Debug, PartialEq)]
pub struct MapDatabase {
    vocabulary: Vocabulary,
    entries: Vec<MapEntry>,
    knn_k: usize,
    intrinsics: CameraIntrinsics,
    mounting: MountingTransform,
    creation: String,
}

impl MapDatabase {
    /// Builds a database from mapping frames. Frames in which no feature
    /// has a 3-d point are skipped and counted in the report.
    pub fn build(
        vocabulary: Vocabulary,
        frames: &[(FeatureSet, PlanarPose)],
        intrinsics: CameraIntrinsics,
        mounting: MountingTransform,
        knn_k: usize,
        creation: &str,
    ) -> Result<(Self, BuildReport), MapError> {
        if knn_k == 0 {
            return Err(MapError::ZeroKnnK);
        }
        let mut entries = Vec::with_capacity(frames.len());
        let mut report = BuildReport::default();
        for (fs, pose) in frames {
            match build_entry(fs, *pose, &vocabulary) {
                Ok((mut entry, dropped)) => {
                    entry.entry_id = entries.len() as u32;
                    entries.push(entry);
                    report.entries_built += 1;
                    report.features_dropped += dropped;
                }
                Err(MapError::NoUsableFeatures { .. }) => report.frames_skipped += 1,
                Err(e) => return Err(e),
            }
        }
        Ok((
            Self {
                vocabulary,
                entries,
                knn_k,
                intrinsics,
                mounting,
                creation: creation.to_string(),
            },
            report,
        ))
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    /// Entry ids are dense, so lookup is an index.
    pub fn entry(&self, entry_id: u32) -> Option<&MapEntry> {
        self.entries.get(entry_id as usize)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn mounting(&self) -> &MountingTransform {
        &self.mounting
    }

    pub fn creation(&self) -> &str {
        &self.creation
    }

    /// The `min(k, len)` entries nearest to `query` by Frobenius distance,
    /// ascending; ties break to the lower entry id. Exact (brute force).
    pub fn knn_query(&self, query: &VladMatrix, k: usize) -> Result<Vec<(u32, f64)>, MapError> {
        if self.entries.is_empty() {
            return Err(MapError::EmptyDatabase);
        }
        let mut scored: Vec<(u32, f64)> = self
            .entries
            .par_iter()
            .map(|e| (e.entry_id, e.vlad.frobenius_distance(query)))
            .collect();
        scored.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances").then(a.0.cmp(&b.0)));
        scored.truncate(k.min(scored.len()));
        Ok(scored)
    }

    /// Returns a new database with `new_entries` appended under fresh ids.
    ///
    /// Every appended entry must have been built under this database's
    /// vocabulary; that is checked by recomputing its VLAD from its features
    /// (bitwise reproduction — construction is deterministic, so an entry
    /// from the same vocabulary always reproduces exactly).
    pub fn augment(&self, new_entries: Vec<MapEntry>) -> Result<MapDatabase, MapError> {
        for (index, e) in new_entries.iter().enumerate() {
            let recomputed = compute_vlad(&self.vocabulary, &e.features)?.quantized();
            if recomputed != e.vlad {
                return Err(MapError::VocabularyMismatch { index });
            }
        }
        let mut out = self.clone();
        for mut e in new_entries {
            e.entry_id = out.entries.len() as u32;
            out.entries.push(e);
        }
        Ok(out)
    }

    /// Serializes to the `MAPDB\x01` format (see the [`crate::io`] docs).
    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        let mut w = ByteWriter::new();
        io::write_vocab_body(&mut w, &self.vocabulary)?;
        for e in &self.entries {
            w.put_u32(e.entry_id);
            io::write_pose(&mut w, &e.pose);
            io::write_vlad(&mut w, &e.vlad);
            io::write_feature_block(&mut w, &e.features, true);
        }
        io::write_metadata(
            &mut w,
            &self.intrinsics,
            &self.mounting,
            self.knn_k as u32,
            &self.creation,
        );
        // Frame provenance is not part of the entry block; keep it in the
        // trailer so a load reproduces every field of every entry.
        for e in &self.entries {
            w.put_u32(e.features.frame_id);
            w.put_f64(e.features.timestamp);
        }
        io::write_map_file(path, self.entries.len() as u32, &w.into_vec())?;
        Ok(())
    }

    /// Loads a `MAPDB\x01` file, validating structure, checksum, and the
    /// entry invariants (dense ids, 3-d point on every feature).
    pub fn load(path: &Path) -> Result<MapDatabase, MapError> {
        let (count, body) = io::read_map_file(path)?;
        let mut r = ByteReader::new(&body, 16);
        let vocabulary = io::read_vocab_body(&mut r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for i in 0..count {
            let entry_id = r.get_u32("entry id")?;
            if entry_id != i {
                return Err(FileError::CorruptFile {
                    offset: r.offset() - 4,
                    what: format!("entry ids must be dense: expected {i}, got {entry_id}"),
                }
                .into());
            }
            let pose = io::read_pose(&mut r)?;
            let vlad = io::read_vlad(&mut r)?;
            // Frame id / timestamp live in the metadata trailer and are
            // patched in below once it has been read.
            let features = io::read_feature_block(&mut r, 0, 0.0, true)?;
            if features.is_empty() {
                return Err(FileError::CorruptFile {
                    offset: r.offset(),
                    what: format!("entry {i} has no features"),
                }
                .into());
            }
            for j in 0..features.len() {
                if features.point3d(j).is_none() {
                    return Err(FileError::CorruptFile {
                        offset: r.offset(),
                        what: format!("entry {i} feature {j} lacks a 3-d point"),
                    }
                    .into());
                }
            }
            entries.push(MapEntry {
                entry_id,
                pose,
                vlad,
                features,
            });
        }
        let (intrinsics, mounting, knn_k, creation) = io::read_metadata(&mut r)?;
        for e in entries.iter_mut() {
            e.features.frame_id = r.get_u32("entry frame id")?;
            e.features.timestamp = r.get_f64("entry timestamp")?;
        }
        if r.remaining() != 0 {
            return Err(FileError::CorruptFile {
                offset: r.offset(),
                what: format!("{} trailing bytes", r.remaining()),
            }
            .into());
        }
        if knn_k == 0 {
            return Err(MapError::ZeroKnnK);
        }
        Ok(MapDatabase {
            vocabulary,
            entries,
            knn_k: knn_k as usize,
            intrinsics,
            mounting,
            creation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Descriptor, Keypoint, DESCRIPTOR_LEN};
    use crate::vocab::kmeans_fit;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_descriptor(rng: &mut impl Rng) -> Descriptor {
        let mut b = [0u8; DESCRIPTOR_LEN];
        rng.fill(&mut b[..]);
        Descriptor(b)
    }

    fn frame(rng: &mut impl Rng, frame_id: u32, n: usize) -> FeatureSet {
        let kps = (0..n)
            .map(|_| Keypoint {
                u: rng.random_range(0.0..640.0),
                v: rng.random_range(0.0..480.0),
            })
            .collect();
        let ds = (0..n).map(|_| random_descriptor(rng)).collect();
        let pts = (0..n)
            .map(|_| Some(Vector3::new(rng.random(), rng.random(), 1.0 + rng.random::<f32>())))
            .collect();
        FeatureSet::new(frame_id, frame_id as f64 * 0.1, kps, ds, Some(pts)).unwrap()
    }

    fn small_vocab(rng: &mut impl Rng, k: usize) -> Vocabulary {
        let data: Vec<Descriptor> = (0..k * 20).map(|_| random_descriptor(rng)).collect();
        kmeans_fit(&data, k, 50, 1).unwrap()
    }

    fn test_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn build_db(rng: &mut impl Rng, vocab: &Vocabulary, n_frames: usize) -> MapDatabase {
        let frames: Vec<(FeatureSet, PlanarPose)> = (0..n_frames)
            .map(|i| {
                (
                    frame(rng, i as u32, 8),
                    PlanarPose::new(i as f64 * 0.1, 0.0, 0.0),
                )
            })
            .collect();
        MapDatabase::build(
            vocab.clone(),
            &frames,
            test_intrinsics(),
            MountingTransform::identity(),
            DEFAULT_KNN_K,
            "test",
        )
        .unwrap()
        .0
    }

    #[test]
    fn build_entry_filters_features_without_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vocab = small_vocab(&mut rng, 8);
        let n = 1200;
        let kps = vec![Keypoint { u: 1.0, v: 1.0 }; n];
        let ds: Vec<Descriptor> = (0..n).map(|_| random_descriptor(&mut rng)).collect();
        // 900 features get a 3-d point, the other 300 do not.
        let pts: Vec<Option<Vector3<f32>>> = (0..n)
            .map(|i| (i % 4 != 3).then(|| Vector3::new(0.0, 0.0, 1.0)))
            .collect();
        let fs = FeatureSet::with_limit(0, 0.0, kps, ds, Some(pts), n).unwrap();

        let (entry, dropped) = build_entry(&fs, PlanarPose::default(), &vocab).unwrap();
        assert_eq!(entry.features.len(), 900);
        assert_eq!(dropped, 300);
        assert!(entry.features.points3d().unwrap().iter().all(Option::is_some));
    }

    #[test]
    fn build_entry_rejects_frames_without_any_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vocab = small_vocab(&mut rng, 4);
        let kps = vec![Keypoint { u: 1.0, v: 1.0 }; 5];
        let ds: Vec<Descriptor> = (0..5).map(|_| random_descriptor(&mut rng)).collect();
        // Depth channel absent entirely.
        let fs = FeatureSet::new(3, 0.0, kps.clone(), ds.clone(), None).unwrap();
        assert!(matches!(
            build_entry(&fs, PlanarPose::default(), &vocab),
            Err(MapError::NoUsableFeatures { frame_id: 3 })
        ));
        // Depth channel present but empty per feature.
        let fs = FeatureSet::new(3, 0.0, kps, ds, Some(vec![None; 5])).unwrap();
        assert!(matches!(
            build_entry(&fs, PlanarPose::default(), &vocab),
            Err(MapError::NoUsableFeatures { frame_id: 3 })
        ));
    }

    #[test]
    fn build_entry_vlad_matches_recompute_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vocab = small_vocab(&mut rng, 16);
        let fs = frame(&mut rng, 0, 40);
        let (entry, _) = build_entry(&fs, PlanarPose::default(), &vocab).unwrap();
        let oracle = compute_vlad(&vocab, &entry.features).unwrap().quantized();
        assert_eq!(entry.vlad, oracle);
    }

    #[test]
    fn knn_exact_match_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vocab = small_vocab(&mut rng, 8);
        let db = build_db(&mut rng, &vocab, 20);

        let probe = db.entries()[7].vlad.clone();
        let hits = db.knn_query(&probe, 1).unwrap();
        assert_eq!(hits, vec![(7, 0.0)]);

        let all = db.knn_query(&probe, 1000).unwrap();
        assert_eq!(all.len(), 20);
        for w in all.windows(2) {
            assert!(w[0].1 <= w[1].1, "distances must be non-decreasing");
        }
    }

    #[test]
    fn knn_ties_break_to_lower_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vocab = small_vocab(&mut rng, 8);
        let fs = frame(&mut rng, 0, 8);
        // Two identical frames at the same pose: same VLAD, distinct ids.
        let frames = vec![
            (fs.clone(), PlanarPose::new(1.0, 2.0, 0.3)),
            (fs.clone(), PlanarPose::new(1.0, 2.0, 0.3)),
        ];
        let (db, _) = MapDatabase::build(
            vocab,
            &frames,
            test_intrinsics(),
            MountingTransform::identity(),
            2,
            "",
        )
        .unwrap();
        let hits = db.knn_query(&db.entries()[0].vlad.clone(), 2).unwrap();
        assert_eq!(hits, vec![(0, 0.0), (1, 0.0)]);
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vocab = small_vocab(&mut rng, 8);
        let db = build_db(&mut rng, &vocab, 500);
        let probe_fs = frame(&mut rng, 9999, 8);
        let probe = compute_vlad(db.vocabulary(), &probe_fs).unwrap();

        let mut oracle: Vec<(u32, f64)> = db
            .entries()
            .iter()
            .map(|e| (e.entry_id, e.vlad.frobenius_distance(&probe)))
            .collect();
        oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(10);

        let got = db.knn_query(&probe, 10).unwrap();
        assert_eq!(got, oracle);
    }

    #[test]
    fn knn_rejects_empty_database() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = small_vocab(&mut rng, 4);
        let (db, _) = MapDatabase::build(
            vocab,
            &[],
            test_intrinsics(),
            MountingTransform::identity(),
            10,
            "",
        )
        .unwrap();
        let probe = VladMatrix::from_rows(vec![[0.0; DESCRIPTOR_LEN]; 4]);
        assert!(matches!(db.knn_query(&probe, 1), Err(MapError::EmptyDatabase)));
    }

    fn db_64(rng: &mut impl Rng, n_frames: usize) -> MapDatabase {
        let vocab = small_vocab(rng, 64);
        build_db(rng, &vocab, n_frames)
    }

    #[test]
    fn save_load_roundtrip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let db = db_64(&mut rng, 100);
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.mapdb");
        db.save(&path).unwrap();

        let back = MapDatabase::load(&path).unwrap();
        assert_eq!(db, back);

        // Byte-identical re-serialization.
        let path2 = dir.path().join("map2.mapdb");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let db = db_64(&mut rng, 3);
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.mapdb");
        db.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.mapdb");

        // Wrong magic.
        let mut bytes = good.clone();
        bytes[2] = b'Z';
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            MapDatabase::load(&bad),
            Err(MapError::File(FileError::CorruptFile { offset: 0, .. }))
        ));

        // Version from the future.
        let mut bytes = good.clone();
        bytes[6] = 2;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            MapDatabase::load(&bad),
            Err(MapError::File(FileError::VersionMismatch { found: 2, .. }))
        ));

        // Truncation.
        std::fs::write(&bad, &good[..good.len() / 2]).unwrap();
        assert!(matches!(
            MapDatabase::load(&bad),
            Err(MapError::File(FileError::CorruptFile { .. }))
        ));

        // Bit flip in the body trips the checksum.
        let mut bytes = good.clone();
        let mid = 16 + (bytes.len() - 16) / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&bad, &bytes).unwrap();
        match MapDatabase::load(&bad) {
            Err(MapError::File(FileError::CorruptFile { what, .. })) => {
                assert!(what.contains("checksum"), "{what}");
            }
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn augment_empty_is_identity_and_new_entries_are_queryable() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let vocab = small_vocab(&mut rng, 8);
        let db = build_db(&mut rng, &vocab, 10);

        let same = db.augment(vec![]).unwrap();
        assert_eq!(db, same);

        let fs = frame(&mut rng, 100, 8);
        let (entry, _) = build_entry(&fs, PlanarPose::new(5.0, 5.0, 1.0), db.vocabulary()).unwrap();
        let probe = entry.vlad.clone();
        let db2 = db.augment(vec![entry]).unwrap();
        assert_eq!(db2.len(), 11);
        assert_eq!(db2.entries()[10].entry_id, 10);
        let hits = db2.knn_query(&probe, 1).unwrap();
        assert_eq!(hits[0], (10, 0.0));
    }

    #[test]
    fn augment_equals_rebuild_from_concatenated_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vocab = small_vocab(&mut rng, 8);
        let frames_a: Vec<(FeatureSet, PlanarPose)> = (0..6)
            .map(|i| (frame(&mut rng, i, 8), PlanarPose::new(i as f64, 0.0, 0.0)))
            .collect();
        let frames_b: Vec<(FeatureSet, PlanarPose)> = (0..4)
            .map(|i| (frame(&mut rng, 100 + i, 8), PlanarPose::new(0.0, i as f64, 0.0)))
            .collect();

        let (db_a, _) = MapDatabase::build(
            vocab.clone(),
            &frames_a,
            test_intrinsics(),
            MountingTransform::identity(),
            DEFAULT_KNN_K,
            "x",
        )
        .unwrap();
        let entries_b: Vec<MapEntry> = frames_b
            .iter()
            .map(|(fs, pose)| build_entry(fs, *pose, &vocab).unwrap().0)
            .collect();
        let augmented = db_a.augment(entries_b).unwrap();

        let concatenated: Vec<(FeatureSet, PlanarPose)> =
            frames_a.into_iter().chain(frames_b).collect();
        let (rebuilt, _) = MapDatabase::build(
            vocab,
            &concatenated,
            test_intrinsics(),
            MountingTransform::identity(),
            DEFAULT_KNN_K,
            "x",
        )
        .unwrap();
        assert_eq!(augmented, rebuilt);
    }

    #[test]
    fn augment_rejects_foreign_vocabulary() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vocab_a = small_vocab(&mut rng, 8);
        let vocab_b = small_vocab(&mut rng, 8);
        assert_ne!(vocab_a.centers(), vocab_b.centers());
        let db = build_db(&mut rng, &vocab_a, 5);
        let fs = frame(&mut rng, 50, 8);
        let (entry, _) = build_entry(&fs, PlanarPose::default(), &vocab_b).unwrap();
        assert!(matches!(
            db.augment(vec![entry]),
            Err(MapError::VocabularyMismatch { index: 0 })
        ));
    }

    #[test]
    fn build_skips_pointless_frames_and_reports() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let vocab = small_vocab(&mut rng, 8);
        let good = frame(&mut rng, 0, 8);
        let kps = vec![Keypoint { u: 1.0, v: 1.0 }; 3];
        let ds: Vec<Descriptor> = (0..3).map(|_| random_descriptor(&mut rng)).collect();
        let pointless = FeatureSet::new(1, 0.1, kps, ds, None).unwrap();
        let frames = vec![
            (good, PlanarPose::default()),
            (pointless, PlanarPose::default()),
        ];
        let (db, report) = MapDatabase::build(
            vocab,
            &frames,
            test_intrinsics(),
            MountingTransform::identity(),
            10,
            "",
        )
        .unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(report.entries_built, 1);
        assert_eq!(report.frames_skipped, 1);
    }
}
