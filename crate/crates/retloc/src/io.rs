//! On-disk formats: the map-database file, standalone vocabulary files,
//! feature logs, and pose CSVs.
//!
//! All binary formats are little-endian with a 16-byte header:
//!
//! ```text
//! magic (6 bytes) | version u16 | item count u32 | CRC32 of body u32
//! ```
//!
//! * Map file, magic `MAPDB\x01`: body = vocabulary (64x32 f64) + entries
//!   (per entry: entry_id u32, pose 3xf64, VLAD 64x32 f32, feature count
//!   u32, then per feature: u f32, v f32, descriptor 32 bytes, 3-d point
//!   3xf32) + trailing metadata (intrinsics, mounting, knn_k, creation
//!   string, then per-entry frame id u32 + timestamp f64).
//! * Vocabulary file, magic `VOCAB\x01`: body = 64x32 f64 centers.
//! * Feature log, magic `FTLOG\x01`: body = per-frame blocks — frame_id
//!   u32, timestamp f64, 3-d presence flag u8, then the same feature block
//!   as map entries. When the presence flag is 1, a feature whose depth was
//!   not recovered stores the sentinel point (0, 0, 0); legitimate points
//!   always have z > 0, so the sentinel is unambiguous.
//!
//! Serialization is deterministic — equal values produce identical bytes —
//! and `load(save(x))` reproduces `x` exactly on every field.

use crate::features::{Descriptor, FeatureSet, Keypoint, DESCRIPTOR_LEN};
use crate::geometry::{CameraIntrinsics, MountingTransform, PlanarPose, RigidTransform3};
use crate::vocab::{VladMatrix, Vocabulary, VOCAB_K};
use nalgebra::{Matrix3, Vector3};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAP_MAGIC: &[u8; 6] = b"MAPDB\x01";
pub const VOCAB_MAGIC: &[u8; 6] = b"VOCAB\x01";
pub const FLOG_MAGIC: &[u8; 6] = b"FTLOG\x01";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt file at byte {offset}: {what}")]
    CorruptFile { offset: usize, what: String },
    #[error("unsupported format version {found} (this build reads {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("map files store exactly {expected}x{DESCRIPTOR_LEN} vocabularies, got k={found}")]
    UnsupportedVocabularySize { found: usize, expected: usize },
}

fn corrupt(offset: usize, what: impl Into<String>) -> FileError {
    FileError::CorruptFile {
        offset,
        what: what.into(),
    }
}

/// Little-endian byte sink for the binary formats.
#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian cursor that reports the byte offset of any truncation.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf[0]` within the whole file, for diagnostics.
    base: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FileError> {
        if self.remaining() < n {
            return Err(corrupt(
                self.offset(),
                format!("truncated while reading {what}: need {n} bytes, have {}", self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn get_u8(&mut self, what: &str) -> Result<u8, FileError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn get_u32(&mut self, what: &str) -> Result<u32, FileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn get_f32(&mut self, what: &str) -> Result<f32, FileError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn get_f64(&mut self, what: &str) -> Result<f64, FileError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn get_bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8], FileError> {
        self.take(n, what)
    }
}

/// Writes `magic + version + count + crc(body) + body` to `path`.
fn write_file(path: &Path, magic: &[u8; 6], count: u32, body: &[u8]) -> Result<(), FileError> {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    let crc = hasher.finalize();

    let mut f = std::fs::File::create(path)?;
    f.write_all(magic)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&count.to_le_bytes())?;
    f.write_all(&crc.to_le_bytes())?;
    f.write_all(body)?;
    Ok(())
}

/// Reads and validates a header, returning `(count, body bytes)`.
fn read_file(path: &Path, magic: &[u8; 6]) -> Result<(u32, Vec<u8>), FileError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 16 {
        return Err(corrupt(data.len(), "file shorter than the 16-byte header"));
    }
    if &data[0..6] != magic {
        return Err(corrupt(
            0,
            format!(
                "bad magic {:02x?}, expected {:02x?} ({})",
                &data[0..6],
                magic,
                String::from_utf8_lossy(&magic[..5])
            ),
        ));
    }
    let version = u16::from_le_bytes(data[6..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FileError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u32::from_le_bytes(data[8..12].try_into().unwrap());
    let crc_stored = u32::from_le_bytes(data[12..16].try_into().unwrap());
    let body = &data[16..];
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != crc_stored {
        return Err(corrupt(12, "body checksum mismatch"));
    }
    Ok((count, body.to_vec()))
}

pub(crate) fn write_map_file(path: &Path, count: u32, body: &[u8]) -> Result<(), FileError> {
    write_file(path, MAP_MAGIC, count, body)
}

pub(crate) fn read_map_file(path: &Path) -> Result<(u32, Vec<u8>), FileError> {
    read_file(path, MAP_MAGIC)
}

pub(crate) fn write_vocab_body(w: &mut ByteWriter, vocab: &Vocabulary) -> Result<(), FileError> {
    if vocab.k() != VOCAB_K {
        return Err(FileError::UnsupportedVocabularySize {
            found: vocab.k(),
            expected: VOCAB_K,
        });
    }
    for row in vocab.centers() {
        for &x in row {
            w.put_f64(x);
        }
    }
    Ok(())
}

pub(crate) fn read_vocab_body(r: &mut ByteReader) -> Result<Vocabulary, FileError> {
    let mut centers = Vec::with_capacity(VOCAB_K);
    for _ in 0..VOCAB_K {
        let mut row = [0.0; DESCRIPTOR_LEN];
        for x in row.iter_mut() {
            *x = r.get_f64("vocabulary center")?;
        }
        centers.push(row);
    }
    Vocabulary::from_centers(centers)
        .map_err(|e| corrupt(r.offset(), format!("invalid vocabulary: {e}")))
}

/// Saves a standalone vocabulary (`VOCAB\x01`).
pub fn save_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<(), FileError> {
    let mut w = ByteWriter::new();
    write_vocab_body(&mut w, vocab)?;
    write_file(path, VOCAB_MAGIC, vocab.k() as u32, &w.into_vec())
}

/// Loads a standalone vocabulary file.
pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, FileError> {
    let (count, body) = read_file(path, VOCAB_MAGIC)?;
    if count as usize != VOCAB_K {
        return Err(corrupt(8, format!("vocabulary count {count}, expected {VOCAB_K}")));
    }
    let mut r = ByteReader::new(&body, 16);
    let vocab = read_vocab_body(&mut r)?;
    if r.remaining() != 0 {
        return Err(corrupt(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(vocab)
}

pub(crate) fn write_vlad(w: &mut ByteWriter, vlad: &VladMatrix) {
    for row in vlad.rows() {
        for &x in row {
            w.put_f32(x as f32);
        }
    }
}

pub(crate) fn read_vlad(r: &mut ByteReader) -> Result<VladMatrix, FileError> {
    let mut rows = Vec::with_capacity(VOCAB_K);
    for _ in 0..VOCAB_K {
        let mut row = [0.0; DESCRIPTOR_LEN];
        for x in row.iter_mut() {
            *x = r.get_f32("vlad entry")? as f64;
        }
        rows.push(row);
    }
    Ok(VladMatrix::from_rows(rows))
}

/// The per-feature block shared by map entries and feature logs.
/// `with_points` controls whether the 3-d coordinates section is present.
pub(crate) fn write_feature_block(w: &mut ByteWriter, fs: &FeatureSet, with_points: bool) {
    w.put_u32(fs.len() as u32);
    for i in 0..fs.len() {
        let kp = fs.keypoints()[i];
        w.put_f32(kp.u);
        w.put_f32(kp.v);
        w.put_bytes(&fs.descriptors()[i].0);
        if with_points {
            // Sentinel (0,0,0) marks a feature without a recovered point.
            let p = fs.point3d(i).unwrap_or_else(Vector3::zeros);
            w.put_f32(p.x);
            w.put_f32(p.y);
            w.put_f32(p.z);
        }
    }
}

pub(crate) fn read_feature_block(
    r: &mut ByteReader,
    frame_id: u32,
    timestamp: f64,
    with_points: bool,
) -> Result<FeatureSet, FileError> {
    let n = r.get_u32("feature count")? as usize;
    let mut keypoints = Vec::with_capacity(n);
    let mut descriptors = Vec::with_capacity(n);
    let mut points = with_points.then(|| Vec::with_capacity(n));
    for _ in 0..n {
        let u = r.get_f32("keypoint u")?;
        let v = r.get_f32("keypoint v")?;
        keypoints.push(Keypoint { u, v });
        let bytes: [u8; DESCRIPTOR_LEN] = r
            .get_bytes(DESCRIPTOR_LEN, "descriptor")?
            .try_into()
            .unwrap();
        descriptors.push(Descriptor(bytes));
        if let Some(points) = points.as_mut() {
            let p = Vector3::new(
                r.get_f32("point x")?,
                r.get_f32("point y")?,
                r.get_f32("point z")?,
            );
            points.push((p.z > 0.0).then_some(p));
        }
    }
    FeatureSet::new(frame_id, timestamp, keypoints, descriptors, points)
        .map_err(|e| corrupt(r.offset(), format!("invalid feature set: {e}")))
}

pub(crate) fn write_pose(w: &mut ByteWriter, pose: &PlanarPose) {
    w.put_f64(pose.x);
    w.put_f64(pose.y);
    w.put_f64(pose.psi());
}

pub(crate) fn read_pose(r: &mut ByteReader) -> Result<PlanarPose, FileError> {
    let x = r.get_f64("pose x")?;
    let y = r.get_f64("pose y")?;
    let psi = r.get_f64("pose psi")?;
    Ok(PlanarPose::new(x, y, psi))
}

pub(crate) fn write_metadata(
    w: &mut ByteWriter,
    intr: &CameraIntrinsics,
    mounting: &MountingTransform,
    knn_k: u32,
    creation: &str,
) {
    w.put_f64(intr.fx);
    w.put_f64(intr.fy);
    w.put_f64(intr.cx);
    w.put_f64(intr.cy);
    w.put_u32(intr.width);
    w.put_u32(intr.height);
    let t = mounting.vehicle_to_camera();
    for i in 0..3 {
        for j in 0..3 {
            w.put_f64(t.rotation()[(i, j)]);
        }
    }
    for i in 0..3 {
        w.put_f64(t.translation()[i]);
    }
    w.put_u32(knn_k);
    w.put_u32(creation.len() as u32);
    w.put_bytes(creation.as_bytes());
}

pub(crate) fn read_metadata(
    r: &mut ByteReader,
) -> Result<(CameraIntrinsics, MountingTransform, u32, String), FileError> {
    let fx = r.get_f64("intrinsics fx")?;
    let fy = r.get_f64("intrinsics fy")?;
    let cx = r.get_f64("intrinsics cx")?;
    let cy = r.get_f64("intrinsics cy")?;
    let width = r.get_u32("intrinsics width")?;
    let height = r.get_u32("intrinsics height")?;
    let intr = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
        .map_err(|e| corrupt(r.offset(), format!("invalid intrinsics: {e}")))?;

    let mut rot = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rot[(i, j)] = r.get_f64("mounting rotation")?;
        }
    }
    let mut tr = Vector3::zeros();
    for i in 0..3 {
        tr[i] = r.get_f64("mounting translation")?;
    }
    let transform = RigidTransform3::new(rot, tr)
        .map_err(|e| corrupt(r.offset(), format!("invalid mounting: {e}")))?;

    let knn_k = r.get_u32("knn_k")?;
    let len = r.get_u32("creation string length")? as usize;
    let creation = String::from_utf8(r.get_bytes(len, "creation string")?.to_vec())
        .map_err(|e| corrupt(r.offset(), format!("creation string not UTF-8: {e}")))?;
    Ok((intr, MountingTransform::new(transform), knn_k, creation))
}

/// One frame of a feature log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogFrame {
    pub features: FeatureSet,
}

/// Writes a feature log (`FTLOG\x01`): the frames of a mapping or
/// localization recording, in order.
pub fn save_feature_log(frames: &[FeatureSet], path: &Path) -> Result<(), FileError> {
    let mut w = ByteWriter::new();
    for fs in frames {
        w.put_u32(fs.frame_id);
        w.put_f64(fs.timestamp);
        let with_points = fs.points3d().is_some();
        w.put_u8(with_points as u8);
        write_feature_block(&mut w, fs, with_points);
    }
    write_file(path, FLOG_MAGIC, frames.len() as u32, &w.into_vec())
}

/// Reads a feature log written by [`save_feature_log`].
pub fn load_feature_log(path: &Path) -> Result<Vec<FeatureSet>, FileError> {
    let (count, body) = read_file(path, FLOG_MAGIC)?;
    let mut r = ByteReader::new(&body, 16);
    let mut frames = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let frame_id = r.get_u32("frame id")?;
        let timestamp = r.get_f64("timestamp")?;
        let flag = r.get_u8("3-d presence flag")?;
        if flag > 1 {
            return Err(corrupt(r.offset() - 1, format!("presence flag must be 0 or 1, got {flag}")));
        }
        frames.push(read_feature_block(&mut r, frame_id, timestamp, flag == 1)?);
    }
    if r.remaining() != 0 {
        return Err(corrupt(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(frames)
}

/// A ground-truth or mapping pose record keyed by frame id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseRecord {
    pub frame_id: u32,
    pub pose: PlanarPose,
}

/// Writes poses as CSV with header `frame_id,x,y,psi`.
pub fn save_pose_csv(records: &[PoseRecord], path: &Path) -> Result<(), FileError> {
    let mut wtr = csv::Writer::from_path(path).map_err(csv_to_io)?;
    wtr.write_record(["frame_id", "x", "y", "psi"]).map_err(csv_to_io)?;
    for rec in records {
        wtr.write_record([
            rec.frame_id.to_string(),
            format_f64(rec.pose.x),
            format_f64(rec.pose.y),
            format_f64(rec.pose.psi()),
        ])
        .map_err(csv_to_io)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a pose CSV written by [`save_pose_csv`].
pub fn load_pose_csv(path: &Path) -> Result<Vec<PoseRecord>, FileError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_to_io)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_to_io)?;
        let field = |j: usize| -> Result<&str, FileError> {
            rec.get(j)
                .ok_or_else(|| corrupt(i + 1, format!("pose row {i} is missing column {j}")))
        };
        let parse = |s: &str, name: &str| -> Result<f64, FileError> {
            s.parse::<f64>()
                .map_err(|e| corrupt(i + 1, format!("bad {name} in pose row {i}: {e}")))
        };
        let frame_id = field(0)?
            .parse::<u32>()
            .map_err(|e| corrupt(i + 1, format!("bad frame_id in pose row {i}: {e}")))?;
        let x = parse(field(1)?, "x")?;
        let y = parse(field(2)?, "y")?;
        let psi = parse(field(3)?, "psi")?;
        out.push(PoseRecord {
            frame_id,
            pose: PlanarPose::new(x, y, psi),
        });
    }
    Ok(out)
}

fn csv_to_io(e: csv::Error) -> FileError {
    FileError::Io(std::io::Error::other(e))
}

/// Shortest decimal that parses back to the same f64 (round-trip safe).
pub(crate) fn format_f64(v: f64) -> String {
    let mut buf = ryu_style(v);
    if !buf.contains('.') && !buf.contains('e') && !buf.contains("inf") && !buf.contains("NaN") {
        buf.push_str(".0");
    }
    buf
}

fn ryu_style(v: f64) -> String {
    // `{:?}` on f64 prints the shortest round-trippable representation.
    format!("{v:?}")
}
