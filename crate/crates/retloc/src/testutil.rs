//! Shared test fixtures: a wall of synthetic landmarks with unique
//! descriptors, a renderer that projects them into a posed camera, and a
//! small single-entry map database observing the wall.

use crate::features::{Descriptor, FeatureSet, Keypoint};
use crate::geometry::{planar_to_camera, CameraIntrinsics, MountingTransform, PlanarPose};
use crate::mapdb::MapDatabase;
use crate::vocab::Vocabulary;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn test_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
}

/// Unique, well-separated descriptors: ~100 random bits set per landmark
/// puts unrelated pairs far beyond the match threshold.
pub(crate) fn landmark_descriptor(i: usize) -> Descriptor {
    let mut rng = ChaCha8Rng::seed_from_u64(0xD00D + i as u64);
    let bits: Vec<u16> = rand::seq::index::sample(&mut rng, 256, 100)
        .into_iter()
        .map(|b| b as u16)
        .collect();
    Descriptor::ZERO.with_flipped_bits(&bits)
}

/// Renders world landmarks into the camera at `pose`, keeping points that
/// land inside the image. Returns the feature set (camera-frame 3-d points
/// included) and the indices of the rendered landmarks.
pub(crate) fn render(
    world: &[Vector3<f64>],
    pose: &PlanarPose,
    mounting: &MountingTransform,
    intr: &CameraIntrinsics,
    frame_id: u32,
) -> (FeatureSet, Vec<usize>) {
    let cam = planar_to_camera(pose, mounting).inverse();
    let mut kps = Vec::new();
    let mut descs = Vec::new();
    let mut pts = Vec::new();
    let mut kept = Vec::new();
    for (i, w) in world.iter().enumerate() {
        let pc = cam.transform_point(w);
        let Some(px) = intr.project(&pc) else { continue };
        if px.x < 0.0 || px.x >= intr.width as f64 || px.y < 0.0 || px.y >= intr.height as f64 {
            continue;
        }
        kps.push(Keypoint {
            u: px.x as f32,
            v: px.y as f32,
        });
        descs.push(landmark_descriptor(i));
        pts.push(Some(Vector3::new(pc.x as f32, pc.y as f32, pc.z as f32)));
        kept.push(i);
    }
    let fs = FeatureSet::new(frame_id, frame_id as f64 * 0.1, kps, descs, Some(pts)).unwrap();
    (fs, kept)
}

/// A 21×5 grid of landmarks on the plane x = 3, spanning y ∈ [−1.5, 1.5]
/// and z ∈ [0.4, 1.6].
pub(crate) fn wall_landmarks() -> Vec<Vector3<f64>> {
    let mut pts = Vec::new();
    for iy in 0..21 {
        for iz in 0..5 {
            pts.push(Vector3::new(
                3.0,
                -1.5 + 0.15 * iy as f64,
                0.4 + 0.3 * iz as f64,
            ));
        }
    }
    pts
}

pub(crate) fn tiny_vocab() -> Vocabulary {
    let centers = vec![[0.0; 32], [64.0; 32], [128.0; 32], [255.0; 32]];
    Vocabulary::from_centers(centers).unwrap()
}

/// One map entry at the origin looking straight at the wall.
pub(crate) fn wall_database(intr: &CameraIntrinsics, mounting: &MountingTransform) -> MapDatabase {
    let (fs, kept) = render(
        &wall_landmarks(),
        &PlanarPose::new(0.0, 0.0, 0.0),
        mounting,
        intr,
        0,
    );
    assert_eq!(kept.len(), 105, "reference view must see the whole wall");
    let frames = vec![(fs, PlanarPose::new(0.0, 0.0, 0.0))];
    let (db, _) = MapDatabase::build(tiny_vocab(), &frames, *intr, *mounting, 10, "wall").unwrap();
    db
}
