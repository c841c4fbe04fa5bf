//! Monocular camera localization by image retrieval.
//!
//! The engine localizes a ground vehicle against a previously recorded map:
//! each query image is summarized as a VLAD matrix over a binary-descriptor
//! vocabulary, the nearest map images are retrieved, pairwise PnP-RANSAC
//! produces metric pose hypotheses, and a particle filter fuses those
//! hypotheses with odometry through a Gaussian-mixture measurement model.
//!
//! The crate is split along that pipeline:
//!
//! * [`geometry`] — planar poses, rigid transforms, pinhole projection
//! * [`features`] — binary keypoint descriptors and Hamming matching
//! * [`vocab`] — k-means visual vocabulary and VLAD aggregation
//! * [`mapdb`] — the geo-tagged image database and its binary file format
//! * [`posest`] — P3P / RANSAC / refinement pose hypotheses
//! * [`fusion`] — GMM measurement model and the particle filter
//! * [`pipeline`] — the per-frame localizer that ties the above together
//! * [`sim`] — a deterministic synthetic world for closed-loop evaluation
//! * [`metrics`] — error statistics over logged episodes
//!
//! Everything is deterministic: all randomized routines take explicit seeds
//! and produce bit-identical results across runs and thread counts.

pub mod config;
pub mod features;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod mapdb;
pub mod metrics;
pub mod pipeline;
pub mod posest;
pub mod sim;
#[cfg(test)]
pub(crate) mod testutil;
pub mod vocab;
