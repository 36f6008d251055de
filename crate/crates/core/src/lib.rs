//! Batch toolkit for turning scanned form documents into structured records.
//!
//! The crate is organised as a pipeline over page images:
//!
//! 1. [`raster`] decodes pages and reduces them to table-line masks,
//! 2. [`landmark`] finds line intersections (Harris corners),
//! 3. [`registration`] warps a field template onto the detected landmarks
//!    (non-rigid coherent point drift),
//! 4. [`template`] cuts out per-field images,
//! 5. [`decode`] turns field images into token sequences through a pluggable
//!    sequence model (beam search),
//! 6. [`metrics`] and [`verify`] score and cross-check the output.
//!
//! Layout sorting is covered by [`features`]/[`classify`] (supervised visual
//! bag-of-words + SVM) and [`cluster`] (unsupervised DBSCAN / t-SNE over
//! externally supplied feature vectors). [`synthgen`] generates deterministic
//! synthetic pages with known ground truth for end-to-end testing.

pub mod classify;
pub mod cluster;
pub mod decode;
pub mod features;
pub mod landmark;
pub mod metrics;
pub mod raster;
pub mod registration;
pub mod synthgen;
pub mod template;
pub mod tokens;
pub mod verify;
