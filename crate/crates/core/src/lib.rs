//! Motion-prior pseudo-labelling for crowd segmentation.
//!
//! Corner particles are tracked through a clip ([`tracker`]), scored for
//! coherent motion on a K-nearest-neighbour crowd graph ([`collectiveness`]),
//! and the coherent ones are painted as discs into binary masks
//! ([`pseudolabel`]). [`losses`] holds the siamese training kernels,
//! [`eval`] the IoU metrics and [`synth`] a synthetic-scene generator with
//! ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collectiveness;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod pseudolabel;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
pub use pseudolabel::Mask;
pub use tracker::{Frame, ParticleTrack, Point};
