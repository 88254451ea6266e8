//! Few-shot segmentation with a single foreground prototype, anomaly scores
//! and a learned threshold, trained by self-supervision on 3D supervoxels.

// `!(x > 0.0)` guards deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod episodes;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod head;
pub mod numerics;
pub mod registry;
pub mod supervoxel;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
