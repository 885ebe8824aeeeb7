//! Data-free model merging.
//!
//! Domain models are trained independently on non-IID partitions, merged by
//! parameter arithmetic with exact pooling of their normalization buffers,
//! and then refined by distilling divergent models into the merge on inputs
//! synthesized from the merged buffer statistics.

pub mod data;
pub mod distill;
pub mod error;
pub mod format;
pub mod inversion;
pub mod merge;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
