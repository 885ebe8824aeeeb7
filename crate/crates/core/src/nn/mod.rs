//! Sequential networks with batch normalization, SGD training and the
//! `DMMC` checkpoint format.

mod buffers;
mod checkpoint;
mod forward;
mod spec;
mod train;

pub use buffers::{update_buffers, BufferStats, BufferUpdate};
pub use checkpoint::{Checkpoint, Meta};
pub use forward::{
    absorb_batch_stats, bind_params, build_forward, forward, forward_with, predict, predict_probs, softmax_rows, BnTap,
    Bound, Mode, Norm, Trace,
};
pub use spec::{param_name, Layer, ModelSpec};
pub use train::{epoch_order, evaluate, predict_labels, train, Evaluation, TrainConfig};

