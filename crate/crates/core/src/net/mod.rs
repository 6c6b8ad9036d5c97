//! Forward-only network evaluator, reference gradients and model files.

mod grad;
mod io;
mod layer;
mod network;
mod pretrain;
mod quantize;

pub use grad::{
    batch_loss, finite_diff, grad_backprop, grad_backprop_with, grad_finite_diff, restrict_to_adapted,
    LossKind, SampleLoss, FINITE_DIFF_MAX_PARAMS,
};
pub use io::{Model, MODEL_MAGIC};
pub(crate) use io::{read_f64s, write_f64s};
pub use layer::{Layer, LayerKind, DEFAULT_LN_EPS};
pub use network::{
    forward_count, ForwardOutput, NetBuilder, Network, ParamLayout, ParamSubset, ParamVector, Slot,
};
pub(crate) use network::record_forwards;
pub use pretrain::{accuracy, argmax, pretrain_source, PretrainConfig};
pub use quantize::quantize_weights;
