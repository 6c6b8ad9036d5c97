//! Two-forward zeroth-order test-time adaptation for small forward-only networks.
//!
//! Every test sample is evaluated once at `θ + μz_i` and once at `θ − μz_i`. The
//! average of the two outputs is the prediction; the loss difference is a
//! directional-derivative estimate along `z_i`. Perturbations are regenerated from
//! seeds instead of being stored.

pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod net;
pub mod objectives;
pub mod perturb;
pub mod tensor;
pub mod zo;

pub use error::{Error, Result};
pub use tensor::Tensor;
