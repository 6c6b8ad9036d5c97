use super::layer::Layer;
use super::network::Network;
use crate::error::{Error, Result};

/// Simulated symmetric uniform quantization of every frozen linear weight tensor.
///
/// Each tensor gets its own step `s = max|w| / (2^(bits−1) − 1)` and becomes
/// `s·round(w/s)`. The two extreme grid points are stored as `±max|w|` (they differ
/// from `±L·s` by at most one ulp) so that quantizing again is exactly a no-op.
/// Adapted tensors and biases stay full precision.
pub fn quantize_weights(net: &Network, bits: u32) -> Result<Network> {
    if !(2..=16).contains(&bits) {
        return Err(Error::invalid(format!("quantization bits must be in 2..=16, got {bits}")));
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let mut out = net.clone();
    let mut tensor_id = 0;
    for li in 0..net.layers().len() {
        let n_params = net.layers()[li].params().len();
        let frozen_weight = matches!(net.layers()[li], Layer::Linear { .. }) && !net.adapted_mask()[tensor_id];
        if frozen_weight {
            if let Layer::Linear { weight, .. } = out.layer_mut(li) {
                quantize_slice(weight.data_mut(), levels);
            }
        }
        tensor_id += n_params;
    }
    Ok(out)
}

pub(crate) fn quantize_slice(w: &mut [f64], levels: f64) {
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return;
    }
    let s = max / levels;
    for v in w.iter_mut() {
        let k = (*v / s).round();
        *v = if k >= levels {
            max
        } else if k <= -levels {
            -max
        } else {
            k * s
        };
    }
}
