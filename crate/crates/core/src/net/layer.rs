use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Linear,
    Relu,
    Tanh,
    Layernorm,
    InputOffset,
}

/// One layer of a feed-forward network.
///
/// Linear weights are stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear { weight: Tensor, bias: Tensor },
    Relu,
    Tanh,
    LayerNorm { gain: Tensor, shift: Tensor, eps: f64 },
    InputOffset { offset: Tensor },
}

impl Layer {
    pub fn linear(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {out} outputs",
                bias.shape()
            )));
        }
        Ok(Layer::Linear { weight, bias })
    }

    pub fn layernorm(width: usize) -> Self {
        Layer::LayerNorm {
            gain: Tensor::vector(vec![1.0; width]),
            shift: Tensor::vector(vec![0.0; width]),
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn layernorm_with_eps(width: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::invalid(format!("layernorm epsilon must be positive, got {eps}")));
        }
        Ok(Self::layernorm_unchecked_eps(width, eps))
    }

    /// Accepts `eps = 0`. Only meant for exercising the zero-variance path in tests.
    pub fn layernorm_unchecked_eps(width: usize, eps: f64) -> Self {
        let mut ln = Self::layernorm(width);
        if let Layer::LayerNorm { eps: e, .. } = &mut ln {
            *e = eps;
        }
        ln
    }

    pub fn input_offset(width: usize) -> Self {
        Layer::InputOffset { offset: Tensor::vector(vec![0.0; width]) }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Relu => LayerKind::Relu,
            Layer::Tanh => LayerKind::Tanh,
            Layer::LayerNorm { .. } => LayerKind::Layernorm,
            Layer::InputOffset { .. } => LayerKind::InputOffset,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Linear { .. } => &["weight", "bias"],
            Layer::LayerNorm { .. } => &["gain", "shift"],
            Layer::InputOffset { .. } => &["offset"],
            Layer::Relu | Layer::Tanh => &[],
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::LayerNorm { gain, shift, .. } => vec![gain, shift],
            Layer::InputOffset { offset } => vec![offset],
            Layer::Relu | Layer::Tanh => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::LayerNorm { gain, shift, .. } => vec![gain, shift],
            Layer::InputOffset { offset } => vec![offset],
            Layer::Relu | Layer::Tanh => vec![],
        }
    }

    pub fn eps(&self) -> Option<f64> {
        match self {
            Layer::LayerNorm { eps, .. } => Some(*eps),
            _ => None,
        }
    }

    /// Output width for a given input width, or an error if the layer cannot take it.
    pub fn output_width(&self, input: usize) -> Result<usize> {
        let check = |w: usize, what: &str| {
            if w == input {
                Ok(())
            } else {
                Err(Error::shape(format!("{what} expects width {w}, got {input}")))
            }
        };
        match self {
            Layer::Linear { weight, .. } => {
                let (out, inp) = weight.dims2()?;
                check(inp, "linear layer")?;
                Ok(out)
            }
            Layer::LayerNorm { gain, shift, .. } => {
                if gain.len() != shift.len() {
                    return Err(Error::shape("layernorm gain and shift differ in length"));
                }
                check(gain.len(), "layernorm")?;
                Ok(input)
            }
            Layer::InputOffset { offset } => {
                check(offset.len(), "input offset")?;
                Ok(input)
            }
            Layer::Relu | Layer::Tanh => Ok(input),
        }
    }

    /// Applies the layer to one row using explicit parameter slices (in `params()` order).
    ///
    /// The parameters are passed separately so callers can substitute perturbed copies
    /// without touching the layer itself.
    pub(crate) fn apply_row(&self, params: &[&[f64]], x: &[f64], out: &mut [f64]) {
        match self {
            Layer::Linear { .. } => {
                let (w, b) = (params[0], params[1]);
                let inp = x.len();
                for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(inp).zip(b)) {
                    *o = bias + dot(row, x);
                }
            }
            Layer::Relu => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v.max(0.0);
                }
            }
            Layer::Tanh => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = v.tanh();
                }
            }
            Layer::LayerNorm { eps, .. } => {
                let (gain, shift) = (params[0], params[1]);
                let (mean, inv_std) = ln_stats(x, *eps);
                for i in 0..x.len() {
                    out[i] = gain[i] * (x[i] - mean) * inv_std + shift[i];
                }
            }
            Layer::InputOffset { .. } => {
                for ((o, v), d) in out.iter_mut().zip(x).zip(params[0]) {
                    *o = v + d;
                }
            }
        }
    }
}

/// Mean and inverse standard deviation (population variance) of a row.
/// A zero denominator yields `inv_std = 0`, so constant rows normalize to zero.
pub(crate) fn ln_stats(x: &[f64], eps: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = var + eps;
    let inv_std = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    (mean, inv_std)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
