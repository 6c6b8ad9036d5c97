use std::cell::Cell;
use std::hash::Hasher;
use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static FORWARDS: Cell<u64> = const { Cell::new(0) };
}

/// Number of per-sample network evaluations performed on this thread.
///
/// Every public evaluation path (clean forward, symmetric perturbed forward)
/// adds one per sample and per model side. Backprop oracles do not count.
pub fn forward_count() -> u64 {
    FORWARDS.with(|c| c.get())
}

pub(crate) fn record_forwards(n: usize) {
    FORWARDS.with(|c| c.set(c.get() + n as u64));
}

/// Flat parameter values in canonical layer-major order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self - other`
    pub fn sub(&self, other: &Self) -> Self {
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|a| a * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    /// Euclidean distance, scaled by the largest difference so huge parameters do not
    /// overflow to infinity.
    pub fn distance(&self, other: &Self) -> f64 {
        let diffs = || self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs());
        let scale = diffs().fold(0.0, f64::max);
        if scale == 0.0 || !scale.is_finite() {
            return scale;
        }
        scale * diffs().fold(0.0, |s, d| s + (d / scale) * (d / scale)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSubset {
    /// The adapted parameters only.
    Adapted,
    /// Every parameter tensor, frozen or not.
    All,
}

/// Location of one parameter tensor inside a flattened [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    /// Index of the tensor among all parameter tensors of the network.
    pub tensor_id: usize,
    pub layer: usize,
    /// Position within the layer's `params()`.
    pub param: usize,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub slots: Vec<Slot>,
    pub total: usize,
}

impl ParamLayout {
    pub fn slot(&self, tensor_id: usize) -> Option<&Slot> {
        self.slots.iter().find(|s| s.tensor_id == tensor_id)
    }

    pub fn max_slot_len(&self) -> usize {
        self.slots.iter().map(|s| s.len).max().unwrap_or(0)
    }

    /// Slots belonging to one layer, in parameter order.
    pub fn layer_slots(&self, layer: usize) -> impl Iterator<Item = &Slot> {
        self.slots.iter().filter(move |s| s.layer == layer)
    }
}

/// Output of a clean forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

/// A feed-forward network with an adapted/frozen split of its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    /// Output width of every layer.
    widths: Vec<usize>,
    /// One flag per parameter tensor, canonical order.
    adapted: Vec<bool>,
    feature_tap: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_dim: usize, feature_tap: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        let mut widths = Vec::with_capacity(layers.len());
        let mut w = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if i > 0 && layer.kind() == LayerKind::InputOffset {
                return Err(Error::invalid("input-offset may only be the first layer"));
            }
            w = layer
                .output_width(w)
                .map_err(|e| Error::shape(format!("layer {i}: {e}")))?;
            widths.push(w);
        }
        if feature_tap >= layers.len() {
            return Err(Error::invalid(format!(
                "feature tap {feature_tap} is out of range for {} layers",
                layers.len()
            )));
        }
        let n_tensors = layers.iter().map(|l| l.params().len()).sum();
        Ok(Self { layers, input_dim, widths, adapted: vec![false; n_tensors], feature_tap })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[self.feature_tap]
    }

    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn adapted_mask(&self) -> &[bool] {
        &self.adapted
    }

    pub fn set_adapted_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.adapted.len() {
            return Err(Error::shape(format!(
                "mask has {} flags for {} parameter tensors",
                mask.len(),
                self.adapted.len()
            )));
        }
        self.adapted = mask;
        Ok(())
    }

    /// Marks every parameter tensor of the listed layers as adapted and the rest as frozen.
    pub fn adapt_layers(&mut self, layers: &[usize]) -> Result<()> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.layers.len()) {
            return Err(Error::invalid(format!("layer index {bad} out of range")));
        }
        let mut mask = Vec::with_capacity(self.adapted.len());
        for (i, layer) in self.layers.iter().enumerate() {
            for _ in layer.params() {
                mask.push(layers.contains(&i));
            }
        }
        self.adapted = mask;
        Ok(())
    }

    /// Indices of layers of the given kind.
    pub fn layers_of_kind(&self, kind: LayerKind) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind() == kind).collect()
    }

    pub fn layout(&self, subset: ParamSubset) -> ParamLayout {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut tensor_id = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            for (pi, t) in layer.params().into_iter().enumerate() {
                if subset == ParamSubset::All || self.adapted[tensor_id] {
                    slots.push(Slot {
                        tensor_id,
                        layer: li,
                        param: pi,
                        offset,
                        len: t.len(),
                        shape: t.shape().to_vec(),
                    });
                    offset += t.len();
                }
                tensor_id += 1;
            }
        }
        ParamLayout { slots, total: offset }
    }

    pub fn param_count(&self, subset: ParamSubset) -> usize {
        self.layout(subset).total
    }

    pub fn pack(&self, subset: ParamSubset) -> ParamVector {
        let layout = self.layout(subset);
        let mut out = Vec::with_capacity(layout.total);
        for s in &layout.slots {
            out.extend_from_slice(self.layers[s.layer].params()[s.param].data());
        }
        ParamVector(out)
    }

    pub fn unpack(&mut self, subset: ParamSubset, values: &ParamVector) -> Result<()> {
        let layout = self.layout(subset);
        if values.len() != layout.total {
            return Err(Error::shape(format!(
                "parameter vector has {} values, layout needs {}",
                values.len(),
                layout.total
            )));
        }
        for s in &layout.slots {
            let mut params = self.layers[s.layer].params_mut();
            params[s.param]
                .data_mut()
                .copy_from_slice(&values[s.offset..s.offset + s.len]);
        }
        Ok(())
    }

    /// Copy with the given subset replaced.
    pub fn with_params(&self, subset: ParamSubset, values: &ParamVector) -> Result<Network> {
        let mut net = self.clone();
        net.unpack(subset, values)?;
        Ok(net)
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut Layer {
        &mut self.layers[i]
    }

    /// Stable fingerprint of every parameter bit, the mask, and the tap.
    pub fn param_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for v in self.pack(ParamSubset::All).iter() {
            h.write_u64(v.to_bits());
        }
        for &a in &self.adapted {
            h.write_u8(a as u8);
        }
        h.write_usize(self.feature_tap);
        h.finish()
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (b, w) = x.dims2()?;
        if w != self.input_dim {
            return Err(Error::shape(format!(
                "input width {w} does not match network input {}",
                self.input_dim
            )));
        }
        Ok((b, w))
    }

    /// Clean batched forward pass. Counts one evaluation per sample.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let (b, _) = self.check_input(x)?;
        let out = self.forward_uncounted(x)?;
        record_forwards(b);
        Ok(out)
    }

    pub(crate) fn forward_uncounted(&self, x: &Tensor) -> Result<ForwardOutput> {
        let (b, _) = self.check_input(x)?;
        let c = self.output_dim();
        let f = self.feature_dim();
        let mut logits = Vec::with_capacity(b * c);
        let mut features = Vec::with_capacity(b * f);
        let params: Vec<Vec<&[f64]>> = self
            .layers
            .iter()
            .map(|l| l.params().into_iter().map(|t| t.data()).collect())
            .collect();
        let max_w = self.widths.iter().copied().max().unwrap_or(0).max(self.input_dim);
        let mut cur = vec![0.0; max_w];
        let mut next = vec![0.0; max_w];
        for row in x.iter_rows() {
            cur[..row.len()].copy_from_slice(row);
            let mut w_in = row.len();
            for (li, layer) in self.layers.iter().enumerate() {
                let w_out = self.widths[li];
                layer.apply_row(&params[li], &cur[..w_in], &mut next[..w_out]);
                std::mem::swap(&mut cur, &mut next);
                w_in = w_out;
                if li == self.feature_tap {
                    features.extend_from_slice(&cur[..w_out]);
                }
            }
            logits.extend_from_slice(&cur[..c]);
        }
        Ok(ForwardOutput {
            logits: Tensor::new(vec![b, c], logits)?,
            features: Tensor::new(vec![b, f], features)?,
        })
    }
}

/// Fluent constructor for small MLP-style networks with seeded initialization.
#[derive(Clone, Debug)]
pub struct NetBuilder {
    input_dim: usize,
    width: usize,
    specs: Vec<Spec>,
    tap: Option<usize>,
}

#[derive(Clone, Debug)]
enum Spec {
    Linear(usize),
    Relu,
    Tanh,
    LayerNorm,
    InputOffset,
}

impl NetBuilder {
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, width: input_dim, specs: Vec::new(), tap: None }
    }

    pub fn input_offset(mut self) -> Self {
        self.specs.push(Spec::InputOffset);
        self
    }

    pub fn linear(mut self, out: usize) -> Self {
        self.specs.push(Spec::Linear(out));
        self.width = out;
        self
    }

    pub fn relu(mut self) -> Self {
        self.specs.push(Spec::Relu);
        self
    }

    pub fn tanh(mut self) -> Self {
        self.specs.push(Spec::Tanh);
        self
    }

    pub fn layernorm(mut self) -> Self {
        self.specs.push(Spec::LayerNorm);
        self
    }

    /// Uses the output of the most recently added layer as the feature tap.
    pub fn tap(mut self) -> Self {
        self.tap = Some(self.specs.len().saturating_sub(1));
        self
    }

    /// Builds with He-style normal weights, zero biases, unit gains.
    /// Without an explicit tap, features are the input of the last layer.
    pub fn build(self, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = self.input_dim;
        let mut layers = Vec::with_capacity(self.specs.len());
        for spec in &self.specs {
            let layer = match *spec {
                Spec::Linear(out) => {
                    let scale = (2.0 / w as f64).sqrt();
                    let data = (0..out * w)
                        .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); scale * v })
                        .collect::<Vec<f64>>();
                    let l = Layer::linear(Tensor::new(vec![out, w], data)?, Tensor::zeros(vec![out]))?;
                    w = out;
                    l
                }
                Spec::Relu => Layer::Relu,
                Spec::Tanh => Layer::Tanh,
                Spec::LayerNorm => Layer::layernorm(w),
                Spec::InputOffset => Layer::input_offset(w),
            };
            layers.push(layer);
        }
        let tap = match self.tap {
            Some(t) => t,
            None if layers.len() >= 2 => layers.len() - 2,
            None => 0,
        };
        Network::new(layers, self.input_dim, tap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_survives_huge_coordinates() {
        let a = ParamVector(vec![3e200, 4e200]);
        let z = ParamVector(vec![0.0, 0.0]);
        assert!((a.distance(&z) / 5e200 - 1.0).abs() < 1e-15);
        assert_eq!(ParamVector(vec![3.0, 4.0]).distance(&z), 5.0);
        let d = ParamVector(vec![]).distance(&ParamVector(vec![]));
        assert!(d == 0.0 && d.is_sign_positive());
    }

    fn identity_net() -> Network {
        let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = Layer::linear(w, Tensor::zeros(vec![2])).unwrap();
        Network::new(vec![l], 2, 0).unwrap()
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let net = identity_net();
        let x = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.logits.data(), &[3.0, 4.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = identity_net();
        let x = Tensor::from_rows(&[[3.0, 4.0, 5.0]]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn input_offset_must_be_first() {
        let layers = vec![Layer::Relu, Layer::input_offset(2)];
        assert!(Network::new(layers, 2, 0).is_err());
    }

    #[test]
    fn feature_tap_must_exist() {
        assert!(Network::new(vec![Layer::Relu], 2, 1).is_err());
    }

    #[test]
    fn forward_counter_counts_samples() {
        let net = identity_net();
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let before = forward_count();
        net.forward(&x).unwrap();
        assert_eq!(forward_count() - before, 3);
    }

    #[test]
    fn adapted_layout_covers_selected_layers_only() {
        let mut net = NetBuilder::new(4).linear(3).layernorm().relu().linear(2).build(1).unwrap();
        net.adapt_layers(&[1]).unwrap();
        let layout = net.layout(ParamSubset::Adapted);
        assert_eq!(layout.total, 6);
        assert_eq!(layout.slots.len(), 2);
        assert_eq!(layout.slots[0].tensor_id, 2);
        assert_eq!(net.param_count(ParamSubset::All), 12 + 3 + 6 + 6 + 2);
    }
}
