//! Seed-addressed perturbations.
//!
//! A perturbation direction is never stored for the whole batch. Each adapted
//! tensor's slice of `z` is regenerated on demand from `(step_seed, sample_index,
//! tensor_id)`: once per layer for the two symmetric forwards, and once more when
//! the finite-difference scalars are folded into the update.

mod keyed;

use std::cell::Cell;
use std::sync::Arc;

pub use keyed::Key;

use crate::error::{Error, Result};
use crate::net::{record_forwards, Network, ParamLayout, ParamSubset, ParamVector, Slot};
use crate::tensor::Tensor;

const STREAM_GAUSSIAN: u64 = 0x6A;
const STREAM_UNIFORM: u64 = 0x75;

#[derive(Clone, Debug, PartialEq)]
pub enum PerturbationKind {
    /// `z ~ N(0, I)`
    Gaussian,
    /// `z = d̄ ⊙ r`, `r ~ U(0, 2)` elementwise; `direction` is the normalized anchor
    /// direction over the adapted parameters.
    AnchorGuided { direction: Arc<ParamVector> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub step_seed: u64,
    pub sample_index: u64,
    /// Perturbation scale `μ`.
    pub scale: f64,
    pub kind: PerturbationKind,
}

impl PerturbationSpec {
    pub fn gaussian(step_seed: u64, sample_index: u64, scale: f64) -> Self {
        Self { step_seed, sample_index, scale, kind: PerturbationKind::Gaussian }
    }

    pub fn is_anchor_guided(&self) -> bool {
        matches!(self.kind, PerturbationKind::AnchorGuided { .. })
    }

    fn key(&self, tensor_id: usize, stream: u64) -> Key {
        Key::new(&[self.step_seed, self.sample_index, tensor_id as u64, stream])
    }

    /// Writes this spec's slice of `z` for one adapted tensor into `out`.
    pub(crate) fn draw_into(&self, slot: &Slot, out: &mut [f64]) {
        debug_assert_eq!(out.len(), slot.len);
        match &self.kind {
            PerturbationKind::Gaussian => self.key(slot.tensor_id, STREAM_GAUSSIAN).fill_normal(out),
            PerturbationKind::AnchorGuided { direction } => {
                self.key(slot.tensor_id, STREAM_UNIFORM).fill_uniform(out, 2.0);
                let d = &direction[slot.offset..slot.offset + slot.len];
                for (v, di) in out.iter_mut().zip(d) {
                    *v *= di;
                }
            }
        }
    }

    fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid(format!("perturbation scale must be positive, got {}", self.scale)));
        }
        if let PerturbationKind::AnchorGuided { direction } = &self.kind {
            if direction.len() != layout.total {
                return Err(Error::shape(format!(
                    "anchor direction has {} values, adapted layout has {}",
                    direction.len(),
                    layout.total
                )));
            }
        }
        Ok(())
    }
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Peak number of perturbation elements simultaneously alive on this thread since
/// the last [`reset_peak`].
pub fn peak_elements() -> usize {
    PEAK.with(|p| p.get())
}

pub fn reset_peak() {
    PEAK.with(|p| p.set(LIVE.with(|l| l.get())));
}

/// Perturbation buffer whose size is tracked while it is alive.
struct Scratch(Vec<f64>);

impl Scratch {
    fn new(n: usize) -> Self {
        LIVE.with(|l| {
            let live = l.get() + n;
            l.set(live);
            PEAK.with(|p| p.set(p.get().max(live)));
        });
        Scratch(vec![0.0; n])
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get() - self.0.len()));
    }
}

/// Regenerates the perturbation of one adapted tensor.
pub fn draw_layer_perturbation(spec: &PerturbationSpec, net: &Network, tensor_id: usize) -> Result<Tensor> {
    let layout = net.layout(ParamSubset::Adapted);
    let slot = layout
        .slot(tensor_id)
        .ok_or_else(|| Error::invalid(format!("tensor {tensor_id} is not adapted")))?;
    spec.validate(&layout)?;
    let mut out = vec![0.0; slot.len];
    spec.draw_into(slot, &mut out);
    Tensor::new(slot.shape.clone(), out)
}

/// Materializes the full adapted-parameter perturbation of one spec.
pub fn materialize(spec: &PerturbationSpec, layout: &ParamLayout) -> Result<ParamVector> {
    spec.validate(layout)?;
    let mut out = vec![0.0; layout.total];
    for slot in &layout.slots {
        spec.draw_into(slot, &mut out[slot.offset..slot.offset + slot.len]);
    }
    Ok(ParamVector(out))
}

/// Outputs of the `θ + μz_i` and `θ − μz_i` models for every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricOutput {
    pub o_plus: Tensor,
    pub h_plus: Tensor,
    pub o_minus: Tensor,
    pub h_minus: Tensor,
    pub plus_finite: Vec<bool>,
    pub minus_finite: Vec<bool>,
}

impl SymmetricOutput {
    pub fn batch_size(&self) -> usize {
        self.plus_finite.len()
    }

    /// `(o⁺ + o⁻)/2`, or the finite side alone; `None` when both sides are non-finite.
    pub fn averaged_logits(&self, i: usize) -> Option<Vec<f64>> {
        average_pair(self.o_plus.row(i), self.o_minus.row(i), self.plus_finite[i], self.minus_finite[i])
    }

    pub fn averaged_features(&self, i: usize) -> Option<Vec<f64>> {
        average_pair(self.h_plus.row(i), self.h_minus.row(i), self.plus_finite[i], self.minus_finite[i])
    }

    pub fn both_finite(&self, i: usize) -> bool {
        self.plus_finite[i] && self.minus_finite[i]
    }
}

fn average_pair(a: &[f64], b: &[f64], fa: bool, fb: bool) -> Option<Vec<f64>> {
    match (fa, fb) {
        (true, true) => Some(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()),
        (true, false) => Some(a.to_vec()),
        (false, true) => Some(b.to_vec()),
        (false, false) => None,
    }
}

/// Symmetric forward of a single sample.
pub fn symmetric_forward(net: &Network, x_i: &[f64], spec: &PerturbationSpec) -> Result<SymmetricOutput> {
    let x = Tensor::new(vec![1, x_i.len()], x_i.to_vec())?;
    symmetric_forward_batch(net, &x, std::slice::from_ref(spec))
}

/// Evaluates every sample `i` under `ψ ± μ z_i`.
///
/// Layers before the first adapted layer run once for the whole batch and are
/// shared by both sides. From there on the two sides are tracked separately; at
/// each adapted layer the batch's perturbation slice is regenerated, used for both
/// signs and dropped before the next layer. The network is never mutated.
/// Counts two evaluations per sample.
pub fn symmetric_forward_batch(net: &Network, x: &Tensor, specs: &[PerturbationSpec]) -> Result<SymmetricOutput> {
    let (b, d) = net.check_input(x)?;
    if specs.len() != b {
        return Err(Error::shape(format!("{} perturbation specs for {b} samples", specs.len())));
    }
    let layout = net.layout(ParamSubset::Adapted);
    for s in specs {
        s.validate(&layout)?;
    }
    let layers = net.layers();
    let widths = net.widths();
    let tap = net.feature_tap();
    let first_adapted = layout.slots.first().map_or(layers.len(), |s| s.layer);
    let base: Vec<Vec<&[f64]>> =
        layers.iter().map(|l| l.params().into_iter().map(|t| t.data()).collect()).collect();

    let mut shared = x.data().to_vec();
    let mut w_in = d;
    let mut h_shared: Option<Vec<f64>> = None;
    for li in 0..first_adapted {
        let w_out = widths[li];
        let mut out = vec![0.0; b * w_out];
        for i in 0..b {
            layers[li].apply_row(&base[li], &shared[i * w_in..(i + 1) * w_in], &mut out[i * w_out..(i + 1) * w_out]);
        }
        shared = out;
        w_in = w_out;
        if li == tap {
            h_shared = Some(shared.clone());
        }
    }

    let mut plus = shared.clone();
    let mut minus = shared;
    let (mut h_plus, mut h_minus) = (h_shared.clone(), h_shared);
    for li in first_adapted..layers.len() {
        let w_out = widths[li];
        let mut out_p = vec![0.0; b * w_out];
        let mut out_m = vec![0.0; b * w_out];
        let slots: Vec<&Slot> = layout.layer_slots(li).collect();
        if slots.is_empty() {
            for i in 0..b {
                let (src, dst) = (i * w_in..(i + 1) * w_in, i * w_out..(i + 1) * w_out);
                layers[li].apply_row(&base[li], &plus[src.clone()], &mut out_p[dst.clone()]);
                layers[li].apply_row(&base[li], &minus[src], &mut out_m[dst]);
            }
        } else {
            // B × |θ_ℓ| perturbation block for this layer, alive only inside this branch.
            let mut blocks: Vec<Scratch> = slots.iter().map(|s| Scratch::new(b * s.len)).collect();
            for (slot, block) in slots.iter().zip(blocks.iter_mut()) {
                for (i, spec) in specs.iter().enumerate() {
                    spec.draw_into(slot, &mut block.0[i * slot.len..(i + 1) * slot.len]);
                }
            }
            let mut p_plus: Vec<Vec<f64>> = base[li].iter().map(|p| p.to_vec()).collect();
            let mut p_minus = p_plus.clone();
            for (i, spec) in specs.iter().enumerate() {
                for (slot, block) in slots.iter().zip(&blocks) {
                    let z = &block.0[i * slot.len..(i + 1) * slot.len];
                    let p = base[li][slot.param];
                    for j in 0..slot.len {
                        let step = spec.scale * z[j];
                        p_plus[slot.param][j] = p[j] + step;
                        p_minus[slot.param][j] = p[j] - step;
                    }
                }
                let pp: Vec<&[f64]> = p_plus.iter().map(|v| v.as_slice()).collect();
                let pm: Vec<&[f64]> = p_minus.iter().map(|v| v.as_slice()).collect();
                let (src, dst) = (i * w_in..(i + 1) * w_in, i * w_out..(i + 1) * w_out);
                layers[li].apply_row(&pp, &plus[src.clone()], &mut out_p[dst.clone()]);
                layers[li].apply_row(&pm, &minus[src], &mut out_m[dst]);
            }
            drop(blocks);
        }
        plus = out_p;
        minus = out_m;
        w_in = w_out;
        if li == tap {
            h_plus = Some(plus.clone());
            h_minus = Some(minus.clone());
        }
    }

    let c = net.output_dim();
    let f = net.feature_dim();
    let h_plus = h_plus.expect("tap precedes the last layer");
    let h_minus = h_minus.expect("tap precedes the last layer");
    let finite = |o: &[f64], h: &[f64], i: usize| {
        o[i * c..(i + 1) * c].iter().chain(&h[i * f..(i + 1) * f]).all(|v| v.is_finite())
    };
    let plus_finite = (0..b).map(|i| finite(&plus, &h_plus, i)).collect();
    let minus_finite = (0..b).map(|i| finite(&minus, &h_minus, i)).collect();
    record_forwards(2 * b);
    Ok(SymmetricOutput {
        o_plus: Tensor::new(vec![b, c], plus)?,
        h_plus: Tensor::new(vec![b, f], h_plus)?,
        o_minus: Tensor::new(vec![b, c], minus)?,
        h_minus: Tensor::new(vec![b, f], h_minus)?,
        plus_finite,
        minus_finite,
    })
}

/// `(1/B) Σ_i scalar_i · z_i` over the adapted layout.
///
/// Works one tensor at a time: each sample's slice of `z` is regenerated into a
/// buffer sized to that tensor, folded in, and the buffer is released before the
/// next tensor. Samples are reduced in index order.
pub fn accumulate_update(layout: &ParamLayout, specs: &[PerturbationSpec], scalars: &[f64]) -> Result<ParamVector> {
    if specs.len() != scalars.len() {
        return Err(Error::shape(format!("{} specs but {} scalars", specs.len(), scalars.len())));
    }
    for s in specs {
        s.validate(layout)?;
    }
    let mut out = vec![0.0; layout.total];
    if specs.is_empty() {
        return Ok(ParamVector(out));
    }
    for slot in &layout.slots {
        let mut z = Scratch::new(slot.len);
        let acc = &mut out[slot.offset..slot.offset + slot.len];
        for (spec, &s) in specs.iter().zip(scalars) {
            spec.draw_into(slot, &mut z.0);
            for (a, zj) in acc.iter_mut().zip(&z.0) {
                *a += s * zj;
            }
        }
    }
    let b = specs.len() as f64;
    out.iter_mut().for_each(|v| *v /= b);
    Ok(ParamVector(out))
}
