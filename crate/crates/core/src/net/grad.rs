//! Reference gradients. Neither path is used by the zeroth-order adaptation loop;
//! they exist for pretraining, diagnostics and cross-validation.

use super::layer::{ln_stats, Layer};
use super::network::{Network, ParamSubset, ParamVector};
use crate::error::{Error, Result};
use crate::objectives::{entropy_grad, l2_norm, sr_entropy_grad};
use crate::tensor::Tensor;

/// Per-sample loss head for [`grad_backprop_with`].
pub trait SampleLoss {
    /// Loss of sample `i`, its gradient w.r.t. the logits, and optionally w.r.t.
    /// the tapped features.
    fn eval(&self, i: usize, logits: &[f64], features: &[f64]) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)>;
}

/// Built-in loss heads.
#[derive(Clone, Copy, Debug)]
pub enum LossKind<'a> {
    CrossEntropy { labels: &'a [usize] },
    Entropy,
    /// Shortcut-resistant entropy with the reference norm taken from the clean logits
    /// (held constant) and an optional fixed center.
    SrEntropy { center: Option<&'a [f64]> },
}

impl SampleLoss for LossKind<'_> {
    fn eval(&self, i: usize, o: &[f64], _h: &[f64]) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        match *self {
            LossKind::CrossEntropy { labels } => {
                let y = *labels
                    .get(i)
                    .ok_or_else(|| Error::shape("fewer labels than samples"))?;
                if y >= o.len() {
                    return Err(Error::invalid(format!("label {y} out of range")));
                }
                let p = crate::objectives::softmax(o);
                let loss = -(p[y].max(f64::MIN_POSITIVE)).ln();
                let mut g = p;
                g[y] -= 1.0;
                Ok((loss, g, None))
            }
            LossKind::Entropy => {
                let (e, g) = entropy_grad(o);
                Ok((e, g, None))
            }
            LossKind::SrEntropy { center } => {
                let (e, g) = sr_entropy_grad(o, l2_norm(o), center);
                Ok((e, g, None))
            }
        }
    }
}

/// Exact gradient of the batch-mean loss over all parameters (canonical order).
pub fn grad_backprop(net: &Network, x: &Tensor, loss: LossKind<'_>) -> Result<ParamVector> {
    grad_backprop_with(net, x, &loss).map(|(_, g)| g)
}

/// Mean loss and its exact gradient over all parameters for an arbitrary head.
pub fn grad_backprop_with(net: &Network, x: &Tensor, loss: &dyn SampleLoss) -> Result<(f64, ParamVector)> {
    let (b, _) = net.check_input(x)?;
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let layout = net.layout(ParamSubset::All);
    let mut grad = vec![0.0; layout.total];
    // Offset of each layer's first parameter in the flat gradient.
    let mut layer_offset = vec![0usize; net.layers().len()];
    for s in &layout.slots {
        if s.param == 0 {
            layer_offset[s.layer] = s.offset;
        }
    }
    let params: Vec<Vec<&[f64]>> = net
        .layers()
        .iter()
        .map(|l| l.params().into_iter().map(|t| t.data()).collect())
        .collect();

    let mut total = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        // acts[k] is the input of layer k; acts[n] the logits.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(net.layers().len() + 1);
        acts.push(row.to_vec());
        for (li, layer) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; net.widths()[li]];
            layer.apply_row(&params[li], acts.last().unwrap(), &mut out);
            acts.push(out);
        }
        let tap = net.feature_tap();
        let (l, d_logits, d_feat) = loss.eval(i, acts.last().unwrap(), &acts[tap + 1])?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("loss of sample {i} is {l}")));
        }
        total += l;

        let mut dy = d_logits;
        for li in (0..net.layers().len()).rev() {
            if li == tap {
                if let Some(df) = &d_feat {
                    for (a, b) in dy.iter_mut().zip(df) {
                        *a += b;
                    }
                }
            }
            let input = &acts[li];
            let output = &acts[li + 1];
            let off = layer_offset[li];
            dy = backward_row(&net.layers()[li], &params[li], input, output, &dy, &mut grad[off..]);
        }
    }
    let inv_b = 1.0 / b as f64;
    grad.iter_mut().for_each(|g| *g *= inv_b);
    Ok((total * inv_b, ParamVector(grad)))
}

/// Accumulates parameter gradients into `pgrad` (starting at the layer's first
/// parameter) and returns the gradient w.r.t. the layer input.
fn backward_row(
    layer: &Layer,
    params: &[&[f64]],
    x: &[f64],
    y: &[f64],
    dy: &[f64],
    pgrad: &mut [f64],
) -> Vec<f64> {
    match layer {
        Layer::Linear { .. } => {
            let w = params[0];
            let (n_in, n_out) = (x.len(), dy.len());
            let mut dx = vec![0.0; n_in];
            for o in 0..n_out {
                let g = dy[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                let gw = &mut pgrad[o * n_in..(o + 1) * n_in];
                for k in 0..n_in {
                    gw[k] += g * x[k];
                    dx[k] += g * row[k];
                }
            }
            let gb = &mut pgrad[n_out * n_in..n_out * n_in + n_out];
            for (a, g) in gb.iter_mut().zip(dy) {
                *a += g;
            }
            dx
        }
        Layer::Relu => x.iter().zip(dy).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect(),
        Layer::Tanh => y.iter().zip(dy).map(|(t, g)| g * (1.0 - t * t)).collect(),
        Layer::LayerNorm { eps, .. } => {
            let gain = params[0];
            let n = x.len();
            let (mean, inv_std) = ln_stats(x, *eps);
            let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
            let mut dxhat = vec![0.0; n];
            for k in 0..n {
                pgrad[k] += dy[k] * xhat[k];
                pgrad[n + k] += dy[k];
                dxhat[k] = dy[k] * gain[k];
            }
            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
            let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            (0..n).map(|k| inv_std * (dxhat[k] - mean_d - xhat[k] * mean_dx)).collect()
        }
        Layer::InputOffset { .. } => {
            for (a, g) in pgrad.iter_mut().zip(dy) {
                *a += g;
            }
            dy.to_vec()
        }
    }
}

/// Largest number of coordinates [`grad_finite_diff`] will probe.
pub const FINITE_DIFF_MAX_PARAMS: usize = 10_000;

/// Central-difference gradient of `loss` over a parameter subset, with per-coordinate
/// step `1e-5·max(1, |θ_i|)`.
pub fn grad_finite_diff<F>(net: &Network, subset: ParamSubset, loss: F) -> Result<ParamVector>
where
    F: Fn(&Network) -> Result<f64>,
{
    let theta = net.pack(subset);
    if theta.len() > FINITE_DIFF_MAX_PARAMS {
        return Err(Error::invalid(format!(
            "finite differences over {} parameters exceed the {} limit",
            theta.len(),
            FINITE_DIFF_MAX_PARAMS
        )));
    }
    let mut probe = net.clone();
    let mut point = theta.clone();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        point[i] = theta[i] + h;
        probe.unpack(subset, &point)?;
        let up = loss(&probe)?;
        point[i] = theta[i] - h;
        probe.unpack(subset, &point)?;
        let down = loss(&probe)?;
        point[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i} is {up} / {down}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(ParamVector(out))
}

/// Central differences of a plain function of a vector; same step rule.
pub fn finite_diff<F>(theta: &[f64], f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut point = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        point[i] = theta[i] + h;
        let up = f(&point);
        point[i] = theta[i] - h;
        let down = f(&point);
        point[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("function at coordinate {i} is {up} / {down}")));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Mean per-sample loss of a clean forward (not counted as an adaptation forward).
pub fn batch_loss(net: &Network, x: &Tensor, loss: &dyn SampleLoss) -> Result<f64> {
    let out = net.forward_uncounted(x)?;
    let mut total = 0.0;
    for i in 0..out.logits.rows() {
        total += loss.eval(i, out.logits.row(i), out.features.row(i))?.0;
    }
    Ok(total / out.logits.rows() as f64)
}

/// Restricts an all-parameter vector to the adapted subset.
pub fn restrict_to_adapted(net: &Network, full: &ParamVector) -> ParamVector {
    let all = net.layout(ParamSubset::All);
    let adapted = net.layout(ParamSubset::Adapted);
    let mut out = Vec::with_capacity(adapted.total);
    for s in &adapted.slots {
        let src = all.slot(s.tensor_id).expect("adapted slot exists in full layout");
        out.extend_from_slice(&full[src.offset..src.offset + src.len]);
    }
    ParamVector(out)
}
