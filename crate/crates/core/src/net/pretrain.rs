use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grad::{grad_backprop_with, LossKind};
use super::network::{Network, ParamSubset};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objectives::SourceStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 600, lr: 0.1, batch_size: 64, seed: 0 }
    }
}

/// Supervised minibatch SGD on cross-entropy over every parameter, followed by
/// population feature statistics of the training set at the feature tap.
pub fn pretrain_source(net: &Network, train: &Dataset, cfg: &PretrainConfig) -> Result<(Network, SourceStats)> {
    let n = train.len();
    if n == 0 {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut net = net.clone();
    let mut theta = net.pack(ParamSubset::All);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for step in 0..cfg.steps {
        if cfg.lr == 0.0 {
            break;
        }
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(n) {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let x = train.x.select_rows(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
        let (loss, g) = match grad_backprop_with(&net, &x, &LossKind::CrossEntropy { labels: &y }) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !g.is_finite() || !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        theta.axpy(-cfg.lr, &g);
        net.unpack(ParamSubset::All, &theta)?;
    }
    let feats = net.forward_uncounted(&train.x)?.features;
    let rows: Vec<&[f64]> = feats.iter_rows().collect();
    let stats = SourceStats::from_rows(&rows)?;
    Ok((net, stats))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let out = net.forward(&ds.x)?;
    let correct = out
        .logits
        .iter_rows()
        .zip(&ds.y)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
