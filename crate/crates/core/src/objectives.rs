//! Unsupervised test-time objectives.
//!
//! * shortcut-resistant entropy: entropy of the softmax over logits rescaled to a
//!   shared reference norm and decentered by an online output center, so it has
//!   no logit-scale degree of freedom;
//! * sample-wise feature alignment: distance between source feature moments and
//!   the target moments as they would look after absorbing one more sample;
//! * their weighted sum.
//!
//! Online statistics (output center, first/second feature moments) are batch-level
//! EMAs owned by the engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard in the norm denominator of the rescaled logits.
pub const SR_EPS: f64 = 1e-12;

/// Default EMA factor for the output center and target moments.
pub const DEFAULT_STATE_EMA: f64 = 0.9;

/// Default weight of the hypothetical sample in the moment update.
pub const DEFAULT_RHO: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineCenter {
    c: Option<Vec<f64>>,
    pub ema_factor: f64,
}

impl OnlineCenter {
    pub fn new(ema_factor: f64) -> Self {
        Self { c: None, ema_factor }
    }

    pub fn with_value(c: Vec<f64>, ema_factor: f64) -> Self {
        Self { c: Some(c), ema_factor }
    }

    pub fn value(&self) -> Option<&[f64]> {
        self.c.as_deref()
    }

    pub fn is_initialized(&self) -> bool {
        self.c.is_some()
    }

    /// EMA update from a batch of averaged logits (`rows` of width C).
    /// The first call initializes the center to the batch mean.
    pub fn update<R: AsRef<[f64]>>(&mut self, o_bar_rows: &[R]) {
        let Some(mean) = column_mean(o_bar_rows) else { return };
        self.update_with_mean(&mean);
    }

    pub fn update_with_mean(&mut self, mean: &[f64]) {
        let f = self.ema_factor;
        match &mut self.c {
            None => self.c = Some(mean.to_vec()),
            Some(c) => {
                for (ci, mi) in c.iter_mut().zip(mean) {
                    *ci = f * *ci + (1.0 - f) * mi;
                }
            }
        }
    }
}

/// Online first (`m`) and second (`q`) feature moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMoments {
    m: Option<Vec<f64>>,
    q: Option<Vec<f64>>,
    pub ema_factor: f64,
}

impl TargetMoments {
    pub fn new(ema_factor: f64) -> Self {
        Self { m: None, q: None, ema_factor }
    }

    pub fn with_values(m: Vec<f64>, q: Vec<f64>, ema_factor: f64) -> Self {
        Self { m: Some(m), q: Some(q), ema_factor }
    }

    pub fn mean(&self) -> Option<&[f64]> {
        self.m.as_deref()
    }

    pub fn second_moment(&self) -> Option<&[f64]> {
        self.q.as_deref()
    }

    pub fn is_initialized(&self) -> bool {
        self.m.is_some() && self.q.is_some()
    }

    /// Standard deviation reconstructed as `sqrt(max(q - m², 0))`.
    pub fn std(&self) -> Option<Vec<f64>> {
        let (m, q) = (self.m.as_ref()?, self.q.as_ref()?);
        Some(m.iter().zip(q).map(|(m, q)| (q - m * m).max(0.0).sqrt()).collect())
    }

    /// `m ← f·m + (1−f)·h_bar`, `q ← f·q + (1−f)·h_sq_bar`; the first call copies.
    pub fn update(&mut self, h_bar: &[f64], h_sq_bar: &[f64]) {
        let f = self.ema_factor;
        match (&mut self.m, &mut self.q) {
            (Some(m), Some(q)) => {
                for (mi, hi) in m.iter_mut().zip(h_bar) {
                    *mi = f * *mi + (1.0 - f) * hi;
                }
                for (qi, hi) in q.iter_mut().zip(h_sq_bar) {
                    *qi = f * *qi + (1.0 - f) * hi;
                }
            }
            _ => {
                self.m = Some(h_bar.to_vec());
                self.q = Some(h_sq_bar.to_vec());
            }
        }
    }
}

/// Per-dimension source feature mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SourceStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::shape("source mean and std differ in length"));
        }
        if std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::invalid("source std must be nonnegative"));
        }
        Ok(Self { mean, std })
    }

    /// Population statistics of a set of feature rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let mean = column_mean(rows).ok_or_else(|| Error::invalid("no feature rows"))?;
        let n = rows.len() as f64;
        let mut var = vec![0.0; mean.len()];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub(crate) fn column_mean<R: AsRef<[f64]>>(rows: &[R]) -> Option<Vec<f64>> {
    let first = rows.first()?.as_ref();
    let mut acc = vec![0.0; first.len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r.as_ref()) {
            *a += v;
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Shannon entropy of `softmax(s)` in nats.
pub fn entropy(s: &[f64]) -> f64 {
    softmax(s)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// Entropy of `softmax(s)` and its gradient with respect to `s`.
pub fn entropy_grad(s: &[f64]) -> (f64, Vec<f64>) {
    let p = softmax(s);
    let e: f64 = p.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    let g = p
        .iter()
        .map(|&pk| if pk > 0.0 { -pk * (pk.ln() + e) } else { 0.0 })
        .collect();
    (e, g)
}

/// `s(o) = r̄ / (‖o‖ + ε) · o − c`
pub fn sr_logits(o: &[f64], r_bar: f64, center: Option<&[f64]>) -> Vec<f64> {
    let k = r_bar / (l2_norm(o) + SR_EPS);
    match center {
        Some(c) => o.iter().zip(c).map(|(v, c)| k * v - c).collect(),
        None => o.iter().map(|v| k * v).collect(),
    }
}

fn check_classes(o: &[f64], o_bar: &[f64], center: &OnlineCenter) -> Result<()> {
    if o.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {}", o.len())));
    }
    if o_bar.len() != o.len() {
        return Err(Error::shape("o and o_bar differ in length"));
    }
    if let Some(c) = center.value() {
        if c.len() != o.len() {
            return Err(Error::shape("output center differs in length from logits"));
        }
    }
    Ok(())
}

/// Shortcut-resistant entropy of one side's logits `o`, using the reference norm
/// `‖o_bar‖` of the symmetric average and the current output center.
pub fn sr_entropy(o: &[f64], o_bar: &[f64], center: &OnlineCenter) -> Result<f64> {
    check_classes(o, o_bar, center)?;
    Ok(entropy(&sr_logits(o, l2_norm(o_bar), center.value())))
}

/// Shortcut-resistant entropy and its gradient w.r.t. `o`, holding `r_bar` and the
/// center fixed.
pub fn sr_entropy_grad(o: &[f64], r_bar: f64, center: Option<&[f64]>) -> (f64, Vec<f64>) {
    let n = l2_norm(o);
    let s = sr_logits(o, r_bar, center);
    let (e, g) = entropy_grad(&s);
    // d/do [o/(‖o‖+ε)] = I/(n+ε) − o oᵀ / (n (n+ε)²)
    let og: f64 = o.iter().zip(&g).map(|(a, b)| a * b).sum();
    let d = n + SR_EPS;
    let radial = if n > 0.0 { og / (n * d * d) } else { 0.0 };
    let grad = o
        .iter()
        .zip(&g)
        .map(|(ok, gk)| r_bar * (gk / d - ok * radial))
        .collect();
    (e, grad)
}

/// Result of a sample-wise alignment evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwaEval {
    pub loss: f64,
    /// Dimensions where `q̂ − m̂²` went negative and was clamped to zero.
    pub clamped: usize,
}

fn check_swa<'a>(h: &[f64], moments: &'a TargetMoments, src: &SourceStats, rho: f64) -> Result<(&'a [f64], &'a [f64])> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho must lie in [0, 1], got {rho}")));
    }
    let (Some(m), Some(q)) = (moments.mean(), moments.second_moment()) else {
        return Err(Error::invalid("target moments are not initialized"));
    };
    if h.len() != src.dim() || m.len() != src.dim() {
        return Err(Error::shape(format!(
            "feature width {} does not match source statistics width {}",
            h.len(),
            src.dim()
        )));
    }
    Ok((m, q))
}

/// Sample-wise feature alignment `‖m̂ − m_s‖² + ‖σ̂ − σ_s‖²`.
pub fn swa_loss(h: &[f64], moments: &TargetMoments, src: &SourceStats, rho: f64) -> Result<f64> {
    swa_eval(h, moments, src, rho).map(|e| e.loss)
}

pub fn swa_eval(h: &[f64], moments: &TargetMoments, src: &SourceStats, rho: f64) -> Result<SwaEval> {
    let (m, q) = check_swa(h, moments, src, rho)?;
    let mut loss = 0.0;
    let mut clamped = 0;
    for j in 0..h.len() {
        let m_hat = (1.0 - rho) * m[j] + rho * h[j];
        let q_hat = (1.0 - rho) * q[j] + rho * h[j] * h[j];
        let var = q_hat - m_hat * m_hat;
        if var < 0.0 {
            clamped += 1;
        }
        let sigma = var.max(0.0).sqrt();
        loss += (m_hat - src.mean[j]).powi(2) + (sigma - src.std[j]).powi(2);
    }
    Ok(SwaEval { loss, clamped })
}

/// Alignment loss and its gradient w.r.t. `h`. Clamped or zero-σ̂ dimensions
/// contribute no σ-gradient.
pub fn swa_grad(h: &[f64], moments: &TargetMoments, src: &SourceStats, rho: f64) -> Result<(f64, Vec<f64>)> {
    let (m, q) = check_swa(h, moments, src, rho)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; h.len()];
    for j in 0..h.len() {
        let m_hat = (1.0 - rho) * m[j] + rho * h[j];
        let q_hat = (1.0 - rho) * q[j] + rho * h[j] * h[j];
        let var = q_hat - m_hat * m_hat;
        let sigma = var.max(0.0).sqrt();
        loss += (m_hat - src.mean[j]).powi(2) + (sigma - src.std[j]).powi(2);
        grad[j] = 2.0 * (m_hat - src.mean[j]) * rho;
        if var > 0.0 {
            grad[j] += 2.0 * (sigma - src.std[j]) * rho * (h[j] - m_hat) / sigma;
        }
    }
    Ok((loss, grad))
}

/// `E^SR(o) + λ·ℓ_SWA(h)`. With `lambda == 0` the alignment term is skipped and
/// source statistics may be absent.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    o: &[f64],
    o_bar: &[f64],
    h: &[f64],
    center: &OnlineCenter,
    moments: &TargetMoments,
    src: Option<&SourceStats>,
    rho: f64,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let e = sr_entropy(o, o_bar, center)?;
    if lambda == 0.0 {
        return Ok(e);
    }
    let src = src.ok_or_else(|| {
        Error::Config("feature alignment (lambda > 0) needs source statistics".into())
    })?;
    Ok(e + lambda * swa_loss(h, moments, src, rho)?)
}
