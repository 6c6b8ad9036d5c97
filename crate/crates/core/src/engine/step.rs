use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{AdaptConfig, Estimator, Resolved};
use crate::error::{Error, Result};
use crate::net::{
    argmax, grad_backprop_with, restrict_to_adapted, Network, ParamSubset, ParamVector, SampleLoss,
};
use crate::objectives::{
    column_mean, entropy, entropy_grad, l2_norm, sr_entropy_grad, sr_logits, swa_eval, swa_grad, OnlineCenter,
    SourceStats, TargetMoments, SR_EPS,
};
use crate::perturb::{materialize, symmetric_forward_batch, Key, PerturbationKind, PerturbationSpec};
use crate::tensor::Tensor;
use crate::zo::{
    anchor_direction, balance_update, eva_gradient, relax_weights, sample_perturbation_kinds, sgd_step,
    update_anchor, AnchorState, BalanceState,
};

/// Mutable adaptation state carried between batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineState {
    pub center: OnlineCenter,
    pub moments: TargetMoments,
    pub anchor: AnchorState,
    pub balance: BalanceState,
    pub step: u64,
    /// Mixed into every step seed; lets independent streams draw independent directions.
    pub stream_id: u64,
    /// Adapted parameters at the start of the stream.
    pub theta0: ParamVector,
}

impl OnlineState {
    pub fn new(net: &Network, cfg: &AdaptConfig) -> Result<Self> {
        let theta0 = net.pack(ParamSubset::Adapted);
        let anchor = AnchorState::new(theta0.clone(), cfg.anchor_ema, cfg.gamma)?;
        Ok(Self {
            center: OnlineCenter::new(cfg.center_ema),
            moments: TargetMoments::new(cfg.moment_ema),
            anchor,
            balance: BalanceState::new(cfg.balance_beta)?,
            step: 0,
            stream_id: 0,
            theta0,
        })
    }

    pub fn with_stream_id(mut self, id: u64) -> Self {
        self.stream_id = id;
        self
    }

    pub fn step_seed(&self, cfg: &AdaptConfig) -> u64 {
        Key::new(&[cfg.seed, self.stream_id, self.step]).word(0)
    }
}

/// One processed batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub step_seed: u64,
    pub batch_size: usize,
    pub predictions: Vec<usize>,
    /// Per-sample correctness when labels were supplied.
    pub correct: Option<Vec<bool>>,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub update_norm: f64,
    pub drift: f64,
    pub mean_logit_norm: f64,
    pub mean_sr_entropy: f64,
    pub excluded: usize,
    pub swa_clamped: usize,
    pub cosine: Option<f64>,
    pub warning: Option<String>,
}

impl StepRecord {
    pub fn correct_count(&self) -> usize {
        self.correct.as_ref().map_or(0, |c| c.iter().filter(|v| **v).count())
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Logits used for prediction, one row per sample.
    pub predictions: Tensor,
    pub net: Network,
    pub state: OnlineState,
    pub record: StepRecord,
}

/// Per-sample loss used by the zeroth-order estimators and by the exact-gradient
/// oracle. The reference norm of each sample and the online statistics are held
/// fixed, exactly as in the perturbed evaluations.
pub struct Objective<'a> {
    pub shortcut_resistant: bool,
    pub lambda: f64,
    pub rho: f64,
    pub center: &'a OnlineCenter,
    pub moments: &'a TargetMoments,
    pub src: Option<&'a SourceStats>,
    pub r_bars: Vec<f64>,
}

impl Objective<'_> {
    fn check(&self) -> Result<()> {
        if self.lambda > 0.0 && self.src.is_none() {
            return Err(Error::Config(
                "feature alignment (lambda > 0) needs source statistics; use eva0-dagger or set lambda = 0".into(),
            ));
        }
        Ok(())
    }

    /// Loss of one side, and how many alignment dimensions were clamped.
    pub fn loss(&self, o: &[f64], h: &[f64], r_bar: f64) -> Result<(f64, usize)> {
        let e = if self.shortcut_resistant {
            entropy(&sr_logits(o, r_bar, self.center.value()))
        } else {
            entropy(o)
        };
        if self.lambda == 0.0 {
            return Ok((e, 0));
        }
        let src = self.src.expect("checked");
        let s = swa_eval(h, self.moments, src, self.rho)?;
        Ok((e + self.lambda * s.loss, s.clamped))
    }
}

impl SampleLoss for Objective<'_> {
    fn eval(&self, i: usize, o: &[f64], h: &[f64]) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        let (e, g) = if self.shortcut_resistant {
            sr_entropy_grad(o, self.r_bars[i], self.center.value())
        } else {
            entropy_grad(o)
        };
        if self.lambda == 0.0 {
            return Ok((e, g, None));
        }
        let src = self.src.expect("checked");
        let (l, mut gh) = swa_grad(h, self.moments, src, self.rho)?;
        gh.iter_mut().for_each(|v| *v *= self.lambda);
        Ok((e + self.lambda * l, g, Some(gh)))
    }
}

/// Result of one gradient estimate, before any parameter change.
pub(crate) struct Estimate {
    pub g_hat: ParamVector,
    pub predictions: Tensor,
    pub included: Vec<usize>,
    pub o_bar: Vec<Vec<f64>>,
    pub h_bar: Vec<Vec<f64>>,
    pub h_sq_bar: Vec<Vec<f64>>,
    pub r_bars: Vec<f64>,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub clamped: usize,
    pub center: OnlineCenter,
    pub moments: TargetMoments,
    pub warning: Option<String>,
}

fn guarded_norm(v: &[f64]) -> f64 {
    l2_norm(v) + SR_EPS
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Center and moments as the loss sees them: seeded from this batch when uninitialized.
fn bootstrap(state: &OnlineState, o_bar: &[Vec<f64>], h_bar: &[Vec<f64>], h_sq: &[Vec<f64>]) -> (OnlineCenter, TargetMoments) {
    let mut center = state.center.clone();
    let mut moments = state.moments.clone();
    if !center.is_initialized() {
        if let Some(m) = column_mean(o_bar) {
            center = OnlineCenter::with_value(m, center.ema_factor);
        }
    }
    if !moments.is_initialized() {
        if let (Some(m), Some(q)) = (column_mean(h_bar), column_mean(h_sq)) {
            moments = TargetMoments::with_values(m, q, moments.ema_factor);
        }
    }
    (center, moments)
}

pub(crate) fn specs_for(
    net: &Network,
    theta: &ParamVector,
    state: &OnlineState,
    cfg: &AdaptConfig,
    res: &Resolved,
    b: usize,
    step_seed: u64,
) -> Result<Vec<PerturbationSpec>> {
    let kinds = sample_perturbation_kinds(b, res.k.min(b), step_seed)?;
    let direction = if kinds.iter().any(|k| *k) {
        Some(Arc::new(anchor_direction(theta, &state.anchor)?))
    } else {
        None
    };
    debug_assert_eq!(theta.len(), net.param_count(ParamSubset::Adapted));
    let spec = |i: usize, guided: bool| PerturbationSpec {
        step_seed,
        sample_index: i as u64,
        scale: cfg.mu,
        kind: if guided {
            PerturbationKind::AnchorGuided { direction: direction.clone().expect("direction drawn") }
        } else {
            PerturbationKind::Gaussian
        },
    };
    Ok(if res.sample_wise {
        kinds.iter().enumerate().map(|(i, &g)| spec(i, g)).collect()
    } else {
        vec![spec(0, kinds[0]); b]
    })
}

/// Symmetric two-forward estimate.
pub(crate) fn estimate_two_sided(
    net: &Network,
    state: &OnlineState,
    x: &Tensor,
    cfg: &AdaptConfig,
    res: &Resolved,
    src: Option<&SourceStats>,
    step_seed: u64,
) -> Result<Estimate> {
    let (b, _) = x.dims2()?;
    let theta = net.pack(ParamSubset::Adapted);
    let specs = specs_for(net, &theta, state, cfg, res, b, step_seed)?;
    let sym = symmetric_forward_batch(net, x, &specs)?;

    let c = net.output_dim();
    let mut pred = vec![0.0; b * c];
    let mut fallback = Vec::new();
    let mut included = Vec::new();
    let (mut o_bar, mut h_bar, mut h_sq) = (Vec::new(), Vec::new(), Vec::new());
    let mut r_bars = vec![0.0; b];
    for i in 0..b {
        match sym.averaged_logits(i) {
            Some(o) => {
                pred[i * c..(i + 1) * c].copy_from_slice(&o);
                r_bars[i] = guarded_norm(&o);
                if sym.both_finite(i) {
                    let hp = sym.h_plus.row(i);
                    let hm = sym.h_minus.row(i);
                    included.push(i);
                    h_bar.push(hp.iter().zip(hm).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>());
                    h_sq.push(hp.iter().zip(hm).map(|(a, b)| 0.5 * (a * a + b * b)).collect::<Vec<f64>>());
                    o_bar.push(o);
                }
            }
            None => fallback.push(i),
        }
    }
    let mut warning = None;
    if !fallback.is_empty() {
        // Both sides diverged for these samples: predict from a clean forward.
        let clean = net.forward(&x.select_rows(&fallback))?;
        for (j, &i) in fallback.iter().enumerate() {
            pred[i * c..(i + 1) * c].copy_from_slice(clean.logits.row(j));
        }
        warning = Some(format!("{} samples non-finite on both sides", fallback.len()));
    }
    let (center, moments) = bootstrap(state, &o_bar, &h_bar, &h_sq);
    let obj = Objective {
        shortcut_resistant: res.shortcut_resistant,
        lambda: res.lambda,
        rho: cfg.rho,
        center: &center,
        moments: &moments,
        src,
        r_bars: r_bars.clone(),
    };
    obj.check()?;
    let mut losses = Vec::with_capacity(included.len());
    let mut kept = Vec::with_capacity(included.len());
    let mut clamped = 0;
    for &i in &included {
        let (lp, cp) = obj.loss(sym.o_plus.row(i), sym.h_plus.row(i), r_bars[i])?;
        let (lm, cm) = obj.loss(sym.o_minus.row(i), sym.h_minus.row(i), r_bars[i])?;
        if lp.is_finite() && lm.is_finite() {
            losses.push((lp, lm));
            kept.push(i);
            clamped += cp + cm;
        }
    }
    let g_hat = if kept.is_empty() {
        if warning.is_none() {
            warning = Some("no finite loss pair in batch".into());
        }
        ParamVector::zeros(theta.len())
    } else {
        let kept_specs: Vec<PerturbationSpec> = kept.iter().map(|&i| specs[i].clone()).collect();
        eva_gradient(&net.layout(ParamSubset::Adapted), &losses, &kept_specs, cfg.mu)?
    };
    let loss_plus = mean(&losses.iter().map(|l| l.0).collect::<Vec<_>>());
    let loss_minus = mean(&losses.iter().map(|l| l.1).collect::<Vec<_>>());
    if kept.len() != included.len() {
        let pos: Vec<usize> = kept.iter().map(|i| included.iter().position(|j| j == i).unwrap()).collect();
        o_bar = pos.iter().map(|&p| o_bar[p].clone()).collect();
        h_bar = pos.iter().map(|&p| h_bar[p].clone()).collect();
        h_sq = pos.iter().map(|&p| h_sq[p].clone()).collect();
    }
    Ok(Estimate {
        g_hat,
        predictions: Tensor::new(vec![b, c], pred)?,
        included: kept,
        o_bar,
        h_bar,
        h_sq_bar: h_sq,
        r_bars,
        loss_plus,
        loss_minus,
        clamped,
        center,
        moments,
        warning,
    })
}

/// One clean forward plus one forward at `θ + μz` with a batch-shared `z`.
pub(crate) fn estimate_one_sided(
    net: &Network,
    state: &OnlineState,
    x: &Tensor,
    cfg: &AdaptConfig,
    res: &Resolved,
    src: Option<&SourceStats>,
    step_seed: u64,
) -> Result<Estimate> {
    let (b, _) = x.dims2()?;
    let theta = net.pack(ParamSubset::Adapted);
    let spec = specs_for(net, &theta, state, cfg, res, b, step_seed)?.swap_remove(0);
    let z = materialize(&spec, &net.layout(ParamSubset::Adapted))?;
    let mut plus_theta = theta.clone();
    plus_theta.axpy(cfg.mu, &z);
    let clean = net.forward(x)?;
    let plus = net.with_params(ParamSubset::Adapted, &plus_theta)?.forward(x)?;

    let mut included = Vec::new();
    let (mut o_bar, mut h_bar, mut h_sq) = (Vec::new(), Vec::new(), Vec::new());
    let mut r_bars = vec![0.0; b];
    for i in 0..b {
        let o = clean.logits.row(i);
        let h = clean.features.row(i);
        r_bars[i] = guarded_norm(o);
        let finite = o.iter().chain(h).chain(plus.logits.row(i)).chain(plus.features.row(i)).all(|v| v.is_finite());
        if finite {
            included.push(i);
            o_bar.push(o.to_vec());
            h_bar.push(h.to_vec());
            h_sq.push(h.iter().map(|v| v * v).collect());
        }
    }
    let (center, moments) = bootstrap(state, &o_bar, &h_bar, &h_sq);
    let obj = Objective {
        shortcut_resistant: res.shortcut_resistant,
        lambda: res.lambda,
        rho: cfg.rho,
        center: &center,
        moments: &moments,
        src,
        r_bars: r_bars.clone(),
    };
    obj.check()?;
    let (mut lp, mut l0, mut clamped) = (Vec::new(), Vec::new(), 0);
    for &i in &included {
        let (a, ca) = obj.loss(plus.logits.row(i), plus.features.row(i), r_bars[i])?;
        let (b0, cb) = obj.loss(clean.logits.row(i), clean.features.row(i), r_bars[i])?;
        lp.push(a);
        l0.push(b0);
        clamped += ca + cb;
    }
    let (loss_plus, loss_zero) = (mean(&lp), mean(&l0));
    let mut warning = None;
    let g_hat = if included.is_empty() || !loss_plus.is_finite() || !loss_zero.is_finite() {
        warning = Some("no finite loss in batch".into());
        ParamVector::zeros(theta.len())
    } else {
        z.scaled((loss_plus - loss_zero) / cfg.mu)
    };
    Ok(Estimate {
        g_hat,
        predictions: clean.logits,
        included,
        o_bar,
        h_bar,
        h_sq_bar: h_sq,
        r_bars,
        loss_plus,
        loss_minus: loss_zero,
        clamped,
        center,
        moments,
        warning,
    })
}

/// Exact gradient of the configured objective at the clean model.
pub(crate) fn estimate_backprop(
    net: &Network,
    state: &OnlineState,
    x: &Tensor,
    cfg: &AdaptConfig,
    res: &Resolved,
    src: Option<&SourceStats>,
) -> Result<Estimate> {
    let (b, _) = x.dims2()?;
    let clean = net.forward(x)?;
    let o_bar: Vec<Vec<f64>> = clean.logits.iter_rows().map(|r| r.to_vec()).collect();
    let h_bar: Vec<Vec<f64>> = clean.features.iter_rows().map(|r| r.to_vec()).collect();
    let h_sq: Vec<Vec<f64>> = h_bar.iter().map(|r| r.iter().map(|v| v * v).collect()).collect();
    let r_bars: Vec<f64> = o_bar.iter().map(|o| guarded_norm(o)).collect();
    let (center, moments) = bootstrap(state, &o_bar, &h_bar, &h_sq);
    let obj = Objective {
        shortcut_resistant: res.shortcut_resistant,
        lambda: res.lambda,
        rho: cfg.rho,
        center: &center,
        moments: &moments,
        src,
        r_bars: r_bars.clone(),
    };
    obj.check()?;
    let (loss, full) = grad_backprop_with(net, x, &obj)?;
    Ok(Estimate {
        g_hat: restrict_to_adapted(net, &full),
        predictions: clean.logits,
        included: (0..b).collect(),
        o_bar,
        h_bar,
        h_sq_bar: h_sq,
        r_bars,
        loss_plus: loss,
        loss_minus: loss,
        clamped: 0,
        center,
        moments,
        warning: None,
    })
}

/// Processes one batch: predict, estimate, update. `labels` only feed the record.
pub fn adapt_step(
    net: &Network,
    state: &OnlineState,
    x: &Tensor,
    labels: Option<&[usize]>,
    cfg: &AdaptConfig,
    src: Option<&SourceStats>,
) -> Result<StepOutput> {
    let (b, _) = x.dims2()?;
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(y) = labels {
        if y.len() != b {
            return Err(Error::shape(format!("{} labels for {b} samples", y.len())));
        }
    }
    let res = cfg.resolved();
    let step_seed = state.step_seed(cfg);
    let theta = net.pack(ParamSubset::Adapted);
    if theta.len() != state.theta0.len() {
        return Err(Error::shape("network adapted subset does not match the online state"));
    }

    let est = match res.estimator {
        Estimator::None => {
            let out = net.forward(x)?;
            let mut next = state.clone();
            next.step += 1;
            let record = record_for(state, step_seed, &out.logits, labels, None, &theta, &theta, 0.0, 0.0, None);
            return Ok(StepOutput { predictions: out.logits, net: net.clone(), state: next, record });
        }
        Estimator::TwoSided => estimate_two_sided(net, state, x, cfg, &res, src, step_seed)?,
        Estimator::OneSided => estimate_one_sided(net, state, x, cfg, &res, src, step_seed)?,
        Estimator::Backprop => estimate_backprop(net, state, x, cfg, &res, src)?,
    };

    let cosine = if cfg.diagnostics {
        Some(oracle_cosine(net, x, &est, cfg, &res, src)?.0)
    } else {
        None
    };

    let mut next = state.clone();
    next.step += 1;
    let mut new_net = net.clone();
    if est.included.is_empty() {
        let mut record = record_for(state, step_seed, &est.predictions, labels, Some(&est), &theta, &theta, 0.0, 0.0, cosine);
        record.warning = est.warning.clone();
        return Ok(StepOutput { predictions: est.predictions, net: new_net, state: next, record });
    }

    let theta_new = apply_update(&theta, &est.g_hat, cfg, &res, &mut next)?;
    if !theta_new.is_finite() {
        return Err(Error::NonFinite(format!("parameters after step {}", state.step)));
    }
    new_net.unpack(ParamSubset::Adapted, &theta_new)?;

    next.center = est.center.clone();
    next.center.update(&est.o_bar);
    next.moments = est.moments.clone();
    if let (Some(m), Some(q)) = (column_mean(&est.h_bar), column_mean(&est.h_sq_bar)) {
        next.moments.update(&m, &q);
    }

    let record = record_for(
        state,
        step_seed,
        &est.predictions,
        labels,
        Some(&est),
        &theta,
        &theta_new,
        est.loss_plus,
        est.loss_minus,
        cosine,
    );
    Ok(StepOutput { predictions: est.predictions, net: new_net, state: next, record })
}

/// SGD step, then the optional balance, relaxation and anchor update.
pub(crate) fn apply_update(
    theta: &ParamVector,
    g_hat: &ParamVector,
    cfg: &AdaptConfig,
    res: &Resolved,
    state: &mut OnlineState,
) -> Result<ParamVector> {
    let mut theta_prime = sgd_step(theta, g_hat, cfg.eta)?;
    if res.balance {
        let delta = theta_prime.sub(theta);
        let (delta, bal) = balance_update(&delta, theta, &state.anchor, &state.balance)?;
        state.balance = bal;
        theta_prime = theta.clone();
        theta_prime.axpy(1.0, &delta);
    }
    let mut anchor = state.anchor.clone();
    anchor.gamma = res.gamma;
    let theta_new = if res.gamma > 0.0 { relax_weights(&theta_prime, &anchor) } else { theta_prime };
    if res.ago {
        state.anchor = update_anchor(&state.anchor, &theta_new);
    }
    Ok(theta_new)
}

/// Cosine between the estimate and the exact gradient of the same objective, and
/// whether either vector had zero norm.
pub(crate) fn oracle_cosine(
    net: &Network,
    x: &Tensor,
    est: &Estimate,
    cfg: &AdaptConfig,
    res: &Resolved,
    src: Option<&SourceStats>,
) -> Result<(f64, bool)> {
    if est.included.is_empty() {
        return Ok((0.0, true));
    }
    let obj = Objective {
        shortcut_resistant: res.shortcut_resistant,
        lambda: res.lambda,
        rho: cfg.rho,
        center: &est.center,
        moments: &est.moments,
        src,
        r_bars: est.included.iter().map(|&i| est.r_bars[i]).collect(),
    };
    let xs = x.select_rows(&est.included);
    let (_, full) = grad_backprop_with(net, &xs, &obj)?;
    let oracle = restrict_to_adapted(net, &full);
    Ok(cosine(&est.g_hat, &oracle))
}

/// Cosine similarity; zero-norm inputs give `(0, true)`.
pub fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb), false)
}

#[allow(clippy::too_many_arguments)]
fn record_for(
    state: &OnlineState,
    step_seed: u64,
    logits: &Tensor,
    labels: Option<&[usize]>,
    est: Option<&Estimate>,
    theta: &ParamVector,
    theta_new: &ParamVector,
    loss_plus: f64,
    loss_minus: f64,
    cosine: Option<f64>,
) -> StepRecord {
    let predictions: Vec<usize> = logits.iter_rows().map(argmax).collect();
    let correct = labels.map(|y| predictions.iter().zip(y).map(|(p, t)| p == t).collect());
    let norms: Vec<f64> = logits.iter_rows().map(l2_norm).collect();
    let mean_sr_entropy = match est {
        Some(e) if !e.o_bar.is_empty() => {
            mean(&e.o_bar.iter().map(|o| entropy(&sr_logits(o, l2_norm(o), e.center.value()))).collect::<Vec<_>>())
        }
        _ => mean(&logits.iter_rows().map(entropy).collect::<Vec<_>>()),
    };
    StepRecord {
        step: state.step,
        step_seed,
        batch_size: logits.rows(),
        predictions,
        correct,
        loss_plus,
        loss_minus,
        update_norm: theta_new.distance(theta),
        drift: theta_new.distance(&state.theta0),
        mean_logit_norm: mean(&norms),
        mean_sr_entropy,
        excluded: est.map_or(0, |e| logits.rows() - e.included.len()),
        swa_clamped: est.map_or(0, |e| e.clamped),
        cosine,
        warning: est.and_then(|e| e.warning.clone()),
    }
}
