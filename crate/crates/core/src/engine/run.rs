use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{AdaptConfig, Estimator, Mode};
use super::step::{
    adapt_step, estimate_backprop, estimate_one_sided, estimate_two_sided, oracle_cosine, OnlineState, StepRecord,
};
use crate::data::{Dataset, ResetPolicy, StreamProtocol};
use crate::error::{Error, Result};
use crate::net::{forward_count, Network, ParamSubset};
use crate::objectives::SourceStats;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DomainResult {
    pub index: usize,
    pub tag: String,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `‖θ − θ₀‖` over the adapted parameters when the domain ends.
    pub drift: f64,
    pub forwards: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub domain: usize,
    #[serde(flatten)]
    pub record: StepRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub reset: ResetPolicy,
    pub domains: Vec<DomainResult>,
    pub average_accuracy: f64,
    pub final_drift: f64,
    pub forwards: u64,
    pub samples: usize,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl RunReport {
    pub fn forwards_per_sample(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.forwards as f64 / self.samples as f64
        }
    }
}

/// FNV-1a of a domain tag, used to key each domain's perturbation stream.
fn tag_key(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Runs the adaptation loop over a sequence of domain streams.
///
/// With [`ResetPolicy::SingleDomain`] the network and online state return to their
/// initial values at every domain start; with [`ResetPolicy::Continual`] they carry
/// over. Each domain's perturbations are keyed by its tag and the step counter, so a
/// lone domain sees the same directions under both policies.
pub fn run_stream(
    net0: &Network,
    domains: &[Dataset],
    reset: ResetPolicy,
    cfg: &AdaptConfig,
    src: Option<&SourceStats>,
) -> Result<RunReport> {
    cfg.validate()?;
    let mut base = net0.clone();
    if cfg.mode != Mode::NoAdapt {
        cfg.adapted.apply(&mut base)?;
    }
    if cfg.resolved().lambda > 0.0 && src.is_none() && cfg.mode != Mode::NoAdapt {
        return Err(Error::Config(
            "feature alignment (lambda > 0) needs source statistics; use eva0-dagger or set lambda = 0".into(),
        ));
    }
    let theta0 = base.pack(ParamSubset::Adapted);
    let mut net = base.clone();
    let mut state = OnlineState::new(&base, cfg)?;
    let mut results = Vec::with_capacity(domains.len());
    let mut trace = Vec::new();
    let mut total_forwards = 0;
    let mut total_samples = 0;
    for (di, ds) in domains.iter().enumerate() {
        if reset == ResetPolicy::SingleDomain {
            net = base.clone();
            state = OnlineState::new(&base, cfg)?;
        }
        state.stream_id = tag_key(&ds.meta.domain);
        let before = forward_count();
        let mut correct = 0;
        let mut start = 0;
        while start < ds.len() {
            let end = (start + cfg.batch_size).min(ds.len());
            let idx: Vec<usize> = (start..end).collect();
            let x = ds.x.select_rows(&idx);
            let y = &ds.y[start..end];
            let out = adapt_step(&net, &state, &x, Some(y), cfg, src)?;
            correct += out.record.correct_count();
            trace.push(TraceRow { domain: di, record: out.record });
            net = out.net;
            state = out.state;
            start = end;
        }
        let forwards = forward_count() - before;
        total_forwards += forwards;
        total_samples += ds.len();
        results.push(DomainResult {
            index: di,
            tag: ds.meta.domain.clone(),
            samples: ds.len(),
            correct,
            accuracy: if ds.is_empty() { 0.0 } else { correct as f64 / ds.len() as f64 },
            drift: net.pack(ParamSubset::Adapted).distance(&theta0),
            forwards,
        });
    }
    let average_accuracy = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64
    };
    let final_drift = results.last().map_or(0.0, |r| r.drift);
    Ok(RunReport {
        mode: cfg.mode,
        reset,
        domains: results,
        average_accuracy,
        final_drift,
        forwards: total_forwards,
        samples: total_samples,
        trace,
    })
}

/// Materializes a protocol over `base` and runs it with the protocol's reset policy.
pub fn run_protocol(
    net0: &Network,
    protocol: &StreamProtocol,
    base: &Dataset,
    cfg: &AdaptConfig,
    src: Option<&SourceStats>,
) -> Result<RunReport> {
    let domains = protocol.materialize(base)?;
    run_stream(net0, &domains, protocol.reset, cfg, src)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentProbe {
    pub cosine: f64,
    /// Either the estimate or the exact gradient had zero norm.
    pub degenerate: bool,
}

/// Cosine between the configured estimator's direction on `x` and the exact gradient
/// of the same objective over the adapted parameters. Nothing is updated.
pub fn gradient_alignment_probe(
    net: &Network,
    state: &OnlineState,
    x: &Tensor,
    cfg: &AdaptConfig,
    src: Option<&SourceStats>,
) -> Result<AlignmentProbe> {
    let res = cfg.resolved();
    let seed = state.step_seed(cfg);
    let est = match res.estimator {
        Estimator::TwoSided => estimate_two_sided(net, state, x, cfg, &res, src, seed)?,
        Estimator::OneSided => estimate_one_sided(net, state, x, cfg, &res, src, seed)?,
        Estimator::Backprop => estimate_backprop(net, state, x, cfg, &res, src)?,
        Estimator::None => return Ok(AlignmentProbe { cosine: 0.0, degenerate: true }),
    };
    let (cosine, degenerate) = oracle_cosine(net, x, &est, cfg, &res, src)?;
    Ok(AlignmentProbe { cosine, degenerate })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    domain: usize,
    step: u64,
    step_seed: u64,
    batch_size: usize,
    correct: usize,
    loss_plus: f64,
    loss_minus: f64,
    update_norm: f64,
    drift: f64,
    mean_logit_norm: f64,
    mean_sr_entropy: f64,
    excluded: usize,
    swa_clamped: usize,
    cosine: Option<f64>,
    warning: Option<&'a str>,
}

/// Writes `trace.csv` (one row per step) and `summary.json` into `dir`, creating it.
/// `config` is echoed verbatim into the summary.
pub fn write_report(dir: &Path, report: &RunReport, config: &serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("trace.csv")).map_err(csv_err)?;
    for row in &report.trace {
        let r = &row.record;
        w.serialize(CsvRow {
            domain: row.domain,
            step: r.step,
            step_seed: r.step_seed,
            batch_size: r.batch_size,
            correct: r.correct_count(),
            loss_plus: r.loss_plus,
            loss_minus: r.loss_minus,
            update_norm: r.update_norm,
            drift: r.drift,
            mean_logit_norm: r.mean_logit_norm,
            mean_sr_entropy: r.mean_sr_entropy,
            excluded: r.excluded,
            swa_clamped: r.swa_clamped,
            cosine: r.cosine,
            warning: r.warning.as_deref(),
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "report": report,
        "forwards_per_sample": report.forwards_per_sample(),
        "config": config,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("summary.json"), text + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}
