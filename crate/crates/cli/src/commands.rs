use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::ValueEnum;
use serde::Serialize;

use zofa::data::{build_protocol, load_dataset, make_source_task_with, save_dataset, Dataset, StreamProtocol};
use zofa::engine::{run_protocol, write_report, AdaptConfig, Mode, RunReport};
use zofa::experiments::{paired_alignment, Fixture};
use zofa::net::{quantize_weights, Model, Network, ParamSubset};
use zofa::objectives::SourceStats;
use zofa::zo::shortcut_variance_probe;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    /// 2⁴ on/off grid of shortcut-resistant entropy, alignment, anchor guidance and
    /// sample-wise directions.
    Components,
    Gamma,
    K,
    /// Anchor update rate.
    M,
    Mu,
    /// Batch size crossed with `sweep.etas`.
    BatchSize,
    Estimator,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Components => "components",
            Axis::Gamma => "gamma",
            Axis::K => "k",
            Axis::M => "m",
            Axis::Mu => "mu",
            Axis::BatchSize => "batch-size",
            Axis::Estimator => "estimator",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProbeKind {
    /// Cosine to the exact gradient, sample-wise vs batch-shared directions.
    Alignment,
    /// Monte-Carlo variance of the estimate along a direction orthogonal to a
    /// shortcut axis of amplitude `A`.
    Shortcut,
}

/// Core errors that carry no path get the path they were raised for.
fn at(path: &Path) -> impl Fn(zofa::Error) -> CliError + '_ {
    move |e| match e {
        zofa::Error::Io(io) => CliError::io(path, io),
        other => CliError::Core(other),
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn echo(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Network, source statistics and clean stream for one seed.
struct Prepared {
    net: Network,
    source: Option<SourceStats>,
    base: Dataset,
}

fn prepare(cfg: &RunConfig, seed: u64) -> Result<Prepared, CliError> {
    let spec = cfg.fixture.spec(seed);
    let (mut net, source, test) = match &cfg.model {
        Some(path) => {
            let m = Model::load(path).map_err(at(path))?;
            let test = match &cfg.data {
                Some(_) => None,
                None => Some(make_source_task_with(&spec.task)?.1),
            };
            (m.net, m.source, test)
        }
        None => {
            let fx = Fixture::build(&spec)?;
            (fx.net, Some(fx.source), Some(fx.test))
        }
    };
    let base = match (&cfg.data, test) {
        (Some(path), _) => load_dataset(path).map_err(at(path))?,
        (None, Some(t)) => t,
        (None, None) => unreachable!("a test split is generated whenever no data file is given"),
    };
    if let Some(bits) = cfg.quantize_bits {
        net = quantize_weights(&net, bits)?;
    }
    Ok(Prepared { net, source, base })
}

fn protocol(cfg: &RunConfig, seed: u64) -> Result<StreamProtocol, CliError> {
    Ok(build_protocol(cfg.domains(seed), cfg.protocol.samples_per_domain, seed)?.with_reset(cfg.protocol.reset))
}

fn run(cfg: &RunConfig, adapt: &AdaptConfig, seed: u64, p: &Prepared) -> Result<RunReport, CliError> {
    Ok(run_protocol(&p.net, &protocol(cfg, seed)?, &p.base, adapt, p.source.as_ref())?)
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    create_dir(&cfg.out)?;
    let fx = Fixture::build(&cfg.fixture.spec(cfg.seed))?;
    let model_path = cfg.out.join("model.zofa");
    let test_path = cfg.out.join("test.zofd");
    let params = fx.net.param_count(ParamSubset::All);
    let source_accuracy = fx.source_accuracy;
    Model { net: fx.net, source: Some(fx.source) }.save(&model_path).map_err(at(&model_path))?;
    save_dataset(&fx.test, &test_path).map_err(at(&test_path))?;
    write_json(
        &cfg.out.join("summary.json"),
        &serde_json::json!({
            "source_accuracy": source_accuracy,
            "parameters": params,
            "model": "model.zofa",
            "test_split": "test.zofd",
            "config": echo(cfg),
        }),
    )?;
    println!(
        "pretrained {params} parameters, source accuracy {:.2}%, wrote {}",
        100.0 * source_accuracy,
        model_path.display()
    );
    Ok(())
}

pub fn adapt(cfg: &RunConfig) -> Result<RunReport, CliError> {
    let p = prepare(cfg, cfg.seed)?;
    let report = run(cfg, &cfg.adapt, cfg.seed, &p)?;
    write_report(&cfg.out, &report, &echo(cfg)).map_err(at(&cfg.out))?;
    println!(
        "{} ({}): average accuracy {:.2}% over {} domains, final drift {:.4}, {:.1} forwards per sample",
        report.mode,
        match report.reset {
            zofa::data::ResetPolicy::SingleDomain => "single-domain",
            zofa::data::ResetPolicy::Continual => "continual",
        },
        100.0 * report.average_accuracy,
        report.domains.len(),
        report.final_drift,
        report.forwards_per_sample()
    );
    Ok(report)
}

fn settings(axis: Axis, cfg: &RunConfig) -> Result<Vec<(String, AdaptConfig)>, CliError> {
    let base = &cfg.adapt;
    let values = |default: &[f64]| if cfg.sweep.values.is_empty() { default.to_vec() } else { cfg.sweep.values.clone() };
    let count = |v: f64, what: &str| -> Result<usize, CliError> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(CliError::Config(format!("{what} must be a nonnegative integer, got {v}")))
        }
    };
    let out = match axis {
        Axis::Components => (0..16u32)
            .map(|bits| {
                let on = |i: u32| bits & (1 << i) != 0;
                let (sr, swa, ago, ssd) = (on(3), on(2), on(1), on(0));
                let label = format!("sr{}-swa{}-ago{}-ssd{}", sr as u8, swa as u8, ago as u8, ssd as u8);
                let c = AdaptConfig {
                    mode: Mode::Eva0,
                    shortcut_resistant: Some(sr),
                    lambda: if swa { base.lambda } else { 0.0 },
                    ago: Some(ago),
                    sample_wise: Some(ssd),
                    ..base.clone()
                };
                (label, c)
            })
            .rev()
            .collect(),
        Axis::Gamma => values(&[0.0, 1e-4, 1e-3, 1e-2, 1e-1])
            .into_iter()
            .map(|g| (format!("gamma={g}"), AdaptConfig { gamma: g, ..base.clone() }))
            .collect(),
        Axis::K => {
            let default: Vec<f64> =
                [0, 1, 2, 4, 8, 16, 32, 64].into_iter().filter(|&k| k <= base.batch_size).map(|k| k as f64).collect();
            values(&default)
                .into_iter()
                .map(|k| Ok((format!("k={k}"), AdaptConfig { k: count(k, "k")?, ..base.clone() })))
                .collect::<Result<_, CliError>>()?
        }
        Axis::M => values(&[0.0, 1e-5, 1e-4, 1e-3, 1e-2])
            .into_iter()
            .map(|m| (format!("m={m}"), AdaptConfig { anchor_ema: m, ..base.clone() }))
            .collect(),
        Axis::Mu => values(&[0.01, 0.03, 0.06, 0.1, 0.2])
            .into_iter()
            .map(|mu| (format!("mu={mu}"), AdaptConfig { mu, ..base.clone() }))
            .collect(),
        Axis::BatchSize => {
            let etas = if cfg.sweep.etas.is_empty() { vec![base.eta] } else { cfg.sweep.etas.clone() };
            let mut out = Vec::new();
            for &eta in &etas {
                for b in values(&[1.0, 4.0, 16.0, 64.0]) {
                    let b = count(b, "batch size")?;
                    out.push((
                        format!("b={b}-eta={eta}"),
                        AdaptConfig { batch_size: b, eta, k: base.k.min(b), ..base.clone() },
                    ));
                }
            }
            out
        }
        Axis::Estimator => [Mode::NoAdapt, Mode::OneSided, Mode::BatchShared, Mode::Eva0, Mode::BpOracleTent]
            .into_iter()
            .map(|mode| (mode.name().to_string(), AdaptConfig { mode, ..base.clone() }))
            .collect(),
    };
    for (label, c) in &out {
        c.validate().map_err(|e| CliError::Config(format!("{label}: {e}")))?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub setting: String,
    pub mode: Mode,
    pub seeds: usize,
    pub average_accuracy: f64,
    pub accuracy_std: f64,
    pub final_drift: f64,
    pub forwards_per_sample: f64,
}

/// Runs every setting of `axis` for every configured seed with at most `threads`
/// workers. Each run writes `<out>/<axis>/<setting>/seed-<s>/`; the combined table
/// goes to `<out>/<axis>.csv` once all runs have finished.
pub fn sweep(cfg: &RunConfig, axis: Axis, threads: usize) -> Result<Vec<SweepRow>, CliError> {
    let settings = settings(axis, cfg)?;
    let seeds = cfg.seeds();
    let prepared: Vec<Prepared> = seeds.iter().map(|&s| prepare(cfg, s)).collect::<Result<_, _>>()?;
    let root = cfg.out.join(axis.name());
    create_dir(&root)?;
    let jobs: Vec<(usize, usize)> = (0..settings.len()).flat_map(|i| (0..seeds.len()).map(move |j| (i, j))).collect();
    let results: Mutex<Vec<Option<Result<RunReport, CliError>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let n = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(i, j)) = jobs.get(n) else { break };
        let (label, adapt) = &settings[i];
        let seed = seeds[j];
        let adapt = AdaptConfig { seed, ..adapt.clone() };
        let dir = root.join(label).join(format!("seed-{seed}"));
        let run_cfg = RunConfig { seed, adapt: adapt.clone(), out: dir.clone(), ..cfg.clone() };
        let res = run(cfg, &adapt, seed, &prepared[j])
            .and_then(|r| write_report(&dir, &r, &echo(&run_cfg)).map_err(at(&dir)).map(|_| r));
        results.lock().unwrap()[n] = Some(res);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(work);
        }
    });
    let mut reports = results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran"));
    let mut rows = Vec::with_capacity(settings.len());
    for (label, adapt) in &settings {
        let runs: Vec<RunReport> = reports.by_ref().take(seeds.len()).collect::<Result<_, _>>()?;
        let n = runs.len() as f64;
        let mean = |f: &dyn Fn(&RunReport) -> f64| runs.iter().map(f).sum::<f64>() / n;
        let acc = mean(&|r| r.average_accuracy);
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r.average_accuracy - acc).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(SweepRow {
            axis: axis.name(),
            setting: label.clone(),
            mode: adapt.mode,
            seeds: runs.len(),
            average_accuracy: acc,
            accuracy_std: var.sqrt(),
            final_drift: mean(&|r| r.final_drift),
            forwards_per_sample: mean(&|r| r.forwards_per_sample()),
        });
    }
    let path = cfg.out.join(format!("{}.csv", axis.name()));
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    for row in &rows {
        println!("{:<24} {:>7.2}% ± {:.2}  drift {:.4}", row.setting, 100.0 * row.average_accuracy, 100.0 * row.accuracy_std, row.final_drift);
    }
    Ok(rows)
}

pub fn probe(cfg: &RunConfig, kind: ProbeKind) -> Result<PathBuf, CliError> {
    create_dir(&cfg.out)?;
    match kind {
        ProbeKind::Alignment => {
            let p = prepare(cfg, cfg.seed)?;
            let domains = protocol(cfg, cfg.seed)?.materialize(&p.base)?;
            let batch_shared = AdaptConfig { mode: Mode::BatchShared, ..cfg.adapt.clone() };
            let res = paired_alignment(&p.net, &domains, &cfg.adapt, &batch_shared, p.source.as_ref(), cfg.probe.probes)?;
            let path = cfg.out.join("alignment.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["probe", "domain", cfg.adapt.mode.name(), "batch-shared"])?;
            for (i, (a, b)) in res.a.iter().zip(&res.b).enumerate() {
                w.write_record([i.to_string(), domains[i % domains.len()].meta.domain.clone(), a.to_string(), b.to_string()])?;
            }
            w.flush().map_err(|e| CliError::io(&path, e))?;
            write_json(
                &cfg.out.join("summary.json"),
                &serde_json::json!({
                    "probes": cfg.probe.probes,
                    "mean_cosine": res.mean_a,
                    "mean_cosine_batch_shared": res.mean_b,
                    "paired_t": res.t,
                    "config": echo(cfg),
                }),
            )?;
            println!(
                "mean cosine {:.4} ({}) vs {:.4} (batch-shared), paired t {:.2}",
                res.mean_a, cfg.adapt.mode, res.mean_b, res.t
            );
            Ok(path)
        }
        ProbeKind::Shortcut => {
            let dim = cfg.probe.dim;
            if dim < 2 {
                return Err(CliError::Config("probe.dim must be at least 2".into()));
            }
            let mut v = vec![0.0; dim];
            v[1] = 1.0;
            let g_m = vec![0.0; dim];
            let path = cfg.out.join("shortcut.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["amplitude", "mean", "var", "std_err", "trials", "bound"])?;
            let mut rows = Vec::new();
            for (i, &a) in cfg.probe.amplitudes.iter().enumerate() {
                let s = shortcut_variance_probe(a, &g_m, &v, cfg.probe.noise_std, cfg.probe.trials, cfg.seed + i as u64)?;
                w.write_record([a, s.mean, s.var, s.std_err, s.trials as f64, a * a].map(|x| x.to_string()))?;
                println!("A = {a}: var {:.4} (bound {:.4}), mean {:.4}", s.var, a * a, s.mean);
                rows.push(serde_json::json!({ "amplitude": a, "stats": s }));
            }
            w.flush().map_err(|e| CliError::io(&path, e))?;
            write_json(&cfg.out.join("summary.json"), &serde_json::json!({ "probes": rows, "config": echo(cfg) }))?;
            Ok(path)
        }
    }
}
