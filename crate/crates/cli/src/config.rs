//! Layered run configuration: built-in defaults, then a TOML file, then `ZOFA__*`
//! environment variables, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use zofa::data::{preset_15, CorruptionSpec, ResetPolicy, TaskSpec};
use zofa::engine::{AdaptConfig, Mode};
use zofa::experiments::{desk_config, FixtureSpec, DESK_SAMPLES_PER_DOMAIN};
use zofa::net::PretrainConfig;

use crate::error::CliError;

/// Prefix of environment overrides; `ZOFA__ADAPT__ETA=0.01` sets `adapt.eta`.
pub const ENV_PREFIX: &str = "ZOFA__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives the task, initialization, pretraining, stream order and perturbations.
    /// Overrides `adapt.seed`.
    pub seed: u64,
    /// Seeds averaged by `sweep`; empty means `[seed]`.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// ZOFA1 model read by `adapt`, `sweep` and `probe`. Without it the commands
    /// pretrain the fixture for each seed in memory.
    pub model: Option<PathBuf>,
    /// ZOFD1 dataset used as the clean stream; defaults to the fixture's test split.
    pub data: Option<PathBuf>,
    pub quantize_bits: Option<u32>,
    pub fixture: FixtureConfig,
    pub adapt: AdaptConfig,
    pub protocol: ProtocolConfig,
    pub sweep: SweepConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: Vec::new(),
            out: PathBuf::from("runs/default"),
            model: None,
            data: None,
            quantize_bits: None,
            fixture: FixtureConfig::default(),
            adapt: desk_config(Mode::Eva0, 0),
            protocol: ProtocolConfig::default(),
            sweep: SweepConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn domains(&self, seed: u64) -> Vec<CorruptionSpec> {
        if self.protocol.domains.is_empty() {
            preset_15(self.protocol.severity, seed)
        } else {
            self.protocol.domains.clone()
        }
    }
}

/// Synthetic task and pretraining recipe; seeds come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureConfig {
    pub d: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
    pub global_offset: f64,
    pub noise_scale: (f64, f64),
    pub hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch_size: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        let f = FixtureSpec::default();
        Self {
            d: f.task.d,
            classes: f.task.classes,
            n_train: f.task.n_train,
            n_test: f.task.n_test,
            separation: f.task.separation,
            global_offset: f.task.global_offset,
            noise_scale: f.task.noise_scale,
            hidden: f.hidden,
            pretrain_steps: f.pretrain.steps,
            pretrain_lr: f.pretrain.lr,
            pretrain_batch_size: f.pretrain.batch_size,
        }
    }
}

impl FixtureConfig {
    pub fn spec(&self, seed: u64) -> FixtureSpec {
        FixtureSpec {
            task: TaskSpec {
                seed,
                d: self.d,
                classes: self.classes,
                n_train: self.n_train,
                n_test: self.n_test,
                separation: self.separation,
                global_offset: self.global_offset,
                noise_scale: self.noise_scale,
            },
            hidden: self.hidden,
            init_seed: seed,
            pretrain: PretrainConfig {
                steps: self.pretrain_steps,
                lr: self.pretrain_lr,
                batch_size: self.pretrain_batch_size,
                seed,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Severity of the 15-domain preset.
    pub severity: u8,
    /// Explicit domain list; empty selects the preset.
    pub domains: Vec<CorruptionSpec>,
    pub samples_per_domain: usize,
    pub reset: ResetPolicy,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            severity: 5,
            domains: Vec::new(),
            samples_per_domain: DESK_SAMPLES_PER_DOMAIN,
            reset: ResetPolicy::SingleDomain,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Values of the swept quantity; empty takes the axis default.
    pub values: Vec<f64>,
    /// Learning rates crossed with the batch-size axis; empty keeps `adapt.eta`.
    pub etas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Batches compared by the alignment probe.
    pub probes: usize,
    /// Shortcut amplitudes `A` of the variance probe.
    pub amplitudes: Vec<f64>,
    pub trials: usize,
    pub noise_std: f64,
    pub dim: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { probes: 200, amplitudes: vec![1.0, 5.0, 10.0], trials: 100_000, noise_std: 0.1, dim: 8 }
    }
}

/// Typed command-line flags; each one lands on a config key.
#[derive(Clone, Debug, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub quantize_bits: Option<u32>,
    pub out: Option<PathBuf>,
    pub protocol: Option<ResetPolicy>,
    pub model: Option<PathBuf>,
    /// Raw `section.key=value` assignments, applied before the typed flags.
    pub set: Vec<String>,
}

/// Builds the effective configuration. Later layers replace earlier ones key by key;
/// unknown keys anywhere are rejected.
pub fn load(
    file: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &FlagOverrides,
) -> Result<RunConfig, CliError> {
    let mut table = Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (key, raw) in env {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
        assign(&mut table, &path, parse_value(&raw))?;
    }
    for item in &flags.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got '{item}'")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        assign(&mut table, &path, parse_value(raw.trim()))?;
    }
    let mut typed: Vec<(&str, Value)> = Vec::new();
    if let Some(s) = flags.seed {
        typed.push(("seed", int(s)?));
    }
    if let Some(m) = flags.mode {
        typed.push(("adapt.mode", Value::String(m.name().into())));
    }
    if let Some(b) = flags.quantize_bits {
        typed.push(("quantize_bits", Value::Integer(b.into())));
    }
    if let Some(o) = &flags.out {
        typed.push(("out", Value::String(o.display().to_string())));
    }
    if let Some(p) = flags.protocol {
        let name = match p {
            ResetPolicy::SingleDomain => "single-domain",
            ResetPolicy::Continual => "continual",
        };
        typed.push(("protocol.reset", Value::String(name.into())));
    }
    if let Some(m) = &flags.model {
        typed.push(("model", Value::String(m.display().to_string())));
    }
    for (key, value) in typed {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        assign(&mut table, &path, value)?;
    }
    let mut cfg = RunConfig::deserialize(Value::Table(table)).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.adapt.seed = cfg.seed;
    cfg.adapt.validate()?;
    if cfg.protocol.samples_per_domain == 0 {
        return Err(CliError::Config("protocol.samples_per_domain must be positive".into()));
    }
    Ok(cfg)
}

fn int(v: u64) -> Result<Value, CliError> {
    i64::try_from(v)
        .map(Value::Integer)
        .map_err(|_| CliError::Config(format!("{v} does not fit in a config integer")))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn assign(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().ok_or_else(|| CliError::Config("empty config key".into()))?;
    let mut t = table;
    for p in parents {
        t = match t.entry(p.clone()).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(inner) => inner,
            _ => return Err(CliError::Config(format!("'{}' is not a table", path.join(".")))),
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
