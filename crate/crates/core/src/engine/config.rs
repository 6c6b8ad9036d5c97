use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LayerKind, Network};
use crate::objectives::{DEFAULT_RHO, DEFAULT_STATE_EMA};
use crate::zo::{DEFAULT_BETA, DEFAULT_ETA, DEFAULT_GAMMA, DEFAULT_K, DEFAULT_MU};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Sample-wise symmetric estimation with the full objective and anchor guidance.
    #[default]
    Eva0,
    /// As `eva0` with the alignment term disabled; needs no source statistics.
    Eva0Dagger,
    /// Clean forward plus one forward at `θ + μz` with a batch-shared `z`;
    /// predictions come from the clean forward.
    OneSided,
    /// As `eva0` but every sample in a batch shares one perturbation.
    BatchShared,
    /// Symmetric sample-wise estimation of plain entropy, no anchor machinery.
    NaiveEntropyZo,
    /// Plain-entropy descent with exact gradients.
    BpOracleTent,
    /// Clean inference only.
    NoAdapt,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Eva0,
        Mode::Eva0Dagger,
        Mode::OneSided,
        Mode::BatchShared,
        Mode::NaiveEntropyZo,
        Mode::BpOracleTent,
        Mode::NoAdapt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Eva0 => "eva0",
            Mode::Eva0Dagger => "eva0-dagger",
            Mode::OneSided => "one-sided",
            Mode::BatchShared => "batch-shared",
            Mode::NaiveEntropyZo => "naive-entropy-zo",
            Mode::BpOracleTent => "bp-oracle-tent",
            Mode::NoAdapt => "no-adapt",
        }
    }

    /// Modes whose adaptation runs on forward passes alone.
    pub fn is_forward_only(self) -> bool {
        !matches!(self, Mode::BpOracleTent | Mode::NoAdapt)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which parameter tensors are adapted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptedLayers {
    /// Gain and shift of every layernorm.
    Norm,
    /// Every layernorm plus the input offset.
    #[default]
    NormAndOffset,
    /// The input offset only.
    Offset,
    /// Explicit layer indices.
    Layers(Vec<usize>),
}

impl AdaptedLayers {
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        let layers = match self {
            AdaptedLayers::Norm => net.layers_of_kind(LayerKind::Layernorm),
            AdaptedLayers::NormAndOffset => {
                let mut l = net.layers_of_kind(LayerKind::InputOffset);
                l.extend(net.layers_of_kind(LayerKind::Layernorm));
                l
            }
            AdaptedLayers::Offset => net.layers_of_kind(LayerKind::InputOffset),
            AdaptedLayers::Layers(l) => l.clone(),
        };
        net.adapt_layers(&layers)?;
        if net.param_count(crate::net::ParamSubset::Adapted) == 0 {
            return Err(Error::Config("the adapted-layer selection contains no parameters".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub mode: Mode,
    pub seed: u64,
    pub batch_size: usize,
    pub mu: f64,
    pub eta: f64,
    pub gamma: f64,
    pub k: usize,
    pub anchor_ema: f64,
    pub lambda: f64,
    pub rho: f64,
    pub center_ema: f64,
    pub moment_ema: f64,
    pub balance_beta: f64,
    /// Component switches; `None` takes the mode's default.
    pub sample_wise: Option<bool>,
    pub shortcut_resistant: Option<bool>,
    pub ago: Option<bool>,
    pub balance: Option<bool>,
    pub adapted: AdaptedLayers,
    /// Records the cosine to the exact gradient at every step.
    pub diagnostics: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Eva0,
            seed: 0,
            batch_size: 64,
            mu: DEFAULT_MU,
            eta: DEFAULT_ETA,
            gamma: DEFAULT_GAMMA,
            k: DEFAULT_K,
            anchor_ema: 0.0,
            lambda: 500.0,
            rho: DEFAULT_RHO,
            center_ema: DEFAULT_STATE_EMA,
            moment_ema: DEFAULT_STATE_EMA,
            balance_beta: DEFAULT_BETA,
            sample_wise: None,
            shortcut_resistant: None,
            ago: None,
            balance: None,
            adapted: AdaptedLayers::default(),
            diagnostics: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    TwoSided,
    OneSided,
    Backprop,
    None,
}

/// Effective settings after applying the mode's defaults and overrides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Resolved {
    pub estimator: Estimator,
    pub sample_wise: bool,
    pub shortcut_resistant: bool,
    pub ago: bool,
    pub balance: bool,
    pub lambda: f64,
    pub k: usize,
    pub gamma: f64,
}

impl AdaptConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        rate("gamma", self.gamma)?;
        rate("anchor_ema", self.anchor_ema)?;
        rate("rho", self.rho)?;
        rate("center_ema", self.center_ema)?;
        rate("moment_ema", self.moment_ema)?;
        rate("balance_beta", self.balance_beta)?;
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be nonnegative, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let AdaptedLayers::Layers(l) = &self.adapted {
            if l.is_empty() {
                return Err(Error::Config("adapted layer list is empty".into()));
            }
        }
        Ok(())
    }

    pub fn resolved(&self) -> Resolved {
        use Mode::*;
        let estimator = match self.mode {
            Eva0 | Eva0Dagger | BatchShared | NaiveEntropyZo => Estimator::TwoSided,
            OneSided => Estimator::OneSided,
            BpOracleTent => Estimator::Backprop,
            NoAdapt => Estimator::None,
        };
        let plain = matches!(self.mode, NaiveEntropyZo | BpOracleTent | NoAdapt);
        let baseline = plain || self.mode == OneSided;
        let sample_wise = match self.mode {
            BatchShared | OneSided => false,
            _ => self.sample_wise.unwrap_or(true),
        };
        let shortcut_resistant = self.shortcut_resistant.unwrap_or(!plain);
        let ago = self.ago.unwrap_or(!baseline);
        let balance = self.balance.unwrap_or(!baseline) && ago;
        let lambda = match self.mode {
            Eva0Dagger => 0.0,
            NaiveEntropyZo | BpOracleTent | NoAdapt => 0.0,
            _ => self.lambda,
        };
        Resolved {
            estimator,
            sample_wise,
            shortcut_resistant,
            ago,
            balance,
            lambda,
            k: if ago { self.k.min(self.batch_size) } else { 0 },
            gamma: if ago { self.gamma } else { 0.0 },
        }
    }
}
