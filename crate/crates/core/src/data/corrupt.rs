//! Seeded corruption operators.
//!
//! Severity `s ∈ 1..=5` scales a per-kind intensity linearly, `level = 0.2·s·base`:
//!
//! | kind            | what `level` controls                                   | default base |
//! |-----------------|---------------------------------------------------------|--------------|
//! | gauss-noise     | standard deviation of additive noise                    | 1.5          |
//! | feature-scale   | log-spread of per-feature multiplicative factors         | 0.8          |
//! | rotation-2plane | rotation angle (radians) of each seeded coordinate pair  | 1.2          |
//! | mask-dropout    | fraction of features zeroed (fixed per domain)           | 0.5          |
//! | mixed           | feature-scale at `0.6·level`, then noise at `0.6·level` |              |
//!
//! Severity 0 or base 0 leaves the data unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::task::Dataset;
use crate::error::{Error, Result};
use crate::perturb::Key;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussNoise,
    FeatureScale,
    Rotation2plane,
    MaskDropout,
    Mixed,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussNoise,
        CorruptionKind::FeatureScale,
        CorruptionKind::Rotation2plane,
        CorruptionKind::MaskDropout,
        CorruptionKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussNoise => "gauss-noise",
            CorruptionKind::FeatureScale => "feature-scale",
            CorruptionKind::Rotation2plane => "rotation-2plane",
            CorruptionKind::MaskDropout => "mask-dropout",
            CorruptionKind::Mixed => "mixed",
        }
    }

    pub fn default_base(self) -> f64 {
        match self {
            CorruptionKind::GaussNoise => 1.5,
            CorruptionKind::FeatureScale => 0.8,
            CorruptionKind::Rotation2plane => 1.2,
            CorruptionKind::MaskDropout => 0.5,
            CorruptionKind::Mixed => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
    /// Overrides the kind's default base intensity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<f64>,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Self {
        Self { kind, severity, seed, base: None }
    }

    pub fn with_base(mut self, base: f64) -> Self {
        self.base = Some(base);
        self
    }

    /// `0.2·severity·base`
    pub fn level(&self) -> f64 {
        0.2 * self.severity as f64 * self.base.unwrap_or(self.kind.default_base())
    }

    pub fn tag(&self) -> String {
        format!("{}-s{}-{}", self.kind.name(), self.severity, self.seed)
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.severity > 5 {
            return Err(Error::invalid(format!("severity {} outside 0..=5", self.severity)));
        }
        if let Some(b) = self.base {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::invalid(format!("corruption base must be nonnegative, got {b}")));
            }
        }
        if self.kind == CorruptionKind::Rotation2plane && d < 2 {
            return Err(Error::invalid("rotation needs at least 2 features"));
        }
        Ok(())
    }
}

const STREAM_NOISE: u64 = 1;
const STREAM_LAYOUT: u64 = 2;

/// Applies a corruption to every row; labels and shape are preserved.
pub fn corrupt(ds: &Dataset, spec: &CorruptionSpec) -> Result<Dataset> {
    let d = ds.dim();
    spec.validate(d)?;
    let mut out = ds.clone();
    out.meta.domain = spec.tag();
    out.meta.severity = spec.severity;
    let level = spec.level();
    if level == 0.0 {
        return Ok(out);
    }
    let x = out.x.data_mut();
    match spec.kind {
        CorruptionKind::GaussNoise => add_noise(x, level, spec.seed),
        CorruptionKind::FeatureScale => scale_features(x, d, level, spec.seed),
        CorruptionKind::Rotation2plane => rotate_pairs(x, d, level, spec.seed),
        CorruptionKind::MaskDropout => mask_features(x, d, level, spec.seed),
        CorruptionKind::Mixed => {
            scale_features(x, d, 0.6 * level, spec.seed);
            add_noise(x, 0.6 * level, spec.seed);
        }
    }
    Ok(out)
}

fn add_noise(x: &mut [f64], sigma: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(Key::new(&[seed, STREAM_NOISE]).word(0));
    for v in x.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * e;
    }
}

fn scale_features(x: &mut [f64], d: usize, spread: f64, seed: u64) {
    let mut factors = vec![0.0; d];
    Key::new(&[seed, STREAM_LAYOUT]).fill_normal(&mut factors);
    factors.iter_mut().for_each(|f| *f = (spread * *f).exp());
    for row in x.chunks_exact_mut(d) {
        for (v, f) in row.iter_mut().zip(&factors) {
            *v *= f;
        }
    }
}

/// Rotates `⌊d/4⌋` (at least one) disjoint seeded coordinate pairs by `angle`.
fn rotate_pairs(x: &mut [f64], d: usize, angle: f64, seed: u64) {
    let perm = Key::new(&[seed, STREAM_LAYOUT]).permutation(d);
    let pairs = (d / 4).max(1);
    let (s, c) = angle.sin_cos();
    for row in x.chunks_exact_mut(d) {
        for p in 0..pairs {
            let (i, j) = (perm[2 * p], perm[2 * p + 1]);
            let (a, b) = (row[i], row[j]);
            row[i] = c * a - s * b;
            row[j] = s * a + c * b;
        }
    }
}

fn mask_features(x: &mut [f64], d: usize, fraction: f64, seed: u64) {
    let count = ((fraction.min(1.0) * d as f64).round() as usize).min(d);
    let perm = Key::new(&[seed, STREAM_LAYOUT]).permutation(d);
    for row in x.chunks_exact_mut(d) {
        for &j in &perm[..count] {
            row[j] = 0.0;
        }
    }
}
