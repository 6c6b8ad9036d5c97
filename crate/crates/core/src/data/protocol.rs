use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt, CorruptionKind, CorruptionSpec};
use super::task::Dataset;
use crate::error::{Error, Result};
use crate::perturb::Key;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetPolicy {
    /// Model and online state return to the pretrained values at each domain start.
    #[default]
    SingleDomain,
    /// Everything carries over between domains.
    Continual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamProtocol {
    pub domains: Vec<CorruptionSpec>,
    pub samples_per_domain: usize,
    pub order_seed: u64,
    #[serde(default)]
    pub reset: ResetPolicy,
}

pub fn build_protocol(domains: Vec<CorruptionSpec>, samples_per_domain: usize, order_seed: u64) -> Result<StreamProtocol> {
    if domains.is_empty() {
        return Err(Error::invalid("a protocol needs at least one domain"));
    }
    if samples_per_domain == 0 {
        return Err(Error::invalid("samples per domain must be positive"));
    }
    Ok(StreamProtocol { domains, samples_per_domain, order_seed, reset: ResetPolicy::SingleDomain })
}

impl StreamProtocol {
    pub fn with_reset(mut self, reset: ResetPolicy) -> Self {
        self.reset = reset;
        self
    }

    /// Corrupted, shuffled sample stream of every domain, in protocol order.
    ///
    /// Each domain takes `samples_per_domain` rows of `base` in an order keyed by the
    /// order seed and the domain's own spec, so a domain's stream does not depend on
    /// where it sits in the list.
    pub fn materialize(&self, base: &Dataset) -> Result<Vec<Dataset>> {
        if base.len() < self.samples_per_domain {
            return Err(Error::invalid(format!(
                "base set has {} rows, protocol needs {} per domain",
                base.len(),
                self.samples_per_domain
            )));
        }
        self.domains
            .iter()
            .map(|spec| {
                let key = Key::new(&[self.order_seed, kind_code(spec.kind), spec.severity as u64, spec.seed]);
                let mut idx = key.permutation(base.len());
                idx.truncate(self.samples_per_domain);
                corrupt(&base.select(&idx), spec)
            })
            .collect()
    }
}

fn kind_code(kind: CorruptionKind) -> u64 {
    CorruptionKind::ALL.iter().position(|k| *k == kind).unwrap() as u64
}

/// Fifteen domains in four groups plus one combined shift: three noise, four
/// feature-scale, four rotation, three mask-dropout and one mixed.
pub fn preset_15(severity: u8, seed: u64) -> Vec<CorruptionSpec> {
    let groups = [
        (CorruptionKind::GaussNoise, 3),
        (CorruptionKind::FeatureScale, 4),
        (CorruptionKind::Rotation2plane, 4),
        (CorruptionKind::MaskDropout, 3),
        (CorruptionKind::Mixed, 1),
    ];
    let mut out = Vec::with_capacity(15);
    for (kind, n) in groups {
        for _ in 0..n {
            let s = Key::new(&[seed, 0xD0, out.len() as u64]).word(0);
            out.push(CorruptionSpec::new(kind, severity, s));
        }
    }
    out
}
