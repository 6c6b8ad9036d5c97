//! Zeroth-order estimators and the anchor machinery around the update.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ParamLayout, ParamVector};
use crate::perturb::{accumulate_update, Key, PerturbationSpec};

pub const DEFAULT_MU: f64 = 0.06;
pub const DEFAULT_ETA: f64 = 0.002;
pub const DEFAULT_GAMMA: f64 = 0.001;
pub const DEFAULT_K: usize = 1;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_BALANCE_EPS: f64 = 1e-8;

/// Smallest trial count accepted by [`shortcut_variance_probe`].
pub const MIN_PROBE_TRIALS: usize = 1000;

const STREAM_KINDS: u64 = 0xA6;

fn check_rate(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    pub theta_anc: ParamVector,
    /// EMA rate `m` toward the online model; 0 keeps the anchor fixed.
    pub ema_rate: f64,
    /// Relaxation weight `γ` pulling the online model toward the anchor.
    pub gamma: f64,
    pub delta: f64,
}

impl AnchorState {
    pub fn new(theta_anc: ParamVector, ema_rate: f64, gamma: f64) -> Result<Self> {
        check_rate("anchor EMA rate", ema_rate)?;
        check_rate("gamma", gamma)?;
        if !theta_anc.is_finite() {
            return Err(Error::NonFinite("anchor parameters".into()));
        }
        Ok(Self { theta_anc, ema_rate, gamma, delta: DEFAULT_DELTA })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceState {
    pub a_in: f64,
    pub a_out: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for BalanceState {
    fn default() -> Self {
        Self { a_in: 0.0, a_out: 0.0, beta: DEFAULT_BETA, epsilon: DEFAULT_BALANCE_EPS }
    }
}

impl BalanceState {
    pub fn new(beta: f64) -> Result<Self> {
        check_rate("balance beta", beta)?;
        Ok(Self { beta, ..Self::default() })
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("mu must be positive, got {mu}")))
    }
}

fn check_losses(tag: &str, a: f64, b: f64) -> Result<()> {
    if a.is_finite() && b.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{tag}: losses {a} / {b}")))
    }
}

/// `((ℓ⁺ − ℓ⁰)/μ)·z`
pub fn spsa_one_sided(l_plus: f64, l_zero: f64, mu: f64, z: &[f64]) -> Result<ParamVector> {
    check_mu(mu)?;
    check_losses("one-sided estimate", l_plus, l_zero)?;
    let s = (l_plus - l_zero) / mu;
    Ok(ParamVector(z.iter().map(|v| s * v).collect()))
}

/// Finite-difference scalar `(ℓ⁺ − ℓ⁻)/(2μ)` of a symmetric probe.
pub fn two_sided_scalar(l_plus: f64, l_minus: f64, mu: f64) -> f64 {
    (l_plus - l_minus) / (2.0 * mu)
}

/// `((ℓ⁺ − ℓ⁻)/(2μ))·z`
pub fn spsa_two_sided(l_plus: f64, l_minus: f64, mu: f64, z: &[f64]) -> Result<ParamVector> {
    check_mu(mu)?;
    check_losses("two-sided estimate", l_plus, l_minus)?;
    let s = two_sided_scalar(l_plus, l_minus, mu);
    Ok(ParamVector(z.iter().map(|v| s * v).collect()))
}

/// `(1/B) Σ_i ((ℓ⁺_i − ℓ⁻_i)/(2μ))·z_i`, with each `z_i` regenerated from its spec.
pub fn eva_gradient(
    layout: &ParamLayout,
    losses: &[(f64, f64)],
    specs: &[PerturbationSpec],
    mu: f64,
) -> Result<ParamVector> {
    check_mu(mu)?;
    if losses.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if losses.len() != specs.len() {
        return Err(Error::shape(format!("{} loss pairs for {} specs", losses.len(), specs.len())));
    }
    let mut scalars = Vec::with_capacity(losses.len());
    for (i, &(lp, lm)) in losses.iter().enumerate() {
        check_losses(&format!("sample {i}"), lp, lm)?;
        scalars.push(two_sided_scalar(lp, lm, mu));
    }
    accumulate_update(layout, specs, &scalars)
}

/// Marks which of `b` samples get an anchor-guided perturbation: the first `k`
/// positions of a permutation keyed by the step seed.
pub fn sample_perturbation_kinds(b: usize, k: usize, step_seed: u64) -> Result<Vec<bool>> {
    if k > b {
        return Err(Error::invalid(format!("k = {k} exceeds batch size {b}")));
    }
    let mut out = vec![false; b];
    if k == b {
        out.fill(true);
        return Ok(out);
    }
    for &i in Key::new(&[step_seed, STREAM_KINDS]).permutation(b).iter().take(k) {
        out[i] = true;
    }
    Ok(out)
}

/// `E‖u‖` for `u ~ N(0, I_n)`: `√2·Γ((n+1)/2)/Γ(n/2)`, evaluated through log-gamma.
pub fn expected_gaussian_norm(n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    std::f64::consts::SQRT_2 * (libm::lgamma((n + 1.0) / 2.0) - libm::lgamma(n / 2.0)).exp()
}

/// `d̄ = (E‖u‖/(‖d‖ + δ))·d` with `d = θ_anc − θ_t`.
pub fn anchor_direction(theta_t: &ParamVector, anchor: &AnchorState) -> Result<ParamVector> {
    if theta_t.len() != anchor.theta_anc.len() {
        return Err(Error::shape(format!(
            "parameters have {} values, anchor has {}",
            theta_t.len(),
            anchor.theta_anc.len()
        )));
    }
    let d = anchor.theta_anc.sub(theta_t);
    let scale = expected_gaussian_norm(d.len()) / (d.norm() + anchor.delta);
    Ok(d.scaled(scale))
}

/// `θ − η·ĝ`
pub fn sgd_step(theta: &ParamVector, g_hat: &ParamVector, eta: f64) -> Result<ParamVector> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be nonnegative, got {eta}")));
    }
    if theta.len() != g_hat.len() {
        return Err(Error::shape("parameter and gradient lengths differ"));
    }
    let mut out = theta.clone();
    out.axpy(-eta, g_hat);
    Ok(out)
}

/// `(1 − γ)·θ′ + γ·θ_anc`
pub fn relax_weights(theta_prime: &ParamVector, anchor: &AnchorState) -> ParamVector {
    let g = anchor.gamma;
    ParamVector(
        theta_prime
            .iter()
            .zip(anchor.theta_anc.iter())
            .map(|(t, a)| (1.0 - g) * t + g * a)
            .collect(),
    )
}

/// Damps the anchor-parallel part of updates that move away from the anchor.
///
/// `proj_in = ⟨Δ, e⟩` with `e` the unit vector toward the anchor. The inward/outward
/// EMAs absorb this step first; an outward update then has its parallel part scaled
/// by `α = min(1, a_in/(a_out + ε))`.
pub fn balance_update(
    delta: &ParamVector,
    theta_t: &ParamVector,
    anchor: &AnchorState,
    state: &BalanceState,
) -> Result<(ParamVector, BalanceState)> {
    if delta.len() != theta_t.len() || theta_t.len() != anchor.theta_anc.len() {
        return Err(Error::shape("update, parameters and anchor differ in length"));
    }
    let to_anchor = anchor.theta_anc.sub(theta_t);
    let e = to_anchor.scaled(1.0 / (to_anchor.norm() + state.epsilon));
    let proj_in = delta.dot(&e);
    let mut next = *state;
    next.a_in = state.beta * state.a_in + (1.0 - state.beta) * proj_in.max(0.0);
    next.a_out = state.beta * state.a_out + (1.0 - state.beta) * (-proj_in).max(0.0);
    if proj_in >= 0.0 {
        return Ok((delta.clone(), next));
    }
    let alpha = (next.a_in / (next.a_out + state.epsilon)).min(1.0);
    let mut out = delta.clone();
    out.axpy((alpha - 1.0) * proj_in, &e);
    Ok((out, next))
}

/// `θ_anc ← m·θ_t + (1 − m)·θ_anc`
pub fn update_anchor(anchor: &AnchorState, theta_t: &ParamVector) -> AnchorState {
    let m = anchor.ema_rate;
    let mut next = anchor.clone();
    if m == 0.0 {
        return next;
    }
    if m == 1.0 {
        next.theta_anc = theta_t.clone();
        return next;
    }
    for (a, t) in next.theta_anc.iter_mut().zip(theta_t.iter()) {
        *a = m * t + (1.0 - m) * *a;
    }
    next
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ProbeStats {
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    pub std_err: f64,
    pub trials: usize,
}

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn var(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.var() / self.n as f64).sqrt()
        }
    }

    pub fn stats(&self) -> ProbeStats {
        ProbeStats { mean: self.mean, var: self.var(), std_err: self.std_err(), trials: self.n }
    }
}

/// Monte-Carlo mean and variance of `vᵀĝ` for `ĝ = (gᵀz + ξ)z`, `g = A·e₀ + g_m`,
/// `z ~ N(0, I)`, `ξ ~ N(0, noise_std²)`. Coordinate 0 is the shortcut axis, so `v`
/// must be a unit vector with `v₀ = 0`.
pub fn shortcut_variance_probe(
    a: f64,
    g_m: &[f64],
    v: &[f64],
    noise_std: f64,
    trials: usize,
    seed: u64,
) -> Result<ProbeStats> {
    if trials < MIN_PROBE_TRIALS {
        return Err(Error::invalid(format!("need at least {MIN_PROBE_TRIALS} trials, got {trials}")));
    }
    if g_m.len() != v.len() || v.len() < 2 {
        return Err(Error::shape("g_m and v must share a length of at least 2"));
    }
    if v[0].abs() > 1e-12 {
        return Err(Error::invalid("v must be orthogonal to the shortcut axis"));
    }
    let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (vn - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("v must have unit norm, got {vn}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise standard deviation must be nonnegative"));
    }
    let mut g = g_m.to_vec();
    g[0] += a;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; g.len()];
    let mut acc = Welford::default();
    for _ in 0..trials {
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(&mut rng);
        }
        let xi: f64 = if noise_std > 0.0 {
            noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        } else {
            0.0
        };
        let gz: f64 = g.iter().zip(&z).map(|(a, b)| a * b).sum();
        let vz: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
        acc.push((gz + xi) * vz);
    }
    Ok(acc.stats())
}
