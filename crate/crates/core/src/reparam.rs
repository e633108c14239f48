//! Equivalence maps between adapting BN statistics `(μ, σ)` and adapting BN
//! parameters `(γ, β)`.
//!
//! For a fixed input, `f(Z; μ, σ, γ, β) = (Z − μ)/σ · γ + β` can be matched by
//! moving either pair while holding the other fixed. [`stats_from_params`]
//! keeps `(γ_s, β_s)` and solves for statistics; [`params_from_stats`] keeps
//! `(μ, σ)` and solves for parameters.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::rng;
use crate::error::{ensure, Error, Result};
use crate::network::GAMMA_NUDGE;

/// One BN quadruple. `sigma > 0`; zero `gamma` entries are nudged to `1e-8`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnConfig {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BnConfig {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, mut gamma: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let c = mu.len();
        ensure!(c > 0, "BN config needs at least one channel");
        ensure!(sigma.len() == c && gamma.len() == c && beta.len() == c, "BN config vectors differ in length");
        if sigma.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Contract("BN config sigma must be positive".into()));
        }
        for g in &mut gamma {
            if *g == 0.0 {
                *g = GAMMA_NUDGE;
            }
        }
        Ok(Self { mu, sigma, gamma, beta })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Evaluates the BN operation on a `(N, C, S)` input laid out row-major.
    pub fn apply(&self, z: &[f64], spatial: usize) -> Vec<f64> {
        let c = self.channels();
        z.iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = (i / spatial) % c;
                (x - self.mu[ch]) / self.sigma[ch] * self.gamma[ch] + self.beta[ch]
            })
            .collect()
    }

    /// Random configuration: normal `μ, β`, lognormal `σ, γ` (log-std 0.5).
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let mut normal = || rng.sample::<f64, _>(StandardNormal);
        let mu = (0..channels).map(|_| normal()).collect();
        let sigma = (0..channels).map(|_| libm::exp(0.5 * normal())).collect();
        let gamma = (0..channels).map(|_| libm::exp(0.5 * normal())).collect();
        let beta = (0..channels).map(|_| normal()).collect();
        Self { mu, sigma, gamma, beta }
    }
}

/// Adaptation statistics `(μ̃, σ̃)` that make the source layer `(μ̃, σ̃, γ_s, β_s)`
/// compute the same function as `target`:
/// `σ̃ = σ_t γ_s / γ_t`, `μ̃ = μ_t − (β_t − β_s) σ_t / γ_t`.
pub fn stats_from_params(target: &BnConfig, gamma_s: &[f64], beta_s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = target.channels();
    ensure!(gamma_s.len() == c && beta_s.len() == c, "source parameters must have {} channels", c);
    if let Some(g) = target.gamma.iter().find(|g| g.abs() < GAMMA_NUDGE) {
        return Err(Error::Contract(alloc::format!("target gamma entry {} is below {}", g, GAMMA_NUDGE)));
    }
    let sigma = (0..c).map(|i| target.sigma[i] * gamma_s[i] / target.gamma[i]).collect();
    let mu = (0..c).map(|i| target.mu[i] - (target.beta[i] - beta_s[i]) * target.sigma[i] / target.gamma[i]).collect();
    Ok((mu, sigma))
}

/// Parameters `(γ*, β*)` that make `(μ, σ, γ*, β*)` compute the same function as
/// `(μ̃, σ̃, γ̃, β̃)`: `γ* = (σ/σ̃) γ̃`, `β* = ((μ − μ̃)/σ̃) γ̃ + β̃`.
pub fn params_from_stats(
    mu: &[f64],
    sigma: &[f64],
    mu_tilde: &[f64],
    sigma_tilde: &[f64],
    gamma_tilde: &[f64],
    beta_tilde: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let c = mu.len();
    ensure!(
        [sigma.len(), mu_tilde.len(), sigma_tilde.len(), gamma_tilde.len(), beta_tilde.len()].iter().all(|&l| l == c),
        "all vectors must have {} channels",
        c
    );
    if sigma_tilde.contains(&0.0) {
        return Err(Error::Contract("sigma_tilde has a zero entry".into()));
    }
    let gamma = (0..c).map(|i| sigma[i] / sigma_tilde[i] * gamma_tilde[i]).collect();
    let beta = (0..c).map(|i| (mu[i] - mu_tilde[i]) / sigma_tilde[i] * gamma_tilde[i] + beta_tilde[i]).collect();
    Ok((gamma, beta))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub max_deviation: f64,
    pub passed: bool,
}

/// Evaluates both configurations on `trials` random `(7, C, 3, 3)` standard-normal
/// inputs and reports the largest absolute output difference.
pub fn verify_equivalence(a: &BnConfig, b: &BnConfig, trials: usize, tol: f64, seed: u64) -> Result<EquivalenceReport> {
    ensure!(a.channels() == b.channels(), "configs have {} vs {} channels", a.channels(), b.channels());
    let c = a.channels();
    let mut r = rng(seed);
    let mut max_deviation = 0.0f64;
    for _ in 0..trials {
        let z: Vec<f64> = (0..7 * c * 9).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let (ya, yb) = (a.apply(&z, 9), b.apply(&z, 9));
        for (p, q) in ya.iter().zip(&yb) {
            max_deviation = max_deviation.max((p - q).abs());
        }
    }
    Ok(EquivalenceReport { max_deviation, passed: max_deviation < tol })
}
