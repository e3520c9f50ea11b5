//! Clipping, sensitivity accounting, the Gaussian mechanism, and
//! membership audits for the high-probability sets used by the
//! low-budget procedure.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seq::dimension;

/// An (epsilon, delta) budget shared across `components` independent
/// Gaussian-mechanism releases; each release gets (epsilon/sqrt(c), delta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub components: usize,
}

/// Audit record of one Gaussian-mechanism release. The released value is
/// scale_gamma * statistic + standard Gaussian noise, so noise_std is
/// always 1 after scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismRecord {
    pub sensitivity: f64,
    pub scale_gamma: f64,
    pub noise_std: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("clip bounds must satisfy a < b, got [{0}, {1}]")]
    BadClipBounds(f64, f64),
    #[error("Gaussian mechanism requires delta in (0, 1), got {0}")]
    BadDelta(f64),
    #[error("sensitivity must be positive, got {0}")]
    BadSensitivity(f64),
}

/// Projects `x` into [a, b].
pub fn clip(x: f64, a: f64, b: f64) -> f64 {
    assert!(a < b, "clip bounds must satisfy a < b");
    x.clamp(a, b)
}

/// The noise multiplier gamma = eps / (sensitivity * sqrt(2 c ln(2/delta))).
pub fn gamma_scale(sensitivity: f64, budget: &PrivacyBudget) -> f64 {
    budget.epsilon
        / (sensitivity * (2.0 * budget.components as f64 * (2.0 / budget.delta).ln()).sqrt())
}

/// Gaussian mechanism: scales the statistic by gamma and adds standard
/// Gaussian noise. Each call draws fresh noise from `rng`.
pub fn gaussian_release<R: Rng>(
    value: f64,
    sensitivity: f64,
    budget: &PrivacyBudget,
    rng: &mut R,
) -> Result<(f64, MechanismRecord), PrivacyError> {
    if !(budget.delta > 0.0 && budget.delta < 1.0) {
        return Err(PrivacyError::BadDelta(budget.delta));
    }
    if !(sensitivity > 0.0) {
        return Err(PrivacyError::BadSensitivity(sensitivity));
    }
    let gamma = gamma_scale(sensitivity, budget);
    let w: f64 = rng.sample(StandardNormal);
    Ok((
        gamma * value + w,
        MechanismRecord {
            sensitivity,
            scale_gamma: gamma,
            noise_std: 1.0,
        },
    ))
}

/// Lipschitz constant of the clipped chi-square statistic with respect to
/// replacing one observation:
/// D_tau = kappa_tilde * ln(N) * max(sqrt(n sqrt(d_L) tau), sqrt(n d_L)) / (n sqrt(d_L)).
pub fn lipschitz_constant(n: usize, l_max: u32, tau: f64, n_total: usize, kappa_tilde: f64) -> f64 {
    assert!(tau > 0.0);
    let d = dimension(l_max) as f64;
    let nf = n as f64;
    let upper = (nf * d.sqrt() * tau).sqrt().max((nf * d).sqrt());
    kappa_tilde * (n_total as f64).ln() * upper / (nf * d.sqrt())
}

/// Subset-count cap for the concentration set audits: K_tau = ceil(2 tau / D_tau).
pub fn k_tau(tau: f64, d_tau: f64) -> usize {
    (2.0 * tau / d_tau).ceil() as usize
}

fn projected_scaled(block: &[Vec<f64>], d: usize, sigma: f64) -> Vec<Vec<f64>> {
    block
        .iter()
        .map(|x| x[..d].iter().map(|v| v / sigma).collect())
        .collect()
}

/// Cross-term concentration audit: true iff for every observation i,
/// |<x_i, sum_{k != i} x_k>| <= (1/8) D_tau n sqrt(d_L) after projecting
/// to level `l_max` and rescaling by sigma.
pub fn check_set_b(
    block: &[Vec<f64>],
    l_max: u32,
    tau: f64,
    sigma: f64,
    n_total: usize,
    kappa_tilde: f64,
) -> bool {
    let n = block.len();
    assert!(n >= 2, "cross-term audit needs at least two observations");
    let d = dimension(l_max);
    let x = projected_scaled(block, d, sigma);
    let mut total = vec![0.0; d];
    for xi in &x {
        for (t, v) in xi.iter().enumerate() {
            total[t] += v;
        }
    }
    let d_tau = lipschitz_constant(n, l_max, tau, n_total, kappa_tilde);
    let bound = 0.125 * d_tau * n as f64 * (d as f64).sqrt();
    x.iter().all(|xi| {
        let cross: f64 = xi.iter().zip(&total).map(|(v, t)| v * (t - v)).sum();
        cross.abs() <= bound
    })
}

/// Subset-norm concentration audit, sampled. Checks the inequality
/// | ||sum_{i in J} x_i||^2 - |J| d_L | <= (1/8) |J| D_tau n sqrt(d_L)
/// exactly for all singletons, then for `subset_budget` random subsets of
/// sizes 2..=K_tau. A `true` verdict is sampled, not exhaustive.
pub fn check_set_a_sampled<R: Rng>(
    block: &[Vec<f64>],
    l_max: u32,
    tau: f64,
    sigma: f64,
    n_total: usize,
    kappa_tilde: f64,
    subset_budget: usize,
    rng: &mut R,
) -> bool {
    let n = block.len();
    assert!(subset_budget >= n, "budget must cover at least the singletons");
    let d = dimension(l_max);
    let df = d as f64;
    let x = projected_scaled(block, d, sigma);
    let d_tau = lipschitz_constant(n, l_max, tau, n_total, kappa_tilde);
    let per_element_bound = 0.125 * d_tau * n as f64 * df.sqrt();

    let subset_ok = |idx: &[usize]| {
        let k = idx.len() as f64;
        let mut sum = vec![0.0; d];
        for &i in idx {
            for (t, v) in x[i].iter().enumerate() {
                sum[t] += v;
            }
        }
        let sq: f64 = sum.iter().map(|v| v * v).sum();
        (sq - k * df).abs() <= k * per_element_bound
    };

    for i in 0..n {
        if !subset_ok(&[i]) {
            return false;
        }
    }
    let k_max = k_tau(tau, d_tau).min(n);
    if k_max < 2 {
        return true;
    }
    for _ in 0..subset_budget {
        let k = rng.gen_range(2..=k_max);
        let idx = rand::seq::index::sample(rng, n, k).into_vec();
        if !subset_ok(&idx) {
            return false;
        }
    }
    true
}
