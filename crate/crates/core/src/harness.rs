//! Monte Carlo experiment engine: risk estimation, detection-boundary
//! search by bisection, and paired protocol comparisons.
//!
//! Replications are embarrassingly parallel: each gets its own RNG
//! substream keyed by the replication index, and reductions are counts
//! and sums only, so aggregates are identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::protocol::{
    calibrate_threshold, raw_from_data, run_replication, Calibration, ProtocolTag, RunContext,
};
use crate::rng::{derive_seed, tag};
use crate::seq::{gen_signal_single_level, sample_data, Signal, Spread};

/// Maps `rep = 0..reps` in parallel, returning results in replication
/// order regardless of scheduling.
pub fn par_map_reps<T, F>(reps: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..reps as u64).into_par_iter().map(f).collect()
}

/// Stable hash of a config, reported in outputs so result files can be
/// matched to the exact parameters that produced them.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let mut h = 0xcbf29ce484222325u64;
    for b in text.bytes() {
        h = derive_seed(h, &[b as u64]);
    }
    format!("{h:016x}")
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no power bracket found within {doublings} doublings (last rho {last_rho:.3e})")]
    BracketNotFound { doublings: u32, last_rho: f64 },
}

/// Estimated Type I / Type II error pair with binomial standard errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub type_i: f64,
    pub type_ii: f64,
    pub reps: usize,
    pub se_i: f64,
    pub se_ii: f64,
    pub config_hash: String,
}

fn binomial_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

/// Rejection frequency of a calibrated protocol under signal `f`.
///
/// Replication `rep` draws data from substreams of (`seed`, `rep`); the
/// critical value and (for Procedure II) the centering come from `cal`.
pub fn rejection_rate(
    tag_: ProtocolTag,
    cfg: &ModelConfig,
    l_max: u32,
    ctx: &RunContext,
    cal: &Calibration,
    f: &Signal,
    reps: usize,
    seed: u64,
) -> f64 {
    let eta = cal.eta_used.unwrap_or(0.0);
    let rejections: usize = par_map_reps(reps, |rep| {
        let raw = run_replication(tag_, cfg, l_max, ctx, f, seed, rep);
        usize::from(raw.statistic(eta) >= cal.kappa)
    })
    .into_iter()
    .sum();
    rejections as f64 / reps as f64
}

/// Estimates Type I error (under the null) and Type II error (under
/// `signal`) for a protocol whose threshold was already calibrated.
pub fn estimate_risk(
    tag_: ProtocolTag,
    cfg: &ModelConfig,
    l_max: u32,
    cal: &Calibration,
    signal: &Signal,
    reps: usize,
    seed: u64,
) -> RiskEstimate {
    assert!(reps >= 100, "risk estimation needs at least 100 replications");
    let ctx = RunContext::build(tag_, cfg, l_max);
    let null_seed = derive_seed(seed, &[tag::AUDIT, tag_.id(), 0]);
    let alt_seed = derive_seed(seed, &[tag::AUDIT, tag_.id(), 1]);
    let type_i = rejection_rate(tag_, cfg, l_max, &ctx, cal, &Signal::zero(), reps, null_seed);
    let power = rejection_rate(tag_, cfg, l_max, &ctx, cal, signal, reps, alt_seed);
    let type_ii = 1.0 - power;
    RiskEstimate {
        type_i,
        type_ii,
        reps,
        se_i: binomial_se(type_i, reps),
        se_ii: binomial_se(type_ii, reps),
        config_hash: config_hash(cfg),
    }
}

/// Empirical detection boundary from a bisection over signal strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryEstimate {
    pub rho_star: f64,
    pub target_power: f64,
    pub bracket: (f64, f64),
    pub iterations: usize,
}

/// Finds the signal strength rho at which a calibrated protocol first
/// reaches `target_power` against a single-level alternative of the given
/// spread at resolution `l_max`.
///
/// All probes share one seed (common random numbers), which makes the
/// empirical power function monotone enough in rho for bisection. The
/// bracket is grown/shrunk by doubling from an initial guess; failure to
/// bracket within 60 doublings is an error.
#[allow(clippy::too_many_arguments)]
pub fn detection_boundary(
    tag_: ProtocolTag,
    cfg: &ModelConfig,
    l_max: u32,
    cal: &Calibration,
    spread: Spread,
    target_power: f64,
    reps_per_probe: usize,
    tol_rel: f64,
    seed: u64,
) -> Result<BoundaryEstimate, HarnessError> {
    assert!(
        target_power > cfg.alpha && target_power < 1.0,
        "target power must lie in (alpha, 1)"
    );
    assert!(tol_rel > 0.0);
    let ctx = RunContext::build(tag_, cfg, l_max);
    let probe_seed = derive_seed(seed, &[tag::AUDIT, tag_.id(), 2]);
    let power_at = |rho: f64| {
        let f = gen_signal_single_level(l_max, rho, spread, probe_seed);
        rejection_rate(tag_, cfg, l_max, &ctx, cal, &f, reps_per_probe, probe_seed)
    };

    // Initial scale from the classical rate: rho^2 ~ sigma^2 sqrt(d) / (mn).
    let d = crate::seq::dimension(l_max) as f64;
    let mut hi = (cfg.sigma * cfg.sigma * d.sqrt() / cfg.total_n() as f64).sqrt();
    let mut lo;
    let mut doublings = 0u32;
    if power_at(hi) >= target_power {
        // Shrink until the lower edge falls below the target.
        loop {
            lo = hi / 2.0;
            if power_at(lo) < target_power {
                break;
            }
            hi = lo;
            doublings += 1;
            if doublings >= 60 {
                return Err(HarnessError::BracketNotFound { doublings, last_rho: lo });
            }
        }
    } else {
        // Grow until the upper edge clears the target.
        loop {
            lo = hi;
            hi *= 2.0;
            doublings += 1;
            if doublings >= 60 {
                return Err(HarnessError::BracketNotFound { doublings, last_rho: hi });
            }
            if power_at(hi) >= target_power {
                break;
            }
        }
    }

    let mut iterations = doublings as usize;
    while hi / lo > 1.0 + tol_rel {
        let mid = (lo * hi).sqrt();
        if power_at(mid) >= target_power {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok(BoundaryEstimate {
        rho_star: (lo * hi).sqrt(),
        target_power,
        bracket: (lo, hi),
        iterations,
    })
}

/// One row of a protocol power comparison at a common signal strength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub rho: f64,
    pub power: Vec<f64>,
    pub se: Vec<f64>,
}

/// Power of several calibrated protocols over a grid of signal strengths.
///
/// Replication `rep` uses one data draw shared by every protocol (common
/// random numbers), while mechanism noise stays independent because noise
/// substream tags include the protocol id. The paired design shrinks the
/// variance of power differences.
pub fn compare_protocols(
    tags: &[ProtocolTag],
    cfg: &ModelConfig,
    l_max: u32,
    cals: &[Calibration],
    spread: Spread,
    rho_grid: &[f64],
    reps: usize,
    seed: u64,
) -> Vec<CompareRow> {
    assert_eq!(tags.len(), cals.len());
    let ctxs: Vec<RunContext> =
        tags.iter().map(|&t| RunContext::build(t, cfg, l_max)).collect();
    let cmp_seed = derive_seed(seed, &[tag::AUDIT, 3]);
    rho_grid
        .iter()
        .map(|&rho| {
            let f = gen_signal_single_level(l_max, rho, spread, cmp_seed);
            let counts: Vec<usize> = par_map_reps(reps, |rep| {
                let data_seed = derive_seed(cmp_seed, &[tag::DATA, rep]);
                let data = sample_data(&f, cfg, l_max, data_seed);
                tags.iter()
                    .zip(&ctxs)
                    .zip(cals)
                    .map(|((&t, ctx), cal)| {
                        let raw = raw_from_data(t, cfg, l_max, ctx, &data, cmp_seed, rep);
                        usize::from(raw.statistic(cal.eta_used.unwrap_or(0.0)) >= cal.kappa)
                    })
                    .collect::<Vec<usize>>()
            })
            .into_iter()
            .fold(vec![0usize; tags.len()], |mut acc, row| {
                for (a, r) in acc.iter_mut().zip(row) {
                    *a += r;
                }
                acc
            });
            let power: Vec<f64> = counts.iter().map(|&c| c as f64 / reps as f64).collect();
            let se = power.iter().map(|&p| binomial_se(p, reps)).collect();
            CompareRow { rho, power, se }
        })
        .collect()
}

/// Calibrates every protocol in `tags` on the same config.
pub fn calibrate_all(
    tags: &[ProtocolTag],
    cfg: &ModelConfig,
    l_max: u32,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Vec<Calibration> {
    tags.iter()
        .map(|&t| calibrate_threshold(t, cfg, l_max, alpha, reps, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            m: 4,
            n: 25,
            sigma: 1.0,
            s: 1.0,
            r: 1.0,
            p: f64::INFINITY,
            q: f64::INFINITY,
            epsilon: 1.0,
            delta: 0.01,
            alpha: 0.05,
            kappa_tilde: 1.0,
        }
    }

    #[test]
    fn par_map_preserves_rep_order() {
        let v = par_map_reps(1000, |rep| rep * 3);
        assert_eq!(v[0], 0);
        assert_eq!(v[999], 2997);
        assert!(v.windows(2).all(|w| w[1] == w[0] + 3));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = small_cfg();
        let mut other = small_cfg();
        other.epsilon = 0.5;
        assert_eq!(config_hash(&cfg), config_hash(&cfg));
        assert_ne!(config_hash(&cfg), config_hash(&other));
        assert_eq!(config_hash(&cfg).len(), 16);
    }

    #[test]
    fn null_signal_gives_power_equal_to_level() {
        let cfg = small_cfg();
        let l = 3;
        let cal = calibrate_threshold(ProtocolTag::Classical, &cfg, l, cfg.alpha, 4000, 11);
        let est = estimate_risk(
            ProtocolTag::Classical, &cfg, l, &cal, &Signal::zero(), 4000, 12,
        );
        // Under f = 0 the "power" is just the level, so type_ii ~ 1 - alpha.
        assert!((est.type_ii - (1.0 - cfg.alpha)).abs() < 4.0 * est.se_ii + 0.01);
        assert!((est.type_i - cfg.alpha).abs() < 3.0 * est.se_i + 0.005);
    }

    #[test]
    fn huge_signal_saturates_power() {
        let cfg = small_cfg();
        let l = 3;
        let cal = calibrate_threshold(ProtocolTag::Classical, &cfg, l, cfg.alpha, 2000, 21);
        let strong = gen_signal_single_level(l, 50.0, Spread::Spike, 0);
        let est = estimate_risk(ProtocolTag::Classical, &cfg, l, &cal, &strong, 1000, 22);
        assert!(est.type_ii <= 0.01, "type_ii = {}", est.type_ii);
    }

    #[test]
    fn classical_boundary_matches_chi_square_oracle() {
        let mut cfg = small_cfg();
        cfg.m = 1;
        cfg.n = 50;
        let l = 3;
        let d = crate::seq::dimension(l) as f64;
        let cal = calibrate_threshold(ProtocolTag::Classical, &cfg, l, cfg.alpha, 4000, 31);
        let est = detection_boundary(
            ProtocolTag::Classical, &cfg, l, &cal, Spread::Uniform, 0.5, 2000, 0.02, 32,
        )
        .unwrap();
        // 50% power when the noncentrality n rho^2 / sigma^2 matches the
        // critical value kappa sqrt(d); kappa ~ sqrt(2) z_{0.95}.
        let oracle_sq = 2.0 * d.sqrt() * 1.6449 * cfg.sigma * cfg.sigma / cfg.n as f64;
        let ratio = est.rho_star * est.rho_star / oracle_sq;
        assert!(ratio > 1.0 / 3.0 && ratio < 3.0, "ratio = {ratio}");
        assert!(est.bracket.0 < est.rho_star && est.rho_star < est.bracket.1);
    }

    #[test]
    fn tiny_power_target_gives_tiny_boundary() {
        let cfg = small_cfg();
        let l = 3;
        let cal = calibrate_threshold(ProtocolTag::Classical, &cfg, l, cfg.alpha, 4000, 41);
        let near_level = detection_boundary(
            ProtocolTag::Classical, &cfg, l, &cal, Spread::Uniform, 0.07, 2000, 0.05, 42,
        )
        .unwrap();
        let half = detection_boundary(
            ProtocolTag::Classical, &cfg, l, &cal, Spread::Uniform, 0.5, 2000, 0.05, 42,
        )
        .unwrap();
        assert!(near_level.rho_star < half.rho_star / 2.0);
    }

    #[test]
    fn boundary_shrinks_with_sample_size() {
        let mut prev = f64::INFINITY;
        for n in [20usize, 40, 80] {
            let mut cfg = small_cfg();
            cfg.m = 1;
            cfg.n = n;
            let l = 2;
            let cal = calibrate_threshold(ProtocolTag::Classical, &cfg, l, cfg.alpha, 3000, 51);
            let est = detection_boundary(
                ProtocolTag::Classical, &cfg, l, &cal, Spread::Uniform, 0.5, 1500, 0.02, 52,
            )
            .unwrap();
            assert!(
                est.rho_star <= prev * 1.02,
                "boundary grew at n = {n}: {} > {prev}",
                est.rho_star
            );
            prev = est.rho_star;
        }
    }

    #[test]
    fn comparison_levels_and_information_ordering() {
        let cfg = small_cfg();
        let l = 2;
        let tags = [
            ProtocolTag::Classical,
            ProtocolTag::I,
            ProtocolTag::II,
            ProtocolTag::III,
        ];
        let cals = calibrate_all(&tags, &cfg, l, cfg.alpha, 3000, 61);
        let rho_mid = 0.8;
        let rows = compare_protocols(
            &tags, &cfg, l, &cals, Spread::Uniform, &[0.0, rho_mid], 2000, 62,
        );
        // rho = 0 reproduces the calibrated level for every protocol.
        for (p, se) in rows[0].power.iter().zip(&rows[0].se) {
            assert!((p - cfg.alpha).abs() < 3.0 * se + 0.005, "level {p}");
        }
        // The non-private test sees strictly more information.
        let row = &rows[1];
        for k in 1..tags.len() {
            let slack = 3.0 * (row.se[0].powi(2) + row.se[k].powi(2)).sqrt();
            assert!(
                row.power[0] >= row.power[k] - slack,
                "{} beat classical: {} vs {}",
                tags[k].name(),
                row.power[k],
                row.power[0]
            );
        }
    }

    #[test]
    fn paired_comparison_reduces_difference_variance() {
        // Common random numbers: comparing two tests on the same data
        // draw gives a smaller SE for the power difference than
        // independent draws. Use the classical test at two resolution
        // levels so both statistics are deterministic in the data.
        let mut cfg = small_cfg();
        cfg.m = 1;
        let (la, lb) = (3u32, 2u32);
        let ka = calibrate_threshold(ProtocolTag::Classical, &cfg, la, cfg.alpha, 3000, 71).kappa;
        let kb = calibrate_threshold(ProtocolTag::Classical, &cfg, lb, cfg.alpha, 3000, 72).kappa;
        let f = gen_signal_single_level(lb, 0.35, Spread::Uniform, 0);
        let reps = 2000usize;
        let outcomes: Vec<(f64, f64, f64)> = par_map_reps(reps, |rep| {
            let data = sample_data(&f, &cfg, la, derive_seed(77, &[tag::DATA, rep]));
            let other = sample_data(&f, &cfg, la, derive_seed(78, &[tag::DATA, rep]));
            let block = &data.servers[0];
            let ra = f64::from(crate::protocol::classical_stat(block, la, cfg.sigma) >= ka);
            let rb = f64::from(crate::protocol::classical_stat(block, lb, cfg.sigma) >= kb);
            let rb_indep = f64::from(
                crate::protocol::classical_stat(&other.servers[0], lb, cfg.sigma) >= kb,
            );
            (ra, rb, rb_indep)
        });
        let n = reps as f64;
        let se_of = |diffs: Vec<f64>| {
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        let paired_se = se_of(outcomes.iter().map(|o| o.0 - o.1).collect());
        let unpaired_se = se_of(outcomes.iter().map(|o| o.0 - o.2).collect());
        assert!(
            paired_se <= unpaired_se,
            "paired {paired_se} vs unpaired {unpaired_se}"
        );
    }
}
