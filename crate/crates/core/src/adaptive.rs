//! Smoothness-adaptive testing: a resolution grid over a smoothness
//! interval, a low/high privacy-budget partition of its levels, and
//! Bonferroni-combined adaptive variants of the three private procedures.
//!
//! The adaptive test runs the low-budget procedure jointly over the low
//! levels and the matching high-budget procedure over the high levels,
//! each on half the privacy budget, and rejects if either sub-test does.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::privacy::{lipschitz_constant, MechanismRecord};
use crate::protocol::{
    haar_rotation, k_cap, log_norm, partition_servers, q_sum_ii, stat_i, stat_ii_from_q,
    tau_clip, thresholds_t_l, transcript_ii, transcript_iii, Assignment, ProtocolTag,
    TestOutcome, Transcript,
};
use crate::rates;
use crate::rng::{derive_seed, substream, tag};
use crate::seq::{dimension, sample_data, DistributedData, Signal};

/// Smoothness mesh over [s_min, s_max]: uniform with step 1/ln N, at
/// least 3 points, endpoints included. s_min = s_max gives a singleton.
pub fn s_mesh(n_total: usize, s_min: f64, s_max: f64) -> Vec<f64> {
    assert!(s_min > 0.0 && s_min <= s_max);
    if s_min == s_max {
        return vec![s_min];
    }
    let step = 1.0 / (n_total as f64).ln();
    let count = (((s_max - s_min) / step).ceil() as usize + 1).max(3);
    (0..count)
        .map(|i| s_min + (s_max - s_min) * i as f64 / (count - 1) as f64)
        .collect()
}

/// Rate-optimal resolution level for smoothness `s` under the given
/// randomness mode.
pub fn level_for_smoothness(cfg: &ModelConfig, s: f64, shared: bool) -> u32 {
    let mut c = cfg.clone();
    c.s = s;
    rates::optimal_resolution(&c, shared)
}

/// True iff level `l` belongs to the low privacy-budget set.
///
/// Local mode: 2^L <= eps sqrt(mn) (1 + sqrt(n) 1{sqrt(n) eps > 1});
/// shared mode: 2^L <= eps^2 m n.
pub fn is_low_level(l: u32, cfg: &ModelConfig, shared: bool) -> bool {
    let two_l = 2f64.powi(l as i32);
    let (m, n, eps) = (cfg.m as f64, cfg.n as f64, cfg.epsilon);
    if shared {
        two_l <= eps * eps * m * n
    } else {
        let boost = if n.sqrt() * eps > 1.0 { n.sqrt() } else { 0.0 };
        two_l <= eps * (m * n).sqrt() * (1.0 + boost)
    }
}

/// Resolution levels spanned by a smoothness interval, partitioned into
/// low and high privacy-budget sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionGrid {
    /// Distinct levels, ascending.
    pub levels: Vec<u32>,
    /// Smallest mesh smoothness mapping to each level (parallel to
    /// `levels`); used to instantiate the threshold grid at that level.
    pub rep_s: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
    pub low_set: Vec<u32>,
    pub high_set: Vec<u32>,
    pub shared: bool,
}

/// Builds the level grid { L_s : s on the mesh }, deduplicated and
/// sorted ascending, with its low/high partition.
pub fn resolution_grid(cfg: &ModelConfig, s_min: f64, s_max: f64, shared: bool) -> ResolutionGrid {
    let mut by_level: std::collections::BTreeMap<u32, f64> = Default::default();
    for s in s_mesh(cfg.total_n(), s_min, s_max) {
        by_level.entry(level_for_smoothness(cfg, s, shared)).or_insert(s);
    }
    let levels: Vec<u32> = by_level.keys().copied().collect();
    let rep_s: Vec<f64> = by_level.values().copied().collect();
    assert!(
        levels.len() as f64 <= 10.0 * (cfg.total_n() as f64).ln(),
        "resolution grid larger than the ln N budget"
    );
    let (low_set, high_set): (Vec<u32>, Vec<u32>) =
        levels.iter().partition(|&&l| is_low_level(l, cfg, shared));
    ResolutionGrid { levels, rep_s, s_min, s_max, low_set, high_set, shared }
}

// ---------------------------------------------------------------------------
// Adaptive noise multipliers (each sub-test runs on half the budget)

/// Low-budget release multiplier over a joint grid of |T_L| thresholds
/// and |S'| levels: eps / (2 D_tau sqrt(|T_L| |S'| ln(4/delta))).
pub fn gamma_i_adaptive(
    epsilon: f64,
    delta: f64,
    d_tau: f64,
    t_card: usize,
    s_prime_card: usize,
) -> f64 {
    epsilon / (2.0 * d_tau * ((t_card * s_prime_card) as f64 * (4.0 / delta).ln()).sqrt())
}

/// Procedure-II multiplier over |S_high| levels:
/// eps / (4 sqrt(|S_high| K_L ln(4/delta)) tau).
pub fn gamma_ii_adaptive(
    epsilon: f64,
    delta: f64,
    k_l: usize,
    high_card: usize,
    tau: f64,
) -> f64 {
    epsilon / (4.0 * ((high_card * k_l) as f64 * (4.0 / delta).ln()).sqrt() * tau)
}

/// Procedure-III multiplier over |S_high| levels:
/// eps / (4 sqrt(K_L |S_high| ln(4/delta) ln N) tau).
pub fn gamma_iii_adaptive(
    epsilon: f64,
    delta: f64,
    k_l: usize,
    high_card: usize,
    n_total: usize,
    tau: f64,
) -> f64 {
    epsilon
        / (4.0
            * ((k_l * high_card) as f64 * (4.0 / delta).ln() * (n_total as f64).ln()).sqrt()
            * tau)
}

// ---------------------------------------------------------------------------
// Precomputed context

#[derive(Debug, Clone)]
pub struct LowLevel {
    pub level: u32,
    pub tau_set: Vec<f64>,
    pub d_taus: Vec<f64>,
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HighLocalLevel {
    pub level: u32,
    pub assignment: Assignment,
    pub gamma: f64,
    pub tau: f64,
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct HighSharedLevel {
    pub level: u32,
    pub k_l: usize,
    pub gamma: f64,
    pub tau: f64,
}

/// Everything the adaptive test reuses across replications.
#[derive(Debug, Clone)]
pub struct AdaptiveContext {
    pub grid: ResolutionGrid,
    /// Threshold-grid cardinality |T_L| (identical for every level).
    pub t_card: usize,
    pub low: Vec<LowLevel>,
    pub high_local: Vec<HighLocalLevel>,
    pub high_shared: Vec<HighSharedLevel>,
}

impl AdaptiveContext {
    pub fn tag(&self) -> ProtocolTag {
        if self.grid.shared {
            ProtocolTag::AdaptiveShared
        } else {
            ProtocolTag::AdaptiveLocal
        }
    }

    pub fn build(cfg: &ModelConfig, grid: ResolutionGrid) -> AdaptiveContext {
        let n_total = cfg.total_n();
        let low_card = grid.low_set.len();
        let mut t_card = 0;
        let low: Vec<LowLevel> = grid
            .low_set
            .iter()
            .map(|&level| {
                let idx = grid.levels.iter().position(|&l| l == level).unwrap();
                let tau_set = thresholds_t_l(
                    level, cfg.n, cfg.sigma, cfg.r, n_total, grid.rep_s[idx], cfg.q,
                );
                t_card = tau_set.len();
                let d_taus: Vec<f64> = tau_set
                    .iter()
                    .map(|&t| lipschitz_constant(cfg.n, level, t, n_total, cfg.kappa_tilde))
                    .collect();
                let gammas: Vec<f64> = d_taus
                    .iter()
                    .map(|&d| {
                        gamma_i_adaptive(cfg.epsilon, cfg.delta, d, tau_set.len(), low_card)
                    })
                    .collect();
                LowLevel { level, tau_set, d_taus, gammas }
            })
            .collect();
        if t_card == 0 {
            // no low level instantiated; record the grid cardinality anyway
            t_card = thresholds_t_l(1, cfg.n, cfg.sigma, cfg.r, n_total, cfg.s, cfg.q).len();
        }
        let high_card = grid.high_set.len();
        let tau = tau_clip(cfg);
        let (high_local, high_shared) = if grid.shared {
            let hs = grid
                .high_set
                .iter()
                .map(|&level| {
                    let k_l = k_cap(cfg.n, cfg.epsilon, level);
                    let gamma = gamma_iii_adaptive(
                        cfg.epsilon, cfg.delta, k_l, high_card, n_total, tau,
                    );
                    HighSharedLevel { level, k_l, gamma, tau }
                })
                .collect();
            (Vec::new(), hs)
        } else {
            let hl = grid
                .high_set
                .iter()
                .map(|&level| {
                    let assignment = partition_servers(cfg.m, level, cfg.n, cfg.epsilon);
                    let gamma =
                        gamma_ii_adaptive(cfg.epsilon, cfg.delta, assignment.k_l, high_card, tau);
                    let eta = crate::protocol::eta_formula(cfg.n, cfg.epsilon, assignment.k_l, tau);
                    HighLocalLevel { level, assignment, gamma, tau, eta }
                })
                .collect();
            (hl, Vec::new())
        };
        AdaptiveContext { grid, t_card, low, high_local, high_shared }
    }
}

/// Privacy budget the context consumes, reconstructed from its noise
/// multipliers under the composition convention behind their derivation
/// (each sub-test is a (eps/2, delta/2) Gaussian-mechanism protocol).
pub fn budget_consumed(ctx: &AdaptiveContext, cfg: &ModelConfig) -> (f64, f64) {
    let ln4d = (4.0 / cfg.delta).ln();
    let mut eps = 0.0;
    let mut delta = 0.0;
    if !ctx.low.is_empty() {
        let c = (ctx.t_card * ctx.low.len()) as f64;
        let worst = ctx
            .low
            .iter()
            .flat_map(|lvl| lvl.gammas.iter().zip(&lvl.d_taus))
            .map(|(&g, &d)| g * d * (c * ln4d).sqrt())
            .fold(0.0f64, f64::max);
        eps += worst;
        delta += cfg.delta / 2.0;
    }
    let high_card = ctx.grid.high_set.len() as f64;
    if !ctx.high_local.is_empty() {
        let worst = ctx
            .high_local
            .iter()
            .map(|h| 2.0 * h.gamma * h.tau * (high_card * h.assignment.k_l as f64 * ln4d).sqrt())
            .fold(0.0f64, f64::max);
        eps += worst;
        delta += cfg.delta / 2.0;
    }
    if !ctx.high_shared.is_empty() {
        let ln_n = (cfg.total_n() as f64).ln();
        let worst = ctx
            .high_shared
            .iter()
            .map(|h| 2.0 * h.gamma * h.tau * (high_card * h.k_l as f64 * ln4d * ln_n).sqrt())
            .fold(0.0f64, f64::max);
        eps += worst;
        delta += cfg.delta / 2.0;
    }
    (eps, delta)
}

// ---------------------------------------------------------------------------
// The adaptive statistic

/// Maximum normalized sub-statistic with its provenance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStat {
    pub statistic: f64,
    pub best_level: Option<u32>,
    pub from_high: bool,
}

fn project_block(block: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    block.iter().map(|x| x[..d].to_vec()).collect()
}

const LOW_BRANCH: u64 = 0;
const HIGH_BRANCH: u64 = 1;

/// Per-server transcript of the adaptive low-budget branch at one level:
/// the Procedure-I releases with the widened-grid multiplier.
fn low_transcript<R: rand::Rng>(
    server_id: usize,
    block: &[Vec<f64>],
    lvl: &LowLevel,
    sigma: f64,
    rng: &mut R,
) -> Transcript {
    let stats: Vec<f64> = lvl
        .tau_set
        .iter()
        .map(|&t| stat_i(block, lvl.level, t, sigma, rng))
        .collect();
    let mut payload = Vec::with_capacity(stats.len());
    let mut records = Vec::with_capacity(stats.len());
    for ((&s, &gamma), &d_tau) in stats.iter().zip(&lvl.gammas).zip(&lvl.d_taus) {
        let w: f64 = rng.sample(rand_distr::StandardNormal);
        payload.push(gamma * s + w);
        records.push(MechanismRecord { sensitivity: d_tau, scale_gamma: gamma, noise_std: 1.0 });
    }
    Transcript { server_id, payload, records, protocol: ProtocolTag::I }
}

/// Computes the adaptive statistic on data sampled at the grid's top
/// level. Every sub-test statistic is divided by its Bonferroni
/// normalizer, so one calibrated critical value covers the whole family.
pub fn adaptive_raw(
    cfg: &ModelConfig,
    ctx: &AdaptiveContext,
    data: &DistributedData,
    seed: u64,
    rep: u64,
) -> AdaptiveStat {
    let mode = ctx.tag().id();
    let m = data.servers.len() as f64;
    let mut best = AdaptiveStat {
        statistic: f64::NEG_INFINITY,
        best_level: None,
        from_high: false,
    };

    if !ctx.low.is_empty() {
        let norm = log_norm(ctx.t_card * ctx.low.len());
        for lvl in &ctx.low {
            let mut sums = vec![0.0; lvl.tau_set.len()];
            for (j, block) in data.servers.iter().enumerate() {
                let mut rng = substream(
                    seed,
                    &[tag::NOISE, mode, LOW_BRANCH, rep, j as u64, lvl.level as u64],
                );
                let tr = low_transcript(j, block, lvl, cfg.sigma, &mut rng);
                for (acc, y) in sums.iter_mut().zip(&tr.payload) {
                    *acc += y;
                }
            }
            for (&sum, &gamma) in sums.iter().zip(&lvl.gammas) {
                let v = sum / m.sqrt() / (gamma.max(1.0) * norm);
                if v > best.statistic {
                    best = AdaptiveStat { statistic: v, best_level: Some(lvl.level), from_high: false };
                }
            }
        }
    }

    if !ctx.high_local.is_empty() {
        let norm = log_norm(ctx.high_local.len());
        for h in &ctx.high_local {
            let transcripts: Vec<Transcript> = data
                .servers
                .iter()
                .enumerate()
                .map(|(j, block)| {
                    let mut rng = substream(
                        seed,
                        &[tag::NOISE, mode, HIGH_BRANCH, rep, j as u64, h.level as u64],
                    );
                    transcript_ii(j, block, &h.assignment, h.gamma, cfg.sigma, h.tau, &mut rng)
                })
                .collect();
            let q = q_sum_ii(&transcripts, &h.assignment);
            let v = stat_ii_from_q(q, h.assignment.sets.len(), h.eta) / norm;
            if v > best.statistic {
                best = AdaptiveStat { statistic: v, best_level: Some(h.level), from_high: true };
            }
        }
    }

    if !ctx.high_shared.is_empty() {
        let norm = log_norm(ctx.grid.levels.len());
        for h in &ctx.high_shared {
            let d = dimension(h.level);
            let rot_seed = derive_seed(seed, &[tag::ROTATION, rep, h.level as u64]);
            let shared = haar_rotation(d, rot_seed);
            let transcripts: Vec<Transcript> = data
                .servers
                .iter()
                .enumerate()
                .map(|(j, block)| {
                    let mut rng = substream(
                        seed,
                        &[tag::NOISE, mode, HIGH_BRANCH, rep, j as u64, h.level as u64],
                    );
                    let projected = project_block(block, d);
                    transcript_iii(j, &projected, &shared, h.k_l, h.gamma, cfg.sigma, h.tau, &mut rng)
                })
                .collect();
            let n_gamma_sq = cfg.n as f64 * h.gamma * h.gamma;
            let out = crate::protocol::test_iii(
                &transcripts,
                f64::INFINITY,
                n_gamma_sq + 1.0,
                n_gamma_sq,
            );
            let v = out.statistic / norm;
            if v > best.statistic {
                best = AdaptiveStat { statistic: v, best_level: Some(h.level), from_high: true };
            }
        }
    }

    best
}

/// One full adaptive replication under signal `f`.
pub fn run_adaptive_replication(
    cfg: &ModelConfig,
    ctx: &AdaptiveContext,
    f: &Signal,
    seed: u64,
    rep: u64,
) -> AdaptiveStat {
    let l_data = *ctx.grid.levels.last().expect("nonempty grid");
    let data_seed = derive_seed(seed, &[tag::DATA, rep]);
    let data = sample_data(f, cfg, l_data, data_seed);
    adaptive_raw(cfg, ctx, &data, seed, rep)
}

/// Monte Carlo critical value for the adaptive statistic under the null.
/// An empty grid never rejects, so its critical value is +infinity.
pub fn calibrate_adaptive(
    cfg: &ModelConfig,
    ctx: &AdaptiveContext,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> f64 {
    if ctx.grid.levels.is_empty() {
        return f64::INFINITY;
    }
    let cal_seed = derive_seed(seed, &[tag::CALIBRATE, ctx.tag().id()]);
    let mut stats: Vec<f64> = crate::harness::par_map_reps(reps, |rep| {
        run_adaptive_replication(cfg, ctx, &Signal::zero(), cal_seed, rep).statistic
    });
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    crate::protocol::upper_quantile(&stats, alpha)
}

/// Thresholded adaptive test on one replication.
pub fn adaptive_test(
    cfg: &ModelConfig,
    ctx: &AdaptiveContext,
    kappa: f64,
    f: &Signal,
    seed: u64,
    rep: u64,
) -> TestOutcome {
    if ctx.grid.levels.is_empty() {
        return TestOutcome::new(f64::NEG_INFINITY, f64::INFINITY, ctx.tag());
    }
    let stat = run_adaptive_replication(cfg, ctx, f, seed, rep);
    TestOutcome::new(stat.statistic, kappa, ctx.tag())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::par_map_reps;
    use crate::protocol::{calibrate_threshold, run_replication, RunContext};
    use crate::seq::{gen_signal_single_level, Spread};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn cfg(m: usize, n: usize, eps: f64) -> ModelConfig {
        ModelConfig {
            m,
            n,
            sigma: 1.0,
            s: 1.0,
            r: 1.0,
            p: f64::INFINITY,
            q: f64::INFINITY,
            epsilon: eps,
            delta: 0.01,
            alpha: 0.05,
            kappa_tilde: 1.0,
        }
    }

    fn empty_grid(shared: bool) -> ResolutionGrid {
        ResolutionGrid {
            levels: vec![],
            rep_s: vec![],
            s_min: 1.0,
            s_max: 1.0,
            low_set: vec![],
            high_set: vec![],
            shared,
        }
    }

    #[test]
    fn mesh_endpoints_and_step() {
        let mesh = s_mesh(10_000, 0.5, 2.0);
        assert_eq!(mesh[0], 0.5);
        assert_eq!(*mesh.last().unwrap(), 2.0);
        let step = mesh[1] - mesh[0];
        assert!(step <= 1.0 / (10_000f64).ln() + 1e-12);
        assert!(mesh.len() >= 3);
        assert_eq!(s_mesh(100, 1.0, 1.0), vec![1.0]);
    }

    #[test]
    fn degenerate_interval_gives_singleton_grid() {
        let c = cfg(5, 20, 0.5);
        let grid = resolution_grid(&c, 1.0, 1.0, false);
        assert_eq!(grid.levels.len(), 1);
        assert_eq!(grid.low_set.len() + grid.high_set.len(), 1);
    }

    #[test]
    fn grid_cardinality_within_log_budget() {
        let c = cfg(100, 100, 0.3);
        for shared in [false, true] {
            let grid = resolution_grid(&c, 0.2, 3.0, shared);
            assert!(grid.levels.len() as f64 <= 10.0 * (10_000f64).ln());
            assert!(!grid.levels.is_empty());
            assert!(grid.levels.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn optimal_level_weakly_decreases_in_smoothness() {
        let c = cfg(10, 50, 0.5);
        for shared in [false, true] {
            let mut prev = u32::MAX;
            for s in s_mesh(c.total_n(), 0.3, 3.0) {
                let l = level_for_smoothness(&c, s, shared);
                assert!(l <= prev, "L_s grew at s = {s}");
                prev = l;
            }
        }
    }

    #[test]
    fn shared_partition_threshold() {
        // eps = 1, m = n = 100: low iff 2^L <= 10^4, i.e. L <= 13.
        let c = cfg(100, 100, 1.0);
        assert!(is_low_level(13, &c, true));
        assert!(!is_low_level(14, &c, true));
    }

    #[test]
    fn tiny_epsilon_puts_every_level_high() {
        // eps^2 m n < 2 leaves no level in the low set.
        let c = cfg(4, 25, 0.1);
        assert!((0.1f64).powi(2) * 100.0 < 2.0);
        let grid = resolution_grid(&c, 0.5, 2.0, true);
        assert!(grid.low_set.is_empty());
        assert_eq!(grid.high_set, grid.levels);
    }

    #[test]
    fn local_partition_drops_indicator_below_root_n() {
        // sqrt(n) eps <= 1: the bound is eps sqrt(mn) without the boost.
        let c = cfg(9, 4, 0.5);
        let bound = 0.5 * 6.0; // eps sqrt(mn) = 3
        assert!(is_low_level(1, &c, false) == (2.0 <= bound));
        assert!(!is_low_level(2, &c, false)); // 4 > 3
        // just over the indicator boundary the bound jumps by (1 + sqrt n)
        let c2 = cfg(9, 4, 0.6);
        assert!(is_low_level(2, &c2, false)); // 0.6 * 6 * 3 = 10.8 >= 4
    }

    #[test]
    fn gamma_closed_forms() {
        let (eps, delta) = (0.8, 0.01);
        let g1 = gamma_i_adaptive(eps, delta, 0.37, 15, 4);
        assert_relative_eq!(
            g1,
            0.8 / (2.0 * 0.37 * (60.0 * (400f64).ln()).sqrt()),
            max_relative = 1e-14
        );
        let g2 = gamma_ii_adaptive(eps, delta, 7, 3, 2.1);
        assert_relative_eq!(
            g2,
            0.8 / (4.0 * (21.0 * (400f64).ln()).sqrt() * 2.1),
            max_relative = 1e-14
        );
        let g3 = gamma_iii_adaptive(eps, delta, 7, 3, 500, 2.1);
        assert_relative_eq!(
            g3,
            0.8 / (4.0 * (21.0 * (400f64).ln() * (500f64).ln()).sqrt() * 2.1),
            max_relative = 1e-14
        );
    }

    #[test]
    fn budget_arithmetic_stays_within_total() {
        for (eps, shared) in [(0.2, false), (0.2, true), (0.9, false), (0.9, true)] {
            let c = cfg(6, 30, eps);
            let grid = resolution_grid(&c, 0.5, 2.0, shared);
            let ctx = AdaptiveContext::build(&c, grid);
            let (e, d) = budget_consumed(&ctx, &c);
            assert!(e <= c.epsilon + 1e-9, "eps consumed {e} > {}", c.epsilon);
            assert!(d <= c.delta + 1e-12);
            // a context using both branches spends exactly half per branch
            if !ctx.low.is_empty() && ctx.grid.high_set.len() > 0 {
                assert_relative_eq!(e, c.epsilon, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn empty_grid_never_rejects() {
        let c = cfg(4, 25, 0.5);
        for shared in [false, true] {
            let ctx = AdaptiveContext::build(&c, empty_grid(shared));
            let kappa = calibrate_adaptive(&c, &ctx, c.alpha, 50, 3);
            assert_eq!(kappa, f64::INFINITY);
            let strong = gen_signal_single_level(2, 100.0, Spread::Spike, 0);
            let out = adaptive_test(&c, &ctx, kappa, &strong, 4, 0);
            assert!(!out.reject);
        }
    }

    #[test]
    fn singleton_low_grid_matches_procedure_i_with_adjusted_gamma() {
        // One low level and no high levels: the adaptive statistic is the
        // Procedure-I statistic computed with the halved-budget gammas.
        let c = cfg(4, 25, 1.0);
        let grid = ResolutionGrid {
            levels: vec![2],
            rep_s: vec![c.s],
            s_min: c.s,
            s_max: c.s,
            low_set: vec![2],
            high_set: vec![],
            shared: false,
        };
        assert!(is_low_level(2, &c, false));
        let ctx = AdaptiveContext::build(&c, grid);
        let lvl = &ctx.low[0];
        let f = gen_signal_single_level(2, 0.4, Spread::Uniform, 0);
        for rep in 0..20u64 {
            let data_seed = derive_seed(99, &[tag::DATA, rep]);
            let data = sample_data(&f, &c, 2, data_seed);
            let got = adaptive_raw(&c, &ctx, &data, 99, rep);
            // replay the same substreams through the non-adaptive pipeline
            let m = data.servers.len() as f64;
            let mut best = f64::NEG_INFINITY;
            let mut sums = vec![0.0; lvl.tau_set.len()];
            for (j, block) in data.servers.iter().enumerate() {
                let mut rng = substream(
                    99,
                    &[tag::NOISE, ProtocolTag::AdaptiveLocal.id(), LOW_BRANCH, rep, j as u64, 2],
                );
                let stats: Vec<f64> = lvl
                    .tau_set
                    .iter()
                    .map(|&t| stat_i(block, 2, t, c.sigma, &mut rng))
                    .collect();
                for ((acc, &s), &gamma) in sums.iter_mut().zip(&stats).zip(&lvl.gammas) {
                    let w: f64 = rng.sample(rand_distr::StandardNormal);
                    *acc += gamma * s + w;
                }
            }
            for (&sum, &gamma) in sums.iter().zip(&lvl.gammas) {
                best = best.max(sum / m.sqrt() / (gamma.max(1.0) * log_norm(lvl.tau_set.len())));
            }
            assert_relative_eq!(got.statistic, best, max_relative = 1e-12);
            assert!(!got.from_high);
        }
    }

    #[test]
    fn all_low_shared_grid_ignores_high_branch() {
        let c = cfg(20, 20, 1.0); // eps^2 m n = 400 covers small levels
        let grid = resolution_grid(&c, 0.8, 2.0, true);
        assert!(grid.high_set.is_empty(), "expected an all-low grid");
        let ctx = AdaptiveContext::build(&c, grid);
        assert!(ctx.high_shared.is_empty() && ctx.high_local.is_empty());
        let stat = run_adaptive_replication(&c, &ctx, &Signal::zero(), 5, 0);
        assert!(!stat.from_high);
        assert!(stat.statistic.is_finite());
    }

    #[test]
    fn null_level_is_controlled() {
        // Bonferroni validity with both branches populated.
        let c = cfg(4, 25, 0.2);
        for shared in [false, true] {
            let grid = resolution_grid(&c, 0.5, 2.0, shared);
            let ctx = AdaptiveContext::build(&c, grid);
            assert!(
                !ctx.grid.low_set.is_empty() || !ctx.grid.high_set.is_empty(),
                "grid should be populated"
            );
            let kappa = calibrate_adaptive(&c, &ctx, c.alpha, 3000, 7);
            let reps = 2000usize;
            let rejections: usize = par_map_reps(reps, |rep| {
                usize::from(adaptive_test(&c, &ctx, kappa, &Signal::zero(), 8, rep).reject)
            })
            .into_iter()
            .sum();
            let level = rejections as f64 / reps as f64;
            let se = (c.alpha * (1.0 - c.alpha) / reps as f64).sqrt();
            assert!(level <= c.alpha + 3.0 * se + 0.005, "level {level}");
        }
    }

    #[test]
    fn adaptive_power_tracks_the_known_smoothness_test() {
        let c = cfg(4, 25, 1.0);
        let shared = true;
        let rho_s = rates::separation_rate_shared(&c).sqrt();
        let l_opt = rates::optimal_resolution(&c, shared);
        let rho = 2.0 * rho_s;
        let f = gen_signal_single_level(l_opt, rho, Spread::Uniform, 0);

        let grid = resolution_grid(&c, 0.5, 2.0, shared);
        assert!(grid.levels.contains(&l_opt), "oracle level must be on the grid");
        let ctx = AdaptiveContext::build(&c, grid);
        let kappa = calibrate_adaptive(&c, &ctx, c.alpha, 3000, 17);
        let reps = 2000usize;
        let adaptive_power = par_map_reps(reps, |rep| {
            usize::from(adaptive_test(&c, &ctx, kappa, &f, 18, rep).reject)
        })
        .into_iter()
        .sum::<usize>() as f64
            / reps as f64;

        // oracle: the matching non-adaptive protocol at l_opt, full budget
        let oracle_tag = if is_low_level(l_opt, &c, shared) {
            ProtocolTag::I
        } else {
            ProtocolTag::III
        };
        let cal = calibrate_threshold(oracle_tag, &c, l_opt, c.alpha, 3000, 19);
        let o_ctx = RunContext::build(oracle_tag, &c, l_opt);
        let oracle_power = par_map_reps(reps, |rep| {
            let raw = run_replication(oracle_tag, &c, l_opt, &o_ctx, &f, 20, rep);
            usize::from(raw.statistic(cal.eta_used.unwrap_or(0.0)) >= cal.kappa)
        })
        .into_iter()
        .sum::<usize>() as f64
            / reps as f64;

        assert!(
            adaptive_power >= oracle_power - 0.15,
            "adaptive {adaptive_power} vs oracle {oracle_power}"
        );
    }
}
