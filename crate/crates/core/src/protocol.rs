//! The non-private benchmark test and the three private procedures.
//!
//! Procedure I (low budget): each server releases a clipped, symmetrized
//! chi-square statistic through the Gaussian mechanism, once per clipping
//! threshold on a geometric grid; the aggregator maxes the averaged
//! releases over thresholds.
//!
//! Procedure II (high budget, no shared randomness): servers are divided
//! over coordinates; each server releases clipped coordinate sums; the
//! aggregator forms a chi-square-type statistic from the per-coordinate
//! averages.
//!
//! Procedure III (high budget, shared randomness): all servers apply one
//! common Haar-random rotation before releasing clipped coordinate sums
//! on a compressed index set, which concentrates the signal energy.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::privacy::{clip, gaussian_release, lipschitz_constant, MechanismRecord, PrivacyBudget};
use crate::rng::{derive_seed, substream, tag};
use crate::seq::{dimension, sample_data, DistributedData, Signal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolTag {
    Classical,
    I,
    II,
    III,
    AdaptiveLocal,
    AdaptiveShared,
}

impl ProtocolTag {
    pub fn name(self) -> &'static str {
        match self {
            ProtocolTag::Classical => "classical",
            ProtocolTag::I => "t1",
            ProtocolTag::II => "t2",
            ProtocolTag::III => "t3",
            ProtocolTag::AdaptiveLocal => "adaptive_local",
            ProtocolTag::AdaptiveShared => "adaptive_shared",
        }
    }

    /// Stable discriminant mixed into noise substream tags so different
    /// protocols never share noise draws even under paired data seeds.
    pub fn id(self) -> u64 {
        match self {
            ProtocolTag::Classical => 0,
            ProtocolTag::I => 1,
            ProtocolTag::II => 2,
            ProtocolTag::III => 3,
            ProtocolTag::AdaptiveLocal => 4,
            ProtocolTag::AdaptiveShared => 5,
        }
    }
}

/// One server's privatized message.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub server_id: usize,
    pub payload: Vec<f64>,
    pub records: Vec<MechanismRecord>,
    pub protocol: ProtocolTag,
}

/// Result of an aggregated test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub reject: bool,
    pub statistic: f64,
    pub critical_value: f64,
    pub protocol: ProtocolTag,
}

impl TestOutcome {
    pub(crate) fn new(statistic: f64, critical_value: f64, protocol: ProtocolTag) -> Self {
        TestOutcome { reject: statistic >= critical_value, statistic, critical_value, protocol }
    }
}

/// The public random rotation shared by all servers in Procedure III.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedRandomness {
    pub rotation: DMatrix<f64>,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Classical benchmark

/// Chi-square statistic of one data block at level `l_max`:
/// (||sqrt(n) mean / sigma||^2 - d_L) / sqrt(d_L).
pub fn classical_stat(block: &[Vec<f64>], l_max: u32, sigma: f64) -> f64 {
    let d = dimension(l_max);
    let n = block.len() as f64;
    let mut sq = 0.0;
    for t in 0..d {
        let mean: f64 = block.iter().map(|x| x[t]).sum::<f64>() / n;
        let scaled = n.sqrt() * mean / sigma;
        sq += scaled * scaled;
    }
    (sq - d as f64) / (d as f64).sqrt()
}

/// Non-private benchmark: the classical statistic over all m*n pooled
/// observations.
pub fn pooled_classical_stat(data: &DistributedData, sigma: f64) -> f64 {
    let pooled: Vec<&Vec<f64>> = data.servers.iter().flatten().collect();
    let d = data.dim();
    let n = pooled.len() as f64;
    let mut sq = 0.0;
    for t in 0..d {
        let mean: f64 = pooled.iter().map(|x| x[t]).sum::<f64>() / n;
        let scaled = n.sqrt() * mean / sigma;
        sq += scaled * scaled;
    }
    (sq - d as f64) / (d as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Procedure I

/// Clipped, symmetrized per-server statistic with an injected
/// symmetrization draw `v` (a chi-square_{d_L} variate under the null).
pub fn stat_i_with_v(block: &[Vec<f64>], l_max: u32, tau: f64, sigma: f64, v: f64) -> f64 {
    let d = dimension(l_max);
    let n = block.len() as f64;
    let mut sq = 0.0;
    for t in 0..d {
        let mean: f64 = block.iter().map(|x| x[t]).sum::<f64>() / n;
        let scaled = n.sqrt() * mean / sigma;
        sq += scaled * scaled;
    }
    clip((sq - v) / (d as f64).sqrt(), -tau, tau)
}

/// Clipped, symmetrized per-server statistic; draws the symmetrization
/// variate fresh from `rng`.
pub fn stat_i<R: Rng>(block: &[Vec<f64>], l_max: u32, tau: f64, sigma: f64, rng: &mut R) -> f64 {
    let d = dimension(l_max) as f64;
    let v: f64 = rng.sample(ChiSquared::new(d).expect("d_L >= 2"));
    stat_i_with_v(block, l_max, tau, sigma, v)
}

/// Geometric clipping-threshold grid, descending:
/// tau_k = 2^{-k+2} n (1 - 2^{-s})^{2 - 2/q} R^2 / (sigma^2 sqrt(2^L)),
/// k = 1..ceil(1 + 2 log2(N R / sigma)).
pub fn thresholds_t_l(
    l_max: u32,
    n: usize,
    sigma: f64,
    r: f64,
    n_total: usize,
    s: f64,
    q: f64,
) -> Vec<f64> {
    assert!(r > 0.0 && sigma > 0.0);
    let count = (1.0 + 2.0 * (n_total as f64 * r / sigma).log2()).ceil().max(1.0) as usize;
    let q_exp = if q.is_infinite() { 2.0 } else { 2.0 - 2.0 / q };
    let coeff = (1.0 - 2f64.powf(-s)).powf(q_exp);
    let base = n as f64 * coeff * r * r / (sigma * sigma * 2f64.powf(l_max as f64 / 2.0));
    (1..=count).map(|k| 2f64.powi(-(k as i32) + 2) * base).collect()
}

/// Procedure-I transcript from precomputed per-threshold statistics: one
/// Gaussian-mechanism release per threshold with sensitivity D_tau.
pub fn transcript_i_from_stats<R: Rng>(
    server_id: usize,
    stats: &[f64],
    tau_set: &[f64],
    n: usize,
    l_max: u32,
    budget: &PrivacyBudget,
    n_total: usize,
    kappa_tilde: f64,
    rng: &mut R,
) -> Transcript {
    assert_eq!(stats.len(), tau_set.len());
    assert_eq!(budget.components % tau_set.len(), 0, "budget components must cover the threshold grid");
    let mut payload = Vec::with_capacity(tau_set.len());
    let mut records = Vec::with_capacity(tau_set.len());
    for (&stat, &tau) in stats.iter().zip(tau_set) {
        let d_tau = lipschitz_constant(n, l_max, tau, n_total, kappa_tilde);
        let (y, rec) = gaussian_release(stat, d_tau, budget, rng).expect("valid budget");
        payload.push(y);
        records.push(rec);
    }
    Transcript { server_id, payload, records, protocol: ProtocolTag::I }
}

/// Procedure-I transcript: per threshold, a fresh clipped symmetrized
/// statistic released through the Gaussian mechanism.
pub fn transcript_i<R: Rng>(
    server_id: usize,
    block: &[Vec<f64>],
    l_max: u32,
    tau_set: &[f64],
    budget: &PrivacyBudget,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Transcript {
    let stats: Vec<f64> = tau_set
        .iter()
        .map(|&tau| stat_i(block, l_max, tau, cfg.sigma, rng))
        .collect();
    transcript_i_from_stats(
        server_id,
        &stats,
        tau_set,
        block.len(),
        l_max,
        budget,
        cfg.total_n(),
        cfg.kappa_tilde,
        rng,
    )
}

/// Bonferroni normalizer over a grid of given cardinality; floored at 1
/// so singleton grids stay well defined.
pub fn log_norm(cardinality: usize) -> f64 {
    (cardinality as f64).ln().sqrt().max(1.0)
}

/// Aggregated Procedure-I test: max over thresholds of the averaged
/// releases, normalized by (gamma_tau v 1) * sqrt(ln |T_L|).
pub fn test_i(transcripts: &[Transcript], tau_count: usize, kappa: f64, gammas: &[f64]) -> TestOutcome {
    assert_eq!(gammas.len(), tau_count);
    assert!(
        transcripts.iter().all(|t| t.payload.len() == tau_count),
        "all transcripts must share the threshold grid"
    );
    let m = transcripts.len() as f64;
    let norm = log_norm(tau_count);
    let mut best = f64::NEG_INFINITY;
    for (ti, &gamma) in gammas.iter().enumerate() {
        let sum: f64 = transcripts.iter().map(|t| t.payload[ti]).sum();
        let v = sum / m.sqrt() / (gamma.max(1.0) * norm);
        best = best.max(v);
    }
    TestOutcome::new(best, kappa, ProtocolTag::I)
}

// ---------------------------------------------------------------------------
// Procedure II

/// Coordinate budget K_L = ceil((n eps^2) min d_L).
pub fn k_cap(n: usize, epsilon: f64, l_max: u32) -> usize {
    let d = dimension(l_max) as f64;
    ((n as f64 * epsilon * epsilon).min(d)).ceil().max(1.0) as usize
}

/// Server-to-coordinate assignment for Procedure II.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// sets[t] is the list of servers releasing flat coordinate t.
    pub sets: Vec<Vec<usize>>,
    /// coords_of_server[j] lists the flat coordinates server j releases.
    pub coords_of_server: Vec<Vec<usize>>,
    pub k_l: usize,
    pub group_size: usize,
}

/// Round-robin division of servers over the d_L coordinates: every
/// coordinate gets ceil(m K_L / d_L) servers and every server lands in at
/// least K_L coordinate sets.
pub fn partition_servers(m: usize, l_max: u32, n: usize, epsilon: f64) -> Assignment {
    assert!(m >= 1);
    let d = dimension(l_max);
    let k_l = k_cap(n, epsilon, l_max);
    let group_size = ((m * k_l + d - 1) / d).min(m).max(1);
    let mut sets = Vec::with_capacity(d);
    let mut coords_of_server = vec![Vec::new(); m];
    let mut cursor = 0usize;
    for t in 0..d {
        let mut set = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let j = cursor % m;
            set.push(j);
            coords_of_server[j].push(t);
            cursor += 1;
        }
        set.sort_unstable();
        sets.push(set);
    }
    Assignment { sets, coords_of_server, k_l, group_size }
}

/// Clipping threshold for the coordinate-sum procedures:
/// kappa_tilde * sqrt(ln(N / sigma)).
pub fn tau_clip(cfg: &ModelConfig) -> f64 {
    let v = (cfg.total_n() as f64 / cfg.sigma).ln();
    assert!(v > 0.0, "N/sigma must exceed 1 for the clipping threshold");
    cfg.kappa_tilde * v.sqrt()
}

/// Noise multiplier of Procedure II:
/// gamma_L = eps / (2 sqrt(2 K_L ln(2/delta)) tau).
pub fn gamma_ii(epsilon: f64, delta: f64, k_l: usize, tau: f64) -> f64 {
    epsilon / (2.0 * (2.0 * k_l as f64 * (2.0 / delta).ln()).sqrt() * tau)
}

/// Closed-form centering term of Procedure II: n eps^2 / (4 K_L tau^2).
pub fn eta_formula(n: usize, epsilon: f64, k_l: usize, tau: f64) -> f64 {
    n as f64 * epsilon * epsilon / (4.0 * k_l as f64 * tau * tau)
}

/// Procedure-II transcript: per assigned coordinate, the scaled clipped
/// sum plus standard Gaussian noise.
pub fn transcript_ii<R: Rng>(
    server_id: usize,
    block: &[Vec<f64>],
    assignment: &Assignment,
    gamma: f64,
    sigma: f64,
    tau: f64,
    rng: &mut R,
) -> Transcript {
    let coords = &assignment.coords_of_server[server_id];
    let mut payload = Vec::with_capacity(coords.len());
    let mut records = Vec::with_capacity(coords.len());
    for &t in coords {
        let sum: f64 = block.iter().map(|x| clip(x[t] / sigma, -tau, tau)).sum();
        let w: f64 = rng.sample(StandardNormal);
        payload.push(gamma * sum + w);
        records.push(MechanismRecord { sensitivity: 2.0 * tau, scale_gamma: gamma, noise_std: 1.0 });
    }
    Transcript { server_id, payload, records, protocol: ProtocolTag::II }
}

/// Sum over coordinates of the squared normalized aggregates,
/// Q = sum_t ((1/sqrt(|J_t|)) sum_{j in J_t} Y_t^{(j)})^2.
pub fn q_sum_ii(transcripts: &[Transcript], assignment: &Assignment) -> f64 {
    let d = assignment.sets.len();
    // payload position of coordinate t within server j's transcript
    let mut pos: Vec<std::collections::HashMap<usize, usize>> =
        vec![std::collections::HashMap::new(); transcripts.len()];
    for (j, coords) in assignment.coords_of_server.iter().enumerate() {
        for (i, &t) in coords.iter().enumerate() {
            pos[j].insert(t, i);
        }
    }
    let mut q = 0.0;
    for t in 0..d {
        let set = &assignment.sets[t];
        let sum: f64 = set
            .iter()
            .map(|&j| transcripts[j].payload[pos[j][&t]])
            .sum();
        let agg = sum / (set.len() as f64).sqrt();
        q += agg * agg;
    }
    q
}

/// Procedure-II statistic from the aggregate Q:
/// ((Q - d (eta + 1)) / sqrt(d)) / (eta v 1).
pub fn stat_ii_from_q(q: f64, d: usize, eta: f64) -> f64 {
    (q - d as f64 * (eta + 1.0)) / (d as f64).sqrt() / eta.max(1.0)
}

/// Aggregated Procedure-II test.
pub fn test_ii(
    transcripts: &[Transcript],
    assignment: &Assignment,
    kappa: f64,
    eta: f64,
) -> TestOutcome {
    assert_eq!(transcripts.len(), assignment.coords_of_server.len(), "assignment mismatch");
    let q = q_sum_ii(transcripts, assignment);
    TestOutcome::new(stat_ii_from_q(q, assignment.sets.len(), eta), kappa, ProtocolTag::II)
}

// ---------------------------------------------------------------------------
// Procedure III

/// Uniform (Haar) random orthogonal matrix via sign-fixed QR of a
/// Gaussian matrix; deterministic given the seed.
pub fn haar_rotation(d: usize, seed: u64) -> SharedRandomness {
    assert!(d >= 1);
    let mut rng = substream(seed, &[tag::ROTATION]);
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let r = qr.r();
    let mut u = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            for i in 0..d {
                u[(i, j)] = -u[(i, j)];
            }
        }
    }
    SharedRandomness { rotation: u, seed }
}

/// Number of rotated coordinates retained by Procedure III: the levels
/// 1..=(ceil(log2 K_L) v 1), capped at d_L.
pub fn retained_coords(k_l: usize, d: usize) -> usize {
    let levels = (k_l as f64).log2().ceil().max(1.0) as u32;
    dimension(levels).min(d)
}

/// Noise multiplier of Procedure III:
/// gamma_L = eps / (2 sqrt(2 K_L ln(2/delta) ln N) tau).
pub fn gamma_iii(epsilon: f64, delta: f64, k_l: usize, n_total: usize, tau: f64) -> f64 {
    epsilon
        / (2.0 * (2.0 * k_l as f64 * (2.0 / delta).ln() * (n_total as f64).ln()).sqrt() * tau)
}

/// Procedure-III transcript: rotate each scaled observation by the shared
/// rotation, clip, sum, scale, add standard Gaussian noise; only the
/// retained coordinates are released.
pub fn transcript_iii<R: Rng>(
    server_id: usize,
    block: &[Vec<f64>],
    shared: &SharedRandomness,
    k_l: usize,
    gamma: f64,
    sigma: f64,
    tau: f64,
    rng: &mut R,
) -> Transcript {
    let d = shared.rotation.nrows();
    assert!(
        block.iter().all(|x| x.len() == d),
        "observation dimension must match the shared rotation"
    );
    let keep = retained_coords(k_l, d);
    let mut sums = vec![0.0; keep];
    for x in block {
        let v = nalgebra::DVector::from_iterator(d, x.iter().map(|&xi| xi / sigma));
        let rotated = &shared.rotation * v;
        for (t, s) in sums.iter_mut().enumerate() {
            *s += clip(rotated[t], -tau, tau);
        }
    }
    let mut payload = Vec::with_capacity(keep);
    let mut records = Vec::with_capacity(keep);
    for s in sums {
        let w: f64 = rng.sample(StandardNormal);
        payload.push(gamma * s + w);
        records.push(MechanismRecord { sensitivity: 2.0 * tau, scale_gamma: gamma, noise_std: 1.0 });
    }
    Transcript { server_id, payload, records, protocol: ProtocolTag::III }
}

/// Aggregated Procedure-III test. `nu` is the null second moment
/// n gamma^2 + 1; normalization is (n gamma^2 v 1).
pub fn test_iii(transcripts: &[Transcript], kappa: f64, nu: f64, n_gamma_sq: f64) -> TestOutcome {
    let keep = transcripts[0].payload.len();
    assert!(transcripts.iter().all(|t| t.payload.len() == keep));
    let m = transcripts.len() as f64;
    let mut acc = 0.0;
    for t in 0..keep {
        let sum: f64 = transcripts.iter().map(|tr| tr.payload[t]).sum();
        let agg = sum / m.sqrt();
        acc += agg * agg - nu;
    }
    let statistic = acc / (keep as f64).sqrt() / n_gamma_sq.max(1.0);
    TestOutcome::new(statistic, kappa, ProtocolTag::III)
}

// ---------------------------------------------------------------------------
// End-to-end replications and calibration

/// Precomputed per-protocol context reused across replications.
#[derive(Debug, Clone)]
pub enum RunContext {
    Classical,
    I { tau_set: Vec<f64>, budget: PrivacyBudget, gammas: Vec<f64> },
    II { assignment: Assignment, gamma: f64, tau: f64 },
    III { k_l: usize, gamma: f64, tau: f64 },
}

impl RunContext {
    /// Builds the standard (non-adaptive) context for a protocol at
    /// resolution `l_max` with the full budget.
    pub fn build(tag_: ProtocolTag, cfg: &ModelConfig, l_max: u32) -> RunContext {
        match tag_ {
            ProtocolTag::Classical => RunContext::Classical,
            ProtocolTag::I => {
                let tau_set = thresholds_t_l(
                    l_max, cfg.n, cfg.sigma, cfg.r, cfg.total_n(), cfg.s, cfg.q,
                );
                let budget = PrivacyBudget {
                    epsilon: cfg.epsilon,
                    delta: cfg.delta,
                    components: tau_set.len(),
                };
                let gammas = tau_set
                    .iter()
                    .map(|&tau| {
                        let d_tau = lipschitz_constant(
                            cfg.n, l_max, tau, cfg.total_n(), cfg.kappa_tilde,
                        );
                        crate::privacy::gamma_scale(d_tau, &budget)
                    })
                    .collect();
                RunContext::I { tau_set, budget, gammas }
            }
            ProtocolTag::II => {
                let assignment = partition_servers(cfg.m, l_max, cfg.n, cfg.epsilon);
                let tau = tau_clip(cfg);
                let gamma = gamma_ii(cfg.epsilon, cfg.delta, assignment.k_l, tau);
                RunContext::II { assignment, gamma, tau }
            }
            ProtocolTag::III => {
                let k_l = k_cap(cfg.n, cfg.epsilon, l_max);
                let tau = tau_clip(cfg);
                let gamma = gamma_iii(cfg.epsilon, cfg.delta, k_l, cfg.total_n(), tau);
                RunContext::III { k_l, gamma, tau }
            }
            ProtocolTag::AdaptiveLocal | ProtocolTag::AdaptiveShared => {
                panic!("adaptive protocols are driven by the adaptive module")
            }
        }
    }
}

/// Raw outcome of one replication, before thresholding: either a ready
/// statistic, or (for Procedure II) the aggregate Q awaiting a centering
/// choice.
#[derive(Debug, Clone, Copy)]
pub enum RawStat {
    Ready(f64),
    QSum { q: f64, d: usize },
}

impl RawStat {
    pub fn statistic(self, eta: f64) -> f64 {
        match self {
            RawStat::Ready(v) => v,
            RawStat::QSum { q, d } => stat_ii_from_q(q, d, eta),
        }
    }
}

/// Runs one full replication of a protocol under signal `f` and returns
/// the raw aggregate. Data, mechanism noise, symmetrization draws, and
/// the shared rotation all come from substreams of (`seed`, `rep`), so
/// replications are independent and order-insensitive.
pub fn run_replication(
    tag_: ProtocolTag,
    cfg: &ModelConfig,
    l_max: u32,
    ctx: &RunContext,
    f: &Signal,
    seed: u64,
    rep: u64,
) -> RawStat {
    let data_seed = derive_seed(seed, &[tag::DATA, rep]);
    let data = sample_data(f, cfg, l_max, data_seed);
    raw_from_data(tag_, cfg, l_max, ctx, &data, seed, rep)
}

/// As [`run_replication`] but on externally supplied data (used for
/// paired-seed comparisons).
pub fn raw_from_data(
    tag_: ProtocolTag,
    cfg: &ModelConfig,
    l_max: u32,
    ctx: &RunContext,
    data: &DistributedData,
    seed: u64,
    rep: u64,
) -> RawStat {
    match (tag_, ctx) {
        (ProtocolTag::Classical, RunContext::Classical) => {
            RawStat::Ready(pooled_classical_stat(data, cfg.sigma))
        }
        (ProtocolTag::I, RunContext::I { tau_set, budget, gammas }) => {
            let transcripts: Vec<Transcript> = data
                .servers
                .iter()
                .enumerate()
                .map(|(j, block)| {
                    let mut rng = substream(seed, &[tag::NOISE, tag_.id(), rep, j as u64]);
                    transcript_i(j, block, l_max, tau_set, budget, cfg, &mut rng)
                })
                .collect();
            // kappa enters later; only the statistic matters here
            let out = test_i(&transcripts, tau_set.len(), f64::INFINITY, gammas);
            RawStat::Ready(out.statistic)
        }
        (ProtocolTag::II, RunContext::II { assignment, gamma, tau }) => {
            let transcripts: Vec<Transcript> = data
                .servers
                .iter()
                .enumerate()
                .map(|(j, block)| {
                    let mut rng = substream(seed, &[tag::NOISE, tag_.id(), rep, j as u64]);
                    transcript_ii(j, block, assignment, *gamma, cfg.sigma, *tau, &mut rng)
                })
                .collect();
            RawStat::QSum {
                q: q_sum_ii(&transcripts, assignment),
                d: assignment.sets.len(),
            }
        }
        (ProtocolTag::III, RunContext::III { k_l, gamma, tau }) => {
            let rot_seed = derive_seed(seed, &[tag::ROTATION, rep]);
            let shared = haar_rotation(dimension(l_max), rot_seed);
            let transcripts: Vec<Transcript> = data
                .servers
                .iter()
                .enumerate()
                .map(|(j, block)| {
                    let mut rng = substream(seed, &[tag::NOISE, tag_.id(), rep, j as u64]);
                    transcript_iii(j, block, &shared, *k_l, *gamma, cfg.sigma, *tau, &mut rng)
                })
                .collect();
            let nu = cfg.n as f64 * gamma * gamma + 1.0;
            let out = test_iii(&transcripts, f64::INFINITY, nu, cfg.n as f64 * gamma * gamma);
            RawStat::Ready(out.statistic)
        }
        _ => panic!("protocol tag does not match run context"),
    }
}

/// Monte Carlo critical value and (for Procedure II) centering estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa: f64,
    /// Centering actually used by Procedure II: the estimated exact null
    /// second moment of the aggregated coordinate, minus 1.
    pub eta_used: Option<f64>,
    /// The closed-form centering n eps^2 / (4 K_L tau^2), recorded for
    /// comparison.
    pub eta_formula: Option<f64>,
}

/// Empirical upper quantile used for critical values: the order statistic
/// at index ceil((1 - alpha) reps), clamped into range. alpha = 1 yields
/// the sample minimum.
pub fn upper_quantile(sorted: &[f64], alpha: f64) -> f64 {
    let reps = sorted.len();
    let idx = ((1.0 - alpha) * reps as f64).ceil() as usize;
    sorted[idx.min(reps - 1)]
}

/// Simulates the protocol under the null `reps` times and returns the
/// empirical (1 - alpha) quantile of the statistic as the critical value.
pub fn calibrate_threshold(
    tag_: ProtocolTag,
    cfg: &ModelConfig,
    l_max: u32,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Calibration {
    assert!(reps >= 1, "calibration needs at least one replication");
    let ctx = RunContext::build(tag_, cfg, l_max);
    let cal_seed = derive_seed(seed, &[tag::CALIBRATE, tag_.id()]);
    let raws: Vec<RawStat> = crate::harness::par_map_reps(reps, |rep| {
        run_replication(tag_, cfg, l_max, &ctx, &Signal::zero(), cal_seed, rep)
    });
    let (eta_used, eta_formula) = match &ctx {
        RunContext::II { assignment, tau, .. } => {
            let d = assignment.sets.len() as f64;
            let second_moment: f64 = raws
                .iter()
                .map(|r| match r {
                    RawStat::QSum { q, .. } => q / d,
                    RawStat::Ready(_) => unreachable!(),
                })
                .sum::<f64>()
                / reps as f64;
            (
                Some(second_moment - 1.0),
                Some(eta_formula(cfg.n, cfg.epsilon, assignment.k_l, *tau)),
            )
        }
        _ => (None, None),
    };
    let eta = eta_used.unwrap_or(0.0);
    let mut stats: Vec<f64> = raws.iter().map(|r| r.statistic(eta)).collect();
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Calibration { kappa: upper_quantile(&stats, alpha), eta_used, eta_formula }
}
