//! The seven subcommands. Each takes the parsed raw config, validates
//! its key set, runs the corresponding library routine, and persists a
//! CSV table plus the JSON sidecar.

use std::path::Path;

use fedpriv_core::adaptive::{
    budget_consumed, calibrate_adaptive, resolution_grid, run_adaptive_replication,
    AdaptiveContext,
};
use fedpriv_core::harness::{
    calibrate_all, compare_protocols, detection_boundary, estimate_risk,
};
use fedpriv_core::protocol::{calibrate_threshold, ProtocolTag};
use fedpriv_core::rates::{classify_regime, optimal_resolution, rate_curve};
use fedpriv_core::rng::{derive_seed, tag};
use fedpriv_core::seq::{gen_signal_single_level, Spread};
use fedpriv_core::ModelConfig;

use crate::config::{ConfigError, Raw, MODEL_KEYS};
use crate::output::{cell, persist, run_id, write_table};

/// Config errors map to exit code 2, runtime failures to 3.
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        CliError::Config(e.0)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(format!("i/o failure: {e}"))
    }
}

pub const COMMANDS: &[&str] = &[
    "rates", "regimes", "calibrate", "risk", "boundary", "compare", "adaptive",
];

pub fn dispatch(command: &str, raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    match command {
        "rates" => rates(raw, out, seed),
        "regimes" => regimes(raw, out, seed),
        "calibrate" => calibrate(raw, out, seed),
        "risk" => risk(raw, out, seed),
        "boundary" => boundary(raw, out, seed),
        "compare" => compare(raw, out, seed),
        "adaptive" => adaptive(raw, out, seed),
        other => Err(CliError::Config(format!(
            "unknown command `{other}`; expected one of {}",
            COMMANDS.join("|")
        ))),
    }
}

fn keys(extra: &[&'static str]) -> Vec<&'static str> {
    let mut v = MODEL_KEYS.to_vec();
    v.extend_from_slice(extra);
    v
}

fn parse_protocol(name: &str) -> Result<ProtocolTag, CliError> {
    match name {
        "classical" => Ok(ProtocolTag::Classical),
        "t1" => Ok(ProtocolTag::I),
        "t2" => Ok(ProtocolTag::II),
        "t3" => Ok(ProtocolTag::III),
        "adaptive_local" => Ok(ProtocolTag::AdaptiveLocal),
        "adaptive_shared" => Ok(ProtocolTag::AdaptiveShared),
        other => Err(CliError::Config(format!(
            "unknown protocol `{other}`; expected classical|t1|t2|t3|adaptive_local|adaptive_shared"
        ))),
    }
}

fn parse_spread(name: &str) -> Result<Spread, CliError> {
    match name {
        "spike" => Ok(Spread::Spike),
        "uniform" => Ok(Spread::Uniform),
        other => Err(CliError::Config(format!(
            "unknown spread `{other}`; expected spike|uniform"
        ))),
    }
}

/// Resolution level for a command: explicit `level` key or the
/// rate-optimal one for the protocol's randomness class.
fn level_for(raw: &Raw, cfg: &ModelConfig, shared: bool) -> Result<u32, CliError> {
    match raw.u32_opt("level", None)? {
        Some(l) if l >= 1 => Ok(l),
        Some(_) => Err(CliError::Config("field `level` must be at least 1".into())),
        None => Ok(optimal_resolution(cfg, shared)),
    }
}

fn eps_grid(raw: &Raw, cfg: &ModelConfig) -> Result<Vec<f64>, CliError> {
    let n_total = cfg.total_n() as f64;
    let eps_min = raw.f64_opt("eps_min", 2.0 / n_total)?;
    let eps_max = raw.f64_opt("eps_max", 2.0)?;
    let points = raw.usize_opt("eps_points", 50)?;
    if !(eps_min > 1.0 / n_total) {
        return Err(CliError::Config(format!(
            "eps_min must exceed 1/(mn) = {}; privacy below that is vacuous at this sample size",
            1.0 / n_total
        )));
    }
    if !(eps_max > eps_min) || points < 2 {
        return Err(CliError::Config(
            "need eps_max > eps_min and eps_points >= 2".into(),
        ));
    }
    let (lo, hi) = (eps_min.ln(), eps_max.ln());
    Ok((0..points)
        .map(|i| (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp())
        .collect())
}

const RATE_HEADER: &[&str] = &["epsilon", "rho_squared", "regime_id", "shared"];

fn rate_rows(cfg: &ModelConfig, grid: &[f64], shared: bool) -> Vec<Vec<String>> {
    rate_curve(cfg, grid, shared)
        .into_iter()
        .map(|pt| {
            vec![
                cell(pt.epsilon),
                cell(pt.rho_squared),
                pt.regime_id.to_string(),
                pt.shared.to_string(),
            ]
        })
        .collect()
}

fn rates(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&["mode", "eps_min", "eps_max", "eps_points", "bundle"]))?;
    let cfg = raw.model()?;
    let grid = eps_grid(raw, &cfg)?;
    let mode = raw.str_opt("mode", "local");
    let shared_flags: &[bool] = match mode.as_str() {
        "local" => &[false],
        "shared" => &[true],
        "both" => &[false, true],
        other => {
            return Err(CliError::Config(format!(
                "mode must be local|shared|both, got `{other}`"
            )))
        }
    };
    let config_json = raw.to_json();
    let id = run_id("rates", &config_json, seed);
    if raw.bool_opt("bundle", false)? {
        return emit_rate_bundle(&cfg, &grid, out, &config_json, &id).map_err(Into::into);
    }
    let mut rows = Vec::new();
    for &shared in shared_flags {
        rows.extend(rate_rows(&cfg, &grid, shared));
    }
    persist(out, "rates", &config_json, &id, RATE_HEADER, &rows)?;
    Ok(())
}

/// The 16-curve bundle behind `rates` with `bundle=true`: two sample
/// splits, four smoothness levels, local and shared randomness, plus a
/// gnuplot script that plots them on one grid.
fn emit_rate_bundle(
    cfg: &ModelConfig,
    grid: &[f64],
    out: &Path,
    config_json: &serde_json::Value,
    id: &str,
) -> Result<(), std::io::Error> {
    std::fs::create_dir_all(out)?;
    // Two sample splits with equal-order total sample size: balanced, and
    // few servers with larger local samples (where privacy costs less).
    let splits = [(5usize, 5usize), (15, 2)]; // (n, m)
    let smoothness = [0.2f64, 0.5, 1.0, 3.0];
    let mut files = Vec::new();
    for &(n, m) in &splits {
        for &s in &smoothness {
            for shared in [false, true] {
                let mut c = cfg.clone();
                c.n = n;
                c.m = m;
                c.s = s;
                let mode = if shared { "shared" } else { "local" };
                let name = format!("rates_n{n}_m{m}_s{s}_{mode}");
                let path = out.join(format!("{name}.csv"));
                let mut file = std::fs::File::create(&path)?;
                write_table(
                    &mut file,
                    &name,
                    config_json,
                    id,
                    RATE_HEADER,
                    &rate_rows(&c, grid, shared),
                )?;
                files.push(name);
            }
        }
    }
    let mut script = String::from(
        "set logscale xy\nset xlabel 'epsilon'\nset ylabel 'rho^2'\nset datafile separator ','\nset key outside\nplot \\\n",
    );
    for (i, name) in files.iter().enumerate() {
        let sep = if i + 1 < files.len() { ", \\\n" } else { "\n" };
        script.push_str(&format!(
            "  '{name}.csv' using 1:2 with lines title '{name}'{sep}"
        ));
    }
    std::fs::write(out.join("rates_bundle.gnuplot"), script)?;
    std::fs::write(
        out.join("rates.json"),
        serde_json::to_string_pretty(config_json)? + "\n",
    )?;
    Ok(())
}

fn regimes(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&["local", "shared", "eps_min", "eps_max", "eps_points"]))?;
    let cfg = raw.model()?;
    let grid = eps_grid(raw, &cfg)?;
    let want_local = raw.bool_opt("local", true)?;
    let want_shared = raw.bool_opt("shared", true)?;
    if !want_local && !want_shared {
        return Err(CliError::Config(
            "at least one of local/shared must be true".into(),
        ));
    }
    let mut rows = Vec::new();
    for shared in [false, true] {
        if (shared && !want_shared) || (!shared && !want_local) {
            continue;
        }
        for &eps in &grid {
            let mut c = cfg.clone();
            c.epsilon = eps;
            let rep = classify_regime(&c, shared);
            rows.push(vec![
                cell(eps),
                rep.regime_id.to_string(),
                rep.dominant_term.tag().to_string(),
                cell(rep.branch_value),
                cell(rep.rho_squared),
                shared.to_string(),
            ]);
        }
    }
    let config_json = raw.to_json();
    let id = run_id("regimes", &config_json, seed);
    persist(
        out,
        "regimes",
        &config_json,
        &id,
        &["epsilon", "regime_id", "dominant_term", "branch_value", "rho_squared", "shared"],
        &rows,
    )?;
    Ok(())
}

fn adaptive_context(
    raw: &Raw,
    cfg: &ModelConfig,
    shared: bool,
) -> Result<AdaptiveContext, CliError> {
    if !raw.contains("s_min") || !raw.contains("s_max") {
        return Err(CliError::Config(
            "adaptive protocols require `s_min` and `s_max`".into(),
        ));
    }
    let s_min = raw.f64_req("s_min")?;
    let s_max = raw.f64_req("s_max")?;
    if !(s_min > 0.0 && s_max >= s_min) {
        return Err(CliError::Config("need 0 < s_min <= s_max".into()));
    }
    let grid = resolution_grid(cfg, s_min, s_max, shared);
    Ok(AdaptiveContext::build(cfg, grid))
}

fn calibrate(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&["protocol", "level", "cal_reps", "s_min", "s_max"]))?;
    let cfg = raw.model()?;
    let tag_ = parse_protocol(&raw.str_opt("protocol", "classical"))?;
    let cal_reps = raw.usize_opt("cal_reps", 2000)?;
    let shared = matches!(tag_, ProtocolTag::III | ProtocolTag::AdaptiveShared);
    let row = match tag_ {
        ProtocolTag::AdaptiveLocal | ProtocolTag::AdaptiveShared => {
            let ctx = adaptive_context(raw, &cfg, shared)?;
            let kappa = calibrate_adaptive(&cfg, &ctx, cfg.alpha, cal_reps, seed);
            vec![
                tag_.name().to_string(),
                ctx.grid.levels.iter().max().copied().unwrap_or(0).to_string(),
                cell(kappa),
                String::new(),
                String::new(),
                cal_reps.to_string(),
            ]
        }
        _ => {
            let level = level_for(raw, &cfg, shared)?;
            let cal = calibrate_threshold(tag_, &cfg, level, cfg.alpha, cal_reps, seed);
            vec![
                tag_.name().to_string(),
                level.to_string(),
                cell(cal.kappa),
                cal.eta_used.map(cell).unwrap_or_default(),
                cal.eta_formula.map(cell).unwrap_or_default(),
                cal_reps.to_string(),
            ]
        }
    };
    let config_json = raw.to_json();
    let id = run_id("calibrate", &config_json, seed);
    persist(
        out,
        "calibrate",
        &config_json,
        &id,
        &["protocol", "level", "kappa", "eta_used", "eta_formula", "cal_reps"],
        &[row],
    )?;
    Ok(())
}

fn risk(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&["protocol", "level", "rho", "spread", "reps", "cal_reps"]))?;
    let cfg = raw.model()?;
    let tag_ = parse_protocol(&raw.str_opt("protocol", "classical"))?;
    if matches!(tag_, ProtocolTag::AdaptiveLocal | ProtocolTag::AdaptiveShared) {
        return Err(CliError::Config(
            "risk supports the fixed-resolution protocols; use the adaptive command".into(),
        ));
    }
    let shared = matches!(tag_, ProtocolTag::III);
    let level = level_for(raw, &cfg, shared)?;
    let rho = raw.f64_req("rho")?;
    let spread = parse_spread(&raw.str_opt("spread", "uniform"))?;
    let reps = raw.usize_opt("reps", 1000)?;
    let cal_reps = raw.usize_opt("cal_reps", 2000)?;
    let cal = calibrate_threshold(tag_, &cfg, level, cfg.alpha, cal_reps, seed);
    let signal = gen_signal_single_level(level, rho, spread, seed);
    let est = estimate_risk(tag_, &cfg, level, &cal, &signal, reps, seed);
    let config_json = raw.to_json();
    let id = run_id("risk", &config_json, seed);
    persist(
        out,
        "risk",
        &config_json,
        &id,
        &["protocol", "level", "rho", "type_i", "type_ii", "se_i", "se_ii", "reps", "config_hash"],
        &[vec![
            tag_.name().to_string(),
            level.to_string(),
            cell(rho),
            cell(est.type_i),
            cell(est.type_ii),
            cell(est.se_i),
            cell(est.se_ii),
            est.reps.to_string(),
            est.config_hash,
        ]],
    )?;
    Ok(())
}

fn boundary(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&[
        "protocol", "level", "target_power", "tol_rel", "reps_per_probe", "cal_reps", "spread",
    ]))?;
    let cfg = raw.model()?;
    let tag_ = parse_protocol(&raw.str_opt("protocol", "classical"))?;
    if matches!(tag_, ProtocolTag::AdaptiveLocal | ProtocolTag::AdaptiveShared) {
        return Err(CliError::Config(
            "boundary supports the fixed-resolution protocols".into(),
        ));
    }
    let shared = matches!(tag_, ProtocolTag::III);
    let level = level_for(raw, &cfg, shared)?;
    let target_power = raw.f64_opt("target_power", 0.5)?;
    if !(target_power > cfg.alpha && target_power < 1.0) {
        return Err(CliError::Config("target_power must lie in (alpha, 1)".into()));
    }
    let tol_rel = raw.f64_opt("tol_rel", 0.05)?;
    if !(tol_rel > 0.0) {
        return Err(CliError::Config("tol_rel must be positive".into()));
    }
    let reps_per_probe = raw.usize_opt("reps_per_probe", 1000)?;
    let cal_reps = raw.usize_opt("cal_reps", 2000)?;
    let spread = parse_spread(&raw.str_opt("spread", "uniform"))?;
    let cal = calibrate_threshold(tag_, &cfg, level, cfg.alpha, cal_reps, seed);
    let est = detection_boundary(
        tag_, &cfg, level, &cal, spread, target_power, reps_per_probe, tol_rel, seed,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let config_json = raw.to_json();
    let id = run_id("boundary", &config_json, seed);
    persist(
        out,
        "boundary",
        &config_json,
        &id,
        &["protocol", "level", "target_power", "rho_star", "bracket_lo", "bracket_hi", "iterations"],
        &[vec![
            tag_.name().to_string(),
            level.to_string(),
            cell(est.target_power),
            cell(est.rho_star),
            cell(est.bracket.0),
            cell(est.bracket.1),
            est.iterations.to_string(),
        ]],
    )?;
    Ok(())
}

fn compare(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&["protocols", "level", "rho_grid", "spread", "reps", "cal_reps"]))?;
    let cfg = raw.model()?;
    let tags: Vec<ProtocolTag> = match raw.str_opt("protocols", "").as_str() {
        "" => vec![ProtocolTag::Classical, ProtocolTag::I, ProtocolTag::II, ProtocolTag::III],
        list => list
            .split(',')
            .map(|name| parse_protocol(name.trim()))
            .collect::<Result<_, _>>()?,
    };
    if tags
        .iter()
        .any(|t| matches!(t, ProtocolTag::AdaptiveLocal | ProtocolTag::AdaptiveShared))
    {
        return Err(CliError::Config(
            "compare supports the fixed-resolution protocols".into(),
        ));
    }
    let level = level_for(raw, &cfg, false)?;
    let rho_grid = raw
        .f64_list("rho_grid")?
        .unwrap_or_else(|| vec![0.0, 0.25, 0.5, 1.0, 2.0]);
    if rho_grid.iter().any(|&r| r < 0.0) {
        return Err(CliError::Config("rho_grid entries must be nonnegative".into()));
    }
    let spread = parse_spread(&raw.str_opt("spread", "uniform"))?;
    let reps = raw.usize_opt("reps", 1000)?;
    let cal_reps = raw.usize_opt("cal_reps", 2000)?;
    let cals = calibrate_all(&tags, &cfg, level, cfg.alpha, cal_reps, seed);
    let table = compare_protocols(&tags, &cfg, level, &cals, spread, &rho_grid, reps, seed);
    let mut header: Vec<String> = vec!["rho".into()];
    for t in &tags {
        header.push(format!("power_{}", t.name()));
        header.push(format!("se_{}", t.name()));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> = table
        .into_iter()
        .map(|row| {
            let mut cells = vec![cell(row.rho)];
            for (p, s) in row.power.iter().zip(&row.se) {
                cells.push(cell(*p));
                cells.push(cell(*s));
            }
            cells
        })
        .collect();
    let config_json = raw.to_json();
    let id = run_id("compare", &config_json, seed);
    persist(out, "compare", &config_json, &id, &header_refs, &rows)?;
    Ok(())
}

fn adaptive(raw: &Raw, out: &Path, seed: u64) -> Result<(), CliError> {
    raw.check_keys(&keys(&["shared", "s_min", "s_max", "rho", "spread", "reps", "cal_reps"]))?;
    let cfg = raw.model()?;
    let shared = raw.bool_opt("shared", false)?;
    let ctx = adaptive_context(raw, &cfg, shared)?;
    let rho = raw.f64_req("rho")?;
    let spread = parse_spread(&raw.str_opt("spread", "uniform"))?;
    let reps = raw.usize_opt("reps", 500)?;
    let cal_reps = raw.usize_opt("cal_reps", 2000)?;
    let kappa = calibrate_adaptive(&cfg, &ctx, cfg.alpha, cal_reps, seed);
    let level = ctx.grid.levels.iter().max().copied().unwrap_or(1);
    let signal = gen_signal_single_level(level, rho, spread, seed);
    let run_seed = derive_seed(seed, &[tag::AUDIT, ctx.tag().id()]);
    let stats: Vec<_> = fedpriv_core::harness::par_map_reps(reps, |rep| {
        run_adaptive_replication(&cfg, &ctx, &signal, run_seed, rep)
    });
    let rejections = stats.iter().filter(|s| s.statistic >= kappa).count();
    let (eps_used, delta_used) = budget_consumed(&ctx, &cfg);
    let rejecting_level = stats
        .iter()
        .find(|s| s.statistic >= kappa)
        .and_then(|s| s.best_level)
        .map(|l| l.to_string())
        .unwrap_or_else(|| "none".into());
    let config_json = raw.to_json();
    let id = run_id("adaptive", &config_json, seed);
    persist(
        out,
        "adaptive",
        &config_json,
        &id,
        &[
            "shared", "rho", "grid_size", "low_count", "high_count", "kappa",
            "rejection_rate", "rejecting_level", "eps_consumed", "delta_consumed", "reps",
        ],
        &[vec![
            shared.to_string(),
            cell(rho),
            ctx.grid.levels.len().to_string(),
            ctx.grid.low_set.len().to_string(),
            ctx.grid.high_set.len().to_string(),
            cell(kappa),
            cell(rejections as f64 / reps as f64),
            rejecting_level,
            cell(eps_used),
            cell(delta_used),
            reps.to_string(),
        ]],
    )?;
    Ok(())
}
