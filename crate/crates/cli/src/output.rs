//! Result persistence: CSV tables with a run-identifying header comment
//! and a JSON sidecar holding the raw config for replay.

use std::io::Write;
use std::path::{Path, PathBuf};

use fedpriv_core::rng::derive_seed;

/// Deterministic run id from the command, raw config text, and seed.
pub fn run_id(command: &str, config_json: &serde_json::Value, seed: u64) -> String {
    let mut h = seed ^ 0x9d2c5680u64;
    for b in command.bytes() {
        h = derive_seed(h, &[b as u64]);
    }
    for b in config_json.to_string().bytes() {
        h = derive_seed(h, &[b as u64]);
    }
    format!("{h:016x}")
}

/// Writes `<command>.csv` (comment line with run id and config, then a
/// header row, then data rows) and the sidecar `<command>.json`.
pub fn persist(
    dir: &Path,
    command: &str,
    config_json: &serde_json::Value,
    id: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{command}.csv"));
    let mut out = std::fs::File::create(&csv_path)?;
    write_table(&mut out, command, config_json, id, header, rows)?;
    let json_path = dir.join(format!("{command}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(config_json)? + "\n")?;
    Ok((csv_path, json_path))
}

/// Writes one CSV table to an arbitrary writer (also used for the rate
/// curve bundle, which produces many files per run).
pub fn write_table(
    out: &mut impl Write,
    command: &str,
    config_json: &serde_json::Value,
    id: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> std::io::Result<()> {
    writeln!(out, "# run_id={id} command={command} config={config_json}")?;
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        assert_eq!(row.len(), header.len(), "row width must match header");
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Canonical cell rendering for floats (shortest roundtrip form, so
/// output bytes are reproducible).
pub fn cell(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}
