//! Run artifacts: the per-round CSV, the per-layer JSON-lines file, and the
//! oracle CSV. Schemas are fixed; writers are byte-deterministic given the
//! same records.
//!
//! rounds.csv columns:
//!   round,test_acc,test_loss,gamma_mean,gamma_min,gamma_max,tau_mean,bound,agg_time_s
//! where the gamma/tau columns summarize the per-layer values and
//! `agg_time_s` is the aggregate+shrink wall time, quantized to 0.1 s so the
//! file stays byte-stable across reruns (full-resolution timings live in the
//! in-memory records).
//!
//! shrink.jsonl: one record per (round, layer) with fields
//! {round, layer, gamma, tau, w_norm, g_norm}; the model-wise aggregate is
//! included as pseudo-layer "_model".

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_checkpoint;
use crate::error::{Error, Result};
use crate::fl::{ExperimentResult, RoundRecord};

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SHRINK_JSONL: &str = "shrink.jsonl";
pub const ORACLE_CSV: &str = "oracle.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

pub const ROUNDS_CSV_HEADER: &str =
    "round,test_acc,test_loss,gamma_mean,gamma_min,gamma_max,tau_mean,bound,agg_time_s";

pub fn write_rounds_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", ROUNDS_CSV_HEADER)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.1}",
            r.round,
            r.test_accuracy,
            r.test_loss,
            r.shrink.gamma_mean(),
            r.shrink.gamma_min(),
            r.shrink.gamma_max(),
            r.shrink.tau_mean(),
            r.shrink.bound,
            r.agg_seconds + r.lws_seconds,
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One parsed rounds.csv row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub test_acc: f64,
    pub test_loss: f64,
    pub gamma_mean: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub tau_mean: f64,
    pub bound: f64,
    pub agg_time_s: f64,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::contract(format!("{}: no rounds", path.display())));
    }
    Ok(rows)
}

/// One shrink.jsonl record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRow {
    pub round: usize,
    pub layer: String,
    pub gamma: f64,
    pub tau: f64,
    pub w_norm: f64,
    pub g_norm: f64,
}

/// Pseudo-layer name carrying the model-wise aggregates.
pub const MODEL_LAYER: &str = "_model";

pub fn write_shrink_jsonl(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        for l in &r.shrink.layers {
            let row = ShrinkRow {
                round: r.round,
                layer: l.layer.clone(),
                gamma: l.gamma,
                tau: l.tau,
                w_norm: l.w_norm,
                g_norm: l.g_norm,
            };
            writeln!(w, "{}", serde_json::to_string(&row).expect("plain struct serializes"))?;
        }
        let model_row = ShrinkRow {
            round: r.round,
            layer: MODEL_LAYER.to_string(),
            gamma: r.shrink.model_gamma,
            tau: r.shrink.model_tau,
            w_norm: r.shrink.model_w_norm,
            g_norm: r.shrink.model_g_norm,
        };
        writeln!(w, "{}", serde_json::to_string(&model_row).expect("plain struct serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_shrink_jsonl(path: &Path) -> Result<Vec<ShrinkRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ShrinkRow = serde_json::from_str(line)
            .map_err(|e| Error::contract(format!("{}:{}: {}", path.display(), i + 1, e)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub const ORACLE_CSV_HEADER: &str = "round,gamma_star,r,tau";

/// Per-round oracle results; written only when the oracle ran.
pub fn write_oracle_csv(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", ORACLE_CSV_HEADER)?;
    for r in records {
        if let (Some(g), Some(ratio)) = (r.shrink.oracle_gamma, r.shrink.oracle_r) {
            writeln!(w, "{},{},{},{}", r.round, g, ratio, r.shrink.model_tau)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct OracleRow {
    pub round: usize,
    pub gamma_star: f64,
    pub r: f64,
    pub tau: f64,
}

pub fn read_oracle_csv(path: &Path) -> Result<Vec<OracleRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Write rounds.csv, shrink.jsonl, the final checkpoint, and (when the
/// oracle ran) oracle.csv into `dir`.
pub fn write_run_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rounds_csv(&result.rounds, &dir.join(ROUNDS_CSV))?;
    write_shrink_jsonl(&result.rounds, &dir.join(SHRINK_JSONL))?;
    if result.rounds.iter().any(|r| r.shrink.oracle_gamma.is_some()) {
        write_oracle_csv(&result.rounds, &dir.join(ORACLE_CSV))?;
    }
    write_checkpoint(&result.final_model, &dir.join(CHECKPOINT_FILE))?;
    Ok(())
}
