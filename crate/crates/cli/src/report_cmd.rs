//! `report <dir>`: turn run/sweep artifacts into plot-ready TSV files.
//!
//! Works on a single run directory (contains rounds.csv) or a sweep
//! directory (subdirectories with rounds.csv). Emits, into the given
//! directory:
//!   accuracy_curves.tsv column layout: run, round, test_acc, test_loss
//!   gamma_traj.tsv:      run, round, series, gamma  (series = layer name,
//!                        "_model", or the "_mean"/"_min"/"_max" summaries)
//!   param_hist.tsv:      run, bin_lo, bin_hi, count (bins shared by all runs)
//!   tau_vs_r.tsv:        run, alpha, mode, round, tau, r (oracle runs only)

use std::path::{Path, PathBuf};

use fedshrink_core::checkpoint::read_checkpoint;
use fedshrink_core::config::ExperimentConfig;
use fedshrink_core::report::{
    read_oracle_csv, read_rounds_csv, read_shrink_jsonl, OracleRow, RoundRow, ShrinkRow,
    CHECKPOINT_FILE, CONFIG_FILE, MODEL_LAYER, ORACLE_CSV, ROUNDS_CSV, SHRINK_JSONL,
};

use crate::CliError;

pub const ACCURACY_TSV: &str = "accuracy_curves.tsv";
pub const GAMMA_TSV: &str = "gamma_traj.tsv";
pub const HIST_TSV: &str = "param_hist.tsv";
pub const TAU_R_TSV: &str = "tau_vs_r.tsv";

const HIST_BINS: usize = 64;

struct RunData {
    label: String,
    rounds: Vec<RoundRow>,
    shrink: Vec<ShrinkRow>,
    oracle: Option<Vec<OracleRow>>,
    params: Vec<f64>,
    alpha: f64,
    mode: String,
}

fn discover_runs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.join(ROUNDS_CSV).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {}", dir.display(), e)))?
        {
            let path = entry
                .map_err(|e| CliError::Validation(e.to_string()))?
                .path();
            if path.is_dir() && path.join(ROUNDS_CSV).is_file() {
                runs.push(path);
            }
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: no run outputs found (expected {} here or in subdirectories)",
            dir.display(),
            ROUNDS_CSV
        )));
    }
    Ok(runs)
}

fn load_run(dir: &Path) -> Result<RunData, CliError> {
    let required = [ROUNDS_CSV, SHRINK_JSONL, CONFIG_FILE, CHECKPOINT_FILE];
    let missing: Vec<String> = required
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Validation(format!(
            "missing run artifacts: {}",
            missing.join(", ")
        )));
    }
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".to_string());
    let rounds = read_rounds_csv(&dir.join(ROUNDS_CSV)).map_err(|e| CliError::Validation(e.to_string()))?;
    let shrink = read_shrink_jsonl(&dir.join(SHRINK_JSONL)).map_err(|e| CliError::Validation(e.to_string()))?;
    let oracle = if dir.join(ORACLE_CSV).is_file() {
        Some(read_oracle_csv(&dir.join(ORACLE_CSV)).map_err(|e| CliError::Validation(e.to_string()))?)
    } else {
        None
    };
    let cfg_text = std::fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let cfg: ExperimentConfig = toml::from_str(&cfg_text)
        .map_err(|e| CliError::Validation(format!("{}: {}", dir.join(CONFIG_FILE).display(), e)))?;
    let model = read_checkpoint(&dir.join(CHECKPOINT_FILE))
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut params = Vec::with_capacity(model.num_params());
    for group in model.layers() {
        for t in &group.tensors {
            params.extend_from_slice(t.data());
        }
    }
    Ok(RunData {
        label,
        rounds,
        shrink,
        oracle,
        params,
        alpha: cfg.data.partition.alpha,
        mode: cfg.lws.mode.name().to_string(),
    })
}

fn write_accuracy_curves(runs: &[RunData], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("run\tround\ttest_acc\ttest_loss\n");
    for run in runs {
        for row in &run.rounds {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                run.label, row.round, row.test_acc, row.test_loss
            ));
        }
    }
    std::fs::write(path, out)
}

fn write_gamma_traj(runs: &[RunData], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("run\tround\tseries\tgamma\n");
    for run in runs {
        let max_round = run.shrink.iter().map(|r| r.round).max().unwrap_or(0);
        for round in 0..=max_round {
            let rows: Vec<&ShrinkRow> = run.shrink.iter().filter(|r| r.round == round).collect();
            if rows.is_empty() {
                continue;
            }
            let layer_gammas: Vec<f64> = rows
                .iter()
                .filter(|r| r.layer != MODEL_LAYER)
                .map(|r| r.gamma)
                .collect();
            for row in &rows {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\n",
                    run.label, round, row.layer, row.gamma
                ));
            }
            if !layer_gammas.is_empty() {
                let mean = layer_gammas.iter().sum::<f64>() / layer_gammas.len() as f64;
                let min = layer_gammas.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = layer_gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                out.push_str(&format!("{}\t{}\t_mean\t{}\n", run.label, round, mean));
                out.push_str(&format!("{}\t{}\t_min\t{}\n", run.label, round, min));
                out.push_str(&format!("{}\t{}\t_max\t{}\n", run.label, round, max));
            }
        }
    }
    std::fs::write(path, out)
}

fn write_param_hist(runs: &[RunData], path: &Path) -> std::io::Result<()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for run in runs {
        for &v in &run.params {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mut out = String::from("run\tbin_lo\tbin_hi\tcount\n");
    let width = (hi - lo) / HIST_BINS as f64;
    for run in runs {
        let mut counts = vec![0usize; HIST_BINS];
        for &v in &run.params {
            let idx = if width > 0.0 {
                (((v - lo) / width) as usize).min(HIST_BINS - 1)
            } else {
                0
            };
            counts[idx] += 1;
        }
        for (i, count) in counts.iter().enumerate() {
            let bin_lo = lo + width * i as f64;
            let bin_hi = if i + 1 == HIST_BINS { hi } else { lo + width * (i + 1) as f64 };
            out.push_str(&format!("{}\t{}\t{}\t{}\n", run.label, bin_lo, bin_hi, count));
        }
    }
    std::fs::write(path, out)
}

/// One row per run (heterogeneity level x seed): tau and oracle r averaged
/// over that run's rounds. Per-round detail stays in each run's oracle.csv.
fn write_tau_vs_r(runs: &[RunData], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("run\talpha\tmode\trounds\ttau\tr\n");
    for run in runs {
        if let Some(oracle) = &run.oracle {
            if oracle.is_empty() {
                continue;
            }
            let n = oracle.len() as f64;
            let tau = oracle.iter().map(|o| o.tau).sum::<f64>() / n;
            let r = oracle.iter().map(|o| o.r).sum::<f64>() / n;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                run.label,
                run.alpha,
                run.mode,
                oracle.len(),
                tau,
                r
            ));
        }
    }
    std::fs::write(path, out)
}

/// The `report` subcommand. Returns the paths written.
pub fn cmd_report(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let run_dirs = discover_runs(dir)?;
    let runs: Vec<RunData> = run_dirs.iter().map(|d| load_run(d)).collect::<Result<_, _>>()?;

    let outputs = [
        (ACCURACY_TSV, write_accuracy_curves as fn(&[RunData], &Path) -> std::io::Result<()>),
        (GAMMA_TSV, write_gamma_traj),
        (HIST_TSV, write_param_hist),
        (TAU_R_TSV, write_tau_vs_r),
    ];
    let mut written = Vec::new();
    for (name, write) in outputs {
        let path = dir.join(name);
        write(&runs, &path)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))?;
        written.push(path);
    }
    Ok(written)
}
