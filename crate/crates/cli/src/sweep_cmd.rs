//! `sweep <spec>`: run a base config across one axis and a seed list.
//!
//! Each (value, seed) pair is an independent run in its own directory under
//! the sweep output dir. Failed cells are recorded as error sentinel rows in
//! cells.csv and the sweep carries on; summary.csv aggregates final accuracy
//! per value over the seeds that completed.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use fedshrink_core::config::ExperimentConfig;
use fedshrink_core::lws::LwsMode;

use crate::run_cmd::{apply_overrides, execute_run};
use crate::{CliError, GlobalOpts};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const CELLS_CSV: &str = "cells.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Beta,
    Alpha,
    Clients,
    LocalEpochs,
    Participation,
    Mode,
}

impl SweepAxis {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "beta" => Ok(SweepAxis::Beta),
            "alpha" => Ok(SweepAxis::Alpha),
            "clients" => Ok(SweepAxis::Clients),
            "local_epochs" => Ok(SweepAxis::LocalEpochs),
            "participation" => Ok(SweepAxis::Participation),
            "mode" => Ok(SweepAxis::Mode),
            other => Err(CliError::Validation(format!(
                "axis: unknown value {:?} (expected beta|alpha|clients|local_epochs|participation|mode)",
                other
            ))),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            SweepAxis::Beta => "beta",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Clients => "clients",
            SweepAxis::LocalEpochs => "local_epochs",
            SweepAxis::Participation => "participation",
            SweepAxis::Mode => "mode",
        }
    }
}

/// One point on the sweep axis, normalized from the TOML value.
#[derive(Debug, Clone, PartialEq)]
enum AxisValue {
    Float(f64),
    Count(usize),
    Mode(LwsMode),
}

impl AxisValue {
    fn label(&self) -> String {
        match self {
            AxisValue::Float(v) => format!("{}", v),
            AxisValue::Count(v) => format!("{}", v),
            AxisValue::Mode(m) => m.name().to_string(),
        }
    }
}

fn coerce_value(axis: SweepAxis, raw: &toml::Value) -> Result<AxisValue, CliError> {
    let bad = || {
        CliError::Validation(format!(
            "values: {:?} is not valid for axis {}",
            raw,
            axis.name()
        ))
    };
    match axis {
        SweepAxis::Beta | SweepAxis::Alpha | SweepAxis::Participation => match raw {
            toml::Value::Float(v) => Ok(AxisValue::Float(*v)),
            toml::Value::Integer(v) => Ok(AxisValue::Float(*v as f64)),
            _ => Err(bad()),
        },
        SweepAxis::Clients | SweepAxis::LocalEpochs => match raw {
            toml::Value::Integer(v) if *v >= 0 => Ok(AxisValue::Count(*v as usize)),
            _ => Err(bad()),
        },
        SweepAxis::Mode => match raw {
            toml::Value::String(s) => match s.as_str() {
                "off" => Ok(AxisValue::Mode(LwsMode::Off)),
                "model_wise" => Ok(AxisValue::Mode(LwsMode::ModelWise)),
                "layer_wise" => Ok(AxisValue::Mode(LwsMode::LayerWise)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        },
    }
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: SweepAxis, value: &AxisValue) {
    match (axis, value) {
        (SweepAxis::Beta, AxisValue::Float(v)) => cfg.lws.beta = *v,
        (SweepAxis::Alpha, AxisValue::Float(v)) => cfg.data.partition.alpha = *v,
        (SweepAxis::Participation, AxisValue::Float(v)) => cfg.fl.participation_ratio = *v,
        (SweepAxis::Clients, AxisValue::Count(v)) => cfg.fl.num_clients = *v,
        (SweepAxis::LocalEpochs, AxisValue::Count(v)) => cfg.fl.local_epochs = *v,
        (SweepAxis::Mode, AxisValue::Mode(m)) => cfg.lws.mode = *m,
        _ => unreachable!("coerce_value enforces the pairing"),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpecFile {
    axis: String,
    values: Vec<toml::Value>,
    seeds: Vec<u64>,
    base: ExperimentConfig,
}

struct Cell {
    value_label: String,
    seed: u64,
    cfg: ExperimentConfig,
}

struct CellOutcome {
    value_label: String,
    seed: u64,
    final_acc: Option<f64>,
    error: Option<String>,
}

fn build_cells(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[AxisValue],
    seeds: &[u64],
    sweep_dir: &Path,
) -> Vec<Cell> {
    let mut cells = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut cfg = base.clone();
            apply_axis(&mut cfg, axis, value);
            let cell_opts = GlobalOpts {
                seed_override: Some(seed),
                output_dir: Some(sweep_dir.to_path_buf()),
                threads: 1,
            };
            apply_overrides(&mut cfg, &cell_opts);
            cfg.run_label = format!("{}={}_seed={}", axis.name(), value.label(), seed);
            cells.push(Cell {
                value_label: value.label(),
                seed,
                cfg,
            });
        }
    }
    cells
}

fn run_cells(cells: &[Cell], workers: usize) -> Vec<CellOutcome> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CellOutcome>>> = (0..cells.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(cells.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let cell = &cells[i];
                let outcome = match execute_run(&cell.cfg, 1) {
                    Ok(run_dir) => {
                        // Read the final accuracy back from the artifact so
                        // the summary reflects exactly what was persisted.
                        match fedshrink_core::report::read_rounds_csv(
                            &run_dir.join(fedshrink_core::report::ROUNDS_CSV),
                        ) {
                            Ok(rows) => CellOutcome {
                                value_label: cell.value_label.clone(),
                                seed: cell.seed,
                                final_acc: rows.last().map(|r| r.test_acc),
                                error: None,
                            },
                            Err(e) => CellOutcome {
                                value_label: cell.value_label.clone(),
                                seed: cell.seed,
                                final_acc: None,
                                error: Some(e.to_string()),
                            },
                        }
                    }
                    Err(e) => CellOutcome {
                        value_label: cell.value_label.clone(),
                        seed: cell.seed,
                        final_acc: None,
                        error: Some(e.message().to_string()),
                    },
                };
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every cell executed"))
        .collect()
}

fn write_cells_csv(outcomes: &[CellOutcome], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))?;
    w.write_record(["value", "seed", "status", "final_acc", "error"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for o in outcomes {
        let record = match (&o.final_acc, &o.error) {
            (Some(acc), None) => [
                o.value_label.clone(),
                o.seed.to_string(),
                "ok".to_string(),
                format!("{}", acc),
                String::new(),
            ],
            (_, err) => [
                o.value_label.clone(),
                o.seed.to_string(),
                "error".to_string(),
                String::new(),
                err.clone().unwrap_or_default(),
            ],
        };
        w.write_record(&record).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn write_summary_csv(
    values: &[AxisValue],
    outcomes: &[CellOutcome],
    path: &Path,
) -> Result<(), CliError> {
    let mut out = String::from("value,n,final_acc_mean,final_acc_std\n");
    for value in values {
        let label = value.label();
        let accs: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.value_label == label)
            .filter_map(|o| o.final_acc)
            .collect();
        if accs.is_empty() {
            out.push_str(&format!("{},0,,\n", label));
            continue;
        }
        let n = accs.len() as f64;
        let mean = accs.iter().sum::<f64>() / n;
        let std = if accs.len() > 1 {
            (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        out.push_str(&format!("{},{},{},{}\n", label, accs.len(), mean, std));
    }
    std::fs::write(path, out)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {}", path.display(), e)))?;
    Ok(())
}

/// The `sweep` subcommand. Returns the sweep directory on full success.
pub fn cmd_sweep(spec_path: &Path, opts: &GlobalOpts) -> Result<PathBuf, CliError> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {}", spec_path.display(), e)))?;
    let spec: SweepSpecFile = toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {}", spec_path.display(), e)))?;

    let axis = SweepAxis::parse(&spec.axis)?;
    if spec.values.is_empty() {
        return Err(CliError::Validation("values: must not be empty".to_string()));
    }
    if spec.seeds.is_empty() {
        return Err(CliError::Validation("seeds: must not be empty".to_string()));
    }
    let values: Vec<AxisValue> = spec
        .values
        .iter()
        .map(|v| coerce_value(axis, v))
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = match opts.seed_override {
        Some(s) => vec![s],
        None => spec.seeds.clone(),
    };
    let sweep_dir = opts
        .output_dir
        .clone()
        .or_else(|| spec.base.output_dir.clone())
        .ok_or_else(|| {
            CliError::Validation(
                "output_dir: not set (use --output-dir or base.output_dir)".to_string(),
            )
        })?;
    std::fs::create_dir_all(&sweep_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {}", sweep_dir.display(), e)))?;

    let cells = build_cells(&spec.base, axis, &values, &seeds, &sweep_dir);
    let outcomes = run_cells(&cells, opts.threads());

    write_cells_csv(&outcomes, &sweep_dir.join(CELLS_CSV))?;
    write_summary_csv(&values, &outcomes, &sweep_dir.join(SUMMARY_CSV))?;

    let failures = outcomes.iter().filter(|o| o.error.is_some()).count();
    if failures == outcomes.len() {
        Err(CliError::Runtime(format!("all {} sweep cells failed", failures)))
    } else if failures > 0 {
        Err(CliError::PartialSweep(format!(
            "{} of {} sweep cells failed (see {})",
            failures,
            outcomes.len(),
            sweep_dir.join(CELLS_CSV).display()
        )))
    } else {
        Ok(sweep_dir)
    }
}
