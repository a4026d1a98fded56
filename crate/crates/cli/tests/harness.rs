//! Harness-level tests: artifact layout, validation diagnostics, rerun
//! determinism, sweep aggregation, and report extraction. Binary-level exit
//! codes are exercised through the compiled `fedshrink` executable.

use std::path::{Path, PathBuf};
use std::process::Command;

use fedshrink_cli::{cmd_report, cmd_sweep, run_cmd, CliError, GlobalOpts};
use fedshrink_core::config::{DataConfig, DataSource, ExperimentConfig, PartitionConfig};
use fedshrink_core::fl::{ClientObjective, FlConfig};
use fedshrink_core::lws::{LwsConfig, LwsMode};
use fedshrink_core::nn::{ModelSpec, SgdConfig};
use fedshrink_core::report::{CHECKPOINT_FILE, CONFIG_FILE, ROUNDS_CSV, SHRINK_JSONL};

fn tiny_config(mode: LwsMode, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        run_label: "t".to_string(),
        output_dir: Some(out.to_path_buf()),
        model: ModelSpec::Mlp {
            layer_sizes: vec![8, 12, 4],
            init_seed: 0,
        },
        data: DataConfig {
            source: DataSource::SyntheticFeatures {
                num_classes: 4,
                samples_per_class: 30,
                test_samples_per_class: 10,
                feature_dim: 8,
                noise_std: 1.0,
                class_separation: 1.0,
                seed: 5,
            },
            partition: PartitionConfig {
                alpha: 0.3,
                seed: 0,
                min_samples_per_client: 2,
            },
        },
        fl: FlConfig {
            num_clients: 4,
            rounds: 3,
            local_epochs: 1,
            participation_ratio: 1.0,
            batch_size: 16,
            objective: ClientObjective::Fedavg,
            sgd: SgdConfig {
                learning_rate: 0.08,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_decay_per_round: 0.99,
            },
            seed: 0,
        },
        lws: LwsConfig {
            mode,
            beta: 0.1,
            oracle: false,
        },
    }
}

fn opts() -> GlobalOpts {
    GlobalOpts {
        seed_override: None,
        output_dir: None,
        threads: 1,
    }
}

fn write_config(cfg: &ExperimentConfig, path: &Path) {
    std::fs::write(path, toml::to_string_pretty(cfg).unwrap()).unwrap();
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

#[test]
fn run_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LwsMode::LayerWise, dir.path());
    let run_dir = run_cmd::execute_run(&cfg, 1).unwrap();
    for f in [ROUNDS_CSV, SHRINK_JSONL, CHECKPOINT_FILE, CONFIG_FILE] {
        assert!(run_dir.join(f).is_file(), "missing artifact {f}");
    }
}

#[test]
fn config_round_trip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(LwsMode::ModelWise, dir.path());
    cfg.fl.objective = ClientObjective::Fedprox { mu: 0.01 };
    cfg.lws.oracle = true;
    let text = toml::to_string_pretty(&cfg).unwrap();
    let back: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn unwritable_output_dir_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "a plain file").unwrap();
    let mut cfg = tiny_config(LwsMode::Off, &blocker); // output under a file
    cfg.fl.rounds = 1;
    let err = run_cmd::execute_run(&cfg, 1).unwrap_err();
    assert!(matches!(err, CliError::Runtime(_)), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn rerunning_a_resolved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LwsMode::LayerWise, dir.path());
    let run_dir = run_cmd::execute_run(&cfg, 1).unwrap();
    let first_rounds = std::fs::read(run_dir.join(ROUNDS_CSV)).unwrap();
    let first_ckpt = std::fs::read(run_dir.join(CHECKPOINT_FILE)).unwrap();
    let first_jsonl = std::fs::read(run_dir.join(SHRINK_JSONL)).unwrap();

    // Re-load the resolved copy and run it into a fresh directory.
    let mut reloaded: ExperimentConfig =
        toml::from_str(&std::fs::read_to_string(run_dir.join(CONFIG_FILE)).unwrap()).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    reloaded.output_dir = Some(dir2.path().to_path_buf());
    let run_dir2 = run_cmd::execute_run(&reloaded, 1).unwrap();
    assert_eq!(first_rounds, std::fs::read(run_dir2.join(ROUNDS_CSV)).unwrap());
    assert_eq!(first_ckpt, std::fs::read(run_dir2.join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(first_jsonl, std::fs::read(run_dir2.join(SHRINK_JSONL)).unwrap());
}

#[test]
fn invalid_alpha_fails_validation_and_leaves_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(LwsMode::Off, dir.path());
    cfg.data.partition.alpha = -1.0;
    let err = run_cmd::execute_run(&cfg, 1).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)));
    assert!(err.message().contains("alpha"), "{}", err.message());
    assert!(!dir.path().join("t").exists(), "partial outputs left behind");
}

#[test]
fn seed_override_changes_all_run_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(LwsMode::Off, dir.path());
    let o = GlobalOpts {
        seed_override: Some(99),
        output_dir: None,
        threads: 1,
    };
    run_cmd::apply_overrides(&mut cfg, &o);
    assert_eq!(cfg.fl.seed, 99);
    assert_eq!(cfg.data.partition.seed, 99);
    match cfg.model {
        ModelSpec::Mlp { init_seed, .. } => assert_eq!(init_seed, 99),
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn sweep_file(dir: &Path, axis: &str, values: &str, seeds: &str, base: &ExperimentConfig) -> PathBuf {
    let base_toml = toml::to_string_pretty(base).unwrap();
    let indented: String = base_toml
        .lines()
        .map(|l| {
            if let Some(rest) = l.strip_prefix("[") {
                format!("[base.{}", rest)
            } else {
                l.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    // Top-level keys of the base config need an explicit [base] table.
    let text = format!(
        "axis = \"{axis}\"\nvalues = {values}\nseeds = {seeds}\n\n[base]\n{indented}\n"
    );
    let path = dir.join("sweep.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn mode_sweep_emits_one_run_per_value_seed_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep_out");
    let base = tiny_config(LwsMode::LayerWise, &out);
    let spec = sweep_file(
        dir.path(),
        "mode",
        "[\"off\", \"model_wise\", \"layer_wise\"]",
        "[0, 1]",
        &base,
    );
    cmd_sweep(&spec, &opts()).unwrap();
    let cells: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.is_dir() && p.join(ROUNDS_CSV).is_file()).then_some(p)
        })
        .collect();
    assert_eq!(cells.len(), 6, "3 modes x 2 seeds");
    assert!(out.join("summary.csv").is_file());
    assert!(out.join("cells.csv").is_file());
}

#[test]
fn beta_zero_row_equals_fedavg_baseline_row() {
    let dir = tempfile::tempdir().unwrap();

    let beta_out = dir.path().join("beta_sweep");
    let base = tiny_config(LwsMode::LayerWise, &beta_out);
    let beta_spec = sweep_file(dir.path(), "beta", "[0.0, 0.01]", "[0, 1]", &base);
    let err = cmd_sweep(&beta_spec, &opts());
    assert!(err.is_ok());

    let off_out = dir.path().join("off_sweep");
    let base_off = tiny_config(LwsMode::LayerWise, &off_out);
    let spec2 = dir.path().join("sweep2.toml");
    std::fs::rename(
        sweep_file(dir.path(), "mode", "[\"off\"]", "[0, 1]", &base_off),
        &spec2,
    )
    .unwrap();
    cmd_sweep(&spec2, &opts()).unwrap();

    let summary_beta = std::fs::read_to_string(beta_out.join("summary.csv")).unwrap();
    let summary_off = std::fs::read_to_string(off_out.join("summary.csv")).unwrap();
    let row_beta_zero = summary_beta
        .lines()
        .find(|l| l.starts_with("0,"))
        .expect("beta=0 row");
    let row_off = summary_off
        .lines()
        .find(|l| l.starts_with("off,"))
        .expect("off row");
    let cols = |row: &str| {
        row.split(',')
            .skip(1)
            .map(str::to_string)
            .collect::<Vec<_>>()
    };
    assert_eq!(cols(row_beta_zero), cols(row_off), "beta=0 must equal plain FedAvg");
}

#[test]
fn summary_mean_matches_independent_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep_out");
    let base = tiny_config(LwsMode::LayerWise, &out);
    let spec = sweep_file(dir.path(), "alpha", "[0.3, 100.0]", "[0, 1, 2]", &base);
    cmd_sweep(&spec, &opts()).unwrap();

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    for line in summary.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let (value, n, mean): (&str, usize, f64) =
            (fields[0], fields[1].parse().unwrap(), fields[2].parse().unwrap());
        // Recompute from the per-run rounds.csv files.
        let mut accs = Vec::new();
        for seed in 0..3 {
            let cell = out.join(format!("alpha={}_seed={}", value, seed));
            let rows = fedshrink_core::report::read_rounds_csv(&cell.join(ROUNDS_CSV)).unwrap();
            accs.push(rows.last().unwrap().test_acc);
        }
        assert_eq!(n, accs.len());
        let expected = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - expected).abs() < 1e-12, "{value}: {mean} vs {expected}");
    }
}

#[test]
fn failed_cells_leave_sentinel_rows_and_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep_out");
    let base = tiny_config(LwsMode::LayerWise, &out);
    // alpha = -5 is rejected per-cell at validation time; the other value runs.
    let spec = sweep_file(dir.path(), "alpha", "[-5.0, 0.3]", "[0]", &base);
    let err = cmd_sweep(&spec, &opts()).unwrap_err();
    assert!(matches!(err, CliError::PartialSweep(_)), "{err:?}");
    let cells = std::fs::read_to_string(out.join(fedshrink_cli::sweep_cmd::CELLS_CSV)).unwrap();
    assert!(cells.lines().any(|l| l.starts_with("-5,0,error")), "{cells}");
    assert!(cells.lines().any(|l| l.starts_with("0.3,0,ok")), "{cells}");
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("-5,0,,")), "{summary}");
}

#[test]
fn sweep_cells_are_schedule_independent() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = dir.path().join("serial");
    let base1 = tiny_config(LwsMode::LayerWise, &out1);
    let spec1 = sweep_file(dir.path(), "beta", "[0.01, 0.1]", "[0, 1]", &base1);
    cmd_sweep(&spec1, &opts()).unwrap();

    let out2 = dir.path().join("parallel");
    let base2 = tiny_config(LwsMode::LayerWise, &out2);
    let spec2 = dir.path().join("p.toml");
    std::fs::rename(sweep_file(dir.path(), "beta", "[0.01, 0.1]", "[0, 1]", &base2), &spec2).unwrap();
    let par_opts = GlobalOpts {
        seed_override: None,
        output_dir: None,
        threads: 4,
    };
    cmd_sweep(&spec2, &par_opts).unwrap();

    assert_eq!(
        std::fs::read_to_string(out1.join("summary.csv")).unwrap(),
        std::fs::read_to_string(out2.join("summary.csv")).unwrap()
    );
    for cell in ["beta=0.01_seed=0", "beta=0.1_seed=1"] {
        assert_eq!(
            std::fs::read(out1.join(cell).join(ROUNDS_CSV)).unwrap(),
            std::fs::read(out2.join(cell).join(ROUNDS_CSV)).unwrap()
        );
    }
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

#[test]
fn report_on_off_run_shows_constant_gamma_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LwsMode::Off, dir.path());
    let run_dir = run_cmd::execute_run(&cfg, 1).unwrap();
    cmd_report(&run_dir).unwrap();
    let traj = std::fs::read_to_string(run_dir.join("gamma_traj.tsv")).unwrap();
    let mut data_lines = 0;
    for line in traj.lines().skip(1) {
        let gamma: f64 = line.rsplit('\t').next().unwrap().parse().unwrap();
        assert_eq!(gamma, 1.0, "off mode must report gamma 1.0: {line}");
        data_lines += 1;
    }
    assert!(data_lines > 0);
}

#[test]
fn param_hist_bins_conserve_parameter_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LwsMode::LayerWise, dir.path());
    let run_dir = run_cmd::execute_run(&cfg, 1).unwrap();
    cmd_report(&run_dir).unwrap();
    let hist = std::fs::read_to_string(run_dir.join("param_hist.tsv")).unwrap();
    let total: usize = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().parse::<usize>().unwrap())
        .sum();
    // MLP [8, 12, 4]: 8*12+12 + 12*4+4 parameters.
    assert_eq!(total, 8 * 12 + 12 + 12 * 4 + 4);
}

#[test]
fn tau_vs_r_from_an_oracle_sweep_correlates_positively() {
    // End-to-end diagnostic: a 3-level alpha sweep with the oracle running
    // every round, reported into tau_vs_r.tsv, must show positive Pearson
    // correlation between the per-run tau and r aggregates.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep_out");
    // The desk preset over a short horizon: every round sits in the
    // active-training phase where the tau-r relationship is visible.
    let mut base = ExperimentConfig::desk_preset(0.1, LwsMode::Off, 0);
    base.output_dir = Some(out.clone());
    base.fl.rounds = 10;
    base.lws.oracle = true;
    let spec = sweep_file(dir.path(), "alpha", "[0.1, 0.5, 100.0]", "[0, 1, 2]", &base);
    cmd_sweep(&spec, &opts()).unwrap();
    cmd_report(&out).unwrap();

    let text = std::fs::read_to_string(out.join("tau_vs_r.tsv")).unwrap();
    let mut taus = Vec::new();
    let mut rs = Vec::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        taus.push(fields[4].parse::<f64>().unwrap());
        rs.push(fields[5].parse::<f64>().unwrap());
    }
    assert_eq!(taus.len(), 9, "one row per (alpha, seed) run");
    let rho = fedshrink_core::lws::pearson(&rs, &taus).unwrap();
    assert!(rho > 0.0, "tau vs r Pearson should be positive, got {rho}");
}

#[test]
fn report_lists_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_report(dir.path()).unwrap_err();
    assert!(matches!(err, CliError::Validation(_)));
    assert!(err.message().contains(ROUNDS_CSV), "{}", err.message());

    // A run dir with rounds.csv but nothing else must name the absent files.
    let partial = dir.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    std::fs::write(partial.join(ROUNDS_CSV), "round\n").unwrap();
    let err = cmd_report(&partial).unwrap_err();
    assert!(err.message().contains(SHRINK_JSONL), "{}", err.message());
    assert!(err.message().contains(CHECKPOINT_FILE), "{}", err.message());
}

// ---------------------------------------------------------------------------
// binary exit codes
// ---------------------------------------------------------------------------

fn fedshrink_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fedshrink"))
}

#[test]
fn binary_exit_codes_match_the_contract() {
    let dir = tempfile::tempdir().unwrap();

    // 0: happy path.
    let cfg = tiny_config(LwsMode::LayerWise, &dir.path().join("out"));
    let cfg_path = dir.path().join("ok.toml");
    write_config(&cfg, &cfg_path);
    let status = fedshrink_bin().arg("run").arg(&cfg_path).status().unwrap();
    assert_eq!(status.code(), Some(0));

    // 1: validation failure names the field.
    let mut bad = cfg.clone();
    bad.data.partition.alpha = -1.0;
    let bad_path = dir.path().join("bad.toml");
    write_config(&bad, &bad_path);
    let output = fedshrink_bin().arg("run").arg(&bad_path).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&output.stderr).contains("alpha"));

    // 1: unreadable config.
    let status = fedshrink_bin()
        .arg("run")
        .arg(dir.path().join("nope.toml"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // 1: report on an empty directory.
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let status = fedshrink_bin().arg("report").arg(&empty).status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn binary_seed_override_and_output_dir_flags_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(LwsMode::LayerWise, &dir.path().join("ignored"));
    let cfg_path = dir.path().join("cfg.toml");
    write_config(&cfg, &cfg_path);
    let out = dir.path().join("flagged");
    let status = fedshrink_bin()
        .arg("--seed-override")
        .arg("7")
        .arg("--output-dir")
        .arg(&out)
        .arg("run")
        .arg(&cfg_path)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let resolved: ExperimentConfig =
        toml::from_str(&std::fs::read_to_string(out.join("t").join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(resolved.fl.seed, 7);
    assert_eq!(resolved.data.partition.seed, 7);
}
