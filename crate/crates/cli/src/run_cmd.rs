//! `run <config>`: execute one experiment and persist its artifacts.

use std::path::{Path, PathBuf};

use fedshrink_core::config::ExperimentConfig;
use fedshrink_core::fl::run_experiment;
use fedshrink_core::nn::ModelSpec;
use fedshrink_core::report::{write_run_outputs, CONFIG_FILE};

use crate::{CliError, GlobalOpts};

/// Parse a TOML experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {}", path.display(), e)))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {}", path.display(), e)))
}

fn set_init_seed(model: &mut ModelSpec, seed: u64) {
    match model {
        ModelSpec::Mlp { init_seed, .. } | ModelSpec::Cnn { init_seed, .. } => *init_seed = seed,
    }
}

/// Apply `--seed-override` / `--output-dir` to a loaded config.
pub fn apply_overrides(cfg: &mut ExperimentConfig, opts: &GlobalOpts) {
    if let Some(seed) = opts.seed_override {
        cfg.fl.seed = seed;
        cfg.data.partition.seed = seed;
        set_init_seed(&mut cfg.model, seed);
    }
    if let Some(dir) = &opts.output_dir {
        cfg.output_dir = Some(dir.clone());
    }
}

/// Execute a validated config, writing all artifacts to
/// `<output_dir>/<run_label>/`. The run directory is replaced wholesale;
/// on failure it is removed so no partial outputs linger.
pub fn execute_run(cfg: &ExperimentConfig, threads: usize) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let output_dir = cfg.output_dir.as_ref().ok_or_else(|| {
        CliError::Validation("output_dir: not set (use --output-dir or the config field)".to_string())
    })?;
    let run_dir = output_dir.join(&cfg.run_label);
    if run_dir.exists() {
        std::fs::remove_dir_all(&run_dir)
            .map_err(|e| CliError::Runtime(format!("cannot clear {}: {}", run_dir.display(), e)))?;
    }

    let result = run_experiment(cfg, threads).map_err(CliError::from)?;

    let write = || -> Result<(), CliError> {
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {}", run_dir.display(), e)))?;
        write_run_outputs(&result, &run_dir).map_err(CliError::from)?;
        let resolved = toml::to_string_pretty(cfg)
            .map_err(|e| CliError::Runtime(format!("cannot serialize config: {}", e)))?;
        std::fs::write(run_dir.join(CONFIG_FILE), resolved)
            .map_err(|e| CliError::Runtime(format!("cannot write config copy: {}", e)))?;
        Ok(())
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_dir_all(&run_dir);
        return Err(e);
    }
    log::info!(
        "run {}: final accuracy {:.4}",
        cfg.run_label,
        result.final_accuracy()
    );
    Ok(run_dir)
}

/// The `run` subcommand.
pub fn cmd_run(config_path: &Path, opts: &GlobalOpts) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(config_path)?;
    apply_overrides(&mut cfg, opts);
    execute_run(&cfg, opts.threads())
}
