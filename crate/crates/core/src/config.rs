//! Experiment configuration: everything a run needs, fully serializable so
//! that a written config reproduces the run bit-exactly.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{
    load_csv_dataset, make_synthetic, Dataset, PartitionSpec, SyntheticShape, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fl::{ClientObjective, FlConfig};
use crate::lws::{LwsConfig, LwsMode};
use crate::nn::{ModelSpec, SgdConfig};

/// Where the task data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Class-conditional Gaussian clusters (feature vectors).
    SyntheticFeatures {
        num_classes: usize,
        samples_per_class: usize,
        test_samples_per_class: usize,
        feature_dim: usize,
        noise_std: f64,
        class_separation: f64,
        seed: u64,
    },
    /// Per-class blob images.
    SyntheticImages {
        num_classes: usize,
        samples_per_class: usize,
        test_samples_per_class: usize,
        channels: usize,
        image_size: usize,
        noise_std: f64,
        class_separation: f64,
        seed: u64,
    },
    /// Tabular CSV with header `label,f0,f1,...`.
    Csv { train_path: PathBuf, test_path: PathBuf },
}

impl DataSource {
    fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            DataSource::SyntheticFeatures {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                feature_dim,
                noise_std,
                class_separation,
                seed,
            } => Some(SyntheticSpec {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                shape: SyntheticShape::Features { dim: feature_dim },
                noise_std,
                class_separation,
                seed,
            }),
            DataSource::SyntheticImages {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                channels,
                image_size,
                noise_std,
                class_separation,
                seed,
            } => Some(SyntheticSpec {
                num_classes,
                samples_per_class,
                test_samples_per_class,
                shape: SyntheticShape::Image {
                    channels,
                    size: image_size,
                },
                noise_std,
                class_separation,
                seed,
            }),
            DataSource::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.synthetic_spec() {
            Some(spec) => spec.validate(),
            None => Ok(()),
        }
    }

    /// Materialize the (train, test) pair.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Csv { train_path, test_path } => {
                let mut train = load_csv_dataset(train_path)?;
                let mut test = load_csv_dataset(test_path)?;
                let classes = train.num_classes.max(test.num_classes);
                train.num_classes = classes;
                test.num_classes = classes;
                if train.sample_len() != test.sample_len() {
                    return Err(Error::config(
                        "data.test_path",
                        "train and test feature dimensions differ",
                    ));
                }
                Ok((train, test))
            }
            _ => make_synthetic(&self.synthetic_spec().expect("synthetic source")),
        }
    }
}

/// Dirichlet partition settings; the client count comes from `fl.num_clients`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub alpha: f64,
    pub seed: u64,
    #[serde(default = "default_min_samples")]
    pub min_samples_per_client: usize,
}

fn default_min_samples() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionConfig,
}

/// The unit of reproducibility: one of these fully determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_label: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub fl: FlConfig,
    pub lws: LwsConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.run_label.is_empty() {
            return Err(Error::config("run_label", "must not be empty"));
        }
        if self.run_label.contains(['/', '\\']) {
            return Err(Error::config("run_label", "must not contain path separators"));
        }
        self.model.validate()?;
        self.data.source.validate()?;
        if !(self.data.partition.alpha > 0.0) {
            return Err(Error::config("data.partition.alpha", "must be positive"));
        }
        self.fl.validate()?;
        self.lws.validate()?;
        // Model/data geometry checks for sources whose shape is known up front.
        match &self.data.source {
            DataSource::SyntheticFeatures {
                feature_dim,
                num_classes,
                ..
            } => {
                let input = self.model.input_shape();
                if input != vec![*feature_dim] {
                    return Err(Error::config(
                        "model",
                        format!("input shape {:?} does not match feature_dim {}", input, feature_dim),
                    ));
                }
                if self.model.num_classes() != *num_classes {
                    return Err(Error::config(
                        "model",
                        format!(
                            "{} output classes but data has {}",
                            self.model.num_classes(),
                            num_classes
                        ),
                    ));
                }
            }
            DataSource::SyntheticImages {
                channels,
                image_size,
                num_classes,
                ..
            } => {
                let input = self.model.input_shape();
                if input != vec![*channels, *image_size, *image_size] {
                    return Err(Error::config(
                        "model",
                        format!(
                            "input shape {:?} does not match image {}x{}x{}",
                            input, channels, image_size, image_size
                        ),
                    ));
                }
                if self.model.num_classes() != *num_classes {
                    return Err(Error::config(
                        "model",
                        format!(
                            "{} output classes but data has {}",
                            self.model.num_classes(),
                            num_classes
                        ),
                    ));
                }
            }
            DataSource::Csv { .. } => {}
        }
        Ok(())
    }

    /// Shape checks against an actually loaded dataset (covers CSV sources).
    pub fn check_against_data(&self, train: &Dataset) -> Result<()> {
        let input = self.model.input_shape();
        let sample: Vec<usize> = train.inputs.shape()[1..].to_vec();
        if input != sample {
            return Err(Error::config(
                "model",
                format!("input shape {:?} does not match data {:?}", input, sample),
            ));
        }
        if self.model.num_classes() != train.num_classes {
            return Err(Error::config(
                "model",
                format!(
                    "{} output classes but data has {}",
                    self.model.num_classes(),
                    train.num_classes
                ),
            ));
        }
        Ok(())
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            alpha: self.data.partition.alpha,
            num_clients: self.fl.num_clients,
            seed: self.data.partition.seed,
            min_samples_per_client: self.data.partition.min_samples_per_client,
        }
    }

    /// The default desk-scale preset: 10-class Gaussian clusters (heavily
    /// overlapping, so heterogeneity genuinely hurts), 20 clients, 50
    /// rounds, MLP [16, 64, 10]. `seed` drives model init, partitioning,
    /// and the federated loop; the dataset itself is shared across seeds.
    pub fn desk_preset(alpha: f64, mode: LwsMode, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            run_label: format!("preset_a{}_{}_s{}", alpha, mode.name(), seed),
            output_dir: None,
            model: ModelSpec::Mlp {
                layer_sizes: vec![16, 64, 10],
                init_seed: seed,
            },
            data: DataConfig {
                source: DataSource::SyntheticFeatures {
                    num_classes: 10,
                    samples_per_class: 200,
                    test_samples_per_class: 50,
                    feature_dim: 16,
                    noise_std: 3.0,
                    class_separation: 1.0,
                    seed: 1,
                },
                partition: PartitionConfig {
                    alpha,
                    seed,
                    min_samples_per_client: 2,
                },
            },
            fl: FlConfig {
                num_clients: 20,
                rounds: 50,
                local_epochs: 1,
                participation_ratio: 1.0,
                batch_size: 32,
                objective: ClientObjective::Fedavg,
                sgd: SgdConfig {
                    learning_rate: 0.08,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    lr_decay_per_round: 0.99,
                },
                seed,
            },
            lws: LwsConfig {
                mode,
                beta: 0.1,
                oracle: false,
            },
        }
    }
}
