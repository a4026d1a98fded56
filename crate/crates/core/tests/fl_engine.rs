//! Federated loop tests: local training arithmetic, participant selection,
//! weighted aggregation against a scalar-loop reference, and end-to-end
//! round-loop equivalences (off vs beta=0, single client, rerun and
//! schedule determinism).

use fedshrink_core::config::{DataConfig, DataSource, ExperimentConfig, PartitionConfig};
use fedshrink_core::data::{Dataset, SyntheticShape, SyntheticSpec};
use fedshrink_core::fl::{
    aggregate_weighted, local_train, run_experiment, select_participants, ClientObjective,
    ClientUpdate, FlConfig,
};
use fedshrink_core::lws::{LwsConfig, LwsMode};
use fedshrink_core::nn::{init_model, LayerGroup, ModelParams, ModelSpec, SgdConfig};
use fedshrink_core::tensor::Tensor;

fn sgd(lr: f64, momentum: f64, wd: f64) -> SgdConfig {
    SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay: wd,
        lr_decay_per_round: 1.0,
    }
}

fn fl_cfg(epochs: usize, batch: usize, objective: ClientObjective, seed: u64) -> FlConfig {
    FlConfig {
        num_clients: 4,
        rounds: 3,
        local_epochs: epochs,
        participation_ratio: 1.0,
        batch_size: batch,
        objective,
        sgd: sgd(0.05, 0.9, 5e-4),
        seed,
    }
}

fn toy_shard(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        num_classes: 3,
        samples_per_class: 8,
        test_samples_per_class: 2,
        shape: SyntheticShape::Features { dim: 5 },
        noise_std: 0.6,
        class_separation: 1.0,
        seed,
    };
    fedshrink_core::data::make_synthetic(&spec).unwrap().0
}

fn toy_model(seed: u64) -> ModelParams {
    init_model(&ModelSpec::Mlp {
        layer_sizes: vec![5, 6, 3],
        init_seed: seed,
    })
    .unwrap()
}

fn bitwise_eq(a: &ModelParams, b: &ModelParams) -> bool {
    let mut same = true;
    a.zip_for_each(b, |x, y| same &= x.to_bits() == y.to_bits()).unwrap();
    same
}

fn drift(a: &ModelParams, b: &ModelParams) -> f64 {
    let mut sq = 0.0;
    a.zip_for_each(b, |x, y| sq += (x - y) * (x - y)).unwrap();
    sq.sqrt()
}

/// Small experiment config used by the round-loop tests.
fn tiny_config(alpha: f64, mode: LwsMode, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        run_label: "tiny".to_string(),
        output_dir: None,
        model: ModelSpec::Mlp {
            layer_sizes: vec![8, 12, 4],
            init_seed: seed,
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
                alpha,
                seed,
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
            seed,
        },
        lws: LwsConfig {
            mode,
            beta: 0.1,
            oracle: false,
        },
    }
}

// ---------------------------------------------------------------------------
// local_train
// ---------------------------------------------------------------------------

#[test]
fn zero_epochs_returns_the_global_model() {
    let global = toy_model(1);
    let shard = toy_shard(2);
    let cfg = fl_cfg(0, 8, ClientObjective::Fedavg, 3);
    let update = local_train(&global, &shard, 0, &cfg, 0).unwrap();
    assert!(bitwise_eq(&global, &update.params));
    assert_eq!(update.num_samples, shard.len());
}

#[test]
fn empty_shard_is_rejected() {
    let global = toy_model(1);
    let empty = Dataset {
        inputs: Tensor::zeros(vec![0, 5]),
        labels: vec![],
        num_classes: 3,
    };
    let cfg = fl_cfg(1, 8, ClientObjective::Fedavg, 3);
    assert!(local_train(&global, &empty, 0, &cfg, 0).is_err());
}

#[test]
fn proximal_term_reduces_drift_from_global() {
    let global = toy_model(4);
    let shard = toy_shard(5);
    let run = |objective| {
        let cfg = fl_cfg(3, 8, objective, 6);
        local_train(&global, &shard, 1, &cfg, 0).unwrap()
    };
    let plain = run(ClientObjective::Fedavg);
    let prox = run(ClientObjective::Fedprox { mu: 10.0 });
    let d_plain = drift(&plain.params, &global);
    let d_prox = drift(&prox.params, &global);
    assert!(
        d_prox < d_plain,
        "proximal drift {d_prox} not below plain drift {d_plain}"
    );
    assert!(d_prox > 0.0);
}

#[test]
fn single_step_matches_manual_arithmetic() {
    // One sample x = [1], label 0, zero-initialized 1 -> 2 dense layer.
    // Logits are [0, 0], softmax [1/2, 1/2], so dW = [[-1/2], [1/2]],
    // db = [-1/2, 1/2]; with lr = 0.1 the step lands on +/- 0.05.
    let global = ModelParams::from_layers(vec![LayerGroup {
        name: "fc1".to_string(),
        tensors: vec![Tensor::zeros(vec![2, 1]), Tensor::zeros(vec![2])],
    }])
    .unwrap();
    let shard = Dataset {
        inputs: Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
        labels: vec![0],
        num_classes: 2,
    };
    let cfg = FlConfig {
        num_clients: 1,
        rounds: 1,
        local_epochs: 1,
        participation_ratio: 1.0,
        batch_size: 4,
        objective: ClientObjective::Fedavg,
        sgd: sgd(0.1, 0.0, 0.0),
        seed: 0,
    };
    let update = local_train(&global, &shard, 0, &cfg, 0).unwrap();
    let w = update.params.layers()[0].tensors[0].data();
    let b = update.params.layers()[0].tensors[1].data();
    assert!((w[0] - 0.05).abs() < 1e-15);
    assert!((w[1] + 0.05).abs() < 1e-15);
    assert!((b[0] - 0.05).abs() < 1e-15);
    assert!((b[1] + 0.05).abs() < 1e-15);
    let ln2 = std::f64::consts::LN_2;
    assert!((update.final_local_loss - ln2).abs() < 1e-15);
}

#[test]
fn local_train_is_deterministic_in_its_seeds() {
    let global = toy_model(7);
    let shard = toy_shard(8);
    let cfg = fl_cfg(2, 8, ClientObjective::Fedavg, 9);
    let a = local_train(&global, &shard, 2, &cfg, 1).unwrap();
    let b = local_train(&global, &shard, 2, &cfg, 1).unwrap();
    assert!(bitwise_eq(&a.params, &b.params));
    // A different round shuffles differently.
    let c = local_train(&global, &shard, 2, &cfg, 2).unwrap();
    assert!(!bitwise_eq(&a.params, &c.params));
}

// ---------------------------------------------------------------------------
// select_participants
// ---------------------------------------------------------------------------

#[test]
fn full_participation_returns_all_ids_in_order() {
    assert_eq!(select_participants(5, 1.0, 3, 42), vec![0, 1, 2, 3, 4]);
}

#[test]
fn participant_count_follows_the_ceiling() {
    assert_eq!(select_participants(20, 0.1, 0, 7).len(), 2);
    assert_eq!(select_participants(10, 0.25, 0, 7).len(), 3);
    assert_eq!(select_participants(3, 0.01, 0, 7).len(), 1);
}

#[test]
fn selection_is_deterministic_and_varies_over_rounds() {
    let mut distinct = std::collections::HashSet::new();
    for round in 0..10 {
        let a = select_participants(20, 0.3, round, 11);
        let b = select_participants(20, 0.3, round, 11);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "ids sorted, no repeats");
        assert!(a.iter().all(|&id| id < 20));
        distinct.insert(a);
    }
    assert!(distinct.len() > 1, "all rounds picked the same subset");
}

// ---------------------------------------------------------------------------
// aggregate_weighted
// ---------------------------------------------------------------------------

fn update_with(id: usize, params: ModelParams, n: usize) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        params,
        num_samples: n,
        final_local_loss: 0.0,
    }
}

#[test]
fn identical_updates_are_a_fixed_point() {
    let m = toy_model(12);
    let updates = vec![
        update_with(0, m.clone(), 3),
        update_with(1, m.clone(), 9),
        update_with(2, m.clone(), 1),
    ];
    let agg = aggregate_weighted(&updates).unwrap();
    let mut max_err: f64 = 0.0;
    agg.zip_for_each(&m, |a, b| max_err = max_err.max((a - b).abs())).unwrap();
    assert!(max_err < 1e-12);
}

#[test]
fn scalar_weighted_mean_example() {
    let a = ModelParams::from_layers(vec![LayerGroup {
        name: "w".to_string(),
        tensors: vec![Tensor::new(vec![1], vec![0.0]).unwrap()],
    }])
    .unwrap();
    let mut b = a.clone();
    b.layers_mut()[0].tensors[0].data_mut()[0] = 4.0;
    let agg = aggregate_weighted(&[update_with(0, a, 1), update_with(1, b, 3)]).unwrap();
    assert!((agg.layers()[0].tensors[0].data()[0] - 3.0).abs() < 1e-15);
}

#[test]
fn random_aggregation_matches_scalar_loop_reference() {
    let models: Vec<ModelParams> = (20..23).map(toy_model).collect();
    let counts = [2usize, 5, 3];
    let updates: Vec<ClientUpdate> = models
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(i, (m, &n))| update_with(i, m.clone(), n))
        .collect();
    let agg = aggregate_weighted(&updates).unwrap();

    // Independent reference over flat vectors, with its own lambda math.
    let flatten = |m: &ModelParams| -> Vec<f64> {
        m.layers().iter().flat_map(|g| g.tensors.iter().flat_map(|t| t.data().iter().copied())).collect()
    };
    let total: usize = counts.iter().sum();
    let lambdas: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    assert!((lambdas.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let flats: Vec<Vec<f64>> = models.iter().map(&flatten).collect();
    let got = flatten(&agg);
    for i in 0..got.len() {
        let expected: f64 = flats.iter().zip(&lambdas).map(|(f, l)| f[i] * l).sum();
        assert!((got[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn aggregation_rejects_incompatible_or_empty_input() {
    assert!(aggregate_weighted(&[]).is_err());
    let a = toy_model(30);
    let other = init_model(&ModelSpec::Mlp {
        layer_sizes: vec![5, 7, 3],
        init_seed: 0,
    })
    .unwrap();
    assert!(aggregate_weighted(&[update_with(0, a, 1), update_with(1, other, 1)]).is_err());
}

// ---------------------------------------------------------------------------
// run_experiment
// ---------------------------------------------------------------------------

#[test]
fn lws_off_equals_beta_zero_bitwise() {
    let off = run_experiment(&tiny_config(0.3, LwsMode::Off, 13), 1).unwrap();
    let zero = {
        let mut cfg = tiny_config(0.3, LwsMode::LayerWise, 13);
        cfg.lws.beta = 0.0;
        run_experiment(&cfg, 1).unwrap()
    };
    assert!(bitwise_eq(&off.final_model, &zero.final_model));
    for (a, b) in off.rounds.iter().zip(&zero.rounds) {
        assert_eq!(a.test_accuracy.to_bits(), b.test_accuracy.to_bits());
        assert_eq!(a.test_loss.to_bits(), b.test_loss.to_bits());
        assert_eq!(a.shrink.layers, b.shrink.layers);
        assert_eq!(a.shrink.model_gamma, 1.0);
        assert_eq!(b.shrink.model_gamma, 1.0);
    }
}

#[test]
fn single_client_round_is_shrink_of_its_local_model() {
    let mut cfg = tiny_config(1.0, LwsMode::LayerWise, 14);
    cfg.fl.num_clients = 1;
    cfg.fl.rounds = 1;
    cfg.data.partition.min_samples_per_client = 0;
    let result = run_experiment(&cfg, 1).unwrap();

    // Reproduce the round by hand: one client trains on everything; with a
    // single participant tau is 0, so every gamma is 1 and the new global is
    // exactly the local model.
    let (train, _) = cfg.data.source.load().unwrap();
    let global = init_model(&cfg.model).unwrap();
    let update = local_train(&global, &train, 0, &cfg.fl, 0).unwrap();
    assert!(bitwise_eq(&result.final_model, &update.params));
    let record = &result.rounds[0];
    assert_eq!(record.participants, vec![0]);
    assert!(record.shrink.layers.iter().all(|l| l.gamma == 1.0));
    assert_eq!(record.shrink.model_tau, 0.0);
}

#[test]
fn rerun_with_identical_config_is_bit_identical() {
    let cfg = tiny_config(0.5, LwsMode::LayerWise, 15);
    let a = run_experiment(&cfg, 1).unwrap();
    let b = run_experiment(&cfg, 1).unwrap();
    assert!(bitwise_eq(&a.final_model, &b.final_model));
    assert_eq!(a.rounds.len(), b.rounds.len());
    for (ra, rb) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(ra.test_accuracy.to_bits(), rb.test_accuracy.to_bits());
        assert_eq!(ra.shrink.layers, rb.shrink.layers);
        assert_eq!(ra.participants, rb.participants);
    }
}

#[test]
fn worker_threads_do_not_change_the_result() {
    let cfg = tiny_config(0.5, LwsMode::LayerWise, 16);
    let serial = run_experiment(&cfg, 1).unwrap();
    let parallel = run_experiment(&cfg, 3).unwrap();
    assert!(bitwise_eq(&serial.final_model, &parallel.final_model));
    for (ra, rb) in serial.rounds.iter().zip(&parallel.rounds) {
        assert_eq!(ra.test_accuracy.to_bits(), rb.test_accuracy.to_bits());
        assert_eq!(ra.shrink.layers, rb.shrink.layers);
    }
}

#[test]
fn partial_participation_runs_and_logs_participants() {
    let mut cfg = tiny_config(0.5, LwsMode::LayerWise, 17);
    cfg.fl.num_clients = 8;
    cfg.fl.participation_ratio = 0.25;
    let result = run_experiment(&cfg, 1).unwrap();
    for record in &result.rounds {
        assert_eq!(record.participants.len(), 2);
        assert_eq!(record.shrink.participants, 2);
        assert!((0.0..=1.0).contains(&record.test_accuracy));
    }
}

#[test]
fn oracle_flag_populates_reports() {
    let mut cfg = tiny_config(0.5, LwsMode::LayerWise, 18);
    cfg.lws.oracle = true;
    cfg.fl.rounds = 2;
    let result = run_experiment(&cfg, 1).unwrap();
    for record in &result.rounds {
        let gamma = record.shrink.oracle_gamma.expect("oracle ran");
        let r = record.shrink.oracle_r.expect("oracle ran");
        assert!(gamma > 0.0 && gamma <= 1.0);
        assert!(r >= 0.0);
    }
}

#[test]
fn csv_data_source_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("label,f0,f1\n");
    let mut rng_state = 12345u64;
    let mut next = || {
        rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (rng_state >> 33) as f64 / (1u64 << 31) as f64 - 0.5
    };
    for i in 0..80 {
        let label = i % 2;
        let center = if label == 0 { -1.0 } else { 1.0 };
        rows.push_str(&format!("{},{},{}\n", label, center + next(), center + next()));
    }
    let train_path = dir.path().join("train.csv");
    let test_path = dir.path().join("test.csv");
    std::fs::write(&train_path, &rows).unwrap();
    std::fs::write(&test_path, &rows).unwrap();

    let mut cfg = tiny_config(1.0, LwsMode::LayerWise, 20);
    cfg.model = ModelSpec::Mlp {
        layer_sizes: vec![2, 6, 2],
        init_seed: 0,
    };
    cfg.data.source = DataSource::Csv {
        train_path,
        test_path,
    };
    cfg.fl.num_clients = 2;
    cfg.fl.rounds = 2;
    let result = run_experiment(&cfg, 1).unwrap();
    assert_eq!(result.rounds.len(), 2);
    assert!(result.rounds[1].test_accuracy > 0.9, "separable CSV task should be learned");
}

#[test]
fn invalid_configs_are_rejected_with_field_names() {
    let mut cfg = tiny_config(0.5, LwsMode::Off, 19);
    cfg.data.partition.alpha = -1.0;
    let err = run_experiment(&cfg, 1).unwrap_err().to_string();
    assert!(err.contains("alpha"), "error should name the field: {err}");

    let mut cfg = tiny_config(0.5, LwsMode::Off, 19);
    cfg.fl.participation_ratio = 0.0;
    let err = run_experiment(&cfg, 1).unwrap_err().to_string();
    assert!(err.contains("participation_ratio"), "{err}");

    let mut cfg = tiny_config(0.5, LwsMode::Off, 19);
    cfg.model = ModelSpec::Mlp {
        layer_sizes: vec![9, 12, 4],
        init_seed: 0,
    };
    let err = run_experiment(&cfg, 1).unwrap_err().to_string();
    assert!(err.contains("model"), "{err}");
}
