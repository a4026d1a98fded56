//! The federated round loop: broadcast, local training, upload, weighted
//! aggregation, shrink stage, evaluation.
//!
//! Clients are pure functions of (global model, shard, round, seed), so the
//! orchestration is deterministic and schedule-independent: running clients
//! serially or across worker threads yields bit-identical results.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{dirichlet_partition, Dataset};
use crate::error::{Error, Result};
use crate::lws::{self, ShrinkReport};
use crate::nn::{
    evaluate, init_model, loss_and_grad, sgd_step, ModelParams, MomentumState, SgdConfig,
};
use crate::rng::{derive_rng, domain};
use crate::tensor::Tensor;

/// What a client sends back after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub num_samples: usize,
    pub final_local_loss: f64,
}

/// Local objective: plain cross-entropy, or cross-entropy plus the proximal
/// term (mu/2) ||w - w_global||^2 realized as the gradient term
/// mu * (w - w_global).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientObjective {
    Fedavg,
    Fedprox { mu: f64 },
}

/// Federated loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub participation_ratio: f64,
    pub batch_size: usize,
    pub objective: ClientObjective,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("fl.num_clients", "must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("fl.rounds", "must be at least 1"));
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return Err(Error::config("fl.participation_ratio", "must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("fl.batch_size", "must be at least 1"));
        }
        if let ClientObjective::Fedprox { mu } = self.objective {
            if !(mu >= 0.0) {
                return Err(Error::config("fl.objective.mu", "must be nonnegative"));
            }
        }
        self.sgd.validate()
    }
}

/// One experiment-log row.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub shrink: ShrinkReport,
    /// Wall seconds of the aggregation step.
    pub agg_seconds: f64,
    /// Wall seconds of the shrink stage (gamma computation + scaling).
    pub lws_seconds: f64,
}

/// Everything a finished run produces in memory.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundRecord>,
    pub final_model: ModelParams,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.test_accuracy)
    }
}

/// Uniform sample of ceil(ratio * num_clients) client ids without
/// replacement, deterministic in (seed, round); ids returned sorted.
pub fn select_participants(num_clients: usize, ratio: f64, round: usize, seed: u64) -> Vec<usize> {
    let m = ((ratio * num_clients as f64).ceil() as usize).clamp(1, num_clients);
    if m == num_clients {
        return (0..num_clients).collect();
    }
    let mut rng = derive_rng(seed, domain::SELECTION, &[round as u64]);
    let mut ids: Vec<usize> = (0..num_clients).collect();
    for i in 0..m {
        let j = rand::Rng::random_range(&mut rng, i..num_clients);
        ids.swap(i, j);
    }
    let mut chosen: Vec<usize> = ids[..m].to_vec();
    chosen.sort_unstable();
    chosen
}

fn gather_batch(shard: &Dataset, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let sub = shard.subset(indices)?;
    Ok((sub.inputs, sub.labels))
}

/// Run `local_epochs` epochs of mini-batch SGD from a copy of the global
/// model. Deterministic in (seed, client_id, round).
pub fn local_train(
    global: &ModelParams,
    shard: &Dataset,
    client_id: usize,
    cfg: &FlConfig,
    round: usize,
) -> Result<ClientUpdate> {
    if shard.is_empty() {
        return Err(Error::contract(format!("client {} shard is empty", client_id)));
    }
    let mut params = global.clone();
    let mut momentum = MomentumState::zeros_like(global);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.local_epochs {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        let mut rng = derive_rng(
            cfg.seed,
            domain::BATCHING,
            &[client_id as u64, round as u64, epoch as u64],
        );
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let (inputs, labels) = gather_batch(shard, batch_idx)?;
            let (loss, mut grads) = loss_and_grad(&params, &inputs, &labels)?;
            if let ClientObjective::Fedprox { mu } = cfg.objective {
                if mu > 0.0 {
                    grads.add_scaled(&params, mu)?;
                    grads.add_scaled(global, -mu)?;
                }
            }
            sgd_step(&mut params, &grads, &mut momentum, &cfg.sgd, round)?;
            final_loss = loss;
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite {
            context: format!("client {} parameters after local training", client_id),
        });
    }
    Ok(ClientUpdate {
        client_id,
        params,
        num_samples: shard.len(),
        final_local_loss: final_loss,
    })
}

/// Dataset-size-weighted average over the participating updates:
/// sum_k (n_k / sum_i n_i) w_k.
pub fn aggregate_weighted(updates: &[ClientUpdate]) -> Result<ModelParams> {
    Ok(aggregate_weighted_and_sum(updates)?.0)
}

/// Single-pass aggregation returning both the weighted average and the
/// unweighted sum of client models (the latter feeds the shrink stage's
/// variance computation).
pub fn aggregate_weighted_and_sum(updates: &[ClientUpdate]) -> Result<(ModelParams, ModelParams)> {
    if updates.is_empty() {
        return Err(Error::contract("no updates to aggregate".to_string()));
    }
    let total: usize = updates.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(Error::contract("all updates report zero samples".to_string()));
    }
    let mut weighted = updates[0].params.zeros_like();
    let mut sum = updates[0].params.zeros_like();
    for u in updates {
        let lambda = u.num_samples as f64 / total as f64;
        weighted.add_scaled(&u.params, lambda)?;
        sum.add_scaled(&u.params, 1.0)?;
    }
    Ok((weighted, sum))
}

fn run_clients(
    global: &ModelParams,
    shards: &[Dataset],
    participants: &[usize],
    cfg: &FlConfig,
    round: usize,
    threads: usize,
) -> Result<Vec<ClientUpdate>> {
    let active: Vec<usize> = participants
        .iter()
        .copied()
        .filter(|&id| !shards[id].is_empty())
        .collect();
    if active.is_empty() {
        return Err(Error::contract("no participant has data this round".to_string()));
    }
    if threads <= 1 || active.len() == 1 {
        return active
            .iter()
            .map(|&id| local_train(global, &shards[id], id, cfg, round))
            .collect();
    }
    let workers = threads.min(active.len());
    let chunk = active.len().div_ceil(workers);
    let mut results: Vec<Option<Result<ClientUpdate>>> = Vec::new();
    results.resize_with(active.len(), || None);
    std::thread::scope(|scope| {
        for (slot_chunk, id_chunk) in results.chunks_mut(chunk).zip(active.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, &id) in slot_chunk.iter_mut().zip(id_chunk) {
                    *slot = Some(local_train(global, &shards[id], id, cfg, round));
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("worker filled every slot"))
        .collect()
}

/// Execute a full experiment: partition the data, run `rounds` federated
/// rounds (local training, weighted aggregation, shrink stage), evaluating
/// on the held-out test split each round.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let (train, test) = cfg.data.source.load()?;
    cfg.check_against_data(&train)?;
    let partition = dirichlet_partition(&train, &cfg.partition_spec())?;
    let shards: Vec<Dataset> = partition
        .assignments
        .iter()
        .map(|idx| train.subset(idx))
        .collect::<Result<_>>()?;

    let mut global = init_model(&cfg.model)?;
    let oracle_grid = lws::default_oracle_grid();
    let mut rounds = Vec::with_capacity(cfg.fl.rounds);
    for round in 0..cfg.fl.rounds {
        let participants = select_participants(
            cfg.fl.num_clients,
            cfg.fl.participation_ratio,
            round,
            cfg.fl.seed,
        );
        let updates = run_clients(&global, &shards, &participants, &cfg.fl, round, threads)
            .map_err(|e| e.in_round(round))?;

        let agg_start = Instant::now();
        let (agg, client_sum) =
            aggregate_weighted_and_sum(&updates).map_err(|e| e.in_round(round))?;
        let agg_seconds = agg_start.elapsed().as_secs_f64();

        let lws_start = Instant::now();
        let client_params: Vec<&ModelParams> = updates.iter().map(|u| &u.params).collect();
        let (next_global, mut shrink) =
            lws::shrink_from_client_params(&agg, &global, &client_params, &client_sum, &cfg.lws)
                .map_err(|e| e.in_round(round))?;
        let lws_seconds = lws_start.elapsed().as_secs_f64();

        if cfg.lws.oracle {
            let oracle = lws::oracle_gamma_search(&agg, &global, &test, &oracle_grid)
                .map_err(|e| e.in_round(round))?;
            shrink.oracle_gamma = Some(oracle.gamma_star);
            shrink.oracle_r = Some(oracle.r);
        }

        global = next_global;
        if !global.all_finite() {
            return Err(Error::NonFinite {
                context: "global model after shrink".to_string(),
            }
            .in_round(round));
        }
        let (test_accuracy, test_loss) =
            evaluate(&global, &test.inputs, &test.labels, 256).map_err(|e| e.in_round(round))?;
        rounds.push(RoundRecord {
            round,
            participants: updates.iter().map(|u| u.client_id).collect(),
            test_accuracy,
            test_loss,
            shrink,
            agg_seconds,
            lws_seconds,
        });
    }
    Ok(ExperimentResult {
        rounds,
        final_model: global,
    })
}
