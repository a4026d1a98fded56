//! Adaptive layer-wise weight shrinking.
//!
//! After weighted aggregation the server rescales the aggregated model: for
//! each layer group, a shrinking factor
//!
//!   gamma_l = ||w_l|| / (beta * tau_l * ||g_l|| + ||w_l||)
//!
//! is computed from the previous global model's layer norm ||w_l||, the
//! pseudo-gradient norm ||g_l|| = ||agg_l - w_l||, and the variance tau_l of
//! the client gradients for that layer. High client disagreement (large tau)
//! pushes gamma below 1 and shrinks the layer, acting as an adaptive,
//! per-layer regularizer; with beta = 0 every gamma is exactly 1 and the
//! stage is the identity.
//!
//! Client gradients are defined as g_k = w_global - w_k, and tau is the mean
//! L2 deviation from their unweighted mean. Norms are L2 over the flattened
//! concatenation of a group's tensors. Under partial participation all
//! quantities use the participating subset, with K = subset size.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fl::ClientUpdate;
use crate::nn::{evaluate, ModelParams};

/// Where shrinking applies: not at all, one factor for the whole model, or
/// one factor per layer group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LwsMode {
    Off,
    ModelWise,
    LayerWise,
}

impl LwsMode {
    pub fn name(&self) -> &'static str {
        match self {
            LwsMode::Off => "off",
            LwsMode::ModelWise => "model_wise",
            LwsMode::LayerWise => "layer_wise",
        }
    }
}

/// Shrinking stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwsConfig {
    pub mode: LwsMode,
    /// Scaling term converting gradient variance into regularization
    /// strength; 0 disables shrinking exactly.
    pub beta: f64,
    /// Also run the held-out grid search for the optimal model-wise gamma
    /// each round (diagnostic; reported, never applied).
    #[serde(default)]
    pub oracle: bool,
}

impl LwsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::config("lws.beta", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-client pseudo-gradients g_k = w_global - w_k.
#[derive(Debug, Clone)]
pub struct GradientSet {
    grads: Vec<ModelParams>,
}

impl GradientSet {
    pub fn new(grads: Vec<ModelParams>) -> Result<Self> {
        if grads.is_empty() {
            return Err(Error::contract("gradient set needs at least one client".to_string()));
        }
        for g in &grads[1..] {
            grads[0].ensure_compatible(g)?;
        }
        Ok(Self { grads })
    }

    pub fn participants(&self) -> usize {
        self.grads.len()
    }

    pub fn grads(&self) -> &[ModelParams] {
        &self.grads
    }
}

/// g_k = global - update_k, element-wise, per layer.
pub fn client_gradients(global: &ModelParams, updates: &[ClientUpdate]) -> Result<GradientSet> {
    if updates.is_empty() {
        return Err(Error::contract("no client updates".to_string()));
    }
    let mut grads = Vec::with_capacity(updates.len());
    for u in updates {
        global.ensure_compatible(&u.params)?;
        let mut g = global.clone();
        g.add_scaled(&u.params, -1.0)?;
        grads.push(g);
    }
    GradientSet::new(grads)
}

/// Per-layer squared L2 deviations of each client's gradient from the
/// unweighted mean gradient. Returns (tau_model, tau_per_layer).
fn tau_from_grads(gs: &GradientSet) -> (f64, Vec<f64>) {
    let k = gs.participants();
    let mut mean = gs.grads()[0].zeros_like();
    for g in gs.grads() {
        mean.add_scaled(g, 1.0).expect("checked compatible");
    }
    mean.scale_all(1.0 / k as f64);

    let num_layers = mean.num_layers();
    let mut tau_layers = vec![0.0; num_layers];
    let mut tau_model = 0.0;
    for g in gs.grads() {
        let mut model_sq = 0.0;
        for (l, (gl, ml)) in g.layers().iter().zip(mean.layers()).enumerate() {
            let mut sq = 0.0;
            for (gt, mt) in gl.tensors.iter().zip(&ml.tensors) {
                for (a, b) in gt.data().iter().zip(mt.data()) {
                    let d = a - b;
                    sq += d * d;
                }
            }
            tau_layers[l] += sq.sqrt();
            model_sq += sq;
        }
        tau_model += model_sq.sqrt();
    }
    for t in &mut tau_layers {
        *t /= k as f64;
    }
    (tau_model / k as f64, tau_layers)
}

/// Gradient variance over the whole model: tau = (1/K) sum_k ||g_k - g_mean||.
pub fn compute_tau(gs: &GradientSet) -> f64 {
    tau_from_grads(gs).0
}

/// Per-layer gradient variance, restricting norms to each layer group.
pub fn compute_tau_per_layer(gs: &GradientSet) -> Vec<f64> {
    tau_from_grads(gs).1
}

/// A computed shrinking factor; `degenerate` marks the 0/0 case of an
/// all-zero layer, where gamma falls back to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaOutcome {
    pub gamma: f64,
    pub degenerate: bool,
}

/// Closed-form shrinking factor gamma = w / (beta * tau * g + w).
///
/// Requires g_norm, tau, beta >= 0. A zero w_norm (untrained layer) makes
/// the expression 0/0; gamma is then 1 (no shrinking) with the degenerate
/// flag set.
pub fn compute_gamma(w_norm: f64, g_norm: f64, tau: f64, beta: f64) -> GammaOutcome {
    debug_assert!(w_norm >= 0.0 && g_norm >= 0.0 && tau >= 0.0 && beta >= 0.0);
    if w_norm == 0.0 {
        log::warn!("layer with zero parameter norm: shrinking skipped (gamma = 1)");
        return GammaOutcome {
            gamma: 1.0,
            degenerate: true,
        };
    }
    GammaOutcome {
        gamma: w_norm / (beta * tau * g_norm + w_norm),
        degenerate: false,
    }
}

/// Per-layer shrink diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShrink {
    pub layer: String,
    /// Shrinking factor applied to this layer group.
    pub gamma: f64,
    pub tau: f64,
    /// ||w_l|| of the previous global model.
    pub w_norm: f64,
    /// ||agg_l - w_l||, the layer's pseudo-gradient norm.
    pub g_norm: f64,
    pub degenerate: bool,
}

/// Diagnostics for one aggregation round's shrink stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkReport {
    pub layers: Vec<LayerShrink>,
    /// Model-wise shrinking factor (applied in model-wise mode, reported
    /// for comparison otherwise).
    pub model_gamma: f64,
    pub model_tau: f64,
    pub model_w_norm: f64,
    pub model_g_norm: f64,
    /// Participating clients this round (the K in tau and the bound).
    pub participants: usize,
    /// sqrt(2 * tau / K), the generalization-gap diagnostic.
    pub bound: f64,
    /// Held-out grid-search optimum, when the oracle ran.
    pub oracle_gamma: Option<f64>,
    /// Balance ratio r = (1 - gamma*) ||w|| / (gamma* ||g||) at the oracle
    /// optimum, when the oracle ran.
    pub oracle_r: Option<f64>,
}

impl ShrinkReport {
    pub fn gamma_mean(&self) -> f64 {
        self.layers.iter().map(|l| l.gamma).sum::<f64>() / self.layers.len() as f64
    }

    pub fn gamma_min(&self) -> f64 {
        self.layers.iter().map(|l| l.gamma).fold(f64::INFINITY, f64::min)
    }

    pub fn gamma_max(&self) -> f64 {
        self.layers.iter().map(|l| l.gamma).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn tau_mean(&self) -> f64 {
        self.layers.iter().map(|l| l.tau).sum::<f64>() / self.layers.len() as f64
    }

    /// Population variance of the per-layer gammas.
    pub fn gamma_variance(&self) -> f64 {
        let mean = self.gamma_mean();
        self.layers.iter().map(|l| (l.gamma - mean).powi(2)).sum::<f64>() / self.layers.len() as f64
    }
}

/// Shared tail of the shrink stage once taus are known: layer norms, gammas,
/// scaling, and the report.
fn apply_shrink(
    agg: &ModelParams,
    global_prev: &ModelParams,
    tau_model: f64,
    tau_layers: &[f64],
    participants: usize,
    cfg: &LwsConfig,
) -> Result<(ModelParams, ShrinkReport)> {
    agg.ensure_compatible(global_prev)?;
    // Off behaves exactly like beta = 0: identical diagnostics, no scaling.
    let beta = match cfg.mode {
        LwsMode::Off => 0.0,
        _ => cfg.beta,
    };

    let num_layers = agg.num_layers();
    let mut w_norms = Vec::with_capacity(num_layers);
    let mut g_norms = Vec::with_capacity(num_layers);
    let mut model_w_sq = 0.0;
    let mut model_g_sq = 0.0;
    for (al, pl) in agg.layers().iter().zip(global_prev.layers()) {
        let mut w_sq = 0.0;
        let mut g_sq = 0.0;
        for (at, pt) in al.tensors.iter().zip(&pl.tensors) {
            for (a, p) in at.data().iter().zip(pt.data()) {
                let d = a - p;
                g_sq += d * d;
                w_sq += p * p;
            }
        }
        w_norms.push(w_sq.sqrt());
        g_norms.push(g_sq.sqrt());
        model_w_sq += w_sq;
        model_g_sq += g_sq;
    }
    let model_w_norm = model_w_sq.sqrt();
    let model_g_norm = model_g_sq.sqrt();
    let model_gamma = compute_gamma(model_w_norm, model_g_norm, tau_model, beta);

    let mut shrunk = agg.clone();
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let outcome = match cfg.mode {
            LwsMode::Off => GammaOutcome {
                gamma: 1.0,
                degenerate: false,
            },
            LwsMode::ModelWise => model_gamma,
            LwsMode::LayerWise => compute_gamma(w_norms[l], g_norms[l], tau_layers[l], beta),
        };
        if outcome.gamma != 1.0 {
            shrunk.scale_layer(l, outcome.gamma);
        }
        layers.push(LayerShrink {
            layer: agg.layers()[l].name.clone(),
            gamma: outcome.gamma,
            tau: tau_layers[l],
            w_norm: w_norms[l],
            g_norm: g_norms[l],
            degenerate: outcome.degenerate,
        });
    }
    let report = ShrinkReport {
        layers,
        model_gamma: model_gamma.gamma,
        model_tau: tau_model,
        model_w_norm,
        model_g_norm,
        participants,
        bound: generalization_bound(tau_model, participants),
        oracle_gamma: None,
        oracle_r: None,
    };
    Ok((shrunk, report))
}

/// Shrink the aggregated model according to `cfg`, reporting per-layer and
/// model-wise diagnostics. `agg` is the post-aggregation model, `global_prev`
/// the model that was broadcast this round.
pub fn shrink_layers(
    agg: &ModelParams,
    global_prev: &ModelParams,
    gs: &GradientSet,
    cfg: &LwsConfig,
) -> Result<(ModelParams, ShrinkReport)> {
    cfg.validate()?;
    agg.ensure_compatible(&gs.grads()[0])?;
    let (tau_model, tau_layers) = tau_from_grads(gs);
    apply_shrink(agg, global_prev, tau_model, &tau_layers, gs.participants(), cfg)
}

/// Optimized shrink stage for the round loop: computes tau directly from the
/// client models and their precomputed unweighted sum, using
/// g_k - g_mean = mean_w - w_k, so no per-client gradient buffers are built.
/// Algebraically identical to [`shrink_layers`] over [`client_gradients`].
pub fn shrink_from_client_params(
    agg: &ModelParams,
    global_prev: &ModelParams,
    clients: &[&ModelParams],
    client_sum: &ModelParams,
    cfg: &LwsConfig,
) -> Result<(ModelParams, ShrinkReport)> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::contract("no client models".to_string()));
    }
    agg.ensure_compatible(client_sum)?;
    let k = clients.len();
    let inv_k = 1.0 / k as f64;

    let num_layers = agg.num_layers();
    let mut tau_layers = vec![0.0; num_layers];
    let mut tau_model = 0.0;
    for w in clients {
        agg.ensure_compatible(w)?;
        let mut model_sq = 0.0;
        for (l, (wl, sl)) in w.layers().iter().zip(client_sum.layers()).enumerate() {
            let mut sq = 0.0;
            for (wt, st) in wl.tensors.iter().zip(&sl.tensors) {
                for (a, s) in wt.data().iter().zip(st.data()) {
                    let d = s * inv_k - a;
                    sq += d * d;
                }
            }
            tau_layers[l] += sq.sqrt();
            model_sq += sq;
        }
        tau_model += model_sq.sqrt();
    }
    for t in &mut tau_layers {
        *t *= inv_k;
    }
    tau_model *= inv_k;
    apply_shrink(agg, global_prev, tau_model, &tau_layers, k, cfg)
}

/// Result of the held-out gamma grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOutcome {
    pub gamma_star: f64,
    /// r = (1 - gamma*) ||w|| / (gamma* ||g||) from whole-model norms.
    pub r: f64,
}

/// Evaluate held-out loss of `gamma * agg` for each grid value and return
/// the arg-min (ties broken toward the largest gamma) plus the balance ratio
/// at the optimum.
pub fn oracle_gamma_search(
    agg: &ModelParams,
    global_prev: &ModelParams,
    heldout: &Dataset,
    grid: &[f64],
) -> Result<OracleOutcome> {
    if grid.is_empty() {
        return Err(Error::contract("empty gamma grid".to_string()));
    }
    if grid.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::contract("grid values must lie in (0, 1]".to_string()));
    }
    agg.ensure_compatible(global_prev)?;
    heldout.validate()?;

    let mut best_gamma = f64::NAN;
    let mut best_loss = f64::INFINITY;
    for &gamma in grid {
        let mut scaled = agg.clone();
        scaled.scale_all(gamma);
        let (_, loss) = evaluate(&scaled, &heldout.inputs, &heldout.labels, 256)?;
        if loss < best_loss || (loss == best_loss && gamma > best_gamma) {
            best_loss = loss;
            best_gamma = gamma;
        }
    }

    let w_norm = global_prev.l2_norm();
    let mut g_sq = 0.0;
    agg.zip_for_each(global_prev, |a, p| {
        let d = a - p;
        g_sq += d * d;
    })?;
    let g_norm = g_sq.sqrt();
    let r = if best_gamma == 1.0 {
        0.0
    } else {
        (1.0 - best_gamma) * w_norm / (best_gamma * g_norm)
    };
    Ok(OracleOutcome {
        gamma_star: best_gamma,
        r,
    })
}

/// Default search grid: [0.5, 0.9) at step 0.02, then 41 evenly spaced
/// values in [0.9, 1.0]. Dense near 1 where the optimum usually sits.
pub fn default_oracle_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..20).map(|i| 0.5 + 0.02 * i as f64).collect();
    grid.extend((0..=40).map(|i| 0.9 + 0.0025 * i as f64));
    grid
}

/// Standard Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::contract(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::contract("need at least 2 points".to_string()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "zero variance in an input series".to_string(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// sqrt(2 * tau / K): diagnostic upper bound on the expected generalization
/// gap under gradient variance tau and K participants.
pub fn generalization_bound(tau: f64, k: usize) -> f64 {
    debug_assert!(tau >= 0.0 && k >= 1);
    (2.0 * tau / k as f64).sqrt()
}
