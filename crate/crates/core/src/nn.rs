//! Minimal deterministic neural-network substrate.
//!
//! Two model families are supported: an MLP (dense chain) and a small CNN
//! (3x3 same-padding convolutions, each followed by ReLU and 2x2 max
//! pooling, then two dense layers). Parameters are grouped per conceptual
//! layer (weight + bias share a group), which is the granularity at which
//! aggregation and layer-wise shrinking operate.
//!
//! Architecture is recovered from parameter shapes: a rank-4 weight is a 3x3
//! same-padding convolution, a rank-2 weight a dense layer. ReLU follows
//! every layer except the last; max pooling follows every convolution.
//! Everything is f64 and fully deterministic in the seeds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain};
use crate::tensor::Tensor;

/// One conceptual layer: weight tensor plus optional bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGroup {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

impl LayerGroup {
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Sum of squared elements over the whole group.
    pub fn sq_l2(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_l2).sum()
    }
}

/// Ordered collection of named layer groups; the unit of broadcast, upload,
/// aggregation, and shrinking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<LayerGroup>,
}

impl ModelParams {
    pub fn from_layers(layers: Vec<LayerGroup>) -> Result<Self> {
        for (i, a) in layers.iter().enumerate() {
            for b in &layers[i + 1..] {
                if a.name == b.name {
                    return Err(Error::contract(format!("duplicate layer name {:?}", a.name)));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerGroup] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerGroup] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerGroup::num_params).sum()
    }

    /// Aggregation compatibility: names, group sizes, and shapes must match
    /// positionally.
    pub fn is_compatible(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.tensors.len() == b.tensors.len()
                    && a.tensors
                        .iter()
                        .zip(&b.tensors)
                        .all(|(x, y)| x.shape() == y.shape())
            })
    }

    pub fn ensure_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::contract("incompatible model parameters".to_string()))
        }
    }

    /// Same structure, all elements zero.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|g| LayerGroup {
                    name: g.name.clone(),
                    tensors: g.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
                })
                .collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, c: f64) -> Result<()> {
        self.ensure_compatible(other)?;
        for (g, og) in self.layers.iter_mut().zip(&other.layers) {
            for (t, ot) in g.tensors.iter_mut().zip(&og.tensors) {
                t.add_scaled(ot, c)?;
            }
        }
        Ok(())
    }

    pub fn scale_all(&mut self, c: f64) {
        for g in &mut self.layers {
            for t in &mut g.tensors {
                t.scale_in_place(c);
            }
        }
    }

    pub fn scale_layer(&mut self, layer: usize, c: f64) {
        for t in &mut self.layers[layer].tensors {
            t.scale_in_place(c);
        }
    }

    pub fn sq_l2(&self) -> f64 {
        self.layers.iter().map(LayerGroup::sq_l2).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_l2().sqrt()
    }

    /// Per-layer-group L2 norms, in layer order.
    pub fn layer_l2_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|g| g.sq_l2().sqrt()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|g| g.tensors.iter().all(Tensor::all_finite))
    }

    /// Visit all elements of two compatible models in lockstep.
    pub fn zip_for_each(&self, other: &ModelParams, mut f: impl FnMut(f64, f64)) -> Result<()> {
        self.ensure_compatible(other)?;
        for (g, og) in self.layers.iter().zip(&other.layers) {
            for (t, ot) in g.tensors.iter().zip(&og.tensors) {
                for (a, b) in t.data().iter().zip(ot.data()) {
                    f(*a, *b);
                }
            }
        }
        Ok(())
    }
}

/// Which model family to instantiate, with its dimensions and init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Dense chain; `layer_sizes` = [input, hidden..., num_classes].
    Mlp { layer_sizes: Vec<usize>, init_seed: u64 },
    /// 3x3 same-padding convolutions (ReLU + 2x2 max pool after each),
    /// then two dense layers.
    Cnn {
        in_channels: usize,
        image_size: usize,
        conv_channels: Vec<usize>,
        fc_hidden: usize,
        num_classes: usize,
        init_seed: u64,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { layer_sizes, .. } => {
                if layer_sizes.len() < 2 {
                    return Err(Error::config("model.layer_sizes", "need at least input and output sizes"));
                }
                if layer_sizes.contains(&0) {
                    return Err(Error::config("model.layer_sizes", "zero-sized layer"));
                }
            }
            ModelSpec::Cnn {
                in_channels,
                image_size,
                conv_channels,
                fc_hidden,
                num_classes,
                ..
            } => {
                if *in_channels == 0 || *image_size == 0 || *fc_hidden == 0 || *num_classes == 0 {
                    return Err(Error::config("model", "zero-sized layer"));
                }
                if conv_channels.is_empty() || conv_channels.len() > 3 {
                    return Err(Error::config("model.conv_channels", "need 1..=3 conv layers"));
                }
                if conv_channels.contains(&0) {
                    return Err(Error::config("model.conv_channels", "zero-sized layer"));
                }
                let s = *image_size;
                if s % (1 << conv_channels.len()) != 0 {
                    return Err(Error::config(
                        "model.image_size",
                        format!("must be divisible by {}", 1 << conv_channels.len()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { layer_sizes, .. } => *layer_sizes.last().unwrap(),
            ModelSpec::Cnn { num_classes, .. } => *num_classes,
        }
    }

    /// Per-sample input shape (without the batch dimension).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { layer_sizes, .. } => vec![layer_sizes[0]],
            ModelSpec::Cnn {
                in_channels, image_size, ..
            } => vec![*in_channels, *image_size, *image_size],
        }
    }

    pub fn init_seed(&self) -> u64 {
        match self {
            ModelSpec::Mlp { init_seed, .. } | ModelSpec::Cnn { init_seed, .. } => *init_seed,
        }
    }
}

/// Fan-in-scaled uniform weights, zero biases; bit-deterministic in the seed.
pub fn init_model(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = rng::derive_rng(spec.init_seed(), domain::MODEL_INIT, &[]);
    let mut fill = |shape: Vec<usize>, fan_in: usize| -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("generated data fills shape")
    };
    let mut layers = Vec::new();
    match spec {
        ModelSpec::Mlp { layer_sizes, .. } => {
            for (i, w) in layer_sizes.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                layers.push(LayerGroup {
                    name: format!("fc{}", i + 1),
                    tensors: vec![fill(vec![fan_out, fan_in], fan_in), Tensor::zeros(vec![fan_out])],
                });
            }
        }
        ModelSpec::Cnn {
            in_channels,
            image_size,
            conv_channels,
            fc_hidden,
            num_classes,
            ..
        } => {
            let mut prev = *in_channels;
            for (i, &ch) in conv_channels.iter().enumerate() {
                layers.push(LayerGroup {
                    name: format!("conv{}", i + 1),
                    tensors: vec![fill(vec![ch, prev, 3, 3], prev * 9), Tensor::zeros(vec![ch])],
                });
                prev = ch;
            }
            let spatial = image_size >> conv_channels.len();
            let flat = prev * spatial * spatial;
            layers.push(LayerGroup {
                name: "fc1".to_string(),
                tensors: vec![fill(vec![*fc_hidden, flat], flat), Tensor::zeros(vec![*fc_hidden])],
            });
            layers.push(LayerGroup {
                name: "fc2".to_string(),
                tensors: vec![fill(vec![*num_classes, *fc_hidden], *fc_hidden), Tensor::zeros(vec![*num_classes])],
            });
        }
    }
    ModelParams::from_layers(layers)
}

enum StageKind {
    Conv,
    Dense,
}

fn stage_kind(group: &LayerGroup) -> Result<StageKind> {
    let weight = group
        .tensors
        .first()
        .ok_or_else(|| Error::contract(format!("layer {:?} has no tensors", group.name)))?;
    match weight.rank() {
        4 => Ok(StageKind::Conv),
        2 => Ok(StageKind::Dense),
        r => Err(Error::contract(format!(
            "layer {:?}: unsupported weight rank {}",
            group.name, r
        ))),
    }
}

fn bias_of(group: &LayerGroup) -> Option<&Tensor> {
    group.tensors.get(1)
}

/// y[b,o] = sum_i x[b,i] w[o,i] + bias[o]; x is flattened to (batch, rest).
fn dense_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let batch = x.shape()[0];
    let in_dim: usize = x.shape()[1..].iter().product();
    let (out_dim, w_in) = (w.shape()[0], w.shape()[1]);
    if w_in != in_dim {
        return Err(Error::contract(format!(
            "dense input {} does not match weight fan-in {}",
            in_dim, w_in
        )));
    }
    let mut y = Tensor::zeros(vec![batch, out_dim]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for b in 0..batch {
        let xrow = &xd[b * in_dim..(b + 1) * in_dim];
        let yrow = &mut yd[b * out_dim..(b + 1) * out_dim];
        for o in 0..out_dim {
            let wrow = &wd[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for i in 0..in_dim {
                acc += xrow[i] * wrow[i];
            }
            yrow[o] = acc;
        }
        if let Some(bias) = bias {
            for (v, bv) in yrow.iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
    }
    Ok(y)
}

/// Gradients of `dense_forward` wrt weight, bias, and input.
fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    want_dx: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let batch = x.shape()[0];
    let in_dim: usize = x.shape()[1..].iter().product();
    let out_dim = w.shape()[0];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());

    let mut dw = Tensor::zeros(vec![out_dim, in_dim]);
    let mut db = Tensor::zeros(vec![out_dim]);
    {
        let dwd = dw.data_mut();
        for b in 0..batch {
            let xrow = &xd[b * in_dim..(b + 1) * in_dim];
            let dyrow = &dyd[b * out_dim..(b + 1) * out_dim];
            for o in 0..out_dim {
                let g = dyrow[o];
                if g != 0.0 {
                    let dwrow = &mut dwd[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        dwrow[i] += g * xrow[i];
                    }
                }
            }
        }
    }
    {
        let dbd = db.data_mut();
        for b in 0..batch {
            for o in 0..out_dim {
                dbd[o] += dyd[b * out_dim + o];
            }
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let dxd = dx.data_mut();
        for b in 0..batch {
            let dyrow = &dyd[b * out_dim..(b + 1) * out_dim];
            let dxrow = &mut dxd[b * in_dim..(b + 1) * in_dim];
            for o in 0..out_dim {
                let g = dyrow[o];
                if g != 0.0 {
                    let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        dxrow[i] += g * wrow[i];
                    }
                }
            }
        }
        dx
    });
    (dw, db, dx)
}

/// 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).
fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (batch, in_ch, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_ch, w_in) = (w.shape()[0], w.shape()[1]);
    if w_in != in_ch || x.rank() != 4 {
        return Err(Error::contract(format!(
            "conv input channels {} do not match weight fan-in {}",
            in_ch, w_in
        )));
    }
    let mut y = Tensor::zeros(vec![batch, out_ch, h, wd_]);
    let (xd, wdat) = (x.data(), w.data());
    let yd = y.data_mut();
    for b in 0..batch {
        for oc in 0..out_ch {
            let bval = bias.map_or(0.0, |t| t.data()[oc]);
            for r in 0..h {
                for c in 0..wd_ {
                    let mut acc = bval;
                    for ic in 0..in_ch {
                        let xbase = ((b * in_ch + ic) * h) * wd_;
                        let wbase = ((oc * in_ch + ic) * 3) * 3;
                        for dr in 0..3usize {
                            let rr = r + dr;
                            if rr < 1 || rr > h {
                                continue;
                            }
                            let rr = rr - 1;
                            for dc in 0..3usize {
                                let cc = c + dc;
                                if cc < 1 || cc > wd_ {
                                    continue;
                                }
                                acc += xd[xbase + rr * wd_ + (cc - 1)] * wdat[wbase + dr * 3 + dc];
                            }
                        }
                    }
                    yd[((b * out_ch + oc) * h + r) * wd_ + c] = acc;
                }
            }
        }
    }
    Ok(y)
}

fn conv_backward(x: &Tensor, w: &Tensor, dy: &Tensor, want_dx: bool) -> (Tensor, Tensor, Option<Tensor>) {
    let (batch, in_ch, h, wd_) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let out_ch = w.shape()[0];
    let (xd, wdat, dyd) = (x.data(), w.data(), dy.data());

    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![out_ch]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape().to_vec()));
    {
        let dwd = dw.data_mut();
        let dbd = db.data_mut();
        let dxd = dx.as_mut().map(|t| t.data_mut());
        let mut dxd = dxd;
        for b in 0..batch {
            for oc in 0..out_ch {
                for r in 0..h {
                    for c in 0..wd_ {
                        let g = dyd[((b * out_ch + oc) * h + r) * wd_ + c];
                        if g == 0.0 {
                            continue;
                        }
                        dbd[oc] += g;
                        for ic in 0..in_ch {
                            let xbase = ((b * in_ch + ic) * h) * wd_;
                            let wbase = ((oc * in_ch + ic) * 3) * 3;
                            for dr in 0..3usize {
                                let rr = r + dr;
                                if rr < 1 || rr > h {
                                    continue;
                                }
                                let rr = rr - 1;
                                for dc in 0..3usize {
                                    let cc = c + dc;
                                    if cc < 1 || cc > wd_ {
                                        continue;
                                    }
                                    let xi = xbase + rr * wd_ + (cc - 1);
                                    dwd[wbase + dr * 3 + dc] += g * xd[xi];
                                    if let Some(dxd) = dxd.as_mut() {
                                        dxd[xi] += g * wdat[wbase + dr * 3 + dc];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input (first max on ties).
fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (batch, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(vec![batch, ch, oh, ow]);
    let mut argmax = vec![0usize; batch * ch * oh * ow];
    let xd = x.data();
    let yd = y.data_mut();
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * h * w;
            for r in 0..oh {
                for q in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = base + (2 * r) * w + 2 * q;
                    for dr in 0..2 {
                        for dq in 0..2 {
                            let i = base + (2 * r + dr) * w + (2 * q + dq);
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    let oi = ((b * ch + c) * oh + r) * ow + q;
                    yd[oi] = best;
                    argmax[oi] = best_i;
                }
            }
        }
    }
    (y, argmax)
}

fn maxpool_backward(dy: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let dxd = dx.data_mut();
    for (g, &i) in dy.data().iter().zip(argmax) {
        dxd[i] += *g;
    }
    dx
}

fn relu(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// dz = dh * 1[z > 0]
fn relu_backward(dh: &Tensor, z: &Tensor) -> Tensor {
    let data = dh
        .data()
        .iter()
        .zip(z.data())
        .map(|(&g, &zv)| if zv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(dh.shape().to_vec(), data).expect("same shape")
}

struct StageCache {
    input: Tensor,
    pre_relu: Tensor,
    pool_argmax: Option<(Vec<usize>, Vec<usize>)>, // (argmax, pre-pool shape)
}

fn forward_impl(params: &ModelParams, inputs: &Tensor, mut caches: Option<&mut Vec<StageCache>>) -> Result<Tensor> {
    if inputs.shape().is_empty() || inputs.shape()[0] == 0 {
        return Err(Error::contract("empty batch".to_string()));
    }
    if params.num_layers() == 0 {
        return Err(Error::contract("model has no layers".to_string()));
    }
    let last = params.num_layers() - 1;
    let mut act = inputs.clone();
    for (i, group) in params.layers().iter().enumerate() {
        let w = &group.tensors[0];
        let bias = bias_of(group);
        let kind = stage_kind(group)?;
        let input = act;
        let z = match kind {
            StageKind::Conv => {
                if input.rank() != 4 {
                    return Err(Error::contract(format!(
                        "layer {:?}: conv needs 4-d input, got rank {}",
                        group.name,
                        input.rank()
                    )));
                }
                conv_forward(&input, w, bias)?
            }
            StageKind::Dense => dense_forward(&input, w, bias)?,
        };
        let h = if i < last { relu(&z) } else { z.clone() };
        let (out, pool_argmax) = match kind {
            StageKind::Conv => {
                let shape = h.shape().to_vec();
                let (p, amax) = maxpool_forward(&h);
                (p, Some((amax, shape)))
            }
            StageKind::Dense => (h, None),
        };
        if let Some(caches) = caches.as_mut() {
            caches.push(StageCache {
                input,
                pre_relu: z,
                pool_argmax,
            });
        }
        act = out;
    }
    if !act.all_finite() {
        return Err(Error::NonFinite {
            context: "forward logits".to_string(),
        });
    }
    Ok(act)
}

/// Run the model on a batch; returns logits of shape (batch, num_classes).
pub fn forward(params: &ModelParams, batch_inputs: &Tensor) -> Result<Tensor> {
    forward_impl(params, batch_inputs, None)
}

/// Numerically stable softmax cross-entropy, mean over the batch.
/// Returns the loss and the gradient wrt logits.
fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if batch == 0 {
        return Err(Error::contract("empty batch".to_string()));
    }
    if labels.len() != batch {
        return Err(Error::contract(format!(
            "{} labels for batch of {}",
            labels.len(),
            batch
        )));
    }
    let ld = logits.data();
    let mut dlogits = Tensor::zeros(vec![batch, classes]);
    let dd = dlogits.data_mut();
    let mut loss = 0.0;
    for b in 0..batch {
        let label = labels[b];
        if label >= classes {
            return Err(Error::contract(format!(
                "label {} out of range for {} classes",
                label, classes
            )));
        }
        let row = &ld[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += denom.ln() - (row[label] - max);
        let drow = &mut dd[b * classes..(b + 1) * classes];
        for (c, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            drow[c] = (p - if c == label { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss / batch as f64, dlogits))
}

/// Mean softmax cross-entropy loss and analytic gradients for a batch.
/// Gradient shapes mirror `params`.
pub fn loss_and_grad(params: &ModelParams, inputs: &Tensor, labels: &[usize]) -> Result<(f64, ModelParams)> {
    let mut caches = Vec::with_capacity(params.num_layers());
    let logits = forward_impl(params, inputs, Some(&mut caches))?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;

    let last = params.num_layers() - 1;
    let mut grads = params.zeros_like();
    let mut upstream = dlogits;
    for i in (0..params.num_layers()).rev() {
        let group = &params.layers()[i];
        let cache = &caches[i];
        let w = &group.tensors[0];
        let kind = stage_kind(group)?;
        // Undo pooling, then the ReLU mask, then the linear stage.
        let dh = match &cache.pool_argmax {
            Some((argmax, pre_pool_shape)) => maxpool_backward(&upstream, argmax, pre_pool_shape),
            None => upstream,
        };
        let dz = if i < last { relu_backward(&dh, &cache.pre_relu) } else { dh };
        let want_dx = i > 0;
        let (dw, db, dx) = match kind {
            StageKind::Conv => conv_backward(&cache.input, w, &dz, want_dx),
            StageKind::Dense => dense_backward(&cache.input, w, &dz, want_dx),
        };
        let g = &mut grads.layers_mut()[i];
        g.tensors[0] = dw;
        if g.tensors.len() > 1 {
            g.tensors[1] = db;
        }
        upstream = match dx {
            Some(dx) => dx,
            None => break,
        };
    }
    if !grads.all_finite() || !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "loss_and_grad".to_string(),
        });
    }
    Ok((loss, grads))
}

/// Client-side SGD settings; the effective learning rate decays per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_per_round: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("sgd.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("sgd.momentum", "must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("sgd.weight_decay", "must be nonnegative"));
        }
        if !(self.lr_decay_per_round > 0.0 && self.lr_decay_per_round <= 1.0) {
            return Err(Error::config("sgd.lr_decay_per_round", "must be in (0, 1]"));
        }
        Ok(())
    }

    /// learning_rate * decay^round
    pub fn effective_lr(&self, round: usize) -> f64 {
        self.learning_rate * self.lr_decay_per_round.powi(round as i32)
    }
}

/// Per-client momentum buffers; never shared between clients.
#[derive(Debug, Clone)]
pub struct MomentumState {
    buffers: ModelParams,
}

impl MomentumState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            buffers: params.zeros_like(),
        }
    }

    pub fn buffers(&self) -> &ModelParams {
        &self.buffers
    }
}

/// Classic momentum SGD with coupled weight decay (g <- g + wd * w), using
/// the effective learning rate for `round`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut MomentumState,
    cfg: &SgdConfig,
    round: usize,
) -> Result<()> {
    params.ensure_compatible(grads)?;
    let lr = cfg.effective_lr(round);
    for ((pg, gg), vg) in params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(state.buffers.layers_mut())
    {
        for ((pt, gt), vt) in pg.tensors.iter_mut().zip(&gg.tensors).zip(&mut vg.tensors) {
            let p = pt.data_mut();
            let g = gt.data();
            let v = vt.data_mut();
            for i in 0..p.len() {
                let g_aug = g[i] + cfg.weight_decay * p[i];
                v[i] = cfg.momentum * v[i] + g_aug;
                p[i] -= lr * v[i];
            }
        }
    }
    Ok(())
}

/// Batched accuracy and mean loss on a labelled set.
pub fn evaluate(params: &ModelParams, inputs: &Tensor, labels: &[usize], batch_size: usize) -> Result<(f64, f64)> {
    let n = inputs.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(Error::contract("evaluation set empty or mislabelled".to_string()));
    }
    let sample_len: usize = inputs.shape()[1..].iter().product();
    let bs = batch_size.max(1);
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let rows = end - start;
        let mut shape = inputs.shape().to_vec();
        shape[0] = rows;
        let batch = Tensor::new(
            shape,
            inputs.data()[start * sample_len..end * sample_len].to_vec(),
        )?;
        let logits = forward(params, &batch)?;
        let classes = logits.shape()[1];
        let ld = logits.data();
        for b in 0..rows {
            let row = &ld[b * classes..(b + 1) * classes];
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == labels[start + b] {
                correct += 1;
            }
        }
        let (batch_loss, _) = softmax_cross_entropy(&logits, &labels[start..end])?;
        loss_sum += batch_loss * rows as f64;
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}
