//! Training loop: Adam without weight decay, Gaussian Glorot initialization,
//! multiplicative step learning-rate schedule, accuracy metrics.
//!
//! Reference mode is deterministic: the RNG is a seeded ChaCha20 stream and
//! every reduction runs in a fixed order (the row-parallel GEMMs give each
//! output element to exactly one task), so identical seeds produce
//! bit-identical parameters regardless of thread count.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{augment, AugmentPolicy, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::nn::{GradStore, Graph, Mode, NodeParams, ParamShape, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_initial: f32,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_initial <= 0.0 {
            return Err(Error::InvalidConfig("lr_initial must be > 0".into()));
        }
        if !(0.0 < self.lr_decay_factor && self.lr_decay_factor < 1.0) {
            return Err(Error::InvalidConfig("decay factor must be in (0,1)".into()));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "decay epochs must be strictly increasing".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// MNIST schedule: reaches the reference LeNet accuracy ballpark on CPU.
    pub fn mnist_default() -> Self {
        TrainConfig {
            lr_initial: 1e-3,
            lr_decay_epochs: vec![15],
            lr_decay_factor: 0.1,
            epochs: 20,
            batch_size: 64,
            seed: 1,
            augment: AugmentPolicy::none(),
        }
    }

    /// CIFAR-10 smoke schedule (the short CI target).
    pub fn cifar_smoke() -> Self {
        TrainConfig {
            lr_initial: 1e-2,
            lr_decay_epochs: vec![10, 13],
            lr_decay_factor: 0.1,
            epochs: 15,
            batch_size: 128,
            seed: 1,
            augment: AugmentPolicy::cifar(),
        }
    }

    /// CIFAR-10 long schedule for the optional full reproduction.
    pub fn cifar_full() -> Self {
        TrainConfig {
            lr_initial: 1e-2,
            lr_decay_epochs: vec![80, 100],
            lr_decay_factor: 0.1,
            epochs: 120,
            batch_size: 128,
            seed: 1,
            augment: AugmentPolicy::cifar(),
        }
    }
}

/// Learning rate at an epoch: lr_initial * factor^(decay epochs passed).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f32 {
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr_initial * cfg.lr_decay_factor.powi(decays as i32)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradStore,
    pub v: GradStore,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Kept at exactly 0 on every parameter group; gradient canceling makes
    /// decay counterproductive for binary latents, and the rule is global.
    pub weight_decay: f32,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState {
            m: GradStore::zeros_like(params),
            v: GradStore::zeros_like(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Gaussian Glorot initialization: weight ~ Normal(0, sqrt(2/(fan_in +
/// fan_out))); biases 0; BN gamma 1, beta 0. Same seed, same parameters.
pub fn init_params(graph: &Graph, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    init_params_with(graph, &mut rng)
}

pub fn init_params_with(graph: &Graph, rng: &mut ChaCha20Rng) -> Result<ParamStore> {
    let shapes = graph.param_shapes()?;
    let mut slots = Vec::with_capacity(shapes.len());
    for ps in shapes {
        let slot = match ps {
            None => NodeParams::None,
            Some(ParamShape::Conv { weight, bias }) => {
                let fan_in = weight[1] * weight[2] * weight[3];
                let fan_out = weight[0] * weight[2] * weight[3];
                affine_slot(weight, bias, fan_in, fan_out, rng)?
            }
            Some(ParamShape::Dense { weight, bias }) => {
                let fan_in = weight[1];
                let fan_out = weight[0];
                affine_slot(weight, bias, fan_in, fan_out, rng)?
            }
            Some(ParamShape::BatchNorm { channels }) => NodeParams::BatchNorm {
                gamma: Tensor::filled(vec![channels], 1.0),
                beta: Tensor::zeros(vec![channels]),
                running_mean: Tensor::zeros(vec![channels]),
                running_var: Tensor::filled(vec![channels], 1.0),
            },
        };
        slots.push(slot);
    }
    Ok(ParamStore { slots })
}

fn affine_slot(
    shape: Vec<usize>,
    bias: bool,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha20Rng,
) -> Result<NodeParams> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let count: usize = shape.iter().product();
    let data = (0..count).map(|_| dist.sample(rng) as f32).collect();
    let out = shape[0];
    Ok(NodeParams::Affine {
        weight: Tensor::new(shape, data)?,
        bias: bias.then(|| Tensor::zeros(vec![out])),
    })
}

/// One Adam update with bias correction. The decay term is asserted zero.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &GradStore,
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    assert_eq!(
        state.weight_decay, 0.0,
        "weight decay must stay 0 on all parameter groups"
    );
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for i in 0..params.slots.len() {
        let gslot = &grads.slots[i];
        let mslot = &mut state.m.slots[i];
        let vslot = &mut state.v.slots[i];
        match &mut params.slots[i] {
            NodeParams::None => {}
            NodeParams::Affine { weight, bias } => {
                if let (Some(g), Some(m), Some(v)) =
                    (&gslot.weight, &mut mslot.weight, &mut vslot.weight)
                {
                    update_tensor(weight, g, m, v, lr, b1, b2, bc1, bc2, eps)?;
                }
                if let (Some(b), Some(g), Some(m), Some(v)) =
                    (bias, &gslot.bias, &mut mslot.bias, &mut vslot.bias)
                {
                    update_tensor(b, g, m, v, lr, b1, b2, bc1, bc2, eps)?;
                }
            }
            NodeParams::BatchNorm { gamma, beta, .. } => {
                if let (Some(g), Some(m), Some(v)) =
                    (&gslot.gamma, &mut mslot.gamma, &mut vslot.gamma)
                {
                    update_tensor(gamma, g, m, v, lr, b1, b2, bc1, bc2, eps)?;
                }
                if let (Some(g), Some(m), Some(v)) =
                    (&gslot.beta, &mut mslot.beta, &mut vslot.beta)
                {
                    update_tensor(beta, g, m, v, lr, b1, b2, bc1, bc2, eps)?;
                }
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    lr: f32,
    b1: f32,
    b2: f32,
    bc1: f32,
    bc2: f32,
    eps: f32,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::ShapeMismatch(format!(
            "adam: param {:?} vs grad {:?}",
            param.shape(),
            grad.shape()
        )));
    }
    let p = param.data_mut();
    let g = grad.data();
    let md = m.data_mut();
    let vd = v.data_mut();
    for i in 0..p.len() {
        md[i] = b1 * md[i] + (1.0 - b1) * g[i];
        vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Instrumentation: no binary latent weight beyond the clip threshold may
/// carry gradient.
pub fn check_gradient_canceling(
    graph: &Graph,
    params: &ParamStore,
    grads: &GradStore,
) -> bool {
    let t_clip = graph.bin_cfg.clip_threshold;
    for (id, node) in graph.nodes.iter().enumerate() {
        let binary = matches!(
            node.kind,
            crate::nn::LayerKind::BinaryConv { .. } | crate::nn::LayerKind::BinaryDense { .. }
        );
        if !binary {
            continue;
        }
        if let (NodeParams::Affine { weight, .. }, Some(g)) =
            (&params.slots[id], &grads.slots[id].weight)
        {
            for (w, gv) in weight.data().iter().zip(g.data()) {
                if w.abs() > t_clip && *gv != 0.0 {
                    return false;
                }
            }
        }
    }
    true
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub train_acc: f32,
    pub test_top1: f32,
    pub test_top5: f32,
}

#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
}

/// Everything needed to resume training bit-identically.
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub rng: ChaCha20Rng,
    pub next_epoch: usize,
    pub best_top1: f32,
    pub best_params: ParamStore,
}

impl TrainState {
    pub fn fresh(graph: &Graph, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let params = init_params_with(graph, &mut rng)?;
        let adam = AdamState::new(&params);
        Ok(TrainState {
            best_params: params.clone(),
            params,
            adam,
            rng,
            next_epoch: 0,
            best_top1: -1.0,
        })
    }
}

fn gather_batch(split: &DatasetSplit, indices: &[usize]) -> Result<(Tensor, Vec<u32>)> {
    let shape = split.images.shape();
    let sample: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(indices.len() * sample);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        data.extend_from_slice(&split.images.data()[i * sample..(i + 1) * sample]);
        labels.push(split.labels[i]);
    }
    let mut bshape = shape.to_vec();
    bshape[0] = indices.len();
    Ok((Tensor::new(bshape, data)?, labels))
}

fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn topk_contains(row: &[f32], label: usize, k: usize) -> bool {
    let v = row[label];
    let mut better = 0;
    for (i, &o) in row.iter().enumerate() {
        if o > v || (o == v && i < label) {
            better += 1;
        }
    }
    better < k
}

/// Eval-mode accuracy over a split; returns (top1, top5).
pub fn evaluate(
    graph: &Graph,
    params: &mut ParamStore,
    split: &DatasetSplit,
    batch_size: usize,
) -> Result<(f32, f32)> {
    let n = split.len();
    let classes = graph.infer_shapes(1)?[graph.logits][1];
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut start = 0;
    while start < n {
        let count = batch_size.min(n - start);
        let indices: Vec<usize> = (start..start + count).collect();
        let (batch, labels) = gather_batch(split, &indices)?;
        let acts = graph.forward(params, &batch, None, Mode::Eval)?;
        let logits = acts.values[graph.logits].as_ref().unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            if argmax_row(row) == label as usize {
                top1 += 1;
            }
            if topk_contains(row, label as usize, 5.min(classes)) {
                top5 += 1;
            }
        }
        start += count;
    }
    Ok((top1 as f32 / n as f32, top5 as f32 / n as f32))
}

/// Train for the configured epochs (resuming from `state` when given),
/// invoking `on_epoch` after each epoch. Checkpointing the best-accuracy
/// parameters is handled here; persistence is the caller's concern.
pub fn fit(
    graph: &Graph,
    data: &Dataset,
    cfg: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrainState, RunMetrics)> {
    cfg.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::fresh(graph, cfg)?,
    };
    let mut metrics = RunMetrics { epochs: Vec::new() };
    let n = data.train.len();
    for epoch in state.next_epoch..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = gather_batch(&data.train, chunk)?;
            let batch = if cfg.augment.is_identity() {
                batch
            } else {
                augment(&batch, &cfg.augment, &mut state.rng)?
            };
            let acts = graph.forward(&mut state.params, &batch, Some(&labels), Mode::Train)?;
            let loss = acts.loss.expect("training forward computes the loss");
            if !loss.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "loss diverged at epoch {epoch} ({loss})"
                )));
            }
            let logits = acts.values[graph.logits].as_ref().unwrap();
            let classes = logits.shape()[1];
            for (i, &label) in labels.iter().enumerate() {
                if argmax_row(&logits.data()[i * classes..(i + 1) * classes]) == label as usize
                {
                    correct += 1;
                }
            }
            let grads = graph.backward(&state.params, &acts, &labels)?;
            debug_assert!(check_gradient_canceling(graph, &state.params, &grads));
            adam_step(&mut state.params, &grads, &mut state.adam, lr)?;
            loss_sum += loss as f64;
            seen += labels.len();
            batches += 1;
        }
        let (top1, top5) = evaluate(graph, &mut state.params, &data.test, cfg.batch_size)?;
        let em = EpochMetrics {
            epoch,
            lr,
            train_loss: (loss_sum / batches.max(1) as f64) as f32,
            train_acc: correct as f32 / seen.max(1) as f32,
            test_top1: top1,
            test_top5: top5,
        };
        if top1 > state.best_top1 {
            state.best_top1 = top1;
            state.best_params = state.params.clone();
        }
        on_epoch(&em);
        metrics.epochs.push(em);
        state.next_epoch = epoch + 1;
    }
    Ok((state, metrics))
}

/// Synthetic classification set for tests and smoke runs: per-class Gaussian
/// blobs in image space.
pub fn synthetic_dataset(
    seed: u64,
    classes: usize,
    per_class: usize,
    shape: (usize, usize, usize),
) -> Dataset {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (c, h, w) = shape;
    let sample = c * h * w;
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..sample).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut make = |n_per: usize| {
        let mut data = Vec::with_capacity(classes * n_per * sample);
        let mut labels = Vec::with_capacity(classes * n_per);
        for class in 0..classes {
            for _ in 0..n_per {
                for j in 0..sample {
                    data.push(centers[class][j] + rng.gen_range(-0.3..0.3));
                }
                labels.push(class as u32);
            }
        }
        DatasetSplit {
            images: Tensor::new(vec![classes * n_per, c, h, w], data).unwrap(),
            labels,
        }
    };
    let train = make(per_class);
    let test = make((per_class / 4).max(1));
    Dataset {
        train,
        test,
        mean: vec![0.0; c],
        std: vec![1.0; c],
        num_classes: classes,
    }
}
