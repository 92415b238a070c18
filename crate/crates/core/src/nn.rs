//! Reverse-mode autodiff over a static layer graph.
//!
//! A [`Graph`] is a topologically ordered list of nodes. Real layers receive
//! exact analytic gradients; binary layers (BinaryConv / BinaryDense /
//! SignAct) propagate through the straight-through estimator for both
//! activations and latent weights, with the same clip threshold. Binary
//! layers carry no bias (a bias is absorbed by the following BatchNorm).
//!
//! Training-path binary convolution composes sign(input) with sign(latent
//! weights) through the float GEMM; spatial padding maps to +1 so the packed
//! deployment path produces identical pre-normalization outputs.

use crate::binarize::{
    scaled_binary_output, sign_forward, ste_backward, weight_scale, input_scale_k,
    BinarizeConfig, ScalingMode,
};
use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm_nt, gemm_tn, im2col, nchw_to_rows, rows_to_nchw, ConvGeometry};
use crate::tensor::{Shape, Tensor};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where a binary convolution applies its analytic scaling factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingPlacement {
    Forward,
    /// Magnitude-aware flavor: forward is unscaled, the factor multiplies
    /// only the latent weight gradient.
    BackwardOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    Conv {
        out_ch: usize,
        geom: ConvGeometry,
        bias: bool,
    },
    BinaryConv {
        out_ch: usize,
        geom: ConvGeometry,
        scaling: ScalingMode,
        placement: ScalingPlacement,
    },
    Dense {
        out_dim: usize,
        bias: bool,
    },
    BinaryDense {
        out_dim: usize,
    },
    BatchNorm,
    MaxPool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    ReLU,
    SignAct,
    Add,
    Concat,
    Flatten,
    SoftmaxXEnt,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: LayerKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub epsilon: f32,
    pub momentum: f32,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    /// C,H,W of a single sample.
    pub input_shape: (usize, usize, usize),
    pub logits: NodeId,
    /// Terminal SoftmaxXEnt node, if the graph carries a loss head.
    pub loss: Option<NodeId>,
    pub bin_cfg: BinarizeConfig,
    pub bn_cfg: BatchNormConfig,
}

pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_shape: (usize, usize, usize),
}

impl GraphBuilder {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        GraphBuilder {
            nodes: vec![Node {
                kind: LayerKind::Input,
                inputs: vec![],
            }],
            input_shape: (c, h, w),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            debug_assert!(i < self.nodes.len(), "inputs must precede the node");
        }
        self.nodes.push(Node { kind, inputs });
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, input: NodeId, out_ch: usize, geom: ConvGeometry, bias: bool) -> NodeId {
        self.push(LayerKind::Conv { out_ch, geom, bias }, vec![input])
    }

    pub fn binary_conv(&mut self, input: NodeId, out_ch: usize, geom: ConvGeometry) -> NodeId {
        self.binary_conv_scaled(input, out_ch, geom, ScalingMode::None, ScalingPlacement::Forward)
    }

    pub fn binary_conv_scaled(
        &mut self,
        input: NodeId,
        out_ch: usize,
        geom: ConvGeometry,
        scaling: ScalingMode,
        placement: ScalingPlacement,
    ) -> NodeId {
        self.push(
            LayerKind::BinaryConv {
                out_ch,
                geom,
                scaling,
                placement,
            },
            vec![input],
        )
    }

    pub fn dense(&mut self, input: NodeId, out_dim: usize, bias: bool) -> NodeId {
        self.push(LayerKind::Dense { out_dim, bias }, vec![input])
    }

    pub fn binary_dense(&mut self, input: NodeId, out_dim: usize) -> NodeId {
        self.push(LayerKind::BinaryDense { out_dim }, vec![input])
    }

    pub fn batch_norm(&mut self, input: NodeId) -> NodeId {
        self.push(LayerKind::BatchNorm, vec![input])
    }

    pub fn max_pool(&mut self, input: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        self.push(LayerKind::MaxPool { k, stride, pad }, vec![input])
    }

    pub fn avg_pool(&mut self, input: NodeId, k: usize, stride: usize) -> NodeId {
        self.push(LayerKind::AvgPool { k, stride }, vec![input])
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        self.push(LayerKind::GlobalAvgPool, vec![input])
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.push(LayerKind::ReLU, vec![input])
    }

    pub fn sign_act(&mut self, input: NodeId) -> NodeId {
        self.push(LayerKind::SignAct, vec![input])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(LayerKind::Add, vec![a, b])
    }

    pub fn concat(&mut self, inputs: Vec<NodeId>) -> NodeId {
        self.push(LayerKind::Concat, inputs)
    }

    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        self.push(LayerKind::Flatten, vec![input])
    }

    pub fn finish(mut self, logits: NodeId, bin_cfg: BinarizeConfig) -> Graph {
        let loss = self.push(LayerKind::SoftmaxXEnt, vec![logits]);
        Graph {
            nodes: self.nodes,
            input_shape: self.input_shape,
            logits,
            loss: Some(loss),
            bin_cfg,
            bn_cfg: BatchNormConfig::default(),
        }
    }
}

/// Per-node parameters. Binary layers keep real latent weights; their
/// binarized view is produced at forward time.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams {
    None,
    Affine {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub slots: Vec<NodeParams>,
}

/// Gradient (or moment) buffers mirroring the trainable parts of a store.
#[derive(Debug, Clone)]
pub struct GradSlot {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub beta: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct GradStore {
    pub slots: Vec<GradSlot>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let slots = params
            .slots
            .iter()
            .map(|p| match p {
                NodeParams::None => GradSlot {
                    weight: None,
                    bias: None,
                    gamma: None,
                    beta: None,
                },
                NodeParams::Affine { weight, bias } => GradSlot {
                    weight: Some(Tensor::zeros(weight.shape().to_vec())),
                    bias: bias.as_ref().map(|b| Tensor::zeros(b.shape().to_vec())),
                    gamma: None,
                    beta: None,
                },
                NodeParams::BatchNorm { gamma, beta, .. } => GradSlot {
                    weight: None,
                    bias: None,
                    gamma: Some(Tensor::zeros(gamma.shape().to_vec())),
                    beta: Some(Tensor::zeros(beta.shape().to_vec())),
                },
            })
            .collect();
        GradStore { slots }
    }
}

pub struct Activations {
    pub values: Vec<Option<Tensor>>,
    pub loss: Option<f32>,
}

impl Graph {
    /// Per-node output shapes for batch size `n`. Validates geometry.
    pub fn infer_shapes(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = match &node.kind {
                LayerKind::Input => {
                    let (c, h, w) = self.input_shape;
                    vec![n, c, h, w]
                }
                LayerKind::Conv { out_ch, geom, .. }
                | LayerKind::BinaryConv { out_ch, geom, .. } => {
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 4 {
                        return Err(Error::InvalidGeometry(format!(
                            "conv over rank-{} input",
                            s.len()
                        )));
                    }
                    let (oh, ow) = geom.out_dims(s[2], s[3])?;
                    vec![s[0], *out_ch, oh, ow]
                }
                LayerKind::Dense { out_dim, .. } | LayerKind::BinaryDense { out_dim } => {
                    let s = &shapes[node.inputs[0]];
                    if s.len() != 2 {
                        return Err(Error::ShapeMismatch(format!(
                            "dense over rank-{} input (flatten first)",
                            s.len()
                        )));
                    }
                    vec![s[0], *out_dim]
                }
                LayerKind::BatchNorm | LayerKind::ReLU | LayerKind::SignAct => {
                    shapes[node.inputs[0]].clone()
                }
                LayerKind::MaxPool { k, stride, pad } => {
                    let s = &shapes[node.inputs[0]];
                    let geom = ConvGeometry::new(*k, *k, *stride, *pad);
                    let (oh, ow) = geom.out_dims(s[2], s[3])?;
                    vec![s[0], s[1], oh, ow]
                }
                LayerKind::AvgPool { k, stride } => {
                    let s = &shapes[node.inputs[0]];
                    let geom = ConvGeometry::new(*k, *k, *stride, 0);
                    let (oh, ow) = geom.out_dims(s[2], s[3])?;
                    vec![s[0], s[1], oh, ow]
                }
                LayerKind::GlobalAvgPool => {
                    let s = &shapes[node.inputs[0]];
                    vec![s[0], s[1]]
                }
                LayerKind::Add => {
                    let a = &shapes[node.inputs[0]];
                    let b = &shapes[node.inputs[1]];
                    if a != b {
                        return Err(Error::ShapeMismatch(format!("add: {a:?} vs {b:?}")));
                    }
                    a.clone()
                }
                LayerKind::Concat => {
                    let first = shapes[node.inputs[0]].clone();
                    let mut channels = 0;
                    for &i in &node.inputs {
                        let s = &shapes[i];
                        if s.len() != 4 || s[0] != first[0] || s[2..] != first[2..] {
                            return Err(Error::ShapeMismatch(format!(
                                "concat: {s:?} vs {first:?}"
                            )));
                        }
                        channels += s[1];
                    }
                    vec![first[0], channels, first[2], first[3]]
                }
                LayerKind::Flatten => {
                    let s = &shapes[node.inputs[0]];
                    vec![s[0], s[1..].iter().product()]
                }
                LayerKind::SoftmaxXEnt => vec![1],
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Shape of the weight tensor each parameterized node needs, given the
    /// inferred activation shapes. None for parameterless nodes.
    pub fn param_shapes(&self) -> Result<Vec<Option<ParamShape>>> {
        let shapes = self.infer_shapes(1)?;
        let mut out = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ps = match &node.kind {
                LayerKind::Conv { out_ch, geom, bias } => {
                    let in_ch = shapes[node.inputs[0]][1];
                    Some(ParamShape::Conv {
                        weight: vec![*out_ch, in_ch, geom.kh, geom.kw],
                        bias: *bias,
                    })
                }
                LayerKind::BinaryConv { out_ch, geom, .. } => {
                    let in_ch = shapes[node.inputs[0]][1];
                    Some(ParamShape::Conv {
                        weight: vec![*out_ch, in_ch, geom.kh, geom.kw],
                        bias: false,
                    })
                }
                LayerKind::Dense { out_dim, bias } => {
                    let in_dim = shapes[node.inputs[0]][1];
                    Some(ParamShape::Dense {
                        weight: vec![*out_dim, in_dim],
                        bias: *bias,
                    })
                }
                LayerKind::BinaryDense { out_dim } => {
                    let in_dim = shapes[node.inputs[0]][1];
                    Some(ParamShape::Dense {
                        weight: vec![*out_dim, in_dim],
                        bias: false,
                    })
                }
                LayerKind::BatchNorm => {
                    let channels = shapes[node.inputs[0]][1];
                    Some(ParamShape::BatchNorm { channels })
                }
                _ => None,
            };
            out.push(ps);
        }
        Ok(out)
    }

    pub fn forward(
        &self,
        params: &mut ParamStore,
        batch: &Tensor,
        labels: Option<&[u32]>,
        mode: Mode,
    ) -> Result<Activations> {
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut loss = None;
        for (id, node) in self.nodes.iter().enumerate() {
            let out = match &node.kind {
                LayerKind::Input => {
                    let (c, h, w) = self.input_shape;
                    let got = batch.nchw()?;
                    if (got.c, got.h, got.w) != (c, h, w) {
                        return Err(Error::ShapeMismatch(format!(
                            "batch {:?} vs graph input {c}x{h}x{w}",
                            batch.shape()
                        )));
                    }
                    batch.clone()
                }
                LayerKind::Conv { geom, .. } => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    let (weight, bias) = affine(&params.slots[id])?;
                    let y = conv_forward(x, weight, *geom, 0.0, false)?;
                    match bias {
                        Some(b) => add_channel_bias(&y, b)?,
                        None => y,
                    }
                }
                LayerKind::BinaryConv {
                    geom,
                    scaling,
                    placement,
                    ..
                } => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    let (weight, _) = affine(&params.slots[id])?;
                    let xb = sign_forward(x);
                    let y = conv_forward(&xb, weight, *geom, 1.0, true)?;
                    if *placement == ScalingPlacement::Forward {
                        apply_scaling(&y, x, weight, *geom, *scaling)?
                    } else {
                        y
                    }
                }
                LayerKind::Dense { .. } => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    let (weight, bias) = affine(&params.slots[id])?;
                    let y = gemm_nt(x, weight)?;
                    match bias {
                        Some(b) => add_row_bias(&y, b)?,
                        None => y,
                    }
                }
                LayerKind::BinaryDense { .. } => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    let (weight, _) = affine(&params.slots[id])?;
                    gemm_nt(&sign_forward(x), &sign_forward(weight))?
                }
                LayerKind::BatchNorm => {
                    let x = values[node.inputs[0]].as_ref().unwrap().clone();
                    batchnorm_forward(&x, &mut params.slots[id], &self.bn_cfg, mode)?
                }
                LayerKind::MaxPool { k, stride, pad } => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    max_pool_forward(x, *k, *stride, *pad)?.0
                }
                LayerKind::AvgPool { k, stride } => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    avg_pool_forward(x, *k, *stride)?
                }
                LayerKind::GlobalAvgPool => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    let s = x.nchw()?;
                    let inv = 1.0 / (s.h * s.w) as f32;
                    let mut out = vec![0.0f32; s.n * s.c];
                    for i in 0..s.n * s.c {
                        out[i] = x.data()[i * s.h * s.w..(i + 1) * s.h * s.w]
                            .iter()
                            .sum::<f32>()
                            * inv;
                    }
                    Tensor::new(vec![s.n, s.c], out)?
                }
                LayerKind::ReLU => values[node.inputs[0]]
                    .as_ref()
                    .unwrap()
                    .map(|v| v.max(0.0)),
                LayerKind::SignAct => sign_forward(values[node.inputs[0]].as_ref().unwrap()),
                LayerKind::Add => {
                    let a = values[node.inputs[0]].as_ref().unwrap();
                    let b = values[node.inputs[1]].as_ref().unwrap();
                    a.add(b)?
                }
                LayerKind::Concat => {
                    let tensors: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|&i| values[i].as_ref().unwrap())
                        .collect();
                    concat_channels(&tensors)?
                }
                LayerKind::Flatten => {
                    let x = values[node.inputs[0]].as_ref().unwrap();
                    let n = x.shape()[0];
                    let rest: usize = x.shape()[1..].iter().product();
                    x.clone().reshape(vec![n, rest])?
                }
                LayerKind::SoftmaxXEnt => {
                    let logits = values[node.inputs[0]].as_ref().unwrap();
                    match labels {
                        Some(l) => {
                            let (value, _) = softmax_xent(logits, l)?;
                            loss = Some(value);
                            Tensor::scalar(value)
                        }
                        // No labels supplied: the loss head is inert.
                        None => Tensor::scalar(f32::NAN),
                    }
                }
            };
            values[id] = Some(out);
        }
        Ok(Activations { values, loss })
    }

    /// Reverse pass. `forward` must have been run in Train mode for this
    /// batch; intermediate quantities are recomputed rather than cached.
    pub fn backward(
        &self,
        params: &ParamStore,
        acts: &Activations,
        labels: &[u32],
    ) -> Result<GradStore> {
        let mut grads = GradStore::zeros_like(params);
        let mut dacts: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate().rev() {
            match &node.kind {
                LayerKind::SoftmaxXEnt => {
                    let logits = acts.values[node.inputs[0]].as_ref().unwrap();
                    let (_, dlogits) = softmax_xent(logits, labels)?;
                    accumulate(&mut dacts[node.inputs[0]], dlogits)?;
                }
                LayerKind::Input => {}
                _ => {
                    let Some(dy) = dacts[id].take() else { continue };
                    self.backward_node(id, node, params, acts, &dy, &mut grads, &mut dacts)?;
                }
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_node(
        &self,
        id: NodeId,
        node: &Node,
        params: &ParamStore,
        acts: &Activations,
        dy: &Tensor,
        grads: &mut GradStore,
        dacts: &mut [Option<Tensor>],
    ) -> Result<()> {
        match &node.kind {
            LayerKind::Conv { geom, bias, .. } => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let (weight, _) = affine(&params.slots[id])?;
                let (dx, dw, db) = conv_backward(x, weight, *geom, dy, 0.0)?;
                accumulate(&mut grads.slots[id].weight, dw)?;
                if *bias {
                    accumulate(&mut grads.slots[id].bias, db)?;
                }
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::BinaryConv {
                geom,
                scaling,
                placement,
                ..
            } => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let (weight, _) = affine(&params.slots[id])?;
                let xb = sign_forward(x);
                // Scaling factors are analytic functions of the latent
                // weights / input, treated as constants in the backward pass.
                let dconv = if *placement == ScalingPlacement::Forward {
                    apply_scaling(dy, x, weight, *geom, *scaling)?
                } else {
                    dy.clone()
                };
                let wb = sign_forward(weight);
                let (dxb, dwb, _) = conv_backward_binary(&xb, &wb, *geom, &dconv)?;
                let mut dw = ste_backward(weight, &dwb, &self.bin_cfg)?;
                if *placement == ScalingPlacement::BackwardOnly
                    && (*scaling == ScalingMode::WeightPerChannel
                        || *scaling == ScalingMode::WeightScalar)
                {
                    dw = scale_weight_grad(&dw, weight, *scaling)?;
                }
                let dx = ste_backward(x, &dxb, &self.bin_cfg)?;
                accumulate(&mut grads.slots[id].weight, dw)?;
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::Dense { bias, .. } => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let (weight, _) = affine(&params.slots[id])?;
                let dw = gemm_tn(dy, x)?;
                let dx = crate::kernels::float_gemm(dy, weight)?;
                accumulate(&mut grads.slots[id].weight, dw)?;
                if *bias {
                    accumulate(&mut grads.slots[id].bias, column_sum(dy)?)?;
                }
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::BinaryDense { .. } => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let (weight, _) = affine(&params.slots[id])?;
                let xb = sign_forward(x);
                let wb = sign_forward(weight);
                let dwb = gemm_tn(dy, &xb)?;
                let dxb = crate::kernels::float_gemm(dy, &wb)?;
                accumulate(
                    &mut grads.slots[id].weight,
                    ste_backward(weight, &dwb, &self.bin_cfg)?,
                )?;
                accumulate(
                    &mut dacts[node.inputs[0]],
                    ste_backward(x, &dxb, &self.bin_cfg)?,
                )?;
            }
            LayerKind::BatchNorm => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let (dx, dgamma, dbeta) =
                    batchnorm_backward(x, &params.slots[id], &self.bn_cfg, dy)?;
                accumulate(&mut grads.slots[id].gamma, dgamma)?;
                accumulate(&mut grads.slots[id].beta, dbeta)?;
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::MaxPool { k, stride, pad } => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let dx = max_pool_backward(x, *k, *stride, *pad, dy)?;
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::AvgPool { k, stride } => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let dx = avg_pool_backward(x, *k, *stride, dy)?;
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::GlobalAvgPool => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let s = x.nchw()?;
                let inv = 1.0 / (s.h * s.w) as f32;
                let mut dx = vec![0.0f32; s.count()];
                for i in 0..s.n * s.c {
                    let g = dy.data()[i] * inv;
                    for v in &mut dx[i * s.h * s.w..(i + 1) * s.h * s.w] {
                        *v = g;
                    }
                }
                accumulate(&mut dacts[node.inputs[0]], Tensor::from_nchw(s, dx)?)?;
            }
            LayerKind::ReLU => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                let dx = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                        .collect(),
                )?;
                accumulate(&mut dacts[node.inputs[0]], dx)?;
            }
            LayerKind::SignAct => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                accumulate(
                    &mut dacts[node.inputs[0]],
                    ste_backward(x, dy, &self.bin_cfg)?,
                )?;
            }
            LayerKind::Add => {
                accumulate(&mut dacts[node.inputs[0]], dy.clone())?;
                accumulate(&mut dacts[node.inputs[1]], dy.clone())?;
            }
            LayerKind::Concat => {
                let mut offset = 0;
                let s = dy.nchw()?;
                for &i in &node.inputs {
                    let ci = acts.values[i].as_ref().unwrap().nchw()?.c;
                    let mut part = vec![0.0f32; s.n * ci * s.h * s.w];
                    for n in 0..s.n {
                        for c in 0..ci {
                            let src = ((n * s.c + offset + c) * s.h) * s.w;
                            let dst = ((n * ci + c) * s.h) * s.w;
                            part[dst..dst + s.h * s.w]
                                .copy_from_slice(&dy.data()[src..src + s.h * s.w]);
                        }
                    }
                    accumulate(
                        &mut dacts[i],
                        Tensor::new(vec![s.n, ci, s.h, s.w], part)?,
                    )?;
                    offset += ci;
                }
            }
            LayerKind::Flatten => {
                let x = acts.values[node.inputs[0]].as_ref().unwrap();
                accumulate(
                    &mut dacts[node.inputs[0]],
                    dy.clone().reshape(x.shape().to_vec())?,
                )?;
            }
            LayerKind::Input | LayerKind::SoftmaxXEnt => {}
        }
        Ok(())
    }
}

pub enum ParamShape {
    Conv { weight: Vec<usize>, bias: bool },
    Dense { weight: Vec<usize>, bias: bool },
    BatchNorm { channels: usize },
}

fn affine(slot: &NodeParams) -> Result<(&Tensor, Option<&Tensor>)> {
    match slot {
        NodeParams::Affine { weight, bias } => Ok((weight, bias.as_ref())),
        _ => Err(Error::InvalidConfig(
            "expected affine parameters for this node".into(),
        )),
    }
}

fn accumulate(slot: &mut Option<Tensor>, value: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            *existing = existing.add(&value)?;
        }
        None => *slot = Some(value),
    }
    Ok(())
}

fn add_channel_bias(y: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let s = y.nchw()?;
    let mut out = y.clone();
    let data = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let b = bias.data()[c];
            let base = (n * s.c + c) * s.h * s.w;
            for v in &mut data[base..base + s.h * s.w] {
                *v += b;
            }
        }
    }
    Ok(out)
}

fn add_row_bias(y: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = y.matrix_dims()?;
    let mut out = y.clone();
    let data = out.data_mut();
    for i in 0..n {
        for j in 0..d {
            data[i * d + j] += bias.data()[j];
        }
    }
    Ok(out)
}

fn column_sum(t: &Tensor) -> Result<Tensor> {
    let (n, d) = t.matrix_dims()?;
    let mut out = vec![0.0f32; d];
    for i in 0..n {
        for j in 0..d {
            out[j] += t.data()[i * d + j];
        }
    }
    Tensor::new(vec![d], out)
}

/// Shared conv forward: weights F,C,kh,kw over an input in either the real
/// (pad 0) or sign (pad +1, binarized weights) domain.
fn conv_forward(
    x: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    pad_value: f32,
    binarize_weights: bool,
) -> Result<Tensor> {
    let s = x.nchw()?;
    let ws = weight.nchw()?;
    let (oh, ow) = geom.out_dims(s.h, s.w)?;
    let k = ws.c * ws.h * ws.w;
    let cols = im2col(x, geom, pad_value)?;
    let w_mat = weight.clone().reshape(vec![ws.n, k])?;
    let w_mat = if binarize_weights {
        sign_forward(&w_mat)
    } else {
        w_mat
    };
    let out_rows = gemm_nt(&cols, &w_mat)?;
    rows_to_nchw(&out_rows, s.n, oh, ow)
}

/// Gradients of the real conv: returns (dx, dw, db).
fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    dy: &Tensor,
    pad_value: f32,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = x.nchw()?;
    let ws = weight.nchw()?;
    let k = ws.c * ws.h * ws.w;
    let dy_rows = nchw_to_rows(dy)?;
    let cols = im2col(x, geom, pad_value)?;
    let dw = gemm_tn(&dy_rows, &cols)?.reshape(vec![ws.n, ws.c, ws.h, ws.w])?;
    let w_mat = weight.clone().reshape(vec![ws.n, k])?;
    let dcols = crate::kernels::float_gemm(&dy_rows, &w_mat)?;
    let dx = col2im(&dcols, s, geom)?;
    let db = column_sum(&dy_rows)?;
    Ok((dx, dw, db))
}

/// Gradients w.r.t. the sign-domain operands of a binary conv: inputs are
/// already binarized (xb, wb); returns (dxb, dwb, _).
fn conv_backward_binary(
    xb: &Tensor,
    wb: &Tensor,
    geom: ConvGeometry,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = xb.nchw()?;
    let ws = wb.nchw()?;
    let k = ws.c * ws.h * ws.w;
    let dy_rows = nchw_to_rows(dy)?;
    let cols = im2col(xb, geom, 1.0)?;
    let dwb = gemm_tn(&dy_rows, &cols)?.reshape(vec![ws.n, ws.c, ws.h, ws.w])?;
    let w_mat = wb.clone().reshape(vec![ws.n, k])?;
    let dcols = crate::kernels::float_gemm(&dy_rows, &w_mat)?;
    let dxb = col2im(&dcols, s, geom)?;
    let db = column_sum(&dy_rows)?;
    Ok((dxb, dwb, db))
}

fn apply_scaling(
    y: &Tensor,
    x: &Tensor,
    weight: &Tensor,
    geom: ConvGeometry,
    scaling: ScalingMode,
) -> Result<Tensor> {
    match scaling {
        ScalingMode::None => Ok(y.clone()),
        ScalingMode::WeightPerChannel | ScalingMode::WeightScalar => {
            let ws = weight.nchw()?;
            let w_mat = weight
                .clone()
                .reshape(vec![ws.n, ws.c * ws.h * ws.w])?;
            let alpha = weight_scale(&w_mat, scaling)?;
            let alpha = if scaling == ScalingMode::WeightScalar {
                Tensor::filled(vec![ws.n, 1], alpha.data()[0])
            } else {
                alpha
            };
            scaled_binary_output(y, Some(&alpha), None)
        }
        ScalingMode::InputK => {
            let k_map = input_scale_k(x, geom)?;
            scaled_binary_output(y, None, Some(&k_map))
        }
    }
}

fn scale_weight_grad(dw: &Tensor, weight: &Tensor, scaling: ScalingMode) -> Result<Tensor> {
    let ws = weight.nchw()?;
    let k = ws.c * ws.h * ws.w;
    let w_mat = weight.clone().reshape(vec![ws.n, k])?;
    let alpha = weight_scale(&w_mat, scaling)?;
    let mut out = dw.clone();
    let data = out.data_mut();
    for f in 0..ws.n {
        let a = if scaling == ScalingMode::WeightScalar {
            alpha.data()[0]
        } else {
            alpha.data()[f]
        };
        for v in &mut data[f * k..(f + 1) * k] {
            *v *= a;
        }
    }
    Ok(out)
}

/// View a rank-2 or rank-4 tensor as (N, C, spatial) extents for per-channel
/// normalization.
fn bn_extents(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.rank() {
        2 => Ok((x.shape()[0], x.shape()[1], 1)),
        4 => Ok((x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3])),
        r => Err(Error::ShapeMismatch(format!("batchnorm over rank-{r}"))),
    }
}

fn bn_index(n: usize, c: usize, channels: usize, spatial: usize, s: usize) -> usize {
    (n * channels + c) * spatial + s
}

pub fn batchnorm_forward(
    x: &Tensor,
    slot: &mut NodeParams,
    cfg: &BatchNormConfig,
    mode: Mode,
) -> Result<Tensor> {
    let (n, channels, spatial) = bn_extents(x)?;
    let NodeParams::BatchNorm {
        gamma,
        beta,
        running_mean,
        running_var,
    } = slot
    else {
        return Err(Error::InvalidConfig("expected batchnorm parameters".into()));
    };
    let m = (n * spatial) as f32;
    let mut out = vec![0.0f32; x.len()];
    for c in 0..channels {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f32;
                for i in 0..n {
                    for s in 0..spatial {
                        sum += x.data()[bn_index(i, c, channels, spatial, s)];
                    }
                }
                let mean = sum / m;
                let mut var = 0.0f32;
                for i in 0..n {
                    for s in 0..spatial {
                        let d = x.data()[bn_index(i, c, channels, spatial, s)] - mean;
                        var += d * d;
                    }
                }
                let var = var / m;
                running_mean.data_mut()[c] =
                    cfg.momentum * running_mean.data()[c] + (1.0 - cfg.momentum) * mean;
                running_var.data_mut()[c] =
                    cfg.momentum * running_var.data()[c] + (1.0 - cfg.momentum) * var;
                (mean, var)
            }
            Mode::Eval => (running_mean.data()[c], running_var.data()[c]),
        };
        let inv_std = 1.0 / (var + cfg.epsilon).sqrt();
        let g = gamma.data()[c];
        let b = beta.data()[c];
        for i in 0..n {
            for s in 0..spatial {
                let idx = bn_index(i, c, channels, spatial, s);
                out[idx] = (x.data()[idx] - mean) * inv_std * g + b;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Train-mode batchnorm gradients (batch statistics recomputed from x).
pub fn batchnorm_backward(
    x: &Tensor,
    slot: &NodeParams,
    cfg: &BatchNormConfig,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, channels, spatial) = bn_extents(x)?;
    let NodeParams::BatchNorm { gamma, .. } = slot else {
        return Err(Error::InvalidConfig("expected batchnorm parameters".into()));
    };
    let m = (n * spatial) as f32;
    let mut dx = vec![0.0f32; x.len()];
    let mut dgamma = vec![0.0f32; channels];
    let mut dbeta = vec![0.0f32; channels];
    for c in 0..channels {
        let mut sum = 0.0f32;
        for i in 0..n {
            for s in 0..spatial {
                sum += x.data()[bn_index(i, c, channels, spatial, s)];
            }
        }
        let mean = sum / m;
        let mut var = 0.0f32;
        for i in 0..n {
            for s in 0..spatial {
                let d = x.data()[bn_index(i, c, channels, spatial, s)] - mean;
                var += d * d;
            }
        }
        let var = var / m;
        let inv_std = 1.0 / (var + cfg.epsilon).sqrt();

        let mut sum_dy = 0.0f32;
        let mut sum_dy_xhat = 0.0f32;
        for i in 0..n {
            for s in 0..spatial {
                let idx = bn_index(i, c, channels, spatial, s);
                let xhat = (x.data()[idx] - mean) * inv_std;
                sum_dy += dy.data()[idx];
                sum_dy_xhat += dy.data()[idx] * xhat;
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = gamma.data()[c];
        for i in 0..n {
            for s in 0..spatial {
                let idx = bn_index(i, c, channels, spatial, s);
                let xhat = (x.data()[idx] - mean) * inv_std;
                dx[idx] =
                    g * inv_std * (dy.data()[idx] - sum_dy / m - xhat * sum_dy_xhat / m);
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![channels], dgamma)?,
        Tensor::new(vec![channels], dbeta)?,
    ))
}

fn pool_dims(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Shape, usize, usize)> {
    let s = x.nchw()?;
    let geom = ConvGeometry::new(k, k, stride, pad);
    let (oh, ow) = geom.out_dims(s.h, s.w)?;
    Ok((s, oh, ow))
}

/// Max pooling; also returns the argmax (first index on ties) for backward.
pub fn max_pool_forward(
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (s, oh, ow) = pool_dims(x, k, stride, pad)?;
    let mut out = vec![0.0f32; s.n * s.c * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    for nc in 0..s.n * s.c {
        let plane = &x.data()[nc * s.h * s.w..(nc + 1) * s.h * s.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || iy >= s.h as isize || ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let idx = iy as usize * s.w + ix as usize;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (nc * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = nc * s.h * s.w + best_idx;
            }
        }
    }
    Ok((Tensor::new(vec![s.n, s.c, oh, ow], out)?, argmax))
}

pub fn max_pool_backward(
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<Tensor> {
    let (_, argmax) = max_pool_forward(x, k, stride, pad)?;
    let mut dx = vec![0.0f32; x.len()];
    for (o, &src) in argmax.iter().enumerate() {
        dx[src] += dy.data()[o];
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub fn avg_pool_forward(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (s, oh, ow) = pool_dims(x, k, stride, 0)?;
    let inv = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; s.n * s.c * oh * ow];
    for nc in 0..s.n * s.c {
        let plane = &x.data()[nc * s.h * s.w..(nc + 1) * s.h * s.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += plane[(oy * stride + ky) * s.w + (ox * stride + kx)];
                    }
                }
                out[(nc * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(vec![s.n, s.c, oh, ow], out)
}

pub fn avg_pool_backward(x: &Tensor, k: usize, stride: usize, dy: &Tensor) -> Result<Tensor> {
    let (s, oh, ow) = pool_dims(x, k, stride, 0)?;
    let inv = 1.0 / (k * k) as f32;
    let mut dx = vec![0.0f32; x.len()];
    for nc in 0..s.n * s.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data()[(nc * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        dx[nc * s.h * s.w + (oy * stride + ky) * s.w + (ox * stride + kx)] += g;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx)
}

pub fn concat_channels(tensors: &[&Tensor]) -> Result<Tensor> {
    let first = tensors[0].nchw()?;
    let mut channels = 0;
    for t in tensors {
        let s = t.nchw()?;
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::ShapeMismatch(format!(
                "concat: {:?} vs {:?}",
                t.shape(),
                tensors[0].shape()
            )));
        }
        channels += s.c;
    }
    let spatial = first.h * first.w;
    let mut out = vec![0.0f32; first.n * channels * spatial];
    for n in 0..first.n {
        let mut offset = 0;
        for t in tensors {
            let c = t.nchw()?.c;
            let src = &t.data()[n * c * spatial..(n + 1) * c * spatial];
            let dst = (n * channels + offset) * spatial;
            out[dst..dst + c * spatial].copy_from_slice(src);
            offset += c;
        }
    }
    Tensor::new(vec![first.n, channels, first.h, first.w], out)
}

/// Mean softmax cross-entropy over the batch; returns (loss, dlogits).
pub fn softmax_xent(logits: &Tensor, labels: &[u32]) -> Result<(f32, Tensor)> {
    let (n, classes) = logits.matrix_dims()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    let mut dlogits = vec![0.0f32; n * classes];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &logits.data()[i * classes..(i + 1) * classes];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for &v in row {
            denom += (v - max).exp();
        }
        let label = labels[i] as usize;
        if label >= classes {
            return Err(Error::ShapeMismatch(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let logp = (row[label] - max) - denom.ln();
        loss -= logp as f64;
        for j in 0..classes {
            let p = (row[j] - max).exp() / denom;
            dlogits[i * classes + j] =
                (p - if j == label { 1.0 } else { 0.0 }) / n as f32;
        }
    }
    Ok((
        (loss / n as f64) as f32,
        Tensor::new(vec![n, classes], dlogits)?,
    ))
}
