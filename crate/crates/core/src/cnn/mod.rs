//! The combining head over per-tree outputs, with hand-derived gradients.
//!
//! The default head is a 1D convolution whose kernel and stride both equal
//! the per-client tree count `M`: each of the `C` channels holds one
//! learned learning rate per tree position and is applied to every client
//! block. A rectifier follows, then a fully connected layer that weighs
//! each client's channel activations into one scalar margin.
//!
//! Two ablation heads share the same four-tensor parameter layout:
//! a kernel-3, stride-1 convolution (one zero of padding per side) and a
//! two-layer perceptron with a 256-wide hidden layer.

mod adam;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{checkpoint_len, deserialize_params, serialize_params, CHECKPOINT_FORMAT_VERSION};
pub use train::{client_update, dataset_loss, TrainConfig, UpdateReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::TaskKind;
use crate::gbdt::sigmoid;

/// Hidden width of the two-layer perceptron head.
pub const FCNN_HIDDEN: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CnnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid head config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint decode error: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum HeadVariant {
    /// kernel = stride = M
    #[default]
    Interpretable,
    ConvK3S1,
    Fcnn2Layer,
}

impl HeadVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Interpretable => "interpretable",
            HeadVariant::ConvK3S1 => "conv_k3_s1",
            HeadVariant::Fcnn2Layer => "fcnn_2layer_256",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            HeadVariant::Interpretable => 0,
            HeadVariant::ConvK3S1 => 1,
            HeadVariant::Fcnn2Layer => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(HeadVariant::Interpretable),
            1 => Some(HeadVariant::ConvK3S1),
            2 => Some(HeadVariant::Fcnn2Layer),
            _ => None,
        }
    }
}

impl std::str::FromStr for HeadVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "interpretable" => Ok(HeadVariant::Interpretable),
            "conv_k3_s1" => Ok(HeadVariant::ConvK3S1),
            "fcnn_2layer_256" | "fcnn" => Ok(HeadVariant::Fcnn2Layer),
            other => Err(format!("unknown head variant `{other}`")),
        }
    }
}

impl std::fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CnnConfig {
    pub channels: usize,
    pub trees_per_client: usize,
    pub num_clients: usize,
    pub head_variant: HeadVariant,
}

/// Tensor shapes of a head: `conv_w` is `conv_rows x conv_cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamShapes {
    pub conv_rows: usize,
    pub conv_cols: usize,
    pub conv_b: usize,
    pub fc_w: usize,
}

impl ParamShapes {
    pub fn total(&self) -> usize {
        self.conv_rows * self.conv_cols + self.conv_b + self.fc_w + 1
    }
}

impl CnnConfig {
    pub fn new(channels: usize, trees_per_client: usize, num_clients: usize) -> Self {
        Self { channels, trees_per_client, num_clients, head_variant: HeadVariant::Interpretable }
    }

    pub fn with_variant(mut self, head_variant: HeadVariant) -> Self {
        self.head_variant = head_variant;
        self
    }

    pub fn input_width(&self) -> usize {
        self.trees_per_client * self.num_clients
    }

    pub fn validate(&self) -> Result<(), CnnError> {
        if self.channels == 0 || self.trees_per_client == 0 || self.num_clients == 0 {
            return Err(CnnError::InvalidConfig(
                "channels, trees_per_client and num_clients must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn shapes(&self) -> ParamShapes {
        let (c, m, k) = (self.channels, self.trees_per_client, self.num_clients);
        match self.head_variant {
            HeadVariant::Interpretable => {
                ParamShapes { conv_rows: c, conv_cols: m, conv_b: c, fc_w: c * k }
            }
            HeadVariant::ConvK3S1 => {
                ParamShapes { conv_rows: c, conv_cols: 3, conv_b: c, fc_w: c * m * k }
            }
            HeadVariant::Fcnn2Layer => ParamShapes {
                conv_rows: FCNN_HIDDEN,
                conv_cols: m * k,
                conv_b: FCNN_HIDDEN,
                fc_w: FCNN_HIDDEN,
            },
        }
    }

    /// Fan-in of the first and second layer, used for initialization.
    fn fan_in(&self) -> (usize, usize) {
        let s = self.shapes();
        (s.conv_cols, s.fc_w)
    }

    /// Rectified units per example: conv outputs or hidden width.
    pub fn activation_count(&self) -> usize {
        self.shapes().fc_w
    }
}

/// Trainable parameter count of a head.
pub fn param_count(trees_per_client: usize, num_clients: usize, channels: usize, variant: HeadVariant) -> usize {
    CnnConfig::new(channels, trees_per_client, num_clients).with_variant(variant).shapes().total()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    config: CnnConfig,
    /// Row-major `conv_rows x conv_cols`.
    pub conv_w: Vec<f64>,
    pub conv_b: Vec<f64>,
    pub fc_w: Vec<f64>,
    pub fc_b: f64,
}

impl CnnParams {
    pub fn zeros(config: CnnConfig) -> Self {
        let s = config.shapes();
        Self {
            config,
            conv_w: vec![0.0; s.conv_rows * s.conv_cols],
            conv_b: vec![0.0; s.conv_b],
            fc_w: vec![0.0; s.fc_w],
            fc_b: 0.0,
        }
    }

    pub fn from_parts(
        config: CnnConfig,
        conv_w: Vec<f64>,
        conv_b: Vec<f64>,
        fc_w: Vec<f64>,
        fc_b: f64,
    ) -> Result<Self, CnnError> {
        let s = config.shapes();
        if conv_w.len() != s.conv_rows * s.conv_cols || conv_b.len() != s.conv_b || fc_w.len() != s.fc_w {
            return Err(CnnError::Shape(format!(
                "expected conv_w {}x{}, conv_b {}, fc_w {}",
                s.conv_rows, s.conv_cols, s.conv_b, s.fc_w
            )));
        }
        Ok(Self { config, conv_w, conv_b, fc_w, fc_b })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.conv_w.len() + self.conv_b.len() + self.fc_w.len() + 1
    }

    /// Weights of one convolution channel (one learned rate per tree
    /// position for the interpretable head).
    pub fn channel(&self, c: usize) -> &[f64] {
        let cols = self.config.shapes().conv_cols;
        &self.conv_w[c * cols..(c + 1) * cols]
    }

    pub(crate) fn tensors(&self) -> [&[f64]; 4] {
        [&self.conv_w, &self.conv_b, &self.fc_w, std::slice::from_ref(&self.fc_b)]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.conv_w, &mut self.conv_b, &mut self.fc_w, std::slice::from_mut(&mut self.fc_b)]
    }

    /// All values in checkpoint order.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors().into_iter().flat_map(|t| t.iter().copied())
    }

    pub fn same_shape(&self, other: &CnnParams) -> bool {
        self.config == other.config
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(f64::is_finite)
    }
}

/// Kaiming-normal (fan-in, rectifier gain) weights, zero biases.
pub fn init_params(config: CnnConfig, seed: u64) -> CnnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = CnnParams::zeros(config);
    let (fan1, fan2) = config.fan_in();
    let n1 = Normal::new(0.0, (2.0 / fan1 as f64).sqrt()).expect("positive std");
    let n2 = Normal::new(0.0, (2.0 / fan2 as f64).sqrt()).expect("positive std");
    p.conv_w.iter_mut().for_each(|w| *w = n1.sample(&mut rng));
    p.fc_w.iter_mut().for_each(|w| *w = n2.sample(&mut rng));
    p
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Pre-activations of the first layer, laid out to match `fc_w`.
fn pre_activations(p: &CnnParams, row: &[f64], z: &mut Vec<f64>) {
    let cfg = &p.config;
    let s = cfg.shapes();
    z.clear();
    match cfg.head_variant {
        HeadVariant::Interpretable => {
            let m = cfg.trees_per_client;
            for block in row.chunks_exact(m) {
                for c in 0..s.conv_rows {
                    z.push(p.conv_b[c] + dot(p.channel(c), block));
                }
            }
        }
        HeadVariant::ConvK3S1 => {
            let width = row.len();
            for pos in 0..width {
                for c in 0..s.conv_rows {
                    let w = p.channel(c);
                    let mut acc = p.conv_b[c];
                    for (j, wj) in w.iter().enumerate() {
                        // input index pos + j - 1, zero padded
                        if let Some(x) = (pos + j).checked_sub(1).and_then(|i| row.get(i)) {
                            acc += wj * x;
                        }
                    }
                    z.push(acc);
                }
            }
        }
        HeadVariant::Fcnn2Layer => {
            for h in 0..s.conv_rows {
                z.push(p.conv_b[h] + dot(p.channel(h), row));
            }
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Scalar margin for one prediction-matrix row.
pub fn forward(params: &CnnParams, row: &[f64]) -> Result<f64, CnnError> {
    check_width(params, row)?;
    let mut z = Vec::with_capacity(params.fc_w.len());
    Ok(forward_with(params, row, &mut z))
}

fn check_width(params: &CnnParams, row: &[f64]) -> Result<(), CnnError> {
    let w = params.config.input_width();
    if row.len() != w {
        return Err(CnnError::Shape(format!("row has {} entries, head expects {w}", row.len())));
    }
    Ok(())
}

fn forward_with(params: &CnnParams, row: &[f64], z: &mut Vec<f64>) -> f64 {
    pre_activations(params, row, z);
    params.fc_b + z.iter().zip(&params.fc_w).map(|(zi, wi)| relu(*zi) * wi).sum::<f64>()
}

/// Block-wise view of the first layer of the interpretable head:
/// `a[k][c]` is the rectified response of channel `c` to client block `k`.
pub fn block_activations(params: &CnnParams, row: &[f64]) -> Result<Vec<Vec<f64>>, CnnError> {
    check_width(params, row)?;
    if params.config.head_variant != HeadVariant::Interpretable {
        return Err(CnnError::InvalidConfig("block activations need the interpretable head".into()));
    }
    let mut z = Vec::new();
    pre_activations(params, row, &mut z);
    Ok(z.chunks(params.config.channels).map(|c| c.iter().map(|&v| relu(v)).collect()).collect())
}

/// Loss on a margin: logistic for classification, half squared error for
/// regression. Returns the loss and its derivative in the margin.
pub fn margin_loss(task: TaskKind, margin: f64, y: f64) -> (f64, f64) {
    match task {
        TaskKind::Regression => {
            let r = margin - y;
            (0.5 * r * r, r)
        }
        TaskKind::Classification => {
            // softplus(m) - y m, computed without overflow
            let softplus = margin.max(0.0) + (-margin.abs()).exp().ln_1p();
            (softplus - y * margin, sigmoid(margin) - y)
        }
    }
}

/// Mean loss over the batch and its exact gradient. The rectifier's
/// derivative at exactly zero is taken as zero.
pub fn loss_and_grad(
    params: &CnnParams,
    batch: &[(&[f64], f64)],
    task: TaskKind,
) -> Result<(f64, CnnParams), CnnError> {
    if batch.is_empty() {
        return Err(CnnError::Shape("empty batch".into()));
    }
    for (row, _) in batch {
        check_width(params, row)?;
    }
    let mut grads = CnnParams::zeros(params.config);
    let mut z = Vec::with_capacity(params.fc_w.len());
    let inv_n = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &(row, y) in batch {
        let margin = forward_with(params, row, &mut z);
        let (loss, dmargin) = margin_loss(task, margin, y);
        total += loss;
        accumulate_grad(params, row, &z, dmargin * inv_n, &mut grads);
    }
    Ok((total * inv_n, grads))
}

/// Adds `d(out)/d(params) * delta` for one example into `g`, given that
/// example's first-layer pre-activations `z`.
fn accumulate_grad(p: &CnnParams, row: &[f64], z: &[f64], delta: f64, g: &mut CnnParams) {
    g.fc_b += delta;
    let cfg = &p.config;
    let cols = cfg.shapes().conv_cols;
    let channels = cfg.shapes().conv_rows;
    for (j, &zj) in z.iter().enumerate() {
        if zj <= 0.0 {
            continue;
        }
        g.fc_w[j] += delta * zj;
        let dz = delta * p.fc_w[j];
        let c = j % channels;
        g.conv_b[c] += dz;
        let gw = &mut g.conv_w[c * cols..(c + 1) * cols];
        match cfg.head_variant {
            HeadVariant::Interpretable => {
                let k = j / channels;
                let m = cfg.trees_per_client;
                axpy(dz, &row[k * m..(k + 1) * m], gw);
            }
            HeadVariant::ConvK3S1 => {
                let pos = j / channels;
                for (jj, gwj) in gw.iter_mut().enumerate() {
                    if let Some(x) = (pos + jj).checked_sub(1).and_then(|i| row.get(i)) {
                        *gwj += dz * x;
                    }
                }
            }
            HeadVariant::Fcnn2Layer => axpy(dz, row, gw),
        }
    }
}
