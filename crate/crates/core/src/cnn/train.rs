use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, forward_with, loss_and_grad, margin_loss, AdamConfig, AdamState, CnnError, CnnParams};
use crate::aggregation::PredictionMatrix;
use crate::data::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Selects the loss: logistic for classification, squared error for
    /// regression.
    pub task: TaskKind,
}

impl TrainConfig {
    pub fn new(task: TaskKind) -> Self {
        Self { local_epochs: 100, batch_size: 64, task }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub params: CnnParams,
    /// Example-weighted mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Local training of one client: `E` epochs of seeded shuffling and
/// minibatch Adam. The final short batch is kept. Adam state starts fresh.
pub fn client_update(
    params: &CnnParams,
    matrix: &PredictionMatrix,
    train: &TrainConfig,
    adam: &AdamConfig,
    seed: u64,
) -> Result<UpdateReport, CnnError> {
    if matrix.rows() == 0 {
        return Err(CnnError::Shape("empty prediction matrix".into()));
    }
    if train.local_epochs == 0 || train.batch_size == 0 {
        return Err(CnnError::InvalidConfig("local_epochs and batch_size must be >= 1".into()));
    }
    if matrix.cols() != params.config().input_width() {
        return Err(CnnError::Shape(format!(
            "matrix has {} columns, head expects {}",
            matrix.cols(),
            params.config().input_width()
        )));
    }
    let mut params = params.clone();
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..matrix.rows()).collect();
    let mut epoch_losses = Vec::with_capacity(train.local_epochs);
    let mut batch: Vec<(&[f64], f64)> = Vec::with_capacity(train.batch_size);
    for _ in 0..train.local_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| (matrix.row(i), matrix.labels()[i])));
            let (loss, grads) = loss_and_grad(&params, &batch, train.task)?;
            total += loss * chunk.len() as f64;
            adam_step(&mut params, &mut state, &grads, adam);
        }
        epoch_losses.push(total / matrix.rows() as f64);
    }
    Ok(UpdateReport { params, epoch_losses, steps: state.step as usize })
}

/// Mean loss of the head over every row of `matrix`.
pub fn dataset_loss(params: &CnnParams, matrix: &PredictionMatrix, task: TaskKind) -> Result<f64, CnnError> {
    if matrix.cols() != params.config().input_width() {
        return Err(CnnError::Shape("matrix width does not match the head".into()));
    }
    let mut z = Vec::new();
    let total: f64 = (0..matrix.rows())
        .map(|i| margin_loss(task, forward_with(params, matrix.row(i), &mut z), matrix.labels()[i]).0)
        .sum();
    Ok(total / matrix.rows() as f64)
}
