//! In-process simulation of the federated protocol.
//!
//! Round 0: every client boosts its local ensemble and uploads it; the
//! server aggregates the ensembles by client id, broadcasts the aggregate
//! and initializes the head; every client evaluates the aggregate on its
//! local data. Rounds 1..=R: the server broadcasts the head, every client
//! trains it locally, and the server takes the sample-weighted average.
//!
//! Every message crosses the party boundary as bytes produced by the real
//! codecs, and the round logs count those bytes.

use rayon::prelude::*;
use thiserror::Error;

use crate::aggregation::{
    aggregate_ensembles, deserialize_aggregate, mean_ensemble_margin, prediction_matrix_with,
    serialize_aggregate, AggregatedEnsemble, AggregationError, ClientId, InputScaling,
    PredictionMatrix,
};
use crate::cnn::{
    client_update, dataset_loss, deserialize_params, forward, init_params, serialize_params,
    AdamConfig, CnnConfig, CnnError, CnnParams, HeadVariant, TrainConfig,
};
use crate::data::{partition_equal, DataError, Dataset, TaskKind};
use crate::gbdt::{
    deserialize_ensemble, predict_margin, serialize_ensemble, train_ensemble, GbdtConfig,
    GbdtError, TreeEnsemble,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error("invalid federated config: {0}")]
    InvalidConfig(String),
    #[error("fedavg: {0}")]
    FedAvg(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub seed: u64,
    pub task: TaskKind,
    /// Local boosting settings; `num_trees` is the per-client count.
    pub gbdt: GbdtConfig,
    pub channels: usize,
    pub head_variant: HeadVariant,
    pub train: TrainConfig,
    pub adam: AdamConfig,
    pub input_scaling: InputScaling,
}

impl FedConfig {
    /// 500 trees split evenly, depth 8, eta 0.1, 64 channels, Adam
    /// (0.001, 0.5, 0.999), E = 100, B = 64, R = 10.
    pub fn defaults(task: TaskKind, num_clients: usize) -> Self {
        Self::with_total_trees(task, num_clients, 500)
    }

    pub fn with_total_trees(task: TaskKind, num_clients: usize, total_trees: usize) -> Self {
        let per_client = if num_clients == 0 { 0 } else { total_trees / num_clients };
        Self {
            num_clients,
            rounds: 10,
            seed: 0,
            task,
            gbdt: GbdtConfig::for_task(task, per_client),
            channels: 64,
            head_variant: HeadVariant::Interpretable,
            train: TrainConfig::new(task),
            adam: AdamConfig::default(),
            input_scaling: InputScaling::Raw,
        }
    }

    pub fn total_trees(&self) -> usize {
        self.gbdt.num_trees * self.num_clients
    }

    pub fn cnn_config(&self) -> CnnConfig {
        CnnConfig::new(self.channels, self.gbdt.num_trees, self.num_clients)
            .with_variant(self.head_variant)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::InvalidConfig(m));
        if self.num_clients == 0 || self.rounds == 0 {
            return bad("num_clients and rounds must be >= 1".into());
        }
        if self.train.task != self.task {
            return bad("local training loss does not match the task".into());
        }
        self.gbdt.validate()?;
        self.cnn_config().validate()?;
        if self.train.local_epochs == 0 || self.train.batch_size == 0 {
            return bad("local_epochs and batch_size must be >= 1".into());
        }
        self.adam.validate().map_err(ProtocolError::InvalidConfig)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub cid: ClientId,
    pub local_data: Dataset,
    pub ensemble: Option<TreeEnsemble>,
    pub matrix: Option<PredictionMatrix>,
}

impl ClientState {
    pub fn new(cid: ClientId, local_data: Dataset) -> Self {
        Self { cid, local_data, ensemble: None, matrix: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub aggregate: AggregatedEnsemble,
    pub cnn: CnnParams,
    pub input_scaling: InputScaling,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub global_metric: f64,
    /// Round 0: loss of the initial head on each client's matrix; later
    /// rounds: each client's last local epoch loss.
    pub per_client_loss: Vec<f64>,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundZero {
    pub aggregate: AggregatedEnsemble,
    pub init: CnnParams,
    /// `global_metric` is left as NaN; the caller holding the test set
    /// fills it in.
    pub log: RoundLog,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for one party's randomness in one round. Round 0 / cid 0 is the
/// server's initialization.
pub fn derive_seed(master: u64, round: usize, cid: u32) -> u64 {
    master ^ splitmix64(((round as u64) << 32) | cid as u64)
}

/// Tree exchange and prediction-matrix precomputation. Fills in each
/// client's ensemble and matrix.
pub fn round_zero(clients: &mut [ClientState], config: &FedConfig) -> Result<RoundZero, ProtocolError> {
    config.validate()?;
    if clients.len() != config.num_clients {
        return Err(ProtocolError::InvalidConfig(format!(
            "{} clients supplied for a {}-client federation",
            clients.len(),
            config.num_clients
        )));
    }
    // clients -> server: ensemble + cid
    let uploads: Vec<(ClientId, Vec<u8>)> = clients
        .par_iter_mut()
        .map(|c| {
            let e = train_ensemble(&c.local_data, &config.gbdt)?;
            let bytes = serialize_ensemble(&e);
            c.ensemble = Some(e);
            Ok((c.cid, bytes))
        })
        .collect::<Result<_, ProtocolError>>()?;
    let bytes_up = uploads.iter().map(|(_, b)| b.len() as u64).sum();

    let received = uploads
        .iter()
        .map(|(cid, b)| Ok((*cid, deserialize_ensemble(b)?)))
        .collect::<Result<Vec<_>, ProtocolError>>()?;
    let aggregate = aggregate_ensembles(received)?;
    let init = init_params(config.cnn_config(), derive_seed(config.seed, 0, 0));

    // server -> clients: aggregate
    let broadcast = serialize_aggregate(&aggregate);
    let bytes_down = (broadcast.len() * clients.len()) as u64;
    let per_client_loss = clients
        .par_iter_mut()
        .map(|c| {
            let agg = deserialize_aggregate(&broadcast)?;
            let matrix = prediction_matrix_with(&agg, &c.local_data, config.input_scaling)?;
            let loss = dataset_loss(&init, &matrix, config.task)?;
            c.matrix = Some(matrix);
            Ok(loss)
        })
        .collect::<Result<Vec<_>, ProtocolError>>()?;

    let log = RoundLog {
        round: 0,
        bytes_up,
        bytes_down,
        global_metric: f64::NAN,
        per_client_loss,
        participants: clients.len(),
    };
    Ok(RoundZero { aggregate, init, log })
}

/// Sample-count-weighted coordinate-wise mean. Computed as a running
/// mean, so averaging identical parameters returns them bit for bit.
pub fn fedavg_aggregate(updates: &[(CnnParams, usize)]) -> Result<CnnParams, ProtocolError> {
    let Some((first, n0)) = updates.first() else {
        return Err(ProtocolError::FedAvg("no updates".into()));
    };
    if updates.iter().any(|(_, n)| *n == 0) {
        return Err(ProtocolError::FedAvg("every update needs a positive sample count".into()));
    }
    if updates.iter().any(|(p, _)| !p.same_shape(first)) {
        return Err(ProtocolError::FedAvg("parameter shapes differ".into()));
    }
    let mut avg = first.clone();
    let mut seen = *n0 as f64;
    for (p, n) in &updates[1..] {
        seen += *n as f64;
        let w = *n as f64 / seen;
        for (a, b) in avg.tensors_mut().into_iter().zip(p.tensors()) {
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += (bi - *ai) * w;
            }
        }
    }
    Ok(avg)
}

/// Accuracy (margin > 0 predicts class 1) or mean squared error.
pub fn metric_from_margins(task: TaskKind, margins: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(margins.len(), labels.len());
    let n = labels.len() as f64;
    match task {
        TaskKind::Classification => {
            let hits = margins
                .iter()
                .zip(labels)
                .filter(|(m, y)| (**m > 0.0) == (**y == 1.0))
                .count();
            hits as f64 / n
        }
        TaskKind::Regression => {
            margins.iter().zip(labels).map(|(m, y)| (m - y) * (m - y)).sum::<f64>() / n
        }
    }
}

fn head_margins(cnn: &CnnParams, matrix: &PredictionMatrix) -> Result<Vec<f64>, ProtocolError> {
    (0..matrix.rows())
        .into_par_iter()
        .map(|i| forward(cnn, matrix.row(i)).map_err(ProtocolError::from))
        .collect()
}

pub fn evaluate_global(model: &GlobalModel, data: &Dataset) -> Result<f64, ProtocolError> {
    let matrix = prediction_matrix_with(&model.aggregate, data, model.input_scaling)?;
    evaluate_on_matrix(&model.cnn, &matrix, data.task())
}

pub fn evaluate_on_matrix(
    cnn: &CnnParams,
    matrix: &PredictionMatrix,
    task: TaskKind,
) -> Result<f64, ProtocolError> {
    let margins = head_margins(cnn, matrix)?;
    Ok(metric_from_margins(task, &margins, matrix.labels()))
}

/// Global-model margins for every example of `data`.
pub fn predict_global(model: &GlobalModel, data: &Dataset) -> Result<Vec<f64>, ProtocolError> {
    let matrix = prediction_matrix_with(&model.aggregate, data, model.input_scaling)?;
    head_margins(&model.cnn, &matrix)
}

/// Fixed-`eta` reference: the plain average of the client ensembles'
/// margins, no learned rates.
pub fn mean_ensemble_metric(agg: &AggregatedEnsemble, data: &Dataset) -> f64 {
    let margins: Vec<f64> = data.examples().iter().map(|x| mean_ensemble_margin(agg, x)).collect();
    let labels: Vec<f64> = data.labels().collect();
    metric_from_margins(data.task(), &margins, &labels)
}

/// Pooled-data reference: one ensemble with every tree of the federation.
pub fn run_centralized(
    config: &FedConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(TreeEnsemble, f64), ProtocolError> {
    let gbdt = GbdtConfig { num_trees: config.total_trees(), ..config.gbdt.clone() };
    let ensemble = train_ensemble(train, &gbdt)?;
    let margins: Vec<f64> = test.examples().iter().map(|x| predict_margin(&ensemble, x)).collect();
    let labels: Vec<f64> = test.labels().collect();
    let metric = metric_from_margins(test.task(), &margins, &labels);
    Ok((ensemble, metric))
}

/// Full protocol: partition, round 0, then `rounds` FedAvg rounds. The
/// returned logs hold `rounds + 1` entries.
pub fn run_training(
    config: &FedConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<(GlobalModel, Vec<RoundLog>), ProtocolError> {
    config.validate()?;
    if train.task() != config.task || test.task() != config.task {
        return Err(ProtocolError::InvalidConfig("dataset task differs from the config".into()));
    }
    let shards = partition_equal(train, config.num_clients, config.seed)?;
    let mut clients: Vec<ClientState> = shards
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(ClientId(i as u32 + 1), d))
        .collect();
    let RoundZero { aggregate, init, mut log } = round_zero(&mut clients, config)?;

    // the server keeps the global test set and evaluates on it
    let test_matrix = prediction_matrix_with(&aggregate, test, config.input_scaling)?;
    log.global_metric = evaluate_on_matrix(&init, &test_matrix, config.task)?;
    log::info!("round 0: up {} B, down {} B, metric {:.6}", log.bytes_up, log.bytes_down, log.global_metric);
    let mut logs = vec![log];

    let mut global = init;
    for round in 1..=config.rounds {
        let broadcast = serialize_params(&global);
        let results: Vec<(Vec<u8>, usize, f64)> = clients
            .par_iter()
            .map(|c| {
                let local = deserialize_params(&broadcast)?;
                let matrix = c.matrix.as_ref().expect("round 0 fills every matrix");
                let seed = derive_seed(config.seed, round, c.cid.0);
                let report = client_update(&local, matrix, &config.train, &config.adam, seed)?;
                let last = report.epoch_losses.last().copied().unwrap_or(f64::NAN);
                Ok((serialize_params(&report.params), matrix.rows(), last))
            })
            .collect::<Result<_, ProtocolError>>()?;

        let bytes_up = results.iter().map(|(b, _, _)| b.len() as u64).sum();
        let updates = results
            .iter()
            .map(|(b, n, _)| Ok((deserialize_params(b)?, *n)))
            .collect::<Result<Vec<_>, ProtocolError>>()?;
        global = fedavg_aggregate(&updates)?;
        let log = RoundLog {
            round,
            bytes_up,
            bytes_down: (broadcast.len() * clients.len()) as u64,
            global_metric: evaluate_on_matrix(&global, &test_matrix, config.task)?,
            per_client_loss: results.iter().map(|r| r.2).collect(),
            participants: results.len(),
        };
        log::info!("round {round}: metric {:.6}", log.global_metric);
        logs.push(log);
    }
    let model = GlobalModel { aggregate, cnn: global, input_scaling: config.input_scaling };
    Ok((model, logs))
}

/// One CSV row per round: `round,bytes_up,bytes_down,metric`.
pub fn round_log_csv(logs: &[RoundLog]) -> String {
    let mut out = String::from("round,bytes_up,bytes_down,metric\n");
    for l in logs {
        out.push_str(&format!("{},{},{},{}\n", l.round, l.bytes_up, l.bytes_down, l.global_metric));
    }
    out
}
