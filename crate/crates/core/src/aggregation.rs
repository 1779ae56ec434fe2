//! Server-side ensemble aggregation and the client-side prediction matrix.
//!
//! The aggregate is the client ensembles concatenated in ascending client
//! id order. Evaluated on a dataset it yields one column per tree, client
//! blocks contiguous: column `(k - 1) * M + t` is tree `t` of client `k`.

use rayon::prelude::*;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::data::{Dataset, SparseExample, TaskKind};
use crate::gbdt::codec::{get, get_task, get_u64};
use crate::gbdt::train::predict_tree_row;
use crate::gbdt::{
    ensemble_from_json, ensemble_to_json, predict_margin, FeatureMatrix, GbdtError, TreeEnsemble,
};

pub const AGGREGATE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregationError {
    #[error("no ensembles submitted")]
    Empty,
    #[error("client id {0} submitted more than once")]
    DuplicateClient(u32),
    #[error("client id {cid} is outside 1..={num_clients}")]
    ClientOutOfRange { cid: u32, num_clients: usize },
    #[error("ensembles disagree: {0}")]
    Mismatch(String),
    #[error("aggregate decode error: {0}")]
    Decode(String),
}

impl From<GbdtError> for AggregationError {
    fn from(e: GbdtError) -> Self {
        AggregationError::Decode(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub u32);

impl std::fmt::Display for ClientId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedEnsemble {
    per_client: Vec<(ClientId, TreeEnsemble)>,
    trees_per_client: usize,
}

impl AggregatedEnsemble {
    pub fn per_client(&self) -> &[(ClientId, TreeEnsemble)] {
        &self.per_client
    }

    pub fn trees_per_client(&self) -> usize {
        self.trees_per_client
    }

    pub fn num_clients(&self) -> usize {
        self.per_client.len()
    }

    pub fn total_trees(&self) -> usize {
        self.trees_per_client * self.per_client.len()
    }

    pub fn task(&self) -> TaskKind {
        self.per_client[0].1.task()
    }

    /// Shared `eta` of the member ensembles' boosting configs.
    pub fn eta(&self) -> f64 {
        self.per_client[0].1.config().eta
    }

    pub fn ensemble(&self, cid: ClientId) -> Option<&TreeEnsemble> {
        self.per_client.iter().find(|(c, _)| *c == cid).map(|(_, e)| e)
    }
}

/// Sorts submissions by client id. Ids must be distinct and lie in
/// `1..=K`; all ensembles must share the tree count and task.
pub fn aggregate_ensembles(
    mut submissions: Vec<(ClientId, TreeEnsemble)>,
) -> Result<AggregatedEnsemble, AggregationError> {
    let k = submissions.len();
    let Some((_, first)) = submissions.first() else {
        return Err(AggregationError::Empty);
    };
    let (m, task, eta) = (first.len(), first.task(), first.config().eta);
    for (cid, e) in &submissions {
        if cid.0 == 0 || cid.0 as usize > k {
            return Err(AggregationError::ClientOutOfRange { cid: cid.0, num_clients: k });
        }
        if e.len() != m {
            return Err(AggregationError::Mismatch(format!(
                "client {cid} has {} trees, expected {m}",
                e.len()
            )));
        }
        if e.task() != task {
            return Err(AggregationError::Mismatch(format!("client {cid} trained a {} task", e.task())));
        }
        if e.config().eta != eta {
            return Err(AggregationError::Mismatch(format!("client {cid} used a different eta")));
        }
    }
    submissions.sort_by_key(|(cid, _)| *cid);
    if let Some(w) = submissions.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(AggregationError::DuplicateClient(w[0].0 .0));
    }
    Ok(AggregatedEnsemble { per_client: submissions, trees_per_client: m })
}

/// Whether matrix entries are the raw tree outputs or pre-multiplied by
/// the boosting `eta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputScaling {
    #[default]
    Raw,
    ByEta,
}

/// Row-major `rows x cols` matrix of per-tree outputs with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    values: Vec<f64>,
    labels: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl PredictionMatrix {
    pub fn new(values: Vec<f64>, labels: Vec<f64>, cols: usize) -> Self {
        assert!(cols > 0 && values.len() == labels.len() * cols, "matrix shape mismatch");
        Self { rows: labels.len(), values, labels, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Raw per-tree outputs of every aggregated tree on every local example.
pub fn prediction_matrix(
    agg: &AggregatedEnsemble,
    local: &Dataset,
) -> Result<PredictionMatrix, AggregationError> {
    prediction_matrix_with(agg, local, InputScaling::Raw)
}

pub fn prediction_matrix_with(
    agg: &AggregatedEnsemble,
    local: &Dataset,
    scaling: InputScaling,
) -> Result<PredictionMatrix, AggregationError> {
    if local.task() != agg.task() {
        return Err(AggregationError::Mismatch(format!(
            "dataset is {} but the aggregate was trained for {}",
            local.task(),
            agg.task()
        )));
    }
    let scale = match scaling {
        InputScaling::Raw => 1.0,
        InputScaling::ByEta => agg.eta(),
    };
    let features = FeatureMatrix::from_dataset(local);
    let cols = agg.total_trees();
    let mut values = vec![0.0; local.len() * cols];
    values.par_chunks_mut(cols).enumerate().for_each(|(row, out)| {
        let trees = agg.per_client.iter().flat_map(|(_, e)| e.trees());
        for (slot, tree) in out.iter_mut().zip(trees) {
            *slot = scale * predict_tree_row(tree, &features, row);
        }
    });
    Ok(PredictionMatrix::new(values, local.labels().collect(), cols))
}

/// Unweighted mean of the member ensembles' fixed-`eta` margins.
pub fn mean_ensemble_margin(agg: &AggregatedEnsemble, x: &SparseExample) -> f64 {
    let sum: f64 = agg.per_client.iter().map(|(_, e)| predict_margin(e, x)).sum();
    sum / agg.num_clients() as f64
}

pub fn aggregate_to_json(agg: &AggregatedEnsemble) -> Value {
    let clients = agg
        .per_client
        .iter()
        .map(|(cid, e)| {
            let mut m = Map::new();
            m.insert("cid".into(), Value::from(cid.0));
            m.insert("ensemble".into(), ensemble_to_json(e));
            Value::Object(m)
        })
        .collect();
    let mut m = Map::new();
    m.insert("clients".into(), Value::Array(clients));
    m.insert("format_version".into(), Value::from(AGGREGATE_FORMAT_VERSION));
    m.insert("num_clients".into(), Value::from(agg.num_clients() as u64));
    m.insert("task".into(), Value::from(agg.task().as_str()));
    m.insert("trees_per_client".into(), Value::from(agg.trees_per_client as u64));
    Value::Object(m)
}

pub fn serialize_aggregate(agg: &AggregatedEnsemble) -> Vec<u8> {
    serde_json::to_vec(&aggregate_to_json(agg)).expect("json values always serialize")
}

pub fn deserialize_aggregate(bytes: &[u8]) -> Result<AggregatedEnsemble, AggregationError> {
    let decode = |m: String| AggregationError::Decode(m);
    let v: Value = serde_json::from_slice(bytes).map_err(|e| decode(e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| decode("aggregate is not an object".into()))?;
    let ctx = "aggregate";
    let version = get_u64(obj, "format_version", ctx)?;
    if version != AGGREGATE_FORMAT_VERSION as u64 {
        return Err(decode(format!("unsupported format_version {version}")));
    }
    let k = get_u64(obj, "num_clients", ctx)? as usize;
    let m = get_u64(obj, "trees_per_client", ctx)? as usize;
    let task = get_task(obj, ctx)?;
    let clients = get(obj, "clients", ctx)?
        .as_array()
        .ok_or_else(|| decode("aggregate: `clients` is not an array".into()))?;
    let mut entries = Vec::with_capacity(clients.len());
    for c in clients {
        let co = c.as_object().ok_or_else(|| decode("client entry is not an object".into()))?;
        let cid = get_u64(co, "cid", "client")?;
        let cid = u32::try_from(cid).map_err(|_| decode(format!("client id {cid} out of range")))?;
        entries.push((ClientId(cid), ensemble_from_json(get(co, "ensemble", "client")?)?));
    }
    if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(decode("client entries are not sorted by id".into()));
    }
    let agg = aggregate_ensembles(entries)?;
    if agg.num_clients() != k || agg.trees_per_client != m || agg.task() != task {
        return Err(decode("header disagrees with the client entries".into()));
    }
    Ok(agg)
}
