//! Federated gradient-boosted trees with learnable per-tree learning rates.
//!
//! Each client boosts a local tree ensemble once; the server concatenates
//! the ensembles in client-id order and broadcasts them; the clients then
//! train, by FedAvg, a small 1D CNN whose convolution weights act as
//! learned per-tree learning rates over the trees' raw outputs.

pub mod data;
pub mod gbdt;
pub mod aggregation;
pub mod cnn;
pub mod comm;
pub mod protocol;
pub mod config;

pub use data::{parse_libsvm, partition_equal, train_test_split, DataError, Dataset, SparseExample, TaskKind};
pub use gbdt::{GbdtConfig, GbdtError, Tree, TreeEnsemble, TreeNode};
pub use aggregation::{
    aggregate_ensembles, prediction_matrix, AggregatedEnsemble, AggregationError, ClientId, InputScaling,
    PredictionMatrix,
};
pub use cnn::{init_params, AdamConfig, CnnConfig, CnnError, CnnParams, HeadVariant, TrainConfig};
pub use comm::{comm_overhead, measured_overhead, size_report, CommModel, SizeReport};
pub use config::{ConfigError, ExperimentConfig};
pub use protocol::{
    evaluate_global, fedavg_aggregate, run_centralized, run_training, FedConfig, GlobalModel, ProtocolError,
    RoundLog,
};
