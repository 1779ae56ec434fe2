//! Communication-overhead and model-size accounting.
//!
//! The closed form charges every client one upload and one download of
//! the tree payload, then one upload and one download of the head per
//! round: `2 K (M SZ_t + R SZ_nn)`, with `M` the total tree count. Model
//! sizes are reported at a configurable width per value (4 bytes by
//! default, matching single-precision deployments) even though training
//! runs in 64-bit.

use std::fmt::Write as _;

use crate::cnn::{param_count, CnnConfig, HeadVariant};
use crate::protocol::RoundLog;

/// Decimal megabyte.
pub const BYTES_PER_MB: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommModel {
    pub num_clients: usize,
    /// Total trees over all clients.
    pub total_trees: usize,
    pub rounds: usize,
    pub tree_bytes: f64,
    pub cnn_bytes: f64,
}

/// Total bytes moved to build the global model. Note the absence of any
/// dataset-size input.
pub fn comm_overhead(model: &CommModel) -> f64 {
    let k = model.num_clients as f64;
    2.0 * k * (model.total_trees as f64 * model.tree_bytes + model.rounds as f64 * model.cnn_bytes)
}

/// Bytes actually exchanged in a run, round 0 included.
pub fn measured_overhead(logs: &[RoundLog]) -> u64 {
    logs.iter().map(|l| l.bytes_up + l.bytes_down).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeReport {
    pub total_params: usize,
    pub params_bytes: usize,
    /// Activation footprint of one forward plus backward pass at batch 1.
    pub pass_bytes: usize,
}

impl SizeReport {
    pub fn params_mb(&self) -> f64 {
        self.params_bytes as f64 / BYTES_PER_MB
    }

    pub fn pass_mb(&self) -> f64 {
        self.pass_bytes as f64 / BYTES_PER_MB
    }
}

pub fn size_report(config: &CnnConfig, bytes_per_value: usize) -> SizeReport {
    let total_params = param_count(
        config.trees_per_client,
        config.num_clients,
        config.channels,
        config.head_variant,
    );
    let a = config.activation_count();
    // layer output, rectifier output, flattened view (conv heads), scalar head
    let stored = match config.head_variant {
        HeadVariant::Fcnn2Layer => 2 * a + 1,
        _ => 3 * a + 1,
    };
    SizeReport {
        total_params,
        params_bytes: total_params * bytes_per_value,
        pass_bytes: 2 * stored * bytes_per_value,
    }
}

/// Published overhead (MB) of the gradient-sharing LSH baseline with
/// K = 10, 500 trees of depth 8, and the savings factor printed beside it.
pub const PUBLISHED_BASELINE_MB: [(&str, f64, u32); 6] = [
    ("a9a", 150.4, 25),
    ("cod-rna", 249.3, 42),
    ("ijcnn1", 218.4, 36),
    ("real-sim", 323.1, 54),
    ("HIGGS", 4216.0, 703),
    ("SUSY", 4136.0, 689),
];

/// CSV comparing the closed form against the published baseline values.
pub fn comm_table_csv(model: &CommModel) -> String {
    let ours_mb = comm_overhead(model) / BYTES_PER_MB;
    let mut out = String::from(
        "dataset,ours_mb,baseline_mb,factor,num_clients,total_trees,rounds,tree_bytes,cnn_bytes\n",
    );
    for (name, baseline, _) in PUBLISHED_BASELINE_MB {
        writeln!(
            out,
            "{name},{ours_mb:.1},{baseline},{:.0},{},{},{},{},{}",
            baseline / ours_mb,
            model.num_clients,
            model.total_trees,
            model.rounds,
            model.tree_bytes,
            model.cnn_bytes
        )
        .unwrap();
    }
    out
}

/// CSV of parameter counts and sizes: the default head at 2, 5 and 10
/// clients sharing 500 trees, then the two ablation heads at 5 clients.
pub fn size_table_csv(channels: usize, total_trees: usize, bytes_per_value: usize) -> String {
    let mut out = String::from("model,num_clients,trees_per_client,total_params,params_mb,pass_mb\n");
    let mut rows = Vec::new();
    for k in [2, 5, 10] {
        rows.push(CnnConfig::new(channels, total_trees / k, k));
    }
    for v in [HeadVariant::ConvK3S1, HeadVariant::Fcnn2Layer] {
        rows.push(CnnConfig::new(channels, total_trees / 5, 5).with_variant(v));
    }
    for cfg in rows {
        let r = size_report(&cfg, bytes_per_value);
        writeln!(
            out,
            "{},{},{},{},{:.2},{:.2}",
            cfg.head_variant,
            cfg.num_clients,
            cfg.trees_per_client,
            r.total_params,
            r.params_mb(),
            r.pass_mb()
        )
        .unwrap();
    }
    out
}
