//! Reference implementations shared by the integration tests. Everything
//! here is written from the definitions, not from the library code paths.

#![allow(dead_code)]

use std::path::PathBuf;

use fedtree_core::cnn::{forward, loss_and_grad, CnnParams, HeadVariant, FCNN_HIDDEN};
use fedtree_core::gbdt::{grad_hess, predict_tree, GbdtConfig, GradHessPair, TreeNode, GAIN_TIE_TOLERANCE};
use fedtree_core::{parse_libsvm, Dataset, SparseExample, TaskKind, TreeEnsemble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn load_bundled(name: &str, task: TaskKind) -> Dataset {
    let text = std::fs::read_to_string(data_path(name)).expect("bundled dataset");
    parse_libsvm(&text, task).expect("bundled dataset parses")
}

/// Dense random dataset. Feature values are drawn from a small grid about
/// half the time so that ties and repeated values are common.
pub fn random_dataset(r: &mut ChaCha8Rng, n: usize, d: usize, task: TaskKind) -> Dataset {
    let examples = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..d)
                .map(|_| if r.gen_bool(0.5) { r.gen_range(0..6) as f64 } else { r.gen_range(-3.0..3.0) })
                .collect();
            let y = match task {
                TaskKind::Regression => x.iter().map(|v| v * v).sum::<f64>().sqrt() + r.gen_range(-0.5..0.5),
                TaskKind::Classification => f64::from(x[0] + r.gen_range(-1.0..1.0) > 1.0),
            };
            SparseExample::from_dense(&x, y)
        })
        .collect();
    Dataset::new(examples, d, task)
}

// ---------------------------------------------------------------- trees

pub fn naive_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr) * (gl + gr) / (hl + hr + lambda))
        - gamma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSplit {
    pub feature: u32,
    pub threshold: f64,
    pub gain: f64,
}

/// Enumerates every (feature, boundary between distinct values) pair,
/// summing each side from scratch. Ties (within the documented relative
/// tolerance) keep the earlier candidate: lowest feature, then lowest
/// threshold.
pub fn exhaustive_split(
    data: &Dataset,
    rows: &[usize],
    gh: &[GradHessPair],
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
) -> Option<OracleSplit> {
    let mut best: Option<OracleSplit> = None;
    for f in 1..=data.dimension() as u32 {
        let mut values: Vec<f64> = rows.iter().map(|&r| data.examples()[r].value(f)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let mid = w[0] / 2.0 + w[1] / 2.0;
            let threshold = if mid > w[0] { mid } else { w[1] };
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for &r in rows {
                if data.examples()[r].value(f) < threshold {
                    gl += gh[r].g;
                    hl += gh[r].h;
                } else {
                    gr += gh[r].g;
                    hr += gh[r].h;
                }
            }
            if hl < min_child_weight || hr < min_child_weight {
                continue;
            }
            let gain = naive_gain(gl, hl, gr, hr, lambda, gamma);
            let incumbent = best.map_or(0.0, |b| b.gain);
            if gain > incumbent + incumbent * GAIN_TIE_TOLERANCE {
                best = Some(OracleSplit { feature: f, threshold, gain });
            }
        }
    }
    best
}

/// Margins of every training row before each tree, by direct summation.
pub fn margins_before(ensemble: &TreeEnsemble, data: &Dataset, tree: usize) -> Vec<f64> {
    let cfg = ensemble.config();
    data.examples()
        .iter()
        .map(|x| {
            let s: f64 = ensemble.trees()[..tree].iter().map(|t| predict_tree(t, x)).sum();
            cfg.base_score + cfg.eta * s
        })
        .collect()
}

pub fn grad_hess_at(data: &Dataset, margins: &[f64]) -> Vec<GradHessPair> {
    data.examples().iter().zip(margins).map(|(x, &m)| grad_hess(data.task(), x.label, m)).collect()
}

/// Walks every tree, recomputing which rows reach each node, and hands each
/// node to `visit(node, rows, gh, depth)`.
pub fn visit_nodes(
    ensemble: &TreeEnsemble,
    data: &Dataset,
    mut visit: impl FnMut(&TreeNode, &[usize], &[GradHessPair], usize),
) {
    for t in 0..ensemble.len() {
        let gh = grad_hess_at(data, &margins_before(ensemble, data, t));
        let rows: Vec<usize> = (0..data.len()).collect();
        walk(ensemble.trees()[t].root(), data, &rows, &gh, 0, &mut visit);
    }
}

fn walk(
    node: &TreeNode,
    data: &Dataset,
    rows: &[usize],
    gh: &[GradHessPair],
    depth: usize,
    visit: &mut impl FnMut(&TreeNode, &[usize], &[GradHessPair], usize),
) {
    visit(node, rows, gh, depth);
    if let TreeNode::Split { feature, threshold, left, right } = node {
        let (l, r): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| data.examples()[i].value(*feature) < *threshold);
        walk(left, data, &l, gh, depth + 1, visit);
        walk(right, data, &r, gh, depth + 1, visit);
    }
}

/// Compares every node of a trained ensemble against the oracle. Returns
/// the number of internal nodes checked.
pub fn check_ensemble_against_oracle(ensemble: &TreeEnsemble, data: &Dataset) -> Result<usize, String> {
    let cfg: &GbdtConfig = ensemble.config();
    let mut splits = 0;
    let mut failure = None;
    visit_nodes(ensemble, data, |node, rows, gh, depth| {
        if failure.is_some() {
            return;
        }
        let oracle = if depth < cfg.max_depth {
            exhaustive_split(data, rows, gh, cfg.lambda, cfg.gamma, cfg.min_child_weight)
        } else {
            None
        };
        match (node, oracle) {
            (TreeNode::Split { feature, threshold, .. }, Some(o)) => {
                splits += 1;
                if (*feature, *threshold) != (o.feature, o.threshold) {
                    failure = Some(format!(
                        "depth {depth}: tree split ({feature}, {threshold}), oracle ({}, {}) gain {}",
                        o.feature, o.threshold, o.gain
                    ));
                }
            }
            (TreeNode::Leaf { weight }, None) => {
                let g: f64 = rows.iter().map(|&r| gh[r].g).sum();
                let h: f64 = rows.iter().map(|&r| gh[r].h).sum();
                let w = -g / (h + cfg.lambda);
                if (w - weight).abs() > 1e-9 * (1.0 + w.abs()) {
                    failure = Some(format!("leaf weight {weight}, expected {w}"));
                }
            }
            (TreeNode::Split { .. }, None) => failure = Some(format!("depth {depth}: tree splits, oracle does not")),
            (TreeNode::Leaf { .. }, Some(o)) => failure = Some(format!("depth {depth}: leaf, oracle splits {o:?}")),
        }
    });
    failure.map_or(Ok(splits), Err)
}

// ----------------------------------------------------------------- head

/// Independent forward pass returning the margin and every pre-activation.
pub fn naive_forward(p: &CnnParams, row: &[f64]) -> (f64, Vec<f64>) {
    let cfg = *p.config();
    let (c, m, k) = (cfg.channels, cfg.trees_per_client, cfg.num_clients);
    let mut pre = Vec::new();
    let mut out = p.fc_b;
    match cfg.head_variant {
        HeadVariant::Interpretable => {
            for kk in 0..k {
                for ch in 0..c {
                    let mut z = p.conv_b[ch];
                    for t in 0..m {
                        z += p.conv_w[ch * m + t] * row[kk * m + t];
                    }
                    pre.push(z);
                    out += z.max(0.0) * p.fc_w[kk * c + ch];
                }
            }
        }
        HeadVariant::ConvK3S1 => {
            let width = m * k;
            let padded: Vec<f64> = std::iter::once(0.0).chain(row.iter().copied()).chain([0.0]).collect();
            for pos in 0..width {
                for ch in 0..c {
                    let z = p.conv_b[ch]
                        + (0..3).map(|j| p.conv_w[ch * 3 + j] * padded[pos + j]).sum::<f64>();
                    pre.push(z);
                    out += z.max(0.0) * p.fc_w[pos * c + ch];
                }
            }
        }
        HeadVariant::Fcnn2Layer => {
            let width = m * k;
            for h in 0..FCNN_HIDDEN {
                let z = p.conv_b[h] + (0..width).map(|i| p.conv_w[h * width + i] * row[i]).sum::<f64>();
                pre.push(z);
                out += z.max(0.0) * p.fc_w[h];
            }
        }
    }
    (out, pre)
}

pub fn naive_loss(p: &CnnParams, batch: &[(Vec<f64>, f64)], task: TaskKind) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|(row, y)| {
            let m = naive_forward(p, row).0;
            match task {
                TaskKind::Regression => 0.5 * (m - y) * (m - y),
                TaskKind::Classification => (1.0 + (-m).exp()).ln() + (1.0 - y) * m,
            }
        })
        .sum();
    total / batch.len() as f64
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so that components whose true
/// value is essentially zero are judged on absolute error.
pub const FD_FLOOR: f64 = 1e-4;
/// Fixtures with a pre-activation this close to the rectifier kink are
/// redrawn; a finite difference across the kink is not a derivative.
pub const KINK_MARGIN: f64 = 1e-4;

fn params_mut(p: &mut CnnParams, i: usize) -> &mut f64 {
    let (a, b, c) = (p.conv_w.len(), p.conv_b.len(), p.fc_w.len());
    if i < a {
        &mut p.conv_w[i]
    } else if i < a + b {
        &mut p.conv_b[i - a]
    } else if i < a + b + c {
        &mut p.fc_w[i - a - b]
    } else {
        &mut p.fc_b
    }
}

/// Largest relative error between the analytic gradient and central
/// differences of the naive loss, over every parameter.
pub fn max_fd_error(p: &CnnParams, batch: &[(Vec<f64>, f64)], task: TaskKind) -> f64 {
    let refs: Vec<(&[f64], f64)> = batch.iter().map(|(r, y)| (r.as_slice(), *y)).collect();
    let (_, grads) = loss_and_grad(p, &refs, task).unwrap();
    let analytic: Vec<f64> = grads.flat().collect();
    let mut worst = 0.0f64;
    let mut q = p.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *params_mut(&mut q, i);
        *params_mut(&mut q, i) = orig + FD_STEP;
        let up = naive_loss(&q, batch, task);
        *params_mut(&mut q, i) = orig - FD_STEP;
        let down = naive_loss(&q, batch, task);
        *params_mut(&mut q, i) = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max(err);
    }
    worst
}

pub fn near_kink(p: &CnnParams, batch: &[(Vec<f64>, f64)]) -> bool {
    batch.iter().any(|(row, _)| naive_forward(p, row).1.iter().any(|z| z.abs() < KINK_MARGIN))
}

pub fn random_batch(r: &mut ChaCha8Rng, n: usize, width: usize, task: TaskKind) -> Vec<(Vec<f64>, f64)> {
    (0..n)
        .map(|_| {
            let row: Vec<f64> = (0..width).map(|_| r.gen_range(-2.0..2.0)).collect();
            let y = match task {
                TaskKind::Regression => r.gen_range(-3.0..3.0),
                TaskKind::Classification => f64::from(r.gen_bool(0.5)),
            };
            (row, y)
        })
        .collect()
}

/// Checks that `forward` agrees with the naive pass to 1e-12.
pub fn forward_matches_naive(p: &CnnParams, row: &[f64]) -> bool {
    let a = forward(p, row).unwrap();
    let b = naive_forward(p, row).0;
    (a - b).abs() <= 1e-12 * (1.0 + b.abs())
}

// ------------------------------------------------------------- protocol

/// Two-client regression where the clients see shifted feature ranges and
/// different response surfaces, plus a held-out set drawn from both.
pub fn heterogeneous_regression(seed: u64, per_client: usize, test: usize) -> (Vec<Dataset>, Dataset) {
    let mut r = rng(seed);
    let draw = |client: usize, r: &mut ChaCha8Rng| {
        let shift = if client == 0 { -1.5 } else { 1.5 };
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0) + shift).collect();
        let y = if client == 0 {
            2.0 * x[0] + x[1] * x[1]
        } else {
            -x[0] + 3.0 * (x[2] * 2.0).sin() + 0.5 * x[3]
        } + r.gen_range(-0.1..0.1);
        SparseExample::from_dense(&x, y)
    };
    let shards: Vec<Dataset> = (0..2)
        .map(|c| Dataset::new((0..per_client).map(|_| draw(c, &mut r)).collect(), 4, TaskKind::Regression))
        .collect();
    let test = Dataset::new((0..test).map(|i| draw(i % 2, &mut r)).collect(), 4, TaskKind::Regression);
    (shards, test)
}

pub fn label_variance(data: &Dataset) -> f64 {
    let n = data.len() as f64;
    let mean = data.labels().sum::<f64>() / n;
    data.labels().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n
}
