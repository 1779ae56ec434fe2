//! XGBoost-style boosted regression trees with exact greedy split finding.
//!
//! Second-order boosting: every tree is fit to the per-example gradient and
//! hessian of the loss at the current margins, leaf weights are
//! `-G / (H + lambda)`, and a split is accepted only when its regularized
//! gain is positive.

pub(crate) mod codec;
mod split;
pub(crate) mod train;

pub use codec::{deserialize_ensemble, ensemble_from_json, ensemble_to_json, serialize_ensemble};
pub use split::{find_best_split, FeatureMatrix, SplitCandidate};
pub use train::{predict_margin, predict_tree, train_ensemble};

use thiserror::Error;

use crate::data::TaskKind;

pub const ENSEMBLE_FORMAT_VERSION: u32 = 1;

/// Relative gain difference below which two split candidates are tied.
pub const GAIN_TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbdtError {
    #[error("invalid gbdt config: {0}")]
    InvalidConfig(String),
    #[error("degenerate node: hessian sum plus lambda is {0}")]
    DegenerateNode(f64),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("ensemble decode error: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtConfig {
    pub num_trees: usize,
    pub max_depth: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub base_score: f64,
}

impl GbdtConfig {
    /// Library defaults for the task, with the given tree count. Regression
    /// starts at 0.5, classification at margin 0 (probability 0.5).
    pub fn for_task(task: TaskKind, num_trees: usize) -> Self {
        Self {
            num_trees,
            max_depth: 8,
            eta: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            base_score: match task {
                TaskKind::Regression => 0.5,
                TaskKind::Classification => 0.0,
            },
        }
    }

    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::InvalidConfig(m.to_string()));
        if self.num_trees == 0 {
            return bad("num_trees must be >= 1");
        }
        if self.max_depth == 0 {
            return bad("max_depth must be >= 1");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.min_child_weight >= 0.0) {
            return bad("lambda, gamma and min_child_weight must be >= 0");
        }
        if !self.base_score.is_finite() {
            return bad("base_score must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradHessPair {
    pub g: f64,
    pub h: f64,
}

/// Gradient/hessian sums over an instance set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplitStats {
    pub g_sum: f64,
    pub h_sum: f64,
    pub count: usize,
}

impl SplitStats {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a GradHessPair>) -> Self {
        pairs.into_iter().fold(Self::default(), |mut s, p| {
            s.add(p);
            s
        })
    }

    pub fn add(&mut self, p: &GradHessPair) {
        self.g_sum += p.g;
        self.h_sum += p.h;
        self.count += 1;
    }
}

impl std::ops::Add for SplitStats {
    type Output = SplitStats;

    fn add(self, o: SplitStats) -> SplitStats {
        SplitStats {
            g_sum: self.g_sum + o.g_sum,
            h_sum: self.h_sum + o.h_sum,
            count: self.count + o.count,
        }
    }
}

impl std::ops::Sub for SplitStats {
    type Output = SplitStats;

    fn sub(self, o: SplitStats) -> SplitStats {
        SplitStats {
            g_sum: self.g_sum - o.g_sum,
            h_sum: self.h_sum - o.h_sum,
            count: self.count - o.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split { feature: u32, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
    Leaf { weight: f64 },
}

impl TreeNode {
    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    /// Depth of the deepest leaf; a lone leaf has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    root: TreeNode,
    leaf_count: usize,
}

impl Tree {
    pub fn new(root: TreeNode) -> Self {
        let leaf_count = root.leaf_count();
        Self { root, leaf_count }
    }

    pub fn leaf(weight: f64) -> Self {
        Self::new(TreeNode::Leaf { weight })
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }
}

/// One client's boosted trees, in boosting order.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    trees: Vec<Tree>,
    config: GbdtConfig,
    task: TaskKind,
}

impl TreeEnsemble {
    pub fn new(trees: Vec<Tree>, config: GbdtConfig, task: TaskKind) -> Result<Self, GbdtError> {
        config.validate()?;
        if trees.len() != config.num_trees {
            return Err(GbdtError::InvalidConfig(format!(
                "ensemble holds {} trees but config declares {}",
                trees.len(),
                config.num_trees
            )));
        }
        Ok(Self { trees, config, task })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn config(&self) -> &GbdtConfig {
        &self.config
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

/// Gradient and hessian of the loss at margin `y_hat`: squared error for
/// regression, logistic loss for classification.
pub fn grad_hess(task: TaskKind, y: f64, y_hat: f64) -> GradHessPair {
    match task {
        TaskKind::Regression => GradHessPair { g: y_hat - y, h: 1.0 },
        TaskKind::Classification => {
            let p = sigmoid(y_hat);
            GradHessPair { g: p - y, h: p * (1.0 - p) }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Optimal leaf weight `-G / (H + lambda)`.
pub fn leaf_weight(stats: &SplitStats, lambda: f64) -> Result<f64, GbdtError> {
    let denom = stats.h_sum + lambda;
    if denom <= 0.0 {
        return Err(GbdtError::DegenerateNode(denom));
    }
    Ok(-stats.g_sum / denom)
}

/// Objective reduction from splitting a node into `left` and `right`,
/// minus `gamma` for the added leaf. The parent term uses the gradient sum
/// of the undivided node, `(G_L + G_R)^2`.
pub fn split_gain(
    left: &SplitStats,
    right: &SplitStats,
    lambda: f64,
    gamma: f64,
) -> Result<f64, GbdtError> {
    let dl = left.h_sum + lambda;
    let dr = right.h_sum + lambda;
    let dp = left.h_sum + right.h_sum + lambda;
    for d in [dl, dr, dp] {
        if d <= 0.0 {
            return Err(GbdtError::DegenerateNode(d));
        }
    }
    Ok(split_gain_unchecked(left.g_sum, dl, right.g_sum, dr, lambda) - gamma)
}

#[inline]
pub(crate) fn split_gain_unchecked(gl: f64, dl: f64, gr: f64, dr: f64, lambda: f64) -> f64 {
    let g = gl + gr;
    0.5 * (gl * gl / dl + gr * gr / dr - g * g / (dl + dr - lambda))
}
