use super::split::{scan_feature, FeatureBest};
use super::{
    grad_hess, leaf_weight, FeatureMatrix, GbdtConfig, GbdtError, GradHessPair, SplitStats, Tree,
    TreeEnsemble, TreeNode,
};
use crate::data::{Dataset, SparseExample};

/// Routes `x` to a leaf: `value < threshold` goes left.
pub fn predict_tree(tree: &Tree, x: &SparseExample) -> f64 {
    let mut node = tree.root();
    loop {
        match node {
            TreeNode::Leaf { weight } => return *weight,
            TreeNode::Split { feature, threshold, left, right } => {
                node = if x.value(*feature) < *threshold { left } else { right };
            }
        }
    }
}

pub(crate) fn predict_tree_row(tree: &Tree, matrix: &FeatureMatrix, row: usize) -> f64 {
    let mut node = tree.root();
    loop {
        match node {
            TreeNode::Leaf { weight } => return *weight,
            TreeNode::Split { feature, threshold, left, right } => {
                let v = if (*feature as usize) <= matrix.num_features() {
                    matrix.value(row, *feature)
                } else {
                    0.0
                };
                node = if v < *threshold { left } else { right };
            }
        }
    }
}

/// `base_score + eta * sum_t f_t(x)`.
pub fn predict_margin(ensemble: &TreeEnsemble, x: &SparseExample) -> f64 {
    let sum: f64 = ensemble.trees().iter().map(|t| predict_tree(t, x)).sum();
    ensemble.config().base_score + ensemble.config().eta * sum
}

/// Forward stagewise boosting of `config.num_trees` trees from a constant
/// `base_score` margin.
pub fn train_ensemble(train: &Dataset, config: &GbdtConfig) -> Result<TreeEnsemble, GbdtError> {
    config.validate()?;
    if train.is_empty() {
        return Err(GbdtError::EmptyTrainingSet);
    }
    let matrix = FeatureMatrix::from_dataset(train);
    let labels: Vec<f64> = train.labels().collect();
    let all_rows: Vec<usize> = (0..train.len()).collect();
    // per-feature row orders never change across trees
    let presorted: Vec<Vec<usize>> = (1..=matrix.num_features() as u32)
        .map(|f| matrix.sorted_rows(f, &all_rows))
        .collect();

    let mut margins = vec![config.base_score; train.len()];
    let mut trees = Vec::with_capacity(config.num_trees);
    let mut grower = Grower {
        matrix: &matrix,
        config,
        gh: Vec::with_capacity(train.len()),
        row_output: vec![0.0; train.len()],
        goes_left: vec![false; train.len()],
    };
    for _ in 0..config.num_trees {
        grower.gh.clear();
        grower
            .gh
            .extend(labels.iter().zip(&margins).map(|(&y, &m)| grad_hess(train.task(), y, m)));
        let root = grower.grow(presorted.clone(), &all_rows, 0)?;
        for (m, out) in margins.iter_mut().zip(&grower.row_output) {
            *m += config.eta * out;
        }
        trees.push(Tree::new(root));
    }
    TreeEnsemble::new(trees, config.clone(), train.task())
}

struct Grower<'a> {
    matrix: &'a FeatureMatrix,
    config: &'a GbdtConfig,
    gh: Vec<GradHessPair>,
    /// Leaf weight each training row landed in for the current tree.
    row_output: Vec<f64>,
    goes_left: Vec<bool>,
}

impl Grower<'_> {
    /// `sorted[j]` holds this node's rows ordered by feature `j + 1`.
    fn grow(
        &mut self,
        sorted: Vec<Vec<usize>>,
        rows: &[usize],
        depth: usize,
    ) -> Result<TreeNode, GbdtError> {
        let stats = SplitStats::from_pairs(rows.iter().map(|&r| &self.gh[r]));
        let split = if depth < self.config.max_depth && rows.len() >= 2 {
            self.best_split(&sorted, stats)
        } else {
            None
        };
        let Some((feature, best)) = split else {
            let weight = leaf_weight(&stats, self.config.lambda)?;
            for &r in rows {
                self.row_output[r] = weight;
            }
            return Ok(TreeNode::Leaf { weight });
        };

        let f_sorted = &sorted[feature as usize - 1];
        for &r in &f_sorted[..best.left_len] {
            self.goes_left[r] = true;
        }
        for &r in &f_sorted[best.left_len..] {
            self.goes_left[r] = false;
        }
        let mut left_sorted = Vec::with_capacity(sorted.len());
        let mut right_sorted = Vec::with_capacity(sorted.len());
        for list in sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = list.into_iter().partition(|&r| self.goes_left[r]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let left_rows = left_sorted[0].clone();
        let right_rows = right_sorted[0].clone();
        let left = self.grow(left_sorted, &left_rows, depth + 1)?;
        let right = self.grow(right_sorted, &right_rows, depth + 1)?;
        Ok(TreeNode::Split {
            feature,
            threshold: best.threshold,
            left: Box::new(left),
            right: Box::new(right),
        })
    }

    fn best_split(&self, sorted: &[Vec<usize>], total: SplitStats) -> Option<(u32, FeatureBest)> {
        let mut best: Option<(u32, FeatureBest)> = None;
        for (j, list) in sorted.iter().enumerate() {
            let feature = j as u32 + 1;
            let floor = best.as_ref().map_or(0.0, |b| b.1.gain);
            if let Some(fb) = scan_feature(
                self.matrix.column(feature),
                list,
                &self.gh,
                total,
                self.config.lambda,
                self.config.gamma,
                self.config.min_child_weight,
                floor,
            ) {
                best = Some((feature, fb));
            }
        }
        best
    }
}
