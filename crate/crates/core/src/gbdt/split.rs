use super::{split_gain_unchecked, GradHessPair, SplitStats, GAIN_TIE_TOLERANCE};
use crate::data::Dataset;

/// Column-major dense copy of a dataset's features; absent entries are 0.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    columns: Vec<Vec<f64>>,
    rows: usize,
}

impl FeatureMatrix {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut columns = vec![vec![0.0; ds.len()]; ds.dimension()];
        for (r, ex) in ds.examples().iter().enumerate() {
            for &(idx, v) in ex.features() {
                columns[idx as usize - 1][r] = v;
            }
        }
        Self { columns, rows: ds.len() }
    }

    pub fn num_features(&self) -> usize {
        self.columns.len()
    }

    pub fn num_rows(&self) -> usize {
        self.rows
    }

    /// Column of the 1-based feature index.
    pub fn column(&self, feature: u32) -> &[f64] {
        &self.columns[feature as usize - 1]
    }

    pub fn value(&self, row: usize, feature: u32) -> f64 {
        self.columns[feature as usize - 1][row]
    }

    /// Row ids ordered by the feature's value, ties by row id.
    pub(crate) fn sorted_rows(&self, feature: u32, rows: &[usize]) -> Vec<usize> {
        let col = self.column(feature);
        let mut sorted = rows.to_vec();
        sorted.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
        sorted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitCandidate {
    /// 1-based feature index.
    pub feature: u32,
    pub threshold: f64,
    pub gain: f64,
    pub left_rows: Vec<usize>,
    pub right_rows: Vec<usize>,
    pub left_stats: SplitStats,
    pub right_stats: SplitStats,
}

/// Midpoint of two distinct sorted values, nudged so that `lo < t <= hi`.
pub(crate) fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo / 2.0 + hi / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

pub(crate) struct FeatureBest {
    pub gain: f64,
    pub threshold: f64,
    /// Number of sorted rows that go left.
    pub left_len: usize,
    pub left: SplitStats,
}

/// Whether `gain` displaces an incumbent with gain `best`. Gains within
/// `GAIN_TIE_TOLERANCE` (relative) count as tied, so two boundaries that
/// induce the same partition tie even when their sums were accumulated in
/// different orders.
pub(crate) fn beats(gain: f64, best: f64) -> bool {
    gain > best + best.abs() * GAIN_TIE_TOLERANCE
}

/// Scans one feature's rows in ascending value order and returns the best
/// boundary that beats `floor`. Earlier (lower) thresholds win ties.
pub(crate) fn scan_feature(
    column: &[f64],
    sorted: &[usize],
    gh: &[GradHessPair],
    total: SplitStats,
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
    floor: f64,
) -> Option<FeatureBest> {
    let mut best: Option<FeatureBest> = None;
    let mut best_gain = floor;
    let mut left = SplitStats::default();
    for i in 0..sorted.len().saturating_sub(1) {
        left.add(&gh[sorted[i]]);
        let (lo, hi) = (column[sorted[i]], column[sorted[i + 1]]);
        if lo == hi {
            continue;
        }
        let right = total - left;
        if left.h_sum < min_child_weight || right.h_sum < min_child_weight {
            continue;
        }
        let dl = left.h_sum + lambda;
        let dr = right.h_sum + lambda;
        if dl <= 0.0 || dr <= 0.0 {
            continue;
        }
        let gain = split_gain_unchecked(left.g_sum, dl, right.g_sum, dr, lambda) - gamma;
        if beats(gain, best_gain) {
            best_gain = gain;
            best = Some(FeatureBest { gain, threshold: midpoint(lo, hi), left_len: i + 1, left });
        }
    }
    best
}

/// Exact greedy split search over every feature of `matrix` for the given
/// instance set. Returns `None` when no boundary has positive gain with
/// both children meeting `min_child_weight`. Ties go to the lowest feature
/// index, then the lowest threshold.
pub fn find_best_split(
    rows: &[usize],
    gh: &[GradHessPair],
    matrix: &FeatureMatrix,
    lambda: f64,
    gamma: f64,
    min_child_weight: f64,
) -> Option<SplitCandidate> {
    if rows.len() < 2 {
        return None;
    }
    let total = SplitStats::from_pairs(rows.iter().map(|&r| &gh[r]));
    let mut best: Option<(u32, Vec<usize>, FeatureBest)> = None;
    for feature in 1..=matrix.num_features() as u32 {
        let sorted = matrix.sorted_rows(feature, rows);
        let floor = best.as_ref().map_or(0.0, |b| b.2.gain);
        if let Some(fb) = scan_feature(
            matrix.column(feature),
            &sorted,
            gh,
            total,
            lambda,
            gamma,
            min_child_weight,
            floor,
        ) {
            best = Some((feature, sorted, fb));
        }
    }
    best.map(|(feature, mut sorted, fb)| {
        let right_rows = sorted.split_off(fb.left_len);
        SplitCandidate {
            feature,
            threshold: fb.threshold,
            gain: fb.gain,
            left_rows: sorted,
            right_rows,
            left_stats: fb.left,
            right_stats: total - fb.left,
        }
    })
}
