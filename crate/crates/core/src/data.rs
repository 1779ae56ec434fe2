//! LIBSVM ingestion, train/test splitting and equal client partitioning.
//!
//! Each non-empty line of a LIBSVM file is `<label> <idx>:<val> ...` with
//! 1-based, strictly increasing feature indices. Lines starting with `#`
//! are skipped. Absent indices read as `0.0`.

use std::fmt::Write as _;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no examples")]
    Empty,
    #[error("classification labels must take at most two distinct values, found {0:?}")]
    LabelSet(Vec<f64>),
    #[error("declared dimension {declared} is smaller than the max observed index {observed}")]
    Dimension { declared: usize, observed: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// Binary classification (labels 0/1) or real-valued regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "classification" | "binary" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One sparse row. Feature indices are 1-based and strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    features: Vec<(u32, f64)>,
    pub label: f64,
}

impl SparseExample {
    /// Builds an example, checking the index invariants.
    pub fn new(features: Vec<(u32, f64)>, label: f64) -> Result<Self, DataError> {
        if let Some(&(first, _)) = features.first() {
            if first == 0 {
                return Err(DataError::InvalidArgument("feature index 0 is not allowed".into()));
            }
        }
        if features.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DataError::InvalidArgument(
                "feature indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { features, label })
    }

    /// Builds an example from a dense slice; entry `j` becomes index `j + 1`.
    /// Zeros are not stored.
    pub fn from_dense(values: &[f64], label: f64) -> Self {
        let features = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, v)| (j as u32 + 1, *v))
            .collect();
        Self { features, label }
    }

    pub fn features(&self) -> &[(u32, f64)] {
        &self.features
    }

    /// Value of the 1-based `index`, or `0.0` when absent.
    pub fn value(&self, index: u32) -> f64 {
        match self.features.binary_search_by_key(&index, |&(i, _)| i) {
            Ok(pos) => self.features[pos].1,
            Err(_) => 0.0,
        }
    }

    pub fn max_index(&self) -> usize {
        self.features.last().map_or(0, |&(i, _)| i as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<SparseExample>,
    dimension: usize,
    task: TaskKind,
}

impl Dataset {
    /// `dimension` is raised to the max observed index when smaller.
    pub fn new(examples: Vec<SparseExample>, dimension: usize, task: TaskKind) -> Self {
        let observed = examples.iter().map(SparseExample::max_index).max().unwrap_or(0);
        Self { examples, dimension: dimension.max(observed), task }
    }

    pub fn examples(&self) -> &[SparseExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn labels(&self) -> impl Iterator<Item = f64> + '_ {
        self.examples.iter().map(|e| e.label)
    }

    /// Declares a larger feature space, e.g. to cover indices that only
    /// appear in a test file.
    pub fn with_dimension(mut self, dimension: usize) -> Result<Self, DataError> {
        let observed = self.examples.iter().map(SparseExample::max_index).max().unwrap_or(0);
        if dimension < observed {
            return Err(DataError::Dimension { declared: dimension, observed });
        }
        self.dimension = dimension;
        Ok(self)
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            dimension: self.dimension,
            task: self.task,
        }
    }

    /// Renders the dataset back to LIBSVM text.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            write!(out, "{}", ex.label).unwrap();
            for &(i, v) in &ex.features {
                write!(out, " {i}:{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Parses LIBSVM text. For classification the two label values are mapped
/// to {0, 1}, smaller label to 0.
pub fn parse_libsvm(text: &str, task: TaskKind) -> Result<Dataset, DataError> {
    let mut examples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        examples.push(parse_line(line, lineno + 1)?);
    }
    if examples.is_empty() {
        return Err(DataError::Empty);
    }
    if task == TaskKind::Classification {
        normalize_binary_labels(&mut examples)?;
    }
    Ok(Dataset::new(examples, 0, task))
}

/// Reads and parses a LIBSVM stream (file or stdin).
pub fn read_libsvm<R: Read>(mut reader: R, task: TaskKind) -> Result<Dataset, DataError> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    parse_libsvm(&text, task)
}

fn parse_line(line: &str, lineno: usize) -> Result<SparseExample, DataError> {
    let err = |message: String| DataError::Parse { line: lineno, message };
    let mut tokens = line.split_whitespace();
    let label_tok = tokens.next().ok_or_else(|| err("missing label".into()))?;
    let label: f64 = label_tok
        .parse()
        .map_err(|_| err(format!("non-numeric label `{label_tok}`")))?;
    if !label.is_finite() {
        return Err(err(format!("non-finite label `{label_tok}`")));
    }
    let mut features: Vec<(u32, f64)> = Vec::new();
    for tok in tokens {
        let (idx_s, val_s) = tok
            .split_once(':')
            .ok_or_else(|| err(format!("token `{tok}` is not idx:val")))?;
        let idx: u32 = idx_s
            .parse()
            .map_err(|_| err(format!("non-integer index `{idx_s}`")))?;
        if idx == 0 {
            return Err(err("feature index must be >= 1".into()));
        }
        let val: f64 = val_s
            .parse()
            .map_err(|_| err(format!("non-numeric value `{val_s}`")))?;
        if let Some(&(prev, _)) = features.last() {
            if idx <= prev {
                return Err(err(format!("index {idx} does not increase after {prev}")));
            }
        }
        features.push((idx, val));
    }
    Ok(SparseExample { features, label })
}

fn normalize_binary_labels(examples: &mut [SparseExample]) -> Result<(), DataError> {
    let mut distinct: Vec<f64> = Vec::new();
    for ex in examples.iter() {
        if !distinct.contains(&ex.label) {
            distinct.push(ex.label);
            if distinct.len() > 2 {
                distinct.sort_by(f64::total_cmp);
                return Err(DataError::LabelSet(distinct));
            }
        }
    }
    distinct.sort_by(f64::total_cmp);
    let positive = match distinct.as_slice() {
        [_, hi] => *hi,
        // single class: only unambiguous conventions are accepted
        [only] if *only == 1.0 => 1.0,
        [only] if *only == 0.0 || *only == -1.0 => f64::INFINITY,
        _ => return Err(DataError::LabelSet(distinct)),
    };
    for ex in examples.iter_mut() {
        ex.label = if ex.label == positive { 1.0 } else { 0.0 };
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Shuffled split; the test side receives `round(N * test_fraction)` rows.
pub fn train_test_split(
    ds: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let n = ds.len();
    if n < 2 {
        return Err(DataError::InvalidArgument(format!("cannot split {n} example(s)")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!(
            "test fraction {test_fraction} is outside (0, 1)"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(DataError::InvalidArgument(format!(
            "test fraction {test_fraction} leaves one side of {n} examples empty"
        )));
    }
    let idx = shuffled_indices(n, seed);
    let (test_idx, train_idx) = idx.split_at(n_test);
    Ok((ds.subset(train_idx), ds.subset(test_idx)))
}

/// Shuffles then cuts into `k` contiguous shards. The first `N mod k`
/// shards (lowest client ids) hold one extra example.
pub fn partition_equal(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Dataset>, DataError> {
    let n = ds.len();
    if k == 0 || k > n {
        return Err(DataError::InvalidArgument(format!(
            "cannot partition {n} examples across {k} clients"
        )));
    }
    let idx = shuffled_indices(n, seed);
    let (base, extra) = (n / k, n % k);
    let mut shards = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        let size = base + usize::from(c < extra);
        shards.push(ds.subset(&idx[start..start + size]));
        start += size;
    }
    Ok(shards)
}
