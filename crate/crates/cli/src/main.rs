//! `fedtree`: run federated experiments from a config file and print the
//! size and communication tables.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid config or arguments,
//! 3 unreadable or malformed dataset.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedtree_core::aggregation::{deserialize_aggregate, serialize_aggregate, InputScaling};
use fedtree_core::cnn::{deserialize_params, serialize_params};
use fedtree_core::comm::{comm_table_csv, measured_overhead, size_table_csv, CommModel};
use fedtree_core::data::read_libsvm;
use fedtree_core::protocol::{
    mean_ensemble_metric, metric_from_margins, predict_global, round_log_csv, run_centralized, run_training,
};
use fedtree_core::{train_test_split, Dataset, ExperimentConfig, GlobalModel, TaskKind};
use log::info;

#[derive(Parser)]
#[command(name = "fedtree", version, about = "Federated boosted trees with a learned tree-combining head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    /// Experiment file of `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Directory for logs, summaries and model files.
    #[arg(long, default_value = "fedtree-out")]
    out_dir: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config repeat count. Run `i` uses seed + i.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full federated experiment.
    Run(ExperimentArgs),
    /// One ensemble with every tree, trained on the pooled training set.
    Centralized(ExperimentArgs),
    /// Parameter counts and sizes of the combining heads, as CSV.
    ReportSizes {
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 500)]
        total_trees: usize,
        #[arg(long, default_value_t = 4)]
        bytes_per_value: usize,
    },
    /// Closed-form communication overhead against the published baseline, as CSV.
    ReportComm {
        #[arg(long, default_value_t = 10)]
        num_clients: usize,
        #[arg(long, default_value_t = 500)]
        total_trees: usize,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        /// Bytes per tree.
        #[arg(long, default_value_t = 0.0)]
        tree_bytes: f64,
        /// Bytes of the head.
        #[arg(long, default_value_t = 30_000.0)]
        cnn_bytes: f64,
    },
    /// Scores a LIBSVM file with a saved global model; margins go to stdout.
    Predict {
        /// Directory holding `aggregate.json` and `cnn.bin`.
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Set when the model was trained with `scale_inputs_by_eta = true`.
        #[arg(long)]
        scale_inputs_by_eta: bool,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Dataset(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid config: {m}"),
            CliError::Dataset(m) => write!(f, "dataset error: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::parse(&text).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.fed.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Resolves a dataset path relative to the config file's directory.
fn resolve(config_path: &Path, data: &Path) -> PathBuf {
    if data.is_absolute() {
        return data.to_path_buf();
    }
    config_path.parent().map_or_else(|| data.to_path_buf(), |d| d.join(data))
}

fn load_dataset(path: &Path, task: TaskKind, dimension: Option<usize>) -> Result<Dataset, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    let mut ds = read_libsvm(std::io::BufReader::new(file), task)
        .map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    if let Some(d) = dimension {
        ds = ds.with_dimension(d).map_err(|e| CliError::Dataset(format!("{}: {e}", path.display())))?;
    }
    Ok(ds)
}

struct Prepared {
    cfg: ExperimentConfig,
    data: Dataset,
    test: Option<Dataset>,
}

fn prepare(args: &ExperimentArgs) -> Result<Prepared, CliError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.fed.seed = seed;
    }
    if let Some(r) = args.repeats {
        if r == 0 {
            return Err(CliError::Config("invalid value for `repeats`: must be at least 1".into()));
        }
        cfg.repeats = r;
    }
    let task = cfg.fed.task;
    let data = load_dataset(&resolve(&args.config, &cfg.dataset), task, cfg.dimension)?;
    let test = match &cfg.test_dataset {
        Some(p) => Some(load_dataset(&resolve(&args.config, p), task, cfg.dimension)?),
        None => None,
    };
    // both sides must agree on the feature count
    let (data, test) = match test {
        Some(t) => {
            let d = data.dimension().max(t.dimension());
            let data = data.with_dimension(d).map_err(|e| CliError::Dataset(e.to_string()))?;
            let t = t.with_dimension(d).map_err(|e| CliError::Dataset(e.to_string()))?;
            (data, Some(t))
        }
        None => (data, None),
    };
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::Other(format!("{}: {e}", args.out_dir.display())))?;
    Ok(Prepared { cfg, data, test })
}

fn split_for(p: &Prepared, seed: u64) -> Result<(Dataset, Dataset), CliError> {
    match &p.test {
        Some(t) => Ok((p.data.clone(), t.clone())),
        None => train_test_split(&p.data, p.cfg.test_fraction, seed).map_err(|e| CliError::Dataset(e.to_string())),
    }
}

fn metric_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Regression => "mse",
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn cmd_run(args: &ExperimentArgs) -> Result<(), CliError> {
    let p = prepare(args)?;
    let name = metric_name(p.cfg.fed.task);
    let mut summary = format!("run,seed,{name},mean_ensemble_{name},bytes_total\n");
    let (mut finals, mut baselines) = (Vec::new(), Vec::new());
    for i in 0..p.cfg.repeats {
        let seed = p.cfg.fed.seed.wrapping_add(i as u64);
        let fed = fedtree_core::FedConfig { seed, ..p.cfg.fed.clone() };
        let (train, test) = split_for(&p, seed)?;
        info!("run {i}: {} training and {} test examples, seed {seed}", train.len(), test.len());
        let (model, logs) = run_training(&fed, &train, &test).map_err(other)?;
        let metric = logs.last().map_or(f64::NAN, |l| l.global_metric);
        let baseline = mean_ensemble_metric(&model.aggregate, &test);

        let dir = args.out_dir.join(format!("run_{i}"));
        fs::create_dir_all(&dir).map_err(other)?;
        write_file(&dir.join("round_log.csv"), round_log_csv(&logs))?;
        write_file(&dir.join("aggregate.json"), serialize_aggregate(&model.aggregate))?;
        write_file(&dir.join("cnn.bin"), serialize_params(&model.cnn))?;

        writeln!(summary, "{i},{seed},{metric},{baseline},{}", measured_overhead(&logs)).unwrap();
        info!("run {i}: {name} {metric:.6} (mean of ensembles {baseline:.6})");
        finals.push(metric);
        baselines.push(baseline);
    }
    writeln!(summary, "mean,,{},{},", mean(&finals), mean(&baselines)).unwrap();
    write_file(&args.out_dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_centralized(args: &ExperimentArgs) -> Result<(), CliError> {
    let p = prepare(args)?;
    let name = metric_name(p.cfg.fed.task);
    let mut summary = format!("run,seed,{name}\n");
    let mut metrics = Vec::new();
    for i in 0..p.cfg.repeats {
        let seed = p.cfg.fed.seed.wrapping_add(i as u64);
        let (train, test) = split_for(&p, seed)?;
        let (ensemble, metric) = run_centralized(&p.cfg.fed, &train, &test).map_err(other)?;
        let dir = args.out_dir.join(format!("run_{i}"));
        fs::create_dir_all(&dir).map_err(other)?;
        write_file(&dir.join("ensemble.json"), fedtree_core::gbdt::serialize_ensemble(&ensemble))?;
        writeln!(summary, "{i},{seed},{metric}").unwrap();
        info!("run {i}: {name} {metric:.6}");
        metrics.push(metric);
    }
    writeln!(summary, "mean,,{}", mean(&metrics)).unwrap();
    write_file(&args.out_dir.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_predict(model_dir: &Path, data: &Path, scale: bool) -> Result<(), CliError> {
    let read = |name: &str| {
        let path = model_dir.join(name);
        fs::read(&path).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
    };
    let aggregate = deserialize_aggregate(&read("aggregate.json")?).map_err(other)?;
    let cnn = deserialize_params(&read("cnn.bin")?).map_err(other)?;
    let task = aggregate.task();
    let ds = load_dataset(data, task, None)?;
    let input_scaling = if scale { InputScaling::ByEta } else { InputScaling::Raw };
    let model = GlobalModel { aggregate, cnn, input_scaling };
    let margins = predict_global(&model, &ds).map_err(other)?;
    let labels: Vec<f64> = ds.labels().collect();
    info!("{} {:.6} on {} examples", metric_name(task), metric_from_margins(task, &margins, &labels), ds.len());
    let mut out = String::with_capacity(margins.len() * 20);
    for m in margins {
        writeln!(out, "{m}").unwrap();
    }
    print!("{out}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Centralized(a) => cmd_centralized(&a),
        Command::ReportSizes { channels, total_trees, bytes_per_value } => {
            if channels == 0 || total_trees == 0 || total_trees % 10 != 0 {
                return Err(CliError::Config("total_trees must be a positive multiple of 10".into()));
            }
            print!("{}", size_table_csv(channels, total_trees, bytes_per_value));
            Ok(())
        }
        Command::ReportComm { num_clients, total_trees, rounds, tree_bytes, cnn_bytes } => {
            if num_clients == 0 || rounds == 0 || tree_bytes < 0.0 || cnn_bytes < 0.0 {
                return Err(CliError::Config("num_clients and rounds must be >= 1, sizes non-negative".into()));
            }
            let model = CommModel { num_clients, total_trees, rounds, tree_bytes, cnn_bytes };
            print!("{}", comm_table_csv(&model));
            Ok(())
        }
        Command::Predict { model_dir, data, scale_inputs_by_eta } => {
            cmd_predict(&model_dir, &data, scale_inputs_by_eta)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
