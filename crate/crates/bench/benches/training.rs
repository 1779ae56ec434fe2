use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fedtree_bench::{matrix_rows, regression_data};
use fedtree_core::aggregation::{aggregate_ensembles, prediction_matrix, ClientId, PredictionMatrix};
use fedtree_core::cnn::{client_update, init_params, loss_and_grad, AdamConfig, CnnConfig, HeadVariant, TrainConfig};
use fedtree_core::gbdt::{find_best_split, grad_hess, train_ensemble, FeatureMatrix, GbdtConfig};
use fedtree_core::TaskKind;

fn split_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("find_best_split");
    for rows in [1_000, 10_000] {
        let data = regression_data(rows, 8, 1);
        let matrix = FeatureMatrix::from_dataset(&data);
        let gh: Vec<_> = data.examples().iter().map(|x| grad_hess(TaskKind::Regression, x.label, 0.0)).collect();
        let all: Vec<usize> = (0..rows).collect();
        group.bench_with_input(BenchmarkId::from_parameter(rows), &rows, |b, _| {
            b.iter(|| find_best_split(black_box(&all), &gh, &matrix, 1.0, 0.0, 1.0))
        });
    }
    group.finish();
}

fn ensemble_training(c: &mut Criterion) {
    let data = regression_data(2_000, 8, 2);
    let cfg = GbdtConfig::for_task(TaskKind::Regression, 20);
    c.bench_function("train_ensemble/2000x8/20 trees depth 8", |b| {
        b.iter(|| train_ensemble(black_box(&data), &cfg).unwrap())
    });
}

fn head_gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad/batch 64");
    for variant in [HeadVariant::Interpretable, HeadVariant::ConvK3S1, HeadVariant::Fcnn2Layer] {
        let cfg = CnnConfig::new(64, 100, 5).with_variant(variant);
        let params = init_params(cfg, 3);
        let rows = matrix_rows(64, cfg.input_width(), 4);
        let batch: Vec<(&[f64], f64)> = rows.iter().map(|(r, y)| (r.as_slice(), *y)).collect();
        group.bench_function(variant.as_str(), |b| {
            b.iter(|| loss_and_grad(black_box(&params), &batch, TaskKind::Regression).unwrap())
        });
    }
    group.finish();
}

fn matrix_and_local_epoch(c: &mut Criterion) {
    let cfg = GbdtConfig { max_depth: 6, ..GbdtConfig::for_task(TaskKind::Regression, 50) };
    let shards: Vec<_> = (0..2).map(|k| regression_data(1_000, 8, 10 + k)).collect();
    let ensembles = shards
        .iter()
        .enumerate()
        .map(|(k, d)| (ClientId(k as u32 + 1), train_ensemble(d, &cfg).unwrap()))
        .collect();
    let agg = aggregate_ensembles(ensembles).unwrap();
    c.bench_function("prediction_matrix/1000 rows x 100 trees", |b| {
        b.iter(|| prediction_matrix(black_box(&agg), &shards[0]).unwrap())
    });

    let matrix: PredictionMatrix = prediction_matrix(&agg, &shards[0]).unwrap();
    let params = init_params(CnnConfig::new(64, 50, 2), 5);
    let train = TrainConfig { local_epochs: 1, ..TrainConfig::new(TaskKind::Regression) };
    c.bench_function("client_update/one epoch, 1000 rows", |b| {
        b.iter(|| client_update(black_box(&params), &matrix, &train, &AdamConfig::default(), 7).unwrap())
    });
}

criterion_group!(benches, split_search, ensemble_training, head_gradients, matrix_and_local_epoch);
criterion_main!(benches);
