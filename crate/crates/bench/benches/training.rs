use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use implicit_sent::training::{predict_all, TrainConfig, Trainer};
use implicit_sent::{build_model, ModelKind, ModelSpec};
use implicit_sent_bench::order_fixture;

fn train_step(c: &mut Criterion) {
    let (table, data) = order_fixture(256, 300, 7);
    let config = TrainConfig::default();
    let rows: Vec<usize> = (0..32).collect();
    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(20);
    for kind in ModelKind::ALL {
        let model = build_model(&ModelSpec::new(kind), table.clone(), 1).unwrap();
        let mut trainer = Trainer::new(model, &config, &data, &data).unwrap();
        group.bench_function(BenchmarkId::from_parameter(kind), |b| {
            b.iter(|| black_box(trainer.train_step(&rows).unwrap()))
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let (table, data) = order_fixture(512, 300, 8);
    let mut group = c.benchmark_group("predict_512");
    group.sample_size(10);
    for kind in [ModelKind::Dnn, ModelKind::Bilstm] {
        let model = build_model(&ModelSpec::new(kind), table.clone(), 1).unwrap();
        group.bench_function(BenchmarkId::from_parameter(kind), |b| {
            b.iter(|| black_box(predict_all(&model, &data).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, inference);
criterion_main!(benches);
