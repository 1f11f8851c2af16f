//! Sequential versus data-parallel batch evaluation of the desk-scale
//! encoder. Both modes return bit-identical predictions; this measures the
//! wall-clock difference on the available cores.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use ftune::encoder::{init_model, HeadKind, InitScheme, ModelConfig, TaskHead};
use ftune::numerics::RngStream;
use ftune::par::ExecMode;
use ftune::taskgen::{gen_task, CorpusSpec, Difficulty, TaskFamily, TaskSizes};
use ftune::trainers::predict_all;

fn batch_inference(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = init_model(&cfg, InitScheme::Uniform, &RngStream::named(0, "init")).expect("init");
    let head = TaskHead::init(HeadKind::Classification(2), cfg.hidden_size, &mut RngStream::named(0, "head"));
    let sizes = TaskSizes { train: 64, eval: 256 };
    let task = gen_task(&CorpusSpec::default(), TaskFamily::Pattern, Difficulty::Easy, sizes, &RngStream::named(0, "task"))
        .expect("task");

    let mut group = c.benchmark_group("predict_all");
    group.sample_size(20);
    group.throughput(Throughput::Elements(task.eval.len() as u64));
    for mode in [ExecMode::Sequential, ExecMode::Parallel] {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{mode:?}")), &mode, |b, &mode| {
            b.iter(|| predict_all(&cfg, &params, None, &head, black_box(&task.eval), mode).expect("predict"))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_inference);
criterion_main!(benches);
