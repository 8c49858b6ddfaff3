use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use streamexec_bench::model_params;
use streamexec_core::model::{parallel_closed_form, parallel_schedule, summarize};

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    for n in [4, 64, 1024] {
        let p = model_params(n);
        group.bench_with_input(BenchmarkId::new("closed_form", n), &p, |b, p| {
            b.iter(|| parallel_closed_form(black_box(p)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("recurrence", n), &p, |b, p| {
            b.iter(|| parallel_schedule(black_box(p)).unwrap().parallel)
        });
        group.bench_with_input(BenchmarkId::new("summarize", n), &p, |b, p| {
            b.iter(|| summarize(black_box(p)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
