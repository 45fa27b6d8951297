use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tdf_bench::{perturb, report};
use tdf_core::diff::{compare, LoadedReport};

fn compare_reports(c: &mut Criterion) {
    let mut g = c.benchmark_group("compare");
    for rows in [10usize, 100, 400] {
        let base = report("tool-1.0", rows, 8, 42);
        let cand = LoadedReport::Present(perturb(&base, "tool-1.1"));
        g.bench_with_input(BenchmarkId::from_parameter(rows), &rows, |b, _| b.iter(|| compare(&base, &cand)));
    }
    g.finish();
}

criterion_group!(benches, compare_reports);
criterion_main!(benches);
