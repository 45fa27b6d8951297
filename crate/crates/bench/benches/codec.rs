use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use serde_json::json;
use tdf_core::protocol::{decode, encode, Kind, Message, Request};

fn codec(c: &mut Criterion) {
    let mut g = c.benchmark_group("codec");
    for size in [64usize, 4096, 256 * 1024] {
        let msg = Message::Request(Request {
            id: 7,
            kind: Kind::PushFile,
            payload: json!({"path": "/home/user/Documents/secret.txt", "data": "A".repeat(size)}),
            deadline_ms: Some(30_000),
        });
        let frame = encode(&msg);
        g.throughput(Throughput::Bytes(frame.len() as u64));
        g.bench_with_input(BenchmarkId::new("encode", size), &msg, |b, m| b.iter(|| encode(m)));
        g.bench_with_input(BenchmarkId::new("decode", size), &frame, |b, f| b.iter(|| decode(f).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
