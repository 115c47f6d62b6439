use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use faro_core::media::{open_source, SourceConfig};
use faro_core::message::{deserialize_record, serialize_record};
use faro_core::pipeline::{instantiate, NodeSpec, PipelineSpec};
use faro_core::{FaroRecord, WorkerRegistry};

fn frames(count: u64) -> Vec<FaroRecord> {
    open_source(&SourceConfig::synthetic(1, Some(count))).unwrap().collect()
}

fn detect_extract(c: &mut Criterion) {
    let reg = WorkerRegistry::with_demo_workers();
    let spec = PipelineSpec::chain("faces", vec![NodeSpec::local("d", "demo-detect"), NodeSpec::local("e", "demo-extract")]);
    let p = instantiate(&spec, &reg, None).unwrap();
    let records = frames(32);
    let mut group = c.benchmark_group("pipeline");
    group.throughput(Throughput::Elements(records.len() as u64));
    group.bench_function("detect_extract_run", |b| {
        b.iter(|| records.iter().map(|r| p.run(r)).filter(|r| r.is_ok()).count())
    });
    group.bench_function("detect_extract_stream", |b| {
        b.iter(|| {
            let mut ok = 0;
            p.run_stream(records.clone(), |r| ok += usize::from(r.is_ok()));
            ok
        })
    });
    group.finish();
}

fn wire(c: &mut Criterion) {
    let record = frames(1).remove(0);
    let bytes = serialize_record(&record).unwrap();
    let mut group = c.benchmark_group("wire_frame_160x120");
    group.throughput(Throughput::Bytes(bytes.len() as u64));
    group.bench_function("serialize", |b| b.iter(|| serialize_record(&record).unwrap()));
    group.bench_function("deserialize", |b| b.iter(|| deserialize_record(&bytes).unwrap()));
    group.finish();
}

criterion_group!(benches, detect_extract, wire);
criterion_main!(benches);
