use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use faro_bench::{keypair, rng, template};
use faro_core::gallery::{finish_search, Probe};
use faro_core::phe::{encrypt_template, DEFAULT_SCALE};
use faro_core::{Backend, Gallery, StoredTemplate};

fn encryption(c: &mut Criterion) {
    let kp = keypair(1024, 1);
    let mut group = c.benchmark_group("encrypt_template_1024");
    group.sample_size(10);
    for dims in [16usize, 64, 256] {
        let t = template(dims, dims as u64);
        group.throughput(Throughput::Elements(dims as u64));
        group.bench_with_input(BenchmarkId::from_parameter(dims), &t, |b, t| {
            let mut r = rng(7);
            b.iter(|| encrypt_template(&kp.public, t, DEFAULT_SCALE, &mut r).unwrap())
        });
    }
    group.finish();
}

fn encrypted_search(c: &mut Criterion) {
    let kp = keypair(512, 2);
    let gallery = Gallery::new("bench", Backend::phe(kp.public.clone()));
    for i in 0..32 {
        gallery.enroll(&format!("s{i}"), StoredTemplate::Plain(template(64, i)), Default::default()).unwrap();
    }
    let probe = template(64, 1000);
    let mut group = c.benchmark_group("encrypted_search_512_32x64");
    group.sample_size(10);
    group.bench_function("matcher", |b| b.iter(|| gallery.encrypted_candidates(Probe::Plain(&probe)).unwrap()));
    group.bench_function("key_holder", |b| {
        b.iter_batched(
            || gallery.encrypted_candidates(Probe::Plain(&probe)).unwrap(),
            |cands| finish_search(&kp, &cands, 5).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, encryption, encrypted_search);
criterion_main!(benches);
