use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use qkd_bench::{detections, noisy_copy, random_bits};
use qkd_core::ec::reconcile::{EcConfig, Reconciler};
use qkd_core::pa::{toeplitz_ntt, ToeplitzSeed};
use qkd_core::sifting::sift;

fn bench_sift(c: &mut Criterion) {
    let (batch, events) = detections(1 << 20, 1);
    let mut g = c.benchmark_group("sift");
    g.throughput(Throughput::Elements(events.len() as u64));
    g.bench_function("batch_2^20_slots", |b| {
        b.iter(|| sift(&batch, &events).unwrap())
    });
    g.finish();
}

fn bench_ec(c: &mut Criterion) {
    let cfg = EcConfig::default();
    let rec = Reconciler::new(cfg.clone(), 7).unwrap();
    let alice = random_bits(cfg.block_bits, 2);
    let bob = noisy_copy(&alice, 0.03, 3);
    let mut pool = rec.new_pool();
    rec.reconcile_local(&mut pool, 0, &alice, &bob).unwrap();
    let mut g = c.benchmark_group("ec");
    g.sample_size(10);
    g.throughput(Throughput::Elements(cfg.payload_bits() as u64));
    g.bench_function("block_2^20_qber_3pct", |b| {
        b.iter_batched(
            || rec.new_pool(),
            |mut pool| rec.reconcile_local(&mut pool, 0, &alice, &bob).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

fn bench_pa(c: &mut Criterion) {
    let mut g = c.benchmark_group("pa");
    g.sample_size(10);
    for log_n in [16u32, 20, 22] {
        let n = 1usize << log_n;
        let m = n * 29 / 100;
        let input = random_bits(n, 4);
        let seed = ToeplitzSeed::expand(n, m, 5);
        g.throughput(Throughput::Elements(n as u64));
        g.bench_function(format!("toeplitz_ntt_2^{log_n}"), |b| {
            b.iter(|| toeplitz_ntt(&seed, &input).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_sift, bench_ec, bench_pa);
criterion_main!(benches);
