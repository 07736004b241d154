//! Standalone throughput measurements. Wall-clock numbers depend on the
//! machine; they are printed for information only.

use std::time::Instant;

use qkd_core::ec::reconcile::{EcConfig, Reconciler};
use qkd_core::pa::{toeplitz_ntt, ToeplitzSeed};
use qkd_core::photonic::{DetectorSim, PulseSource};
use qkd_core::sifting::sift;
use qkd_core::{BitVec, ChannelDetectorParams, ProtocolParams};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

pub struct BenchResult {
    pub label: &'static str,
    pub items: f64,
    pub unit: &'static str,
    pub seconds: f64,
    pub detail: String,
}

impl BenchResult {
    pub fn line(&self) -> String {
        let rate = if self.seconds > 0.0 {
            self.items / self.seconds
        } else {
            0.0
        };
        format!(
            "{:<5} {:>10.2} M{}/s  ({:.3e} {} in {:.3} s){}",
            self.label,
            rate / 1e6,
            self.unit,
            self.items,
            self.unit,
            self.seconds,
            self.detail
        )
    }
}

/// Sifting over pre-generated batches; counts detections per second.
pub fn sift_throughput(slots: usize, rounds: usize) -> BenchResult {
    let p = ProtocolParams::default();
    let mut c = ChannelDetectorParams::default();
    // Lossless channel so that each batch carries many detections.
    c.channel_loss_db = 0.0;
    c.receiver_loss_db = 0.0;
    c.detector_efficiency = 1.0;
    let batch = PulseSource::new(&p, 11).next_batch(slots);
    let mut events = Vec::new();
    DetectorSim::new(&p, &c, 12).detect_batch(&batch, &mut events);
    let start = Instant::now();
    let mut kept = 0usize;
    for _ in 0..rounds {
        kept += sift(&batch, &events).expect("aligned batch").block.len();
    }
    BenchResult {
        label: "sift",
        items: (events.len() * rounds) as f64,
        unit: "C",
        seconds: start.elapsed().as_secs_f64(),
        detail: format!(", {} sifted bits per round", kept / rounds.max(1)),
    }
}

/// Reconciliation of full blocks at the given QBER; counts payload bits.
pub fn ec_throughput(blocks: usize, qber: f64) -> BenchResult {
    let cfg = EcConfig::default();
    let rec = Reconciler::new(cfg.clone(), 21).expect("default family");
    let mut rng = Pcg64Mcg::seed_from_u64(22);
    let mut pool = rec.new_pool();
    let inputs: Vec<(BitVec, BitVec)> = (0..blocks)
        .map(|_| {
            let a: BitVec = (0..cfg.block_bits).map(|_| rng.random::<bool>()).collect();
            let b: BitVec = a.iter().map(|x| x ^ rng.random_bool(qber)).collect();
            (a, b)
        })
        .collect();
    // Build the codes outside the timed region.
    for rows in rec.family().min_rows()..=rec.family().max_rows() {
        rec.family().code(rows).expect("code in range");
    }
    let start = Instant::now();
    let mut failed = 0;
    let mut leak = 0u64;
    for (i, (a, b)) in inputs.iter().enumerate() {
        let (_, bob) = rec
            .reconcile_local(&mut pool, i as u64, a, b)
            .expect("protocol");
        failed += usize::from(!bob.is_corrected());
        leak += bob.leak_bits;
    }
    BenchResult {
        label: "ec",
        items: (blocks * cfg.payload_bits()) as f64,
        unit: "b",
        seconds: start.elapsed().as_secs_f64(),
        detail: format!(
            ", {failed}/{blocks} blocks failed, leak {:.4} bits per payload bit",
            leak as f64 / (blocks * cfg.payload_bits()) as f64
        ),
    }
}

/// One Toeplitz hash of `n` bits down to 0.29 n; counts input bits.
pub fn pa_throughput(n: usize) -> BenchResult {
    let m = (n as f64 * 0.29) as usize;
    let mut rng = Pcg64Mcg::seed_from_u64(31);
    let input: BitVec = (0..n).map(|_| rng.random::<bool>()).collect();
    let seed = ToeplitzSeed::expand(n, m, rng.random());
    let start = Instant::now();
    let out = toeplitz_ntt(&seed, &input).expect("sizes within limits");
    BenchResult {
        label: "pa",
        items: n as f64,
        unit: "b",
        seconds: start.elapsed().as_secs_f64(),
        detail: format!(", {} output bits", out.len()),
    }
}
