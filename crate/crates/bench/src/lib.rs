//! Input generators shared by the stage benchmarks.

use qkd_core::photonic::{DetectionEvent, DetectorSim, PulseBatch, PulseSource};
use qkd_core::{BitVec, ChannelDetectorParams, ProtocolParams};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

/// A pulse batch and Bob's detections over a lossless channel.
pub fn detections(slots: usize, seed: u64) -> (PulseBatch, Vec<DetectionEvent>) {
    let p = ProtocolParams::default();
    let c = ChannelDetectorParams {
        channel_loss_db: 0.0,
        receiver_loss_db: 0.0,
        detector_efficiency: 1.0,
        ..ChannelDetectorParams::default()
    };
    let batch = PulseSource::new(&p, seed).next_batch(slots);
    let mut events = Vec::new();
    DetectorSim::new(&p, &c, seed + 1).detect_batch(&batch, &mut events);
    (batch, events)
}

pub fn random_bits(len: usize, seed: u64) -> BitVec {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<bool>()).collect()
}

/// `key` with each bit flipped independently with probability `qber`.
pub fn noisy_copy(key: &BitVec, qber: f64, seed: u64) -> BitVec {
    let mut rng = Pcg64Mcg::seed_from_u64(seed);
    key.iter().map(|b| b ^ rng.random_bool(qber)).collect()
}
