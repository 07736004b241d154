//! Statistical model of the optical layer.
//!
//! [`PulseSource`] draws Alice's per-slot choices; [`DetectorSim`] turns them
//! into Bob's clicks: Poissonian photon numbers, per-photon survival and
//! routing, dark counts, afterpulsing with a delayed random detector, and
//! gating so that each detector contributes at most one click per slot.
//! Ground-truth annotations on each event (emitted photon number, click cause)
//! exist for oracle tests and never leave the node.

use std::io::{self, Read, Write};

use rand::{Rng, RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;
use thiserror::Error;

use crate::params::{Basis, ChannelDetectorParams, Intensity, ProtocolParams};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("event for slot {0} has no matching pulse")]
    Misaligned(u64),
    #[error("event dump: {0}")]
    Io(#[from] io::Error),
}

/// Alice's secret choices for one time slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PulseRecord {
    pub slot_index: u64,
    pub intensity: Intensity,
    pub basis: Basis,
    pub bit: bool,
    /// Stabilization slots are emitted at the signal flux and carry no key or
    /// basis semantics downstream; their intensity label is ignored.
    pub is_stabilization: bool,
}

// One byte per slot: bit0 value, bit1 basis (1 = X), bits 2-3 intensity, bit4 stabilization.
const CODE_BIT: u8 = 1;
const CODE_X: u8 = 2;
const CODE_STAB: u8 = 16;

#[inline]
fn encode_pulse(intensity: Intensity, basis: Basis, bit: bool, stab: bool) -> u8 {
    (bit as u8)
        | ((basis == Basis::X) as u8) << 1
        | (intensity.index() as u8) << 2
        | (stab as u8) << 4
}

#[inline]
fn decode_intensity(code: u8) -> Intensity {
    match (code >> 2) & 3 {
        0 => Intensity::Signal,
        1 => Intensity::Decoy,
        _ => Intensity::Vacuum,
    }
}

/// A contiguous run of slots, stored one byte per slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PulseBatch {
    pub start_slot: u64,
    codes: Vec<u8>,
}

impl PulseBatch {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn end_slot(&self) -> u64 {
        self.start_slot + self.codes.len() as u64
    }

    pub fn contains(&self, slot: u64) -> bool {
        slot >= self.start_slot && slot < self.end_slot()
    }

    #[inline]
    pub fn get(&self, offset: usize) -> PulseRecord {
        let c = self.codes[offset];
        PulseRecord {
            slot_index: self.start_slot + offset as u64,
            intensity: decode_intensity(c),
            basis: if c & CODE_X != 0 { Basis::X } else { Basis::Z },
            bit: c & CODE_BIT != 0,
            is_stabilization: c & CODE_STAB != 0,
        }
    }

    /// Record for an absolute slot index, if it lies in this batch.
    pub fn at_slot(&self, slot: u64) -> Option<PulseRecord> {
        self.contains(slot)
            .then(|| self.get((slot - self.start_slot) as usize))
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = PulseRecord> + '_ {
        (0..self.codes.len()).map(move |i| self.get(i))
    }

    pub fn from_records(records: &[PulseRecord]) -> Self {
        let start = records.first().map_or(0, |r| r.slot_index);
        let codes = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                assert_eq!(
                    r.slot_index,
                    start + i as u64,
                    "records must be consecutive"
                );
                encode_pulse(r.intensity, r.basis, r.bit, r.is_stabilization)
            })
            .collect();
        PulseBatch {
            start_slot: start,
            codes,
        }
    }
}

#[inline]
fn threshold(p: f64) -> u64 {
    // Compared against a 32-bit uniform: u < threshold  <=>  event.
    (p.clamp(0.0, 1.0) * 4294967296.0).round() as u64
}

/// Deterministic generator of Alice's slot choices.
#[derive(Debug, Clone)]
pub struct PulseSource {
    rng: Pcg64Mcg,
    next_slot: u64,
    stab: u64,
    signal: u64,
    signal_or_decoy: u64,
    z: u64,
}

impl PulseSource {
    pub fn new(params: &ProtocolParams, seed: u64) -> Self {
        PulseSource {
            rng: Pcg64Mcg::seed_from_u64(seed),
            next_slot: 0,
            stab: threshold(params.prob_stabilization),
            signal: threshold(params.prob_signal),
            signal_or_decoy: threshold(params.prob_signal + params.prob_decoy),
            z: threshold(params.prob_z),
        }
    }

    pub fn next_slot(&self) -> u64 {
        self.next_slot
    }

    #[inline]
    fn draw(&mut self) -> u8 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let ui = a & 0xffff_ffff;
        let intensity = if ui < self.signal {
            Intensity::Signal
        } else if ui < self.signal_or_decoy {
            Intensity::Decoy
        } else {
            Intensity::Vacuum
        };
        let basis = if (a >> 32) < self.z {
            Basis::Z
        } else {
            Basis::X
        };
        let stab = (b & 0xffff_ffff) < self.stab;
        let bit = (b >> 32) & 1 == 1;
        encode_pulse(intensity, basis, bit, stab)
    }

    pub fn next_batch(&mut self, count: usize) -> PulseBatch {
        let start = self.next_slot;
        let codes = (0..count).map(|_| self.draw()).collect();
        self.next_slot += count as u64;
        PulseBatch {
            start_slot: start,
            codes,
        }
    }
}

/// Stream of `count` pulses; identical for identical `(params, seed)`.
pub fn generate_pulses(
    params: &ProtocolParams,
    count: u64,
    rng_seed: u64,
) -> impl Iterator<Item = PulseRecord> {
    let mut src = PulseSource::new(params, rng_seed);
    (0..count).map(move |_| {
        let slot = src.next_slot;
        let code = src.draw();
        src.next_slot += 1;
        PulseBatch {
            start_slot: slot,
            codes: vec![code],
        }
        .get(0)
    })
}

/// Why the detector that determined Bob's outcome fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClickCause {
    Photon,
    Afterpulse,
    Dark,
}

/// Simulator-side annotations on a detection. Never serialized onto the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventTruth {
    /// Photons Alice emitted in this slot (saturating at 255).
    pub photons: u8,
    pub cause: ClickCause,
    pub double_click: bool,
}

impl EventTruth {
    pub fn is_afterpulse(&self) -> bool {
        self.cause == ClickCause::Afterpulse
    }

    pub fn is_dark(&self) -> bool {
        self.cause == ClickCause::Dark
    }
}

/// Bob's measurement result for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DetectionEvent {
    pub slot_index: u64,
    /// Bob's measurement basis.
    pub basis: Basis,
    /// Detector whose click determined the outcome bit (0 or 1).
    pub detector: u8,
    pub truth: EventTruth,
}

impl DetectionEvent {
    pub fn bit(&self) -> bool {
        self.detector == 1
    }
}

/// Afterpulse delay is uniform in `1..=AFTERPULSE_WINDOW` slots.
pub const AFTERPULSE_WINDOW: u64 = 100;
const RING: usize = 128;

/// Poisson inverse-CDF table for one flux, in 32-bit fixed point.
#[derive(Debug, Clone)]
struct PoissonTable {
    cdf: Vec<u64>,
}

impl PoissonTable {
    fn new(mu: f64) -> Self {
        let mut cdf = Vec::new();
        let mut p = (-mu).exp();
        let mut acc = 0.0;
        for k in 0..64 {
            acc += p;
            cdf.push(threshold(acc));
            if acc >= 1.0 - 1e-12 {
                break;
            }
            p *= mu / (k + 1) as f64;
        }
        PoissonTable { cdf }
    }

    #[inline]
    fn sample(&self, u: u64) -> u32 {
        let mut k = 0;
        while k < self.cdf.len() && u >= self.cdf[k] {
            k += 1;
        }
        k as u32
    }
}

/// Bob's receiver: channel transmission, detectors, gating and afterpulsing.
#[derive(Debug, Clone)]
pub struct DetectorSim {
    rng: Pcg64Mcg,
    tables: [PoissonTable; 3],
    bob_z: u64,
    dark: u64,
    afterpulse: u64,
    /// Photon reaches the bit-correct detector.
    to_correct: u64,
    /// Photon reaches either detector.
    detected: u64,
    pending: [u8; RING],
    next_slot: u64,
}

impl DetectorSim {
    pub fn new(params: &ProtocolParams, channel: &ChannelDetectorParams, seed: u64) -> Self {
        let t = channel.transmittance();
        DetectorSim {
            rng: Pcg64Mcg::seed_from_u64(seed),
            tables: [
                PoissonTable::new(params.flux_signal),
                PoissonTable::new(params.flux_decoy),
                PoissonTable::new(params.flux_vacuum),
            ],
            bob_z: threshold(params.prob_z),
            dark: threshold(channel.dark_count_prob),
            afterpulse: threshold(channel.afterpulse_prob),
            to_correct: threshold(t * (1.0 - channel.misalignment_error)),
            detected: threshold(t),
            pending: [0; RING],
            next_slot: 0,
        }
    }

    #[inline]
    fn u32(&mut self) -> u64 {
        self.rng.next_u32() as u64
    }

    /// Processes one slot. Slots must be presented in increasing order;
    /// skipped slots are treated as empty.
    #[inline]
    pub fn observe(&mut self, pulse: &PulseRecord) -> Option<DetectionEvent> {
        let slot = pulse.slot_index;
        assert!(slot >= self.next_slot, "slots must be increasing");
        while self.next_slot < slot {
            // Afterpulses due in skipped slots still fire, but nobody records them.
            self.pending[(self.next_slot as usize) % RING] = 0;
            self.next_slot += 1;
        }
        self.next_slot = slot + 1;
        let ring_idx = (slot as usize) % RING;
        let ap_mask = std::mem::take(&mut self.pending[ring_idx]);

        let r = self.rng.next_u64();
        // Stabilization slots are sent at the signal flux whatever their label.
        let table = if pulse.is_stabilization {
            0
        } else {
            pulse.intensity.index()
        };
        let photons = self.tables[table].sample(r & 0xffff_ffff);
        let bob_basis = if (r >> 32) < self.bob_z {
            Basis::Z
        } else {
            Basis::X
        };

        // Photon clicks per detector.
        let mut photon_mask = 0u8;
        if photons > 0 {
            let matched = !pulse.is_stabilization && bob_basis == pulse.basis;
            let correct = pulse.bit as u8;
            for _ in 0..photons {
                let u = self.u32();
                if u >= self.detected {
                    continue;
                }
                let det = if matched {
                    if u < self.to_correct {
                        correct
                    } else {
                        correct ^ 1
                    }
                } else {
                    (self.u32() & 1) as u8
                };
                photon_mask |= 1 << det;
            }
        }

        let d = self.rng.next_u64();
        let mut dark_mask = 0u8;
        if (d & 0xffff_ffff) < self.dark {
            dark_mask |= 1;
        }
        if (d >> 32) < self.dark {
            dark_mask |= 2;
        }

        let clicks = photon_mask | dark_mask | ap_mask;
        if clicks == 0 {
            return None;
        }

        // Each retained click may spawn one delayed afterpulse.
        for det in 0..2u8 {
            if clicks & (1 << det) != 0 && self.u32() < self.afterpulse {
                let v = self.rng.next_u64();
                let delay = 1 + (v & 0xffff_ffff) % AFTERPULSE_WINDOW;
                let target = ((v >> 32) & 1) as u8;
                self.pending[((slot + delay) as usize) % RING] |= 1 << target;
            }
        }

        let double_click = clicks == 3;
        let detector = if double_click {
            (self.u32() & 1) as u8
        } else {
            (clicks >> 1) & 1
        };
        let m = 1 << detector;
        let cause = if photon_mask & m != 0 {
            ClickCause::Photon
        } else if ap_mask & m != 0 {
            ClickCause::Afterpulse
        } else {
            ClickCause::Dark
        };
        Some(DetectionEvent {
            slot_index: slot,
            basis: bob_basis,
            detector,
            truth: EventTruth {
                photons: photons.min(255) as u8,
                cause,
                double_click,
            },
        })
    }

    /// Appends the detections for a whole batch to `out`.
    pub fn detect_batch(&mut self, batch: &PulseBatch, out: &mut Vec<DetectionEvent>) {
        for i in 0..batch.len() {
            if let Some(ev) = self.observe(&batch.get(i)) {
                out.push(ev);
            }
        }
    }
}

/// Detections for a pulse stream; identical for identical inputs and seed.
pub fn detect<I>(
    pulses: I,
    params: &ProtocolParams,
    channel: &ChannelDetectorParams,
    rng_seed: u64,
) -> impl Iterator<Item = DetectionEvent>
where
    I: IntoIterator<Item = PulseRecord>,
{
    let mut sim = DetectorSim::new(params, channel, rng_seed);
    pulses.into_iter().filter_map(move |p| sim.observe(&p))
}

/// Photon-number class of an emission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotonClass {
    Vacuum,
    Single,
    Multi,
}

impl PhotonClass {
    pub fn of(photons: u8) -> Self {
        match photons {
            0 => PhotonClass::Vacuum,
            1 => PhotonClass::Single,
            _ => PhotonClass::Multi,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Exact counts, known only to the simulator, of basis-matched detections by
/// (intensity, basis, photon class), plus error attribution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TruthTally {
    /// `[intensity][basis][class]`
    pub detections: [[[u64; 3]; 2]; 3],
    /// Bit errors among the matched detections, same indexing.
    pub errors: [[[u64; 3]; 2]; 3],
    /// Errors in sifted-key positions (Z basis, signal) by the cause of the
    /// deciding click: `[photon, afterpulse, dark]`.
    pub key_errors_by_cause: [u64; 3],
    /// Every detection, matched or not, including stabilization slots.
    pub total_detections: u64,
}

impl TruthTally {
    pub fn count(&self, i: Intensity, b: Basis, c: PhotonClass) -> u64 {
        self.detections[i.index()][b.index()][c.index()]
    }

    pub fn errors(&self, i: Intensity, b: Basis, c: PhotonClass) -> u64 {
        self.errors[i.index()][b.index()][c.index()]
    }

    /// Matched detections in one (intensity, basis) cell, all photon classes.
    pub fn matched(&self, i: Intensity, b: Basis) -> u64 {
        self.detections[i.index()][b.index()].iter().sum()
    }

    pub fn matched_errors(&self, i: Intensity, b: Basis) -> u64 {
        self.errors[i.index()][b.index()].iter().sum()
    }

    /// Adds the events of one batch. Events must be sorted and lie inside the batch.
    pub fn accumulate(
        &mut self,
        batch: &PulseBatch,
        events: &[DetectionEvent],
    ) -> Result<(), SimError> {
        for ev in events {
            let pulse = batch
                .at_slot(ev.slot_index)
                .ok_or(SimError::Misaligned(ev.slot_index))?;
            self.total_detections += 1;
            if pulse.is_stabilization || pulse.basis != ev.basis {
                continue;
            }
            let class = PhotonClass::of(ev.truth.photons).index();
            let (i, b) = (pulse.intensity.index(), pulse.basis.index());
            self.detections[i][b][class] += 1;
            if ev.bit() != pulse.bit {
                self.errors[i][b][class] += 1;
                if pulse.intensity == Intensity::Signal && pulse.basis == Basis::Z {
                    let cause = match ev.truth.cause {
                        ClickCause::Photon => 0,
                        ClickCause::Afterpulse => 1,
                        ClickCause::Dark => 2,
                    };
                    self.key_errors_by_cause[cause] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TruthTally) {
        for i in 0..3 {
            for b in 0..2 {
                for c in 0..3 {
                    self.detections[i][b][c] += other.detections[i][b][c];
                    self.errors[i][b][c] += other.errors[i][b][c];
                }
            }
        }
        for k in 0..3 {
            self.key_errors_by_cause[k] += other.key_errors_by_cause[k];
        }
        self.total_detections += other.total_detections;
    }
}

/// Exact ground-truth tally of aligned pulse and event streams.
pub fn ground_truth_tally(
    pulses: &[PulseRecord],
    events: &[DetectionEvent],
) -> Result<TruthTally, SimError> {
    let mut tally = TruthTally::default();
    if pulses.is_empty() {
        return match events.first() {
            Some(ev) => Err(SimError::Misaligned(ev.slot_index)),
            None => Ok(tally),
        };
    }
    tally.accumulate(&PulseBatch::from_records(pulses), events)?;
    Ok(tally)
}

/// Raw event dump: fixed 9-byte records, slot index as big-endian u64 then
/// the detector byte. Ground-truth annotations are not written.
pub fn write_event_dump<W: Write>(mut out: W, events: &[DetectionEvent]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(events.len() * 9);
    for ev in events {
        buf.extend_from_slice(&ev.slot_index.to_be_bytes());
        buf.push(ev.detector);
    }
    out.write_all(&buf)
}

/// Reads records written by [`write_event_dump`] as `(slot_index, detector)`.
pub fn read_event_dump<R: Read>(mut input: R) -> Result<Vec<(u64, u8)>, SimError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() % 9 != 0 {
        return Err(SimError::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "truncated event record",
        )));
    }
    Ok(bytes
        .chunks_exact(9)
        .map(|c| (u64::from_be_bytes(c[..8].try_into().unwrap()), c[8]))
        .collect())
}

/// Fresh 64-bit seed derived from a parent seed and a stream label.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    let mut rng = Pcg64Mcg::seed_from_u64(parent ^ label.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.random()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::DetectionModel;

    fn binomial_ok(count: u64, n: u64, p: f64) -> bool {
        let mean = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - mean).abs() <= 3.0 * sd
    }

    #[test]
    fn signal_fraction_matches_table1() {
        let p = ProtocolParams::default();
        let n = 1_000_000;
        let signal = generate_pulses(&p, n, 42)
            .filter(|r| r.intensity == Intensity::Signal)
            .count() as u64;
        assert!(binomial_ok(signal, n, 0.96973), "{signal}");
    }

    #[test]
    fn basis_and_stabilization_frequencies() {
        let p = ProtocolParams::default();
        let n = 1_000_000;
        let batch = PulseSource::new(&p, 9).next_batch(n as usize);
        let z = batch.iter().filter(|r| r.basis == Basis::Z).count() as u64;
        let st = batch.iter().filter(|r| r.is_stabilization).count() as u64;
        let ones = batch.iter().filter(|r| r.bit).count() as u64;
        assert!(binomial_ok(z, n, p.prob_z));
        assert!(binomial_ok(st, n, p.prob_stabilization));
        assert!(binomial_ok(ones, n, 0.5));
    }

    #[test]
    fn all_stabilization_when_p_st_is_one() {
        let p = ProtocolParams {
            prob_stabilization: 1.0,
            ..Default::default()
        };
        assert!(generate_pulses(&p, 10_000, 1).all(|r| r.is_stabilization));
    }

    #[test]
    fn same_seed_same_stream() {
        let p = ProtocolParams::default();
        let a: Vec<_> = generate_pulses(&p, 5000, 77).collect();
        let b: Vec<_> = generate_pulses(&p, 5000, 77).collect();
        assert_eq!(a, b);
        let c = ChannelDetectorParams::default();
        let ea: Vec<_> = detect(a.clone(), &p, &c, 3).collect();
        let eb: Vec<_> = detect(b, &p, &c, 3).collect();
        assert_eq!(ea, eb);
        let batch = PulseSource::new(&p, 77).next_batch(5000);
        assert_eq!(batch.iter().collect::<Vec<_>>(), a);
    }

    #[test]
    fn lossless_bright_pulses_always_hit_correct_detector() {
        let p = ProtocolParams {
            flux_signal: 60.0,
            flux_decoy: 40.0,
            flux_vacuum: 30.0,
            ..Default::default()
        };
        let c = ChannelDetectorParams {
            channel_loss_db: 0.0,
            receiver_loss_db: 0.0,
            detector_efficiency: 1.0,
            dark_count_prob: 0.0,
            afterpulse_prob: 0.0,
            misalignment_error: 0.0,
        };
        let pulses: Vec<_> = generate_pulses(&p, 20_000, 5).collect();
        let events: Vec<_> = detect(pulses.clone(), &p, &c, 6).collect();
        assert_eq!(events.len(), pulses.len());
        for (pulse, ev) in pulses.iter().zip(&events) {
            if !pulse.is_stabilization && pulse.basis == ev.basis {
                assert_eq!(ev.bit(), pulse.bit);
                assert!(!ev.truth.double_click);
            }
        }
    }

    #[test]
    fn dark_free_vacuum_never_clicks() {
        let p = ProtocolParams {
            flux_signal: 0.0002,
            flux_decoy: 0.0001,
            flux_vacuum: 0.0,
            prob_signal: 0.0,
            prob_decoy: 0.0,
            prob_vacuum: 1.0,
            prob_stabilization: 0.0,
            ..Default::default()
        };
        let c = ChannelDetectorParams {
            dark_count_prob: 0.0,
            ..Default::default()
        };
        assert_eq!(
            detect(generate_pulses(&p, 200_000, 1), &p, &c, 2).count(),
            0
        );
    }

    #[test]
    fn signal_detection_probability_matches_closed_form() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let model = DetectionModel::new(&p, &c);
        let mut src = PulseSource::new(&p, 100);
        let mut sim = DetectorSim::new(&p, &c, 200);
        let (mut n, mut k) = (0u64, 0u64);
        for _ in 0..4 {
            let batch = src.next_batch(1 << 20);
            for r in batch.iter() {
                let hit = sim.observe(&r).is_some();
                if r.intensity == Intensity::Signal && !r.is_stabilization {
                    n += 1;
                    k += hit as u64;
                }
            }
        }
        let expect = model.detection_probability(p.flux_signal);
        assert!(
            binomial_ok(k, n, expect),
            "{} vs {expect}",
            k as f64 / n as f64
        );
    }

    #[test]
    fn darks_only_attributed_to_vacuum_class() {
        let p = ProtocolParams {
            flux_signal: 0.0,
            flux_decoy: 0.0,
            flux_vacuum: 0.0,
            ..Default::default()
        };
        // Fluxes of zero violate u > v > w, but the simulator only needs the values.
        let c = ChannelDetectorParams {
            dark_count_prob: 0.01,
            ..Default::default()
        };
        let pulses: Vec<_> = generate_pulses(&p, 100_000, 3).collect();
        let events: Vec<_> = detect(pulses.clone(), &p, &c, 4).collect();
        assert!(!events.is_empty());
        let t = ground_truth_tally(&pulses, &events).unwrap();
        for i in 0..3 {
            for b in 0..2 {
                assert_eq!(t.detections[i][b][1], 0);
                assert_eq!(t.detections[i][b][2], 0);
            }
        }
    }

    #[test]
    fn multi_photon_fraction_follows_poisson_tail() {
        // Lossless, noiseless, flux 1e-3: every emitted photon is detected, so the
        // multi-photon share of detections is P(n >= 2) / P(n >= 1).
        let mu = 1e-3;
        let p = ProtocolParams {
            flux_signal: mu,
            flux_decoy: mu / 2.0,
            flux_vacuum: 0.0,
            prob_signal: 1.0,
            prob_decoy: 0.0,
            prob_vacuum: 0.0,
            prob_stabilization: 0.0,
            ..Default::default()
        };
        let c = ChannelDetectorParams {
            channel_loss_db: 0.0,
            receiver_loss_db: 0.0,
            detector_efficiency: 1.0,
            dark_count_prob: 0.0,
            afterpulse_prob: 0.0,
            misalignment_error: 0.0,
        };
        let mut src = PulseSource::new(&p, 8);
        let mut sim = DetectorSim::new(&p, &c, 9);
        let mut tally = TruthTally::default();
        let mut events = Vec::new();
        for _ in 0..16 {
            let batch = src.next_batch(1 << 20);
            events.clear();
            sim.detect_batch(&batch, &mut events);
            tally.accumulate(&batch, &events).unwrap();
        }
        let total = tally.total_detections;
        let multi: u64 = (0..2).map(|b| tally.detections[0][b][2]).sum();
        let p1 = mu * (-mu).exp();
        let p_multi = 1.0 - (-mu).exp() - p1;
        let frac = p_multi / (1.0 - (-mu).exp());
        assert!(binomial_ok(multi, total, frac), "{multi}/{total} vs {frac}");
    }

    #[test]
    fn empty_streams_give_zero_tally() {
        assert_eq!(ground_truth_tally(&[], &[]).unwrap(), TruthTally::default());
    }

    #[test]
    fn misaligned_streams_rejected() {
        let p = ProtocolParams::default();
        let pulses: Vec<_> = generate_pulses(&p, 10, 1).collect();
        let ev = DetectionEvent {
            slot_index: 99,
            basis: Basis::Z,
            detector: 0,
            truth: EventTruth {
                photons: 0,
                cause: ClickCause::Dark,
                double_click: false,
            },
        };
        assert!(matches!(
            ground_truth_tally(&pulses, &[ev]),
            Err(SimError::Misaligned(99))
        ));
    }

    #[test]
    fn event_slots_strictly_increase() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let ev: Vec<_> = detect(generate_pulses(&p, 100_000, 1), &p, &c, 2).collect();
        assert!(ev.windows(2).all(|w| w[0].slot_index < w[1].slot_index));
    }

    #[test]
    fn event_dump_round_trip() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let ev: Vec<_> = detect(generate_pulses(&p, 20_000, 1), &p, &c, 2).collect();
        let mut buf = Vec::new();
        write_event_dump(&mut buf, &ev).unwrap();
        assert_eq!(buf.len(), ev.len() * 9);
        let back = read_event_dump(&buf[..]).unwrap();
        assert_eq!(back.len(), ev.len());
        assert!(back
            .iter()
            .zip(&ev)
            .all(|(a, e)| a.0 == e.slot_index && a.1 == e.detector));
        assert!(read_event_dump(&buf[..buf.len() - 1]).is_err());
    }
}
