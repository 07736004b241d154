//! Basis reconciliation and decoy statistics.
//!
//! Bob announces his detections for a slot range (slot, basis, and his bit for
//! X-basis detections). Alice answers with one byte per detection: keep flag,
//! intensity label and, for kept X-basis detections, her own bit, followed by
//! the number of pulses she sent in the range per intensity and basis. After
//! the exchange both sides hold the same [`DecoyTally`], Alice holds her
//! sifted bits and Bob holds his.

use thiserror::Error;

use crate::bits::BitVec;
use crate::codec::{DecodeError, Reader, Writer};
use crate::params::{Basis, Intensity, ProtocolParams};
use crate::photonic::{DetectionEvent, PulseBatch, PulseSource};

/// Upper bound on detections carried by one announcement.
pub const MAX_ANNOUNCE_DETECTIONS: usize = 1 << 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SiftError {
    #[error("detection for slot {0} has no pulse record")]
    UnknownSlot(u64),
    #[error("announcement range {start}..{end} is out of order")]
    OutOfOrder { start: u64, end: u64 },
    #[error("reply does not match pending announcement: {0}")]
    ReplyMismatch(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Counts per (intensity, Alice basis). Errors are known exactly for X; Z
/// errors are only filled in by the simulator-side [`sift`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecoyTally {
    pub sent: [[u64; 2]; 3],
    pub detected: [[u64; 2]; 3],
    pub errors: [[u64; 2]; 3],
}

impl DecoyTally {
    pub fn sent(&self, i: Intensity, b: Basis) -> u64 {
        self.sent[i.index()][b.index()]
    }

    pub fn detected(&self, i: Intensity, b: Basis) -> u64 {
        self.detected[i.index()][b.index()]
    }

    pub fn errors(&self, i: Intensity, b: Basis) -> u64 {
        self.errors[i.index()][b.index()]
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &DecoyTally) {
        for i in 0..3 {
            for b in 0..2 {
                self.sent[i][b] += other.sent[i][b];
                self.detected[i][b] += other.detected[i][b];
                self.errors[i][b] += other.errors[i][b];
            }
        }
    }

    /// detected <= sent and errors <= detected in every cell.
    pub fn is_consistent(&self) -> bool {
        (0..3).all(|i| {
            (0..2).all(|b| {
                self.detected[i][b] <= self.sent[i][b] && self.errors[i][b] <= self.detected[i][b]
            })
        })
    }

    fn count_sent(&mut self, batch: &PulseBatch, start: u64, end: u64) {
        for slot in start..end {
            let p = batch.at_slot(slot).expect("range inside batch");
            if !p.is_stabilization {
                self.sent[p.intensity.index()][p.basis.index()] += 1;
            }
        }
    }
}

/// Z-basis signal detections that survived sifting.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedBlock {
    pub bits_alice: BitVec,
    pub bits_bob: BitVec,
    pub slot_refs: Vec<u64>,
}

impl SiftedBlock {
    pub fn len(&self) -> usize {
        self.slot_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_refs.is_empty()
    }
}

/// Every basis-matched X detection, with both bits revealed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct XBasisDisclosure {
    pub slots: Vec<u64>,
    pub intensities: Vec<Intensity>,
    pub alice_bits: BitVec,
    pub bob_bits: BitVec,
}

impl XBasisDisclosure {
    pub fn error_count(&self) -> usize {
        self.alice_bits.hamming_distance(&self.bob_bits)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftOutput {
    pub block: SiftedBlock,
    pub tally: DecoyTally,
    pub x_disclosure: XBasisDisclosure,
}

/// Sifts with both parties' data in hand. Also counts Z errors, which the
/// two-party protocol cannot see.
pub fn sift(pulses: &PulseBatch, events: &[DetectionEvent]) -> Result<SiftOutput, SiftError> {
    let mut out = SiftOutput::default();
    out.tally
        .count_sent(pulses, pulses.start_slot, pulses.end_slot());
    for ev in events {
        let p = pulses
            .at_slot(ev.slot_index)
            .ok_or(SiftError::UnknownSlot(ev.slot_index))?;
        if p.is_stabilization || p.basis != ev.basis {
            continue;
        }
        let (i, b) = (p.intensity.index(), p.basis.index());
        out.tally.detected[i][b] += 1;
        if ev.bit() != p.bit {
            out.tally.errors[i][b] += 1;
        }
        match p.basis {
            Basis::Z if p.intensity == Intensity::Signal => {
                out.block.bits_alice.push(p.bit);
                out.block.bits_bob.push(ev.bit());
                out.block.slot_refs.push(p.slot_index);
            }
            Basis::Z => {}
            Basis::X => {
                out.x_disclosure.slots.push(p.slot_index);
                out.x_disclosure.intensities.push(p.intensity);
                out.x_disclosure.alice_bits.push(p.bit);
                out.x_disclosure.bob_bits.push(ev.bit());
            }
        }
    }
    Ok(out)
}

/// Sifted bits per second of simulated time.
pub fn sifted_rate(block_bits: u64, elapsed_slots: u64, clock_rate_hz: f64) -> f64 {
    if elapsed_slots == 0 {
        return 0.0;
    }
    block_bits as f64 * clock_rate_hz / elapsed_slots as f64
}

/// One announced detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Announced {
    pub slot: u64,
    pub basis: Basis,
    /// Bob's bit; disclosed only for X-basis detections, zero otherwise.
    pub x_bit: bool,
}

/// Bob to Alice: detections in `[start_slot, end_slot)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftAnnounce {
    pub start_slot: u64,
    pub end_slot: u64,
    pub detections: Vec<Announced>,
}

impl SiftAnnounce {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.start_slot)
            .u64(self.end_slot)
            .u32(self.detections.len() as u32);
        let mut prev = self.start_slot;
        for d in &self.detections {
            let delta = d.slot - prev;
            prev = d.slot;
            let flags = ((d.basis == Basis::X) as u64) << 1 | (d.x_bit as u64);
            w.varint(delta << 2 | flags);
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, SiftError> {
        let mut r = Reader::new(buf);
        let start_slot = r.u64()?;
        let end_slot = r.u64()?;
        let n = r.u32()? as usize;
        if n > MAX_ANNOUNCE_DETECTIONS || n > r.remaining() {
            return Err(DecodeError::Malformed(format!("{n} detections")).into());
        }
        let mut detections = Vec::with_capacity(n);
        let mut prev = start_slot;
        for _ in 0..n {
            let v = r.varint()?;
            let slot = prev
                .checked_add(v >> 2)
                .filter(|&s| s < end_slot)
                .ok_or_else(|| DecodeError::Malformed("slot outside range".into()))?;
            prev = slot;
            detections.push(Announced {
                slot,
                basis: if v & 2 != 0 { Basis::X } else { Basis::Z },
                x_bit: v & 1 != 0,
            });
        }
        r.finish()?;
        Ok(SiftAnnounce {
            start_slot,
            end_slot,
            detections,
        })
    }
}

const KEEP: u8 = 1;
const ALICE_BIT: u8 = 8;

/// Alice to Bob: per-detection decision bytes plus sent counts for the range.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftReply {
    pub start_slot: u64,
    pub end_slot: u64,
    /// Per announced detection: bit0 keep, bits 1-2 intensity, bit3 Alice's X bit.
    pub decisions: Vec<u8>,
    pub sent: [[u64; 2]; 3],
}

impl SiftReply {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.start_slot)
            .u64(self.end_slot)
            .u32(self.decisions.len() as u32);
        w.bytes(&self.decisions);
        for row in &self.sent {
            for &v in row {
                w.u64(v);
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, SiftError> {
        let mut r = Reader::new(buf);
        let start_slot = r.u64()?;
        let end_slot = r.u64()?;
        let n = r.u32()? as usize;
        let decisions = r.bytes(n)?.to_vec();
        let mut sent = [[0u64; 2]; 3];
        for row in sent.iter_mut() {
            for v in row.iter_mut() {
                *v = r.u64()?;
            }
        }
        r.finish()?;
        Ok(SiftReply {
            start_slot,
            end_slot,
            decisions,
            sent,
        })
    }
}

fn intensity_code(i: Intensity) -> u8 {
    (i.index() as u8) << 1
}

fn decision_intensity(d: u8) -> Result<Intensity, SiftError> {
    Intensity::from_index(((d >> 1) & 3) as usize)
        .ok_or_else(|| SiftError::ReplyMismatch("bad intensity".into()))
}

/// Result of one announce/reply round at either node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftProgress {
    /// This node's bits for the kept Z-basis signal detections.
    pub key_bits: BitVec,
    pub slot_refs: Vec<u64>,
    pub tally: DecoyTally,
    pub elapsed_slots: u64,
}

/// Alice's side. Regenerates her pulse stream batch by batch as
/// announcements advance through it.
#[derive(Debug)]
pub struct AliceSifter {
    source: PulseSource,
    batch: PulseBatch,
    batch_slots: usize,
    next_expected: u64,
}

impl AliceSifter {
    pub fn new(params: &ProtocolParams, pulse_seed: u64, batch_slots: usize) -> Self {
        AliceSifter {
            source: PulseSource::new(params, pulse_seed),
            batch: PulseBatch::default(),
            batch_slots,
            next_expected: 0,
        }
    }

    pub fn on_announce(
        &mut self,
        ann: &SiftAnnounce,
    ) -> Result<(SiftReply, SiftProgress), SiftError> {
        if ann.start_slot != self.next_expected || ann.end_slot < ann.start_slot {
            return Err(SiftError::OutOfOrder {
                start: ann.start_slot,
                end: ann.end_slot,
            });
        }
        self.next_expected = ann.end_slot;
        let mut progress = SiftProgress {
            elapsed_slots: ann.end_slot - ann.start_slot,
            ..Default::default()
        };
        let mut decisions = Vec::with_capacity(ann.detections.len());
        let mut det = ann.detections.iter().peekable();
        let mut slot = ann.start_slot;
        while slot < ann.end_slot {
            if !self.batch.contains(slot) {
                self.batch = self.source.next_batch(self.batch_slots);
                if !self.batch.contains(slot) {
                    return Err(SiftError::OutOfOrder {
                        start: ann.start_slot,
                        end: ann.end_slot,
                    });
                }
            }
            let seg_end = ann.end_slot.min(self.batch.end_slot());
            progress.tally.count_sent(&self.batch, slot, seg_end);
            while let Some(d) = det.next_if(|d| d.slot < seg_end) {
                let p = self
                    .batch
                    .at_slot(d.slot)
                    .ok_or(SiftError::UnknownSlot(d.slot))?;
                if p.is_stabilization || p.basis != d.basis {
                    decisions.push(0);
                    continue;
                }
                let (i, b) = (p.intensity.index(), p.basis.index());
                progress.tally.detected[i][b] += 1;
                let mut code = KEEP | intensity_code(p.intensity);
                match p.basis {
                    Basis::X => {
                        code |= if p.bit { ALICE_BIT } else { 0 };
                        if p.bit != d.x_bit {
                            progress.tally.errors[i][b] += 1;
                        }
                    }
                    Basis::Z if p.intensity == Intensity::Signal => {
                        progress.key_bits.push(p.bit);
                        progress.slot_refs.push(d.slot);
                    }
                    Basis::Z => {}
                }
                decisions.push(code);
            }
            slot = seg_end;
        }
        if det.next().is_some() {
            return Err(SiftError::ReplyMismatch("detections out of range".into()));
        }
        let reply = SiftReply {
            start_slot: ann.start_slot,
            end_slot: ann.end_slot,
            decisions,
            sent: progress.tally.sent,
        };
        Ok((reply, progress))
    }
}

#[derive(Debug)]
struct Pending {
    start: u64,
    end: u64,
    events: Vec<(u64, Basis, bool)>,
}

/// Bob's side: builds announcements and applies Alice's replies in order.
#[derive(Debug, Default)]
pub struct BobSifter {
    pending: std::collections::VecDeque<Pending>,
    next_start: u64,
}

impl BobSifter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Announcements covering `[next_start, end_slot)`, split so that none
    /// carries more than [`MAX_ANNOUNCE_DETECTIONS`].
    pub fn announce(&mut self, events: &[DetectionEvent], end_slot: u64) -> Vec<SiftAnnounce> {
        let mut out = Vec::new();
        let mut rest = events;
        loop {
            let take = rest.len().min(MAX_ANNOUNCE_DETECTIONS);
            let (chunk, tail) = rest.split_at(take);
            let end = if tail.is_empty() {
                end_slot
            } else {
                tail[0].slot_index
            };
            let ann = SiftAnnounce {
                start_slot: self.next_start,
                end_slot: end,
                detections: chunk
                    .iter()
                    .map(|e| Announced {
                        slot: e.slot_index,
                        basis: e.basis,
                        x_bit: e.basis == Basis::X && e.bit(),
                    })
                    .collect(),
            };
            self.pending.push_back(Pending {
                start: ann.start_slot,
                end,
                events: chunk
                    .iter()
                    .map(|e| (e.slot_index, e.basis, e.bit()))
                    .collect(),
            });
            self.next_start = end;
            out.push(ann);
            rest = tail;
            if rest.is_empty() {
                break;
            }
        }
        out
    }

    pub fn on_reply(&mut self, reply: &SiftReply) -> Result<SiftProgress, SiftError> {
        let pending = self
            .pending
            .pop_front()
            .ok_or_else(|| SiftError::ReplyMismatch("no announcement pending".into()))?;
        if pending.start != reply.start_slot
            || pending.end != reply.end_slot
            || pending.events.len() != reply.decisions.len()
        {
            return Err(SiftError::ReplyMismatch(format!(
                "range {}..{} with {} decisions",
                reply.start_slot,
                reply.end_slot,
                reply.decisions.len()
            )));
        }
        let mut progress = SiftProgress {
            elapsed_slots: pending.end - pending.start,
            ..Default::default()
        };
        progress.tally.sent = reply.sent;
        for (&(slot, basis, bit), &d) in pending.events.iter().zip(&reply.decisions) {
            if d & KEEP == 0 {
                continue;
            }
            let intensity = decision_intensity(d)?;
            let (i, b) = (intensity.index(), basis.index());
            progress.tally.detected[i][b] += 1;
            match basis {
                Basis::X => {
                    if (d & ALICE_BIT != 0) != bit {
                        progress.tally.errors[i][b] += 1;
                    }
                }
                Basis::Z if intensity == Intensity::Signal => {
                    progress.key_bits.push(bit);
                    progress.slot_refs.push(slot);
                }
                Basis::Z => {}
            }
        }
        Ok(progress)
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ChannelDetectorParams, DetectionModel};
    use crate::photonic::{ClickCause, DetectorSim, EventTruth};

    fn simulate(
        p: &ProtocolParams,
        c: &ChannelDetectorParams,
        slots: usize,
        seed: u64,
    ) -> (PulseBatch, Vec<DetectionEvent>) {
        let batch = PulseSource::new(p, seed).next_batch(slots);
        let mut ev = Vec::new();
        DetectorSim::new(p, c, seed + 1).detect_batch(&batch, &mut ev);
        (batch, ev)
    }

    #[test]
    fn single_basis_keeps_every_detection() {
        let p = ProtocolParams {
            prob_z: 1.0,
            prob_x: 0.0,
            prob_signal: 1.0,
            prob_decoy: 0.0,
            prob_vacuum: 0.0,
            prob_stabilization: 0.0,
            ..Default::default()
        };
        let (batch, ev) = simulate(&p, &ChannelDetectorParams::default(), 200_000, 3);
        let out = sift(&batch, &ev).unwrap();
        assert_eq!(out.block.len(), ev.len());
        assert!(out.x_disclosure.slots.is_empty());
    }

    #[test]
    fn sifted_fraction_matches_model() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let n = 10_000_000;
        let (batch, ev) = simulate(&p, &c, n, 11);
        let out = sift(&batch, &ev).unwrap();
        let model = DetectionModel::new(&p, &c);
        // Expected sifted bits per slot: non-stab, signal, both Z, detected.
        let expect = (1.0 - p.prob_stabilization)
            * p.prob_signal
            * p.prob_z
            * p.prob_z
            * model.detection_probability(p.flux_signal);
        let k = out.block.len() as f64;
        let mean = expect * n as f64;
        assert!((k - mean).abs() < 3.0 * mean.sqrt(), "{k} vs {mean}");
        assert!(out.tally.is_consistent());
        assert_eq!(
            out.tally.total_sent(),
            batch.iter().filter(|r| !r.is_stabilization).count() as u64
        );
    }

    #[test]
    fn sifted_keys_differ_exactly_on_erroneous_slots() {
        let p = ProtocolParams::default();
        let (batch, ev) = simulate(&p, &ChannelDetectorParams::default(), 1_000_000, 5);
        let out = sift(&batch, &ev).unwrap();
        let by_slot: std::collections::HashMap<u64, &DetectionEvent> =
            ev.iter().map(|e| (e.slot_index, e)).collect();
        for (k, &slot) in out.block.slot_refs.iter().enumerate() {
            let differs = out.block.bits_alice.get(k) != out.block.bits_bob.get(k);
            let truth = batch.at_slot(slot).unwrap().bit != by_slot[&slot].bit();
            assert_eq!(differs, truth);
        }
    }

    #[test]
    fn noiseless_x_basis_has_no_errors() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams {
            misalignment_error: 0.0,
            dark_count_prob: 0.0,
            afterpulse_prob: 0.0,
            ..Default::default()
        };
        let (batch, ev) = simulate(&p, &c, 2_000_000, 8);
        let out = sift(&batch, &ev).unwrap();
        assert!(!out.x_disclosure.slots.is_empty());
        assert_eq!(out.x_disclosure.error_count(), 0);
    }

    #[test]
    fn unknown_slot_rejected() {
        let p = ProtocolParams::default();
        let batch = PulseSource::new(&p, 1).next_batch(10);
        let ev = DetectionEvent {
            slot_index: 10,
            basis: Basis::Z,
            detector: 1,
            truth: EventTruth {
                photons: 1,
                cause: ClickCause::Photon,
                double_click: false,
            },
        };
        assert_eq!(sift(&batch, &[ev]), Err(SiftError::UnknownSlot(10)));
    }

    #[test]
    fn rate_arithmetic() {
        assert!((sifted_rate(48, 1000, 1e9) - 48e6).abs() < 1e-6);
        assert_eq!(sifted_rate(0, 1000, 1e9), 0.0);
        assert_eq!(sifted_rate(5, 0, 1e9), 0.0);
    }

    #[test]
    fn two_party_exchange_matches_local_sift() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let seed = 21;
        let batch_slots = 1 << 18;
        let mut alice = AliceSifter::new(&p, seed, batch_slots);
        let mut bob = BobSifter::new();
        let mut src = PulseSource::new(&p, seed);
        let mut sim = DetectorSim::new(&p, &c, 99);
        let (mut a_bits, mut b_bits) = (BitVec::new(), BitVec::new());
        let (mut a_tally, mut b_tally) = (DecoyTally::default(), DecoyTally::default());
        let mut local = SiftOutput::default();
        for _ in 0..6 {
            let batch = src.next_batch(batch_slots);
            let mut ev = Vec::new();
            sim.detect_batch(&batch, &mut ev);
            let l = sift(&batch, &ev).unwrap();
            local
                .block
                .bits_alice
                .extend_from_bitvec(&l.block.bits_alice);
            local.block.bits_bob.extend_from_bitvec(&l.block.bits_bob);
            local.tally.merge(&l.tally);
            for ann in bob.announce(&ev, batch.end_slot()) {
                let ann = SiftAnnounce::decode(&ann.encode()).unwrap();
                let (reply, pa) = alice.on_announce(&ann).unwrap();
                let reply = SiftReply::decode(&reply.encode()).unwrap();
                let pb = bob.on_reply(&reply).unwrap();
                assert_eq!(pa.slot_refs, pb.slot_refs);
                a_bits.extend_from_bitvec(&pa.key_bits);
                b_bits.extend_from_bitvec(&pb.key_bits);
                a_tally.merge(&pa.tally);
                b_tally.merge(&pb.tally);
            }
        }
        assert_eq!(a_tally, b_tally);
        assert_eq!(a_bits, local.block.bits_alice);
        assert_eq!(b_bits, local.block.bits_bob);
        let mut expected = local.tally;
        for i in 0..3 {
            expected.errors[i][Basis::Z.index()] = 0;
        }
        assert_eq!(a_tally, expected);
    }

    #[test]
    fn announcements_split_at_detection_cap() {
        let mk = |slot| DetectionEvent {
            slot_index: slot,
            basis: Basis::Z,
            detector: 0,
            truth: EventTruth {
                photons: 0,
                cause: ClickCause::Dark,
                double_click: false,
            },
        };
        let ev: Vec<_> = (0..(MAX_ANNOUNCE_DETECTIONS as u64 * 2 + 5))
            .map(|s| mk(s * 2))
            .collect();
        let mut bob = BobSifter::new();
        let anns = bob.announce(&ev, 1 << 20);
        assert_eq!(anns.len(), 3);
        assert_eq!(anns[0].end_slot, anns[1].start_slot);
        assert_eq!(anns[2].end_slot, 1 << 20);
        assert!(anns
            .iter()
            .all(|a| a.detections.len() <= MAX_ANNOUNCE_DETECTIONS));
    }

    #[test]
    fn out_of_order_announcement_rejected() {
        let p = ProtocolParams::default();
        let mut alice = AliceSifter::new(&p, 1, 1024);
        let ann = SiftAnnounce {
            start_slot: 5,
            end_slot: 10,
            detections: vec![],
        };
        assert!(matches!(
            alice.on_announce(&ann),
            Err(SiftError::OutOfOrder { .. })
        ));
    }
}
