//! One-way syndrome reconciliation of 2^20-bit sifted blocks.
//!
//! Per block: Bob discloses a sample of his bits, Alice estimates the QBER,
//! picks a layout from the code family and sends the syndromes with her
//! verification tag, Bob decodes and reports whether the tags agree.
//!
//! The estimate used for rate selection pools the disclosed samples of the
//! most recent blocks; the current block's sample is always part of it. Rates
//! are chosen for the estimate plus two standard deviations of the pool and
//! the fixed margin, and never above what the efficiency floor allows at the
//! raised estimate.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;
use rayon::prelude::*;

use super::code::LdpcCode;
use super::decoder::{decode, DecoderConfig};
use super::family::{CodeFamily, FamilyConfig, RateSelection, Segment};
use super::verify::{tag, HashSeed};
use super::EcError;
use crate::bits::BitVec;
use crate::codec::{DecodeError, Reader, Writer};
use crate::params::entropy_unchecked;
use crate::photonic::derive_seed;
use crate::sifting::DecoyTally;

pub const VERIFY_TAG_BITS: u64 = 64;

const SAMPLE_LABEL: u64 = 0x5a4d_504c;
const HASH_LABEL: u64 = 0x4841_5348;

#[derive(Debug, Clone, PartialEq)]
pub struct EcConfig {
    pub block_bits: usize,
    pub sample_bits: usize,
    pub f_target: f64,
    pub margin: f64,
    /// Number of recent blocks whose samples form the QBER estimate.
    pub pool_blocks: usize,
    /// Standard deviations of the pooled estimate added before the margin.
    pub estimate_sigmas: f64,
    /// Efficiency floor on the upper estimate alone, without the margin.
    /// Low-rate codes need it more than the margin provides.
    pub f_min: f64,
    pub family: FamilyConfig,
    pub decoder: DecoderConfig,
    /// Decode the codewords of a block on the rayon pool.
    pub parallel: bool,
}

impl Default for EcConfig {
    fn default() -> Self {
        EcConfig {
            block_bits: 1 << 20,
            sample_bits: 8192,
            f_target: 1.09,
            margin: 0.005,
            pool_blocks: 64,
            estimate_sigmas: 2.0,
            f_min: 1.22,
            family: FamilyConfig::default(),
            decoder: DecoderConfig::default(),
            parallel: true,
        }
    }
}

impl EcConfig {
    pub fn payload_bits(&self) -> usize {
        self.block_bits - self.sample_bits
    }
}

/// Mismatch fraction between the two disclosed samples.
pub fn estimate_qber(alice_sample: &BitVec, bob_sample: &BitVec) -> Result<f64, EcError> {
    if alice_sample.len() != bob_sample.len() {
        return Err(EcError::LengthMismatch {
            expected: alice_sample.len(),
            actual: bob_sample.len(),
        });
    }
    if alice_sample.is_empty() {
        return Ok(0.0);
    }
    Ok(alice_sample.hamming_distance(bob_sample) as f64 / alice_sample.len() as f64)
}

/// Sample positions for a block, drawn from the shared seed. Sorted.
pub fn sample_positions(
    shared_seed: u64,
    block_id: u64,
    block_bits: usize,
    sample_bits: usize,
) -> Vec<usize> {
    let mut rng = Pcg64Mcg::seed_from_u64(derive_seed(shared_seed ^ SAMPLE_LABEL, block_id));
    let mut pos = rand::seq::index::sample(&mut rng, block_bits, sample_bits).into_vec();
    pos.sort_unstable();
    pos
}

/// Splits a block into the sample at `positions` (sorted) and the remaining payload.
pub fn split_sample(block: &BitVec, positions: &[usize]) -> (BitVec, BitVec) {
    let mut sample = BitVec::with_capacity(positions.len());
    let mut payload = BitVec::with_capacity(block.len() - positions.len());
    let mut start = 0;
    for &p in positions {
        payload.extend_from_range(block, start, p);
        sample.push(block.get(p));
        start = p + 1;
    }
    payload.extend_from_range(block, start, block.len());
    (sample, payload)
}

pub fn hash_seed(shared_seed: u64, block_id: u64) -> HashSeed {
    let mut point = derive_seed(shared_seed ^ HASH_LABEL, block_id);
    if point == 0 {
        point = 1;
    }
    HashSeed {
        point,
        mask: derive_seed(shared_seed ^ HASH_LABEL, !block_id),
    }
}

/// Rolling error/bit counts of recent samples.
#[derive(Debug, Clone, Default)]
pub struct QberPool {
    window: VecDeque<(u64, u64)>,
    capacity: usize,
}

impl QberPool {
    pub fn new(capacity: usize) -> Self {
        QberPool {
            window: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, errors: u64, bits: u64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((errors, bits));
    }

    fn counts(&self) -> (u64, u64) {
        self.window
            .iter()
            .fold((0, 0), |(e, n), &(de, dn)| (e + de, n + dn))
    }

    pub fn estimate(&self) -> Option<f64> {
        let (e, n) = self.counts();
        (n > 0).then(|| e as f64 / n as f64)
    }

    /// The estimate plus `sigmas` binomial standard deviations of the pooled sample.
    pub fn upper_estimate(&self, sigmas: f64) -> Option<f64> {
        let (_, n) = self.counts();
        self.estimate()
            .map(|q| q + sigmas * (q * (1.0 - q) / n as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMessage {
    pub block_id: u64,
    pub sample: BitVec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyndromeMessage {
    pub block_id: u64,
    pub qber_est: f64,
    /// Empty when Alice found no usable code; the block is then discarded.
    pub segments: Vec<Segment>,
    pub syndrome: BitVec,
    pub tag: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyMessage {
    pub block_id: u64,
    pub accepted: bool,
    /// Bits Bob flipped; zero when rejected.
    pub corrected_errors: u64,
}

/// Payloads of the EC_SYNDROME message type.
#[derive(Debug, Clone, PartialEq)]
pub enum EcMessage {
    Sample(SampleMessage),
    Syndrome(SyndromeMessage),
}

impl EcMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            EcMessage::Sample(m) => {
                w.u8(0).u64(m.block_id).bits(&m.sample);
            }
            EcMessage::Syndrome(m) => {
                w.u8(1)
                    .u64(m.block_id)
                    .f64(m.qber_est)
                    .u32(m.segments.len() as u32);
                for s in &m.segments {
                    w.u32(s.base_rows as u32).u32(s.payload_bits as u32);
                }
                w.bits(&m.syndrome).u64(m.tag);
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let msg = match r.u8()? {
            0 => EcMessage::Sample(SampleMessage {
                block_id: r.u64()?,
                sample: r.bits()?,
            }),
            1 => {
                let block_id = r.u64()?;
                let qber_est = r.f64()?;
                let count = r.u32()? as usize;
                if count > r.remaining() / 8 {
                    return Err(DecodeError::Malformed(format!("{count} segments")));
                }
                let mut segments = Vec::with_capacity(count);
                for _ in 0..count {
                    segments.push(Segment {
                        base_rows: r.u32()? as usize,
                        payload_bits: r.u32()? as usize,
                    });
                }
                EcMessage::Syndrome(SyndromeMessage {
                    block_id,
                    qber_est,
                    segments,
                    syndrome: r.bits()?,
                    tag: r.u64()?,
                })
            }
            k => return Err(DecodeError::Malformed(format!("EC message kind {k}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}

impl VerifyMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.block_id)
            .u8(self.accepted as u8)
            .u64(self.corrected_errors);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let block_id = r.u64()?;
        let accepted = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(DecodeError::Malformed(format!("verify flag {v}"))),
        };
        let corrected_errors = r.u64()?;
        r.finish()?;
        Ok(VerifyMessage {
            block_id,
            accepted,
            corrected_errors,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStatus {
    Corrected,
    Discarded,
}

/// Outcome of reconciling one block, as seen by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct EcBlock {
    pub block_id: u64,
    pub block_bits: usize,
    pub est_sample_bits: usize,
    pub sample_errors: u64,
    pub qber_estimated: f64,
    pub code_rate_selected: f64,
    pub syndrome: BitVec,
    pub verify_tag: u64,
    pub status: BlockStatus,
    /// Syndrome + sample + tag.
    pub leak_bits: u64,
    pub corrected_errors: u64,
    /// `leak_bits / (payload · h(corrected_errors / payload))`.
    pub f_ec_realized: Option<f64>,
    /// The reconciled payload; empty when discarded.
    pub key: BitVec,
}

impl EcBlock {
    pub fn is_corrected(&self) -> bool {
        self.status == BlockStatus::Corrected
    }

    pub fn payload_bits(&self) -> usize {
        self.block_bits - self.est_sample_bits
    }
}

pub fn realized_efficiency(leak_bits: u64, payload_bits: usize, errors: u64) -> Option<f64> {
    let q = errors as f64 / payload_bits as f64;
    let h = entropy_unchecked(q);
    (payload_bits > 0 && h > 0.0).then(|| leak_bits as f64 / (payload_bits as f64 * h))
}

#[derive(Debug)]
pub struct BobPending {
    block_id: u64,
    block_bits: usize,
    sample: BitVec,
    payload: BitVec,
}

#[derive(Debug)]
pub struct AlicePending {
    block: EcBlock,
}

impl AlicePending {
    pub fn block_id(&self) -> u64 {
        self.block.block_id
    }
}

/// Stateless block operations for both roles; the QBER pool lives with Alice.
#[derive(Debug, Clone)]
pub struct Reconciler {
    config: EcConfig,
    family: Arc<CodeFamily>,
    shared_seed: u64,
}

impl Reconciler {
    pub fn new(config: EcConfig, shared_seed: u64) -> Result<Self, EcError> {
        let family = Arc::new(CodeFamily::new(config.family)?);
        Ok(Self::with_family(config, family, shared_seed))
    }

    pub fn with_family(config: EcConfig, family: Arc<CodeFamily>, shared_seed: u64) -> Self {
        Reconciler {
            config,
            family,
            shared_seed,
        }
    }

    pub fn config(&self) -> &EcConfig {
        &self.config
    }

    pub fn family(&self) -> &Arc<CodeFamily> {
        &self.family
    }

    pub fn new_pool(&self) -> QberPool {
        QberPool::new(self.config.pool_blocks)
    }

    fn split(&self, block_id: u64, bits: &BitVec) -> (BitVec, BitVec) {
        let pos = sample_positions(
            self.shared_seed,
            block_id,
            bits.len(),
            self.config.sample_bits.min(bits.len()),
        );
        split_sample(bits, &pos)
    }

    /// Bob's opening move: disclose the sample.
    pub fn bob_start(&self, block_id: u64, bits: &BitVec) -> (SampleMessage, BobPending) {
        let (sample, payload) = self.split(block_id, bits);
        (
            SampleMessage {
                block_id,
                sample: sample.clone(),
            },
            BobPending {
                block_id,
                block_bits: bits.len(),
                sample,
                payload,
            },
        )
    }

    /// Alice estimates the QBER, selects the rate and computes the syndromes.
    pub fn alice_respond(
        &self,
        pool: &mut QberPool,
        block_id: u64,
        bits: &BitVec,
        msg: &SampleMessage,
    ) -> Result<(SyndromeMessage, AlicePending), EcError> {
        let (sample, payload) = self.split(block_id, bits);
        if msg.block_id != block_id {
            return Err(EcError::Protocol(format!(
                "sample for block {} while at {block_id}",
                msg.block_id
            )));
        }
        let q_sample = estimate_qber(&sample, &msg.sample)?;
        let sample_errors = sample.hamming_distance(&msg.sample) as u64;
        pool.push(sample_errors, sample.len() as u64);
        let qber_est = pool.estimate().unwrap_or(q_sample);
        let qber_up = pool
            .upper_estimate(self.config.estimate_sigmas)
            .unwrap_or(q_sample);
        let seed = hash_seed(self.shared_seed, block_id);
        let tag_a = tag(&payload, seed);

        let selection = self
            .family
            .select_rate(
                qber_up,
                self.config.margin,
                self.config.f_target,
                payload.len(),
            )
            .and_then(|sel| {
                let floor = (1.0 - self.config.f_min * entropy_unchecked(qber_up))
                    .max(self.family.config().min_rate);
                if sel.target_rate > floor {
                    self.family.select_for_target(floor, payload.len())
                } else {
                    Ok(sel)
                }
            });
        let (segments, syndrome, rate) = match selection {
            Ok(sel) => {
                let syndrome = self.syndromes(&sel, &payload)?;
                (sel.segments, syndrome, sel.effective_rate)
            }
            Err(EcError::NoCode(_)) => (Vec::new(), BitVec::new(), 0.0),
            Err(e) => return Err(e),
        };
        let leak_bits = syndrome.len() as u64 + sample.len() as u64 + VERIFY_TAG_BITS;
        let block = EcBlock {
            block_id,
            block_bits: bits.len(),
            est_sample_bits: sample.len(),
            sample_errors,
            qber_estimated: qber_est,
            code_rate_selected: rate,
            syndrome: syndrome.clone(),
            verify_tag: tag_a,
            status: BlockStatus::Discarded,
            leak_bits,
            corrected_errors: 0,
            f_ec_realized: None,
            key: payload,
        };
        let msg = SyndromeMessage {
            block_id,
            qber_est,
            segments,
            syndrome,
            tag: tag_a,
        };
        Ok((msg, AlicePending { block }))
    }

    fn segment_codes(&self, segments: &[Segment]) -> Result<Vec<Arc<LdpcCode>>, EcError> {
        segments
            .iter()
            .map(|s| self.family.code(s.base_rows))
            .collect()
    }

    fn syndromes(&self, sel: &RateSelection, payload: &BitVec) -> Result<BitVec, EcError> {
        let codes = self.segment_codes(&sel.segments)?;
        let mut out = BitVec::with_capacity(sel.syndrome_bits);
        let mut start = 0;
        for (seg, code) in sel.segments.iter().zip(&codes) {
            let part = payload.slice(start, start + seg.payload_bits);
            start += seg.payload_bits;
            let mask = code.shortening_mask(code.n() - seg.payload_bits);
            out.extend_from_bitvec(&code.syndrome(&code.embed(&part, &mask))?);
        }
        Ok(out)
    }

    /// Decodes every codeword; `None` if any of them fails to converge.
    pub fn decode_payload(
        &self,
        msg: &SyndromeMessage,
        payload: &BitVec,
        parallel: bool,
    ) -> Result<Option<BitVec>, EcError> {
        let codes = self.segment_codes(&msg.segments)?;
        let total: usize = msg.segments.iter().map(|s| s.payload_bits).sum();
        let rows: usize = codes.iter().map(|c| c.m()).sum();
        if total != payload.len() || rows != msg.syndrome.len() {
            return Err(EcError::Protocol(format!(
                "layout covers {total} payload / {rows} syndrome bits, have {} / {}",
                payload.len(),
                msg.syndrome.len()
            )));
        }
        let mut jobs = Vec::with_capacity(codes.len());
        let (mut p, mut s) = (0, 0);
        for (seg, code) in msg.segments.iter().zip(&codes) {
            jobs.push((code, p, s, seg.payload_bits));
            p += seg.payload_bits;
            s += code.m();
        }
        let run = |&(code, p, s, len): &(&Arc<LdpcCode>, usize, usize, usize)| -> Option<BitVec> {
            let mask = code.shortening_mask(code.n() - len);
            let noisy = code.embed(&payload.slice(p, p + len), &mask);
            let target = msg.syndrome.slice(s, s + code.m());
            let out = decode(
                code,
                &noisy,
                &mask,
                &target,
                msg.qber_est,
                &self.config.decoder,
            );
            out.into_word().map(|w| code.extract(&w, &mask))
        };
        let parts: Vec<Option<BitVec>> = if parallel {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        };
        let mut out = BitVec::with_capacity(payload.len());
        for part in parts {
            match part {
                Some(bits) => out.extend_from_bitvec(&bits),
                None => return Ok(None),
            }
        }
        Ok(Some(out))
    }

    /// Bob decodes, checks Alice's tag and reports the outcome.
    pub fn bob_finish(
        &self,
        pending: BobPending,
        msg: &SyndromeMessage,
    ) -> Result<(VerifyMessage, EcBlock), EcError> {
        if msg.block_id != pending.block_id {
            return Err(EcError::Protocol(format!(
                "syndrome for block {} while at {}",
                msg.block_id, pending.block_id
            )));
        }
        let payload_len = pending.payload.len();
        let decoded = if msg.segments.is_empty() {
            None
        } else {
            self.decode_payload(msg, &pending.payload, self.config.parallel)?
        };
        let seed = hash_seed(self.shared_seed, pending.block_id);
        let (key, tag_b, accepted) = match decoded {
            Some(k) => {
                let t = tag(&k, seed);
                let ok = t == msg.tag;
                (k, t, ok)
            }
            None => (BitVec::new(), 0, false),
        };
        let corrected_errors = if accepted {
            key.hamming_distance(&pending.payload) as u64
        } else {
            0
        };
        let leak_bits = msg.syndrome.len() as u64 + pending.sample.len() as u64 + VERIFY_TAG_BITS;
        let block = EcBlock {
            block_id: pending.block_id,
            block_bits: pending.block_bits,
            est_sample_bits: pending.sample.len(),
            sample_errors: 0,
            qber_estimated: msg.qber_est,
            code_rate_selected: if msg.segments.is_empty() {
                0.0
            } else {
                1.0 - msg.syndrome.len() as f64 / payload_len as f64
            },
            syndrome: msg.syndrome.clone(),
            verify_tag: tag_b,
            status: if accepted {
                BlockStatus::Corrected
            } else {
                BlockStatus::Discarded
            },
            leak_bits,
            corrected_errors,
            f_ec_realized: if accepted {
                realized_efficiency(leak_bits, payload_len, corrected_errors)
            } else {
                None
            },
            key: if accepted { key } else { BitVec::new() },
        };
        let reply = VerifyMessage {
            block_id: pending.block_id,
            accepted,
            corrected_errors,
        };
        Ok((reply, block))
    }

    pub fn alice_finish(
        &self,
        pending: AlicePending,
        msg: &VerifyMessage,
    ) -> Result<EcBlock, EcError> {
        let mut block = pending.block;
        if msg.block_id != block.block_id {
            return Err(EcError::Protocol(format!(
                "verify for block {} while at {}",
                msg.block_id, block.block_id
            )));
        }
        if msg.accepted && !block.syndrome.is_empty() {
            block.status = BlockStatus::Corrected;
            block.corrected_errors = msg.corrected_errors;
            block.f_ec_realized =
                realized_efficiency(block.leak_bits, block.payload_bits(), msg.corrected_errors);
        } else {
            block.key = BitVec::new();
        }
        Ok(block)
    }

    /// All four steps in one place, for tests and benchmarks.
    pub fn reconcile_local(
        &self,
        pool: &mut QberPool,
        block_id: u64,
        alice: &BitVec,
        bob: &BitVec,
    ) -> Result<(EcBlock, EcBlock), EcError> {
        let (sample, pending_b) = self.bob_start(block_id, bob);
        let (syn, pending_a) = self.alice_respond(pool, block_id, alice, &sample)?;
        let (verify, block_b) = self.bob_finish(pending_b, &syn)?;
        let block_a = self.alice_finish(pending_a, &verify)?;
        Ok((block_a, block_b))
    }
}

/// A fixed-size slice of the sifted key stream with its statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBlock {
    pub block_id: u64,
    pub bits: BitVec,
    pub tally: DecoyTally,
    pub elapsed_slots: u64,
}

/// Cuts the sifted key stream into fixed-size blocks. The tally and slot
/// count of each sift batch go to the block that receives the batch's first bit.
#[derive(Debug)]
pub struct BlockAssembler {
    block_bits: usize,
    next_id: u64,
    buffer: BitVec,
    tally: DecoyTally,
    slots: u64,
}

impl BlockAssembler {
    pub fn new(block_bits: usize) -> Self {
        assert!(block_bits > 0);
        BlockAssembler {
            block_bits,
            next_id: 0,
            buffer: BitVec::new(),
            tally: DecoyTally::default(),
            slots: 0,
        }
    }

    pub fn buffered_bits(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, bits: &BitVec, tally: &DecoyTally, elapsed_slots: u64) -> Vec<RawBlock> {
        self.tally.merge(tally);
        self.slots += elapsed_slots;
        self.buffer.extend_from_bitvec(bits);
        let mut out = Vec::new();
        while self.buffer.len() >= self.block_bits {
            out.push(RawBlock {
                block_id: self.next_id,
                bits: self.buffer.drain_front(self.block_bits),
                tally: std::mem::take(&mut self.tally),
                elapsed_slots: std::mem::take(&mut self.slots),
            });
            self.next_id += 1;
        }
        out
    }
}
