//! One node of the two-party pipeline.
//!
//! Stages run on their own threads and hand work downstream through bounded
//! queues: (Bob only) pulse source, sifting, reconciliation and privacy
//! amplification. A reader thread dispatches inbound frames to the stage
//! that owns them and a writer thread serializes all outbound frames.
//!
//! Bob drives the run. When his pulse budget is spent and every stage has
//! drained he sends SHUTDOWN; Alice drains and answers with SHUTDOWN. Bits
//! that do not fill a whole EC block or PA frame at the end are dropped.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, never, select, unbounded, Receiver, Sender};
use thiserror::Error;

use super::stats::{RunStats, StatsWriter};
use super::transport::{Link, LinkReader, LinkWriter};
use super::wire::{MsgType, WireError};
use crate::codec::DecodeError;
use crate::ec::family::CodeFamily;
use crate::ec::reconcile::{
    BlockAssembler, EcBlock, EcConfig, EcMessage, RawBlock, Reconciler, SampleMessage,
    SyndromeMessage, VerifyMessage,
};
use crate::ec::EcError;
use crate::pa::{
    compress_frame, BlockInput, FrameAssembler, KeyStore, PaError, PaFrame, PaSeedMessage,
    SeedRegistry, ToeplitzSeed,
};
use crate::params::{ChannelDetectorParams, Config, ProtocolParams};
use crate::photonic::{derive_seed, write_event_dump, DetectionEvent, DetectorSim, PulseSource};
use crate::security::{decoy_bounds, secure_length, FrameStats, SecureLengthResult};
use crate::sifting::{AliceSifter, BobSifter, DecoyTally, SiftAnnounce, SiftError, SiftReply};

const PULSE_STREAM: u64 = 1;
const DETECTOR_STREAM: u64 = 2;
const EC_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Alice,
    Bob,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "alice" => Ok(Role::Alice),
            "bob" => Ok(Role::Bob),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Alice => "alice",
            Role::Bob => "bob",
        })
    }
}

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("sifting: {0}")]
    Sift(#[from] SiftError),
    #[error("reconciliation: {0}")]
    Ec(#[from] EcError),
    #[error("privacy amplification: {0}")]
    Pa(#[from] PaError),
    #[error("bad payload: {0}")]
    Decode(#[from] DecodeError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("peer disconnected before the run completed")]
    PeerDisconnected,
}

/// Everything a node needs besides the link. Both nodes must agree on
/// `params`, `ec`, `seed` and `pulses`.
#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub role: Role,
    pub params: ProtocolParams,
    pub channel: ChannelDetectorParams,
    pub ec: EcConfig,
    /// Simulated slots (Bob's budget; Alice follows his announcements).
    pub pulses: u64,
    /// Shared randomness for the pulse stream, sample positions and hashes.
    pub seed: u64,
    pub batch_slots: usize,
    pub queue_depth: usize,
    /// Sift announcements Bob may have outstanding.
    pub announce_window: usize,
    /// EC blocks Bob may have in flight.
    pub ec_window: usize,
    pub time_limit: Option<Duration>,
    pub keys: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub dump_events: Option<PathBuf>,
}

impl NodeConfig {
    pub fn new(role: Role, config: &Config) -> Self {
        NodeConfig {
            role,
            params: config.protocol.clone(),
            channel: config.channel.clone(),
            ec: EcConfig::default(),
            pulses: 0,
            seed: 0x5eed_0001,
            batch_slots: 1 << 20,
            queue_depth: 8,
            announce_window: 16,
            ec_window: 4,
            time_limit: None,
            keys: None,
            stats: None,
            dump_events: None,
        }
    }
}

/// Receives each frame's statistics as soon as the frame is hashed.
pub type FrameSink = Box<dyn FnMut(&FrameStats) + Send>;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub role: Role,
    /// Slots simulated (Bob) or covered by announcements (Alice).
    pub slots: u64,
    pub sifted_bits: u64,
    pub blocks: u64,
    pub failed_blocks: u64,
    pub frames: Vec<FrameStats>,
    pub stats: Vec<RunStats>,
    pub secure_bits: u64,
    /// Sifted bits left over that did not fill a block, plus corrected bits
    /// that did not fill a frame.
    pub unused_bits: u64,
    /// CRC-32 over all key-store records written, in order.
    pub key_digest: u32,
    pub elapsed: Duration,
}

type Outbound = (MsgType, Vec<u8>);

fn send(out: &Sender<Outbound>, t: MsgType, payload: Vec<u8>) -> Result<(), NodeError> {
    out.send((t, payload))
        .map_err(|_| NodeError::PeerDisconnected)
}

#[derive(Debug)]
struct DetBatch {
    events: Vec<DetectionEvent>,
    end_slot: u64,
}

#[derive(Debug)]
struct BlockMeta {
    tally: DecoyTally,
    sifted_bits: u64,
    elapsed_slots: u64,
}

impl BlockMeta {
    fn of(raw: &RawBlock) -> Self {
        BlockMeta {
            tally: raw.tally.clone(),
            sifted_bits: raw.bits.len() as u64,
            elapsed_slots: raw.elapsed_slots,
        }
    }
}

#[derive(Debug)]
struct EcOutcome {
    block: EcBlock,
    meta: BlockMeta,
}

#[derive(Debug, Default)]
struct SiftTotals {
    slots: u64,
    sifted_bits: u64,
    leftover: u64,
}

#[derive(Debug, Default)]
struct PaTotals {
    blocks: u64,
    failed_blocks: u64,
    frames: Vec<FrameStats>,
    stats: Vec<RunStats>,
    secure_bits: u64,
    leftover: u64,
    key_digest: u32,
}

enum Inbox {
    Alice {
        announce: Sender<SiftAnnounce>,
        sample: Sender<SampleMessage>,
        verify: Sender<VerifyMessage>,
    },
    Bob {
        reply: Sender<SiftReply>,
        syndrome: Sender<SyndromeMessage>,
        seed: Sender<PaSeedMessage>,
    },
}

/// Routes inbound frames until SHUTDOWN or end of stream. A closed stage
/// queue means that stage has already stopped; its messages are dropped.
fn reader_loop(mut reader: LinkReader, inbox: Inbox) -> Result<bool, NodeError> {
    while let Some(frame) = reader.recv()? {
        let p = &frame.payload;
        match (frame.msg_type, &inbox) {
            (MsgType::Shutdown, _) => return Ok(true),
            (MsgType::StatsPing, _) => {}
            (MsgType::SiftAnnounce, Inbox::Alice { announce, .. }) => {
                let _ = announce.send(SiftAnnounce::decode(p)?);
            }
            (MsgType::EcSyndrome, Inbox::Alice { sample, .. }) => match EcMessage::decode(p)? {
                EcMessage::Sample(m) => {
                    let _ = sample.send(m);
                }
                EcMessage::Syndrome(_) => {
                    return Err(NodeError::Protocol("syndrome sent to Alice".into()))
                }
            },
            (MsgType::EcVerify, Inbox::Alice { verify, .. }) => {
                let _ = verify.send(VerifyMessage::decode(p)?);
            }
            (MsgType::SiftReply, Inbox::Bob { reply, .. }) => {
                let _ = reply.send(SiftReply::decode(p)?);
            }
            (MsgType::EcSyndrome, Inbox::Bob { syndrome, .. }) => match EcMessage::decode(p)? {
                EcMessage::Syndrome(m) => {
                    let _ = syndrome.send(m);
                }
                EcMessage::Sample(_) => {
                    return Err(NodeError::Protocol("sample sent to Bob".into()))
                }
            },
            (MsgType::PaSeed, Inbox::Bob { seed, .. }) => {
                let _ = seed.send(PaSeedMessage::decode(p)?);
            }
            (t, _) => {
                return Err(NodeError::Protocol(format!(
                    "{t:?} not expected by this role (frame {})",
                    frame.frame_seq
                )))
            }
        }
    }
    Ok(false)
}

fn writer_loop(mut writer: LinkWriter, rx: Receiver<Outbound>) -> Result<(), NodeError> {
    for (t, payload) in rx {
        writer.send(t, payload)?;
    }
    Ok(())
}

fn bob_source(cfg: &NodeConfig, tx: Sender<DetBatch>) -> Result<u64, NodeError> {
    let mut source = PulseSource::new(&cfg.params, derive_seed(cfg.seed, PULSE_STREAM));
    let mut det = DetectorSim::new(
        &cfg.params,
        &cfg.channel,
        derive_seed(cfg.seed, DETECTOR_STREAM),
    );
    let mut dump = match &cfg.dump_events {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let deadline = cfg.time_limit.map(|d| Instant::now() + d);
    let mut done = 0u64;
    while done < cfg.pulses && deadline.is_none_or(|d| Instant::now() < d) {
        let n = (cfg.pulses - done).min(cfg.batch_slots as u64) as usize;
        let batch = source.next_batch(n);
        let mut events = Vec::new();
        det.detect_batch(&batch, &mut events);
        if let Some(d) = dump.as_mut() {
            write_event_dump(d, &events)?;
        }
        done += n as u64;
        if tx
            .send(DetBatch {
                events,
                end_slot: batch.end_slot(),
            })
            .is_err()
        {
            break;
        }
    }
    if let Some(mut d) = dump {
        d.flush()?;
    }
    Ok(done)
}

fn forward_blocks(
    asm: &mut BlockAssembler,
    progress: &crate::sifting::SiftProgress,
    tx: &Sender<RawBlock>,
) -> bool {
    asm.push(&progress.key_bits, &progress.tally, progress.elapsed_slots)
        .into_iter()
        .all(|raw| tx.send(raw).is_ok())
}

fn bob_sift(
    cfg: &NodeConfig,
    det_rx: Receiver<DetBatch>,
    reply_rx: Receiver<SiftReply>,
    out: Sender<Outbound>,
    block_tx: Sender<RawBlock>,
) -> Result<SiftTotals, NodeError> {
    let mut sifter = BobSifter::new();
    let mut asm = BlockAssembler::new(cfg.ec.block_bits);
    let mut totals = SiftTotals::default();
    let mut det_rx = Some(det_rx);
    let idle = never();
    loop {
        if det_rx.is_none() && sifter.pending() == 0 {
            break;
        }
        let accepting = det_rx
            .as_ref()
            .filter(|_| sifter.pending() < cfg.announce_window);
        select! {
            recv(accepting.unwrap_or(&idle)) -> msg => match msg {
                Ok(batch) => {
                    for ann in sifter.announce(&batch.events, batch.end_slot) {
                        send(&out, MsgType::SiftAnnounce, ann.encode())?;
                    }
                }
                Err(_) => det_rx = None,
            },
            recv(reply_rx) -> msg => {
                let reply = msg.map_err(|_| NodeError::PeerDisconnected)?;
                let progress = sifter.on_reply(&reply)?;
                totals.slots += progress.elapsed_slots;
                totals.sifted_bits += progress.key_bits.len() as u64;
                if !forward_blocks(&mut asm, &progress, &block_tx) {
                    return Ok(totals);
                }
            },
        }
    }
    totals.leftover = asm.buffered_bits() as u64;
    Ok(totals)
}

fn alice_sift(
    cfg: &NodeConfig,
    announce_rx: Receiver<SiftAnnounce>,
    out: Sender<Outbound>,
    block_tx: Sender<RawBlock>,
) -> Result<SiftTotals, NodeError> {
    let mut sifter = AliceSifter::new(
        &cfg.params,
        derive_seed(cfg.seed, PULSE_STREAM),
        cfg.batch_slots,
    );
    let mut asm = BlockAssembler::new(cfg.ec.block_bits);
    let mut totals = SiftTotals::default();
    for ann in announce_rx {
        let (reply, progress) = sifter.on_announce(&ann)?;
        send(&out, MsgType::SiftReply, reply.encode())?;
        totals.slots += progress.elapsed_slots;
        totals.sifted_bits += progress.key_bits.len() as u64;
        if !forward_blocks(&mut asm, &progress, &block_tx) {
            return Ok(totals);
        }
    }
    totals.leftover = asm.buffered_bits() as u64;
    Ok(totals)
}

fn alice_ec(
    rec: &Reconciler,
    block_rx: Receiver<RawBlock>,
    sample_rx: Receiver<SampleMessage>,
    verify_rx: Receiver<VerifyMessage>,
    out: Sender<Outbound>,
    pa_tx: Sender<EcOutcome>,
) -> Result<(), NodeError> {
    let mut pool = rec.new_pool();
    let mut blocks: VecDeque<RawBlock> = VecDeque::new();
    let mut samples: VecDeque<SampleMessage> = VecDeque::new();
    let mut awaiting = VecDeque::new();
    let (mut block_rx, mut sample_rx, mut verify_rx) =
        (Some(block_rx), Some(sample_rx), Some(verify_rx));
    let (idle_b, idle_s, idle_v) = (never(), never(), never());
    loop {
        while !blocks.is_empty() && !samples.is_empty() {
            let raw = blocks.pop_front().unwrap();
            let sample = samples.pop_front().unwrap();
            let (msg, pending) = rec.alice_respond(&mut pool, raw.block_id, &raw.bits, &sample)?;
            send(&out, MsgType::EcSyndrome, EcMessage::Syndrome(msg).encode())?;
            awaiting.push_back((pending, BlockMeta::of(&raw)));
        }
        if verify_rx.is_none() {
            if !awaiting.is_empty() {
                return Err(NodeError::PeerDisconnected);
            }
            if block_rx.is_none() && sample_rx.is_none() {
                return Ok(());
            }
        }
        if block_rx.is_none() && sample_rx.is_none() && awaiting.is_empty() {
            return Ok(());
        }
        select! {
            recv(block_rx.as_ref().unwrap_or(&idle_b)) -> m => match m {
                Ok(b) => blocks.push_back(b),
                Err(_) => block_rx = None,
            },
            recv(sample_rx.as_ref().unwrap_or(&idle_s)) -> m => match m {
                Ok(s) => samples.push_back(s),
                Err(_) => sample_rx = None,
            },
            recv(verify_rx.as_ref().unwrap_or(&idle_v)) -> m => match m {
                Ok(v) => {
                    let (pending, meta) = awaiting
                        .pop_front()
                        .ok_or_else(|| NodeError::Protocol(format!("verify for block {} without syndrome", v.block_id)))?;
                    let block = rec.alice_finish(pending, &v)?;
                    if pa_tx.send(EcOutcome { block, meta }).is_err() {
                        return Ok(());
                    }
                }
                Err(_) => verify_rx = None,
            },
        }
    }
}

fn bob_ec(
    rec: &Reconciler,
    window: usize,
    block_rx: Receiver<RawBlock>,
    syndrome_rx: Receiver<SyndromeMessage>,
    out: Sender<Outbound>,
    pa_tx: Sender<EcOutcome>,
) -> Result<(), NodeError> {
    let mut pending = VecDeque::new();
    let mut block_rx = Some(block_rx);
    let idle = never();
    loop {
        if block_rx.is_none() && pending.is_empty() {
            return Ok(());
        }
        let accepting = block_rx.as_ref().filter(|_| pending.len() < window);
        select! {
            recv(accepting.unwrap_or(&idle)) -> m => match m {
                Ok(raw) => {
                    let (sample, p) = rec.bob_start(raw.block_id, &raw.bits);
                    send(&out, MsgType::EcSyndrome, EcMessage::Sample(sample).encode())?;
                    pending.push_back((p, BlockMeta::of(&raw)));
                }
                Err(_) => block_rx = None,
            },
            recv(syndrome_rx) -> m => {
                let msg = m.map_err(|_| NodeError::PeerDisconnected)?;
                let (p, meta) = pending
                    .pop_front()
                    .ok_or_else(|| NodeError::Protocol(format!("syndrome for block {} without sample", msg.block_id)))?;
                let (verify, block) = rec.bob_finish(p, &msg)?;
                // The verdict goes out before the block moves on: Alice needs
                // it to complete the frame whose seed Bob's PA stage awaits.
                send(&out, MsgType::EcVerify, verify.encode())?;
                if pa_tx.send(EcOutcome { block, meta }).is_err() {
                    return Ok(());
                }
            },
        }
    }
}

/// Frame assembly, secure length, seed agreement, hashing and persistence.
struct PaStage<'a> {
    cfg: &'a NodeConfig,
    out: Option<Sender<Outbound>>,
    seed_rx: Option<Receiver<PaSeedMessage>>,
    store: Option<KeyStore>,
    stats: Option<StatsWriter>,
    sink: Option<FrameSink>,
    registry: SeedRegistry,
    digest: crc32fast::Hasher,
    totals: PaTotals,
}

impl PaStage<'_> {
    fn run(mut self, rx: Receiver<EcOutcome>) -> Result<PaTotals, NodeError> {
        let mut asm = FrameAssembler::new(self.cfg.params.pa_dataset_bits as usize);
        for EcOutcome { block, meta } in rx {
            self.totals.blocks += 1;
            self.totals.failed_blocks += u64::from(!block.is_corrected());
            let frames = asm.push_block(BlockInput {
                block_id: block.block_id,
                payload: &block.key,
                leak: block.leak_bits,
                errors: block.corrected_errors,
                tally: meta.tally,
                sifted_bits: meta.sifted_bits,
                elapsed_slots: meta.elapsed_slots,
                failed: !block.is_corrected(),
            });
            for frame in frames {
                self.finish_frame(frame)?;
            }
        }
        self.totals.leftover = asm.buffered_bits() as u64;
        self.totals.key_digest = self.digest.finalize();
        Ok(self.totals)
    }

    fn secure_length(&self, frame: &PaFrame) -> SecureLengthResult {
        let p = &self.cfg.params;
        let n = frame.corrected_bits.len();
        let qber = frame.corrected_errors as f64 / n as f64;
        match decoy_bounds(&frame.tally, p, p.epsilon_security) {
            Ok(bounds) => secure_length(&bounds, qber, frame.leak_bits, 0, p),
            Err(_) => SecureLengthResult {
                secure_bits: 0,
                compression_ratio: 0.0,
                asymptotic_bits: 0,
                raw_bits: 0.0,
                raw_asymptotic_bits: 0.0,
                n1_frame: 0.0,
            },
        }
    }

    fn agree_seed(&mut self, frame_id: u64, secure_bits: u64) -> Result<u64, NodeError> {
        match (&self.out, &self.seed_rx) {
            (Some(out), _) => {
                let mut seed: u64 = rand::random();
                while self.registry.contains(seed) {
                    seed = rand::random();
                }
                let msg = PaSeedMessage {
                    frame_id,
                    seed,
                    secure_bits,
                };
                send(out, MsgType::PaSeed, msg.encode())?;
                Ok(seed)
            }
            (None, Some(rx)) => {
                let msg = rx.recv().map_err(|_| NodeError::PeerDisconnected)?;
                if msg.frame_id != frame_id || msg.secure_bits != secure_bits {
                    return Err(NodeError::Protocol(format!(
                        "PA seed for frame {} with {} bits, local frame {frame_id} has {secure_bits}",
                        msg.frame_id, msg.secure_bits
                    )));
                }
                Ok(msg.seed)
            }
            (None, None) => unreachable!("PA stage without a seed path"),
        }
    }

    fn finish_frame(&mut self, frame: PaFrame) -> Result<(), NodeError> {
        let secure = self.secure_length(&frame);
        let m = secure.secure_bits;
        let n = frame.corrected_bits.len();
        let seed = self.agree_seed(frame.frame_id, m)?;
        let row = RunStats::for_frame(
            &frame,
            m,
            self.totals.secure_bits,
            self.cfg.params.clock_rate_hz,
        );
        let record = FrameStats {
            frame_id: frame.frame_id,
            n_sifted: frame.sifted_bits,
            qber: row.qber,
            n1_lower: secure.n1_frame,
            e1_upper: self.e1_upper(&frame),
            leak_ec: frame.leak_bits,
            secure_bits: m,
            ratio: if frame.sifted_bits == 0 {
                0.0
            } else {
                m as f64 / frame.sifted_bits as f64
            },
        };
        let frame_id = frame.frame_id;
        if m > 0 {
            let toeplitz = ToeplitzSeed::expand(n, m as usize, seed);
            let key = compress_frame(frame, m as usize, &toeplitz, &mut self.registry)?;
            if let Some(store) = self.store.as_mut() {
                store.append(frame_id, &key.key)?;
            }
            self.digest.update(&frame_id.to_be_bytes());
            self.digest.update(&(key.key.len() as u32).to_be_bytes());
            self.digest.update(&key.key.to_bytes());
        }
        if let Some(w) = self.stats.as_mut() {
            w.append(&row)?;
        }
        if let Some(sink) = self.sink.as_mut() {
            sink(&record);
        }
        self.totals.secure_bits += m;
        self.totals.stats.push(row);
        self.totals.frames.push(record);
        Ok(())
    }

    fn e1_upper(&self, frame: &PaFrame) -> f64 {
        let p = &self.cfg.params;
        decoy_bounds(&frame.tally, p, p.epsilon_security).map_or(0.5, |b| b.e1_upper)
    }
}

/// Picks the error to report when several threads failed: a disconnect is
/// usually the echo of a more specific failure elsewhere.
fn first_error(errors: Vec<NodeError>) -> Option<NodeError> {
    let mut fallback = None;
    for e in errors {
        match e {
            NodeError::PeerDisconnected => fallback = Some(e),
            other => return Some(other),
        }
    }
    fallback
}

fn collect<T>(r: thread::Result<Result<T, NodeError>>, errors: &mut Vec<NodeError>) -> Option<T> {
    match r {
        Ok(Ok(v)) => Some(v),
        Ok(Err(e)) => {
            errors.push(e);
            None
        }
        Err(panic) => std::panic::resume_unwind(panic),
    }
}

/// Runs one node to completion over `link`.
pub fn run_node(
    cfg: &NodeConfig,
    link: Link,
    family: Arc<CodeFamily>,
    sink: Option<FrameSink>,
) -> Result<NodeReport, NodeError> {
    let started = Instant::now();
    if cfg.params.pa_dataset_bits == 0 || cfg.ec.block_bits == 0 || cfg.batch_slots == 0 {
        return Err(NodeError::Protocol(
            "frame, block and batch sizes must be positive".into(),
        ));
    }
    let rec = Reconciler::with_family(cfg.ec.clone(), family, derive_seed(cfg.seed, EC_STREAM));
    let store = match &cfg.keys {
        Some(path) => Some(KeyStore::create(path)?),
        None => None,
    };
    let stats = match &cfg.stats {
        Some(path) => Some(StatsWriter::create(path)?),
        None => None,
    };
    let (reader, writer, closer) = link.split();
    let depth = cfg.queue_depth.max(1);
    let (out_tx, out_rx) = bounded::<Outbound>(64);
    let (block_tx, block_rx) = bounded::<RawBlock>(depth);
    let (pa_tx, pa_rx) = bounded::<EcOutcome>(depth);
    let mut errors = Vec::new();

    let (sift, pa, shutdown_seen) = thread::scope(|s| {
        let writer_h = s.spawn(move || writer_loop(writer, out_rx));
        let (sift_h, pa_h, reader_h, extra);
        match cfg.role {
            Role::Bob => {
                let (det_tx, det_rx) = bounded(depth);
                let (reply_tx, reply_rx) = unbounded();
                let (syn_tx, syn_rx) = unbounded();
                let (seed_tx, seed_rx) = unbounded();
                reader_h = s.spawn(move || {
                    reader_loop(
                        reader,
                        Inbox::Bob {
                            reply: reply_tx,
                            syndrome: syn_tx,
                            seed: seed_tx,
                        },
                    )
                });
                extra = Some(s.spawn(move || bob_source(cfg, det_tx)));
                let out = out_tx.clone();
                sift_h = s.spawn(move || bob_sift(cfg, det_rx, reply_rx, out, block_tx));
                let out = out_tx.clone();
                let rec = &rec;
                let ec_h = s
                    .spawn(move || bob_ec(rec, cfg.ec_window.max(1), block_rx, syn_rx, out, pa_tx));
                let stage = PaStage {
                    cfg,
                    out: None,
                    seed_rx: Some(seed_rx),
                    store,
                    stats,
                    sink,
                    registry: SeedRegistry::new(),
                    digest: crc32fast::Hasher::new(),
                    totals: PaTotals::default(),
                };
                pa_h = s.spawn(move || stage.run(pa_rx));
                let ec = ec_h.join();
                collect(ec, &mut errors);
            }
            Role::Alice => {
                let (ann_tx, ann_rx) = unbounded();
                let (sample_tx, sample_rx) = unbounded();
                let (verify_tx, verify_rx) = unbounded();
                reader_h = s.spawn(move || {
                    reader_loop(
                        reader,
                        Inbox::Alice {
                            announce: ann_tx,
                            sample: sample_tx,
                            verify: verify_tx,
                        },
                    )
                });
                extra = None;
                let out = out_tx.clone();
                sift_h = s.spawn(move || alice_sift(cfg, ann_rx, out, block_tx));
                let out = out_tx.clone();
                let rec = &rec;
                let ec_h =
                    s.spawn(move || alice_ec(rec, block_rx, sample_rx, verify_rx, out, pa_tx));
                let stage = PaStage {
                    cfg,
                    out: Some(out_tx.clone()),
                    seed_rx: None,
                    store,
                    stats,
                    sink,
                    registry: SeedRegistry::new(),
                    digest: crc32fast::Hasher::new(),
                    totals: PaTotals::default(),
                };
                pa_h = s.spawn(move || stage.run(pa_rx));
                let ec = ec_h.join();
                collect(ec, &mut errors);
            }
        }
        let slots_simulated = extra.and_then(|h| collect(h.join(), &mut errors));
        let sift = collect(sift_h.join(), &mut errors);
        let pa = collect(pa_h.join(), &mut errors);
        let failed = !errors.is_empty();
        // Bob announces the end after his stages drained; Alice answers once
        // hers have. After a failure the link is torn down instead.
        let shutdown_seen = match cfg.role {
            Role::Bob => {
                if !failed {
                    let _ = out_tx.send((MsgType::Shutdown, Vec::new()));
                }
                drop(out_tx);
                collect(writer_h.join(), &mut errors);
                if failed {
                    closer.close();
                }
                collect(reader_h.join(), &mut errors)
            }
            Role::Alice => {
                let seen = if failed {
                    closer.close();
                    collect(reader_h.join(), &mut errors)
                } else {
                    let seen = collect(reader_h.join(), &mut errors);
                    if seen == Some(true) {
                        let _ = out_tx.send((MsgType::Shutdown, Vec::new()));
                    }
                    seen
                };
                drop(out_tx);
                collect(writer_h.join(), &mut errors);
                seen
            }
        };
        closer.close();
        let sift = sift.map(|mut t: SiftTotals| {
            if let Some(n) = slots_simulated {
                t.slots = n;
            }
            t
        });
        (sift, pa, shutdown_seen)
    });

    if shutdown_seen == Some(false) {
        errors.push(NodeError::PeerDisconnected);
    }
    if let Some(e) = first_error(errors) {
        return Err(e);
    }
    let sift = sift.unwrap_or_default();
    let pa = pa.unwrap_or_default();
    Ok(NodeReport {
        role: cfg.role,
        slots: sift.slots,
        sifted_bits: sift.sifted_bits,
        blocks: pa.blocks,
        failed_blocks: pa.failed_blocks,
        frames: pa.frames,
        stats: pa.stats,
        secure_bits: pa.secure_bits,
        unused_bits: sift.leftover + pa.leftover,
        key_digest: pa.key_digest,
        elapsed: started.elapsed(),
    })
}

/// Both nodes in one process over an in-memory link, sharing one code family.
pub fn run_loopback(
    alice: &NodeConfig,
    bob: &NodeConfig,
    alice_sink: Option<FrameSink>,
    bob_sink: Option<FrameSink>,
) -> Result<(NodeReport, NodeReport), NodeError> {
    if alice.role != Role::Alice || bob.role != Role::Bob {
        return Err(NodeError::Protocol(
            "loopback needs one Alice and one Bob".into(),
        ));
    }
    let family = Arc::new(CodeFamily::new(alice.ec.family)?);
    let (la, lb) = Link::memory_pair();
    let fam_b = Arc::clone(&family);
    thread::scope(|s| {
        let b = s.spawn(move || run_node(bob, lb, fam_b, bob_sink));
        let a = run_node(alice, la, family, alice_sink);
        let b = b.join().unwrap_or_else(|p| std::panic::resume_unwind(p));
        match (a, b) {
            (Ok(a), Ok(b)) => Ok((a, b)),
            (Err(e), Ok(_)) | (Ok(_), Err(e)) => Err(e),
            (Err(ea), Err(eb)) => Err(first_error(vec![ea, eb]).expect("two errors")),
        }
    })
}
