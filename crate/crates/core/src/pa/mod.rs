//! Privacy amplification by Toeplitz hashing.
//!
//! The m×n Toeplitz matrix is defined by n + m − 1 seed bits with
//! `T[i][j] = s[i − j + n − 1]`, so `y = T·x` is a window of the linear
//! convolution of `x` with `s`. [`toeplitz_ntt`] evaluates it exactly with an
//! integer convolution over a prime field (every sum is at most n, far below
//! the prime) and keeps the parity of each output coefficient.

pub mod ntt;

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64Mcg;
use thiserror::Error;

use crate::bits::BitVec;
use crate::codec::{DecodeError, Reader, Writer};
use crate::sifting::DecoyTally;

use self::ntt::Ntt;

/// Largest input the hashing stage accepts.
pub const MAX_INPUT_BITS: usize = 1 << 27;
/// Largest convolution length used by [`toeplitz_ntt`].
pub const MAX_TRANSFORM_LEN: usize = 1 << 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PaError {
    #[error("seed has {actual} bits, expected n + m - 1 = {expected}")]
    SeedLength { expected: usize, actual: usize },
    #[error("input has {actual} bits, seed expects {expected}")]
    InputLength { expected: usize, actual: usize },
    #[error("input of {0} bits exceeds the {MAX_INPUT_BITS}-bit limit")]
    TooLarge(usize),
    #[error("output of {m} bits exceeds a third of the {n}-bit input")]
    AboveCeiling { m: usize, n: usize },
    #[error("Toeplitz seed {0:#018x} was already used for another frame")]
    SeedReuse(u64),
    #[error("spot check failed at output row {0}")]
    SpotCheck(usize),
}

/// Seed bits of an m×n Toeplitz matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzSeed {
    n: usize,
    m: usize,
    bits: BitVec,
    id: u64,
}

impl ToeplitzSeed {
    pub fn new(n: usize, m: usize, bits: BitVec) -> Result<Self, PaError> {
        let expected = (n + m).saturating_sub(1);
        if bits.len() != expected {
            return Err(PaError::SeedLength {
                expected,
                actual: bits.len(),
            });
        }
        let mut h = DefaultHasher::new();
        bits.hash(&mut h);
        (n, m).hash(&mut h);
        Ok(ToeplitzSeed {
            n,
            m,
            bits,
            id: h.finish(),
        })
    }

    /// Deterministic expansion of a 64-bit seed shared over the link.
    pub fn expand(n: usize, m: usize, seed: u64) -> Self {
        let len = (n + m).saturating_sub(1);
        let mut rng = Pcg64Mcg::seed_from_u64(seed);
        let words = (0..len.div_ceil(64)).map(|_| rng.next_u64()).collect();
        ToeplitzSeed {
            n,
            m,
            bits: BitVec::from_words(words, len),
            id: seed,
        }
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    pub fn output_len(&self) -> usize {
        self.m
    }

    pub fn bits(&self) -> &BitVec {
        &self.bits
    }

    /// Identity used for reuse detection.
    pub fn id(&self) -> u64 {
        self.id
    }

    fn check_input(&self, input: &BitVec) -> Result<(), PaError> {
        if input.len() != self.n {
            return Err(PaError::InputLength {
                expected: self.n,
                actual: input.len(),
            });
        }
        Ok(())
    }
}

/// `r[t] = s[len − 1 − t]`.
fn reversed(s: &BitVec) -> BitVec {
    let len = s.len() as isize;
    let words = (0..s.words().len() as isize)
        .map(|w| {
            let start = len - 64 * (w + 1);
            if start >= 0 {
                s.word_at(start as usize).reverse_bits()
            } else {
                (s.word_at(0) << (-start)).reverse_bits()
            }
        })
        .collect();
    BitVec::from_words(words, s.len())
}

/// Evaluates single output rows of `T·x` directly.
pub struct RowEvaluator<'a> {
    rev: BitVec,
    input: &'a BitVec,
    m: usize,
}

impl<'a> RowEvaluator<'a> {
    pub fn new(seed: &ToeplitzSeed, input: &'a BitVec) -> Result<Self, PaError> {
        seed.check_input(input)?;
        Ok(RowEvaluator {
            rev: reversed(&seed.bits),
            input,
            m: seed.m,
        })
    }

    /// Output bit `i`: parity of `x` AND-ed with matrix row `i`.
    pub fn row(&self, i: usize) -> bool {
        assert!(i < self.m);
        // Row i is r[m − 1 − i + j] for j in 0..n.
        let base = self.m - 1 - i;
        let parity = self
            .input
            .words()
            .iter()
            .enumerate()
            .fold(0u32, |acc, (k, &x)| {
                acc ^ (self.rev.word_at(base + 64 * k) & x).count_ones()
            });
        parity & 1 == 1
    }
}

/// Reference O(n·m) evaluation of `T·x`.
pub fn toeplitz_direct(seed: &ToeplitzSeed, input: &BitVec) -> Result<BitVec, PaError> {
    if seed.m == 0 {
        seed.check_input(input)?;
        return Ok(BitVec::new());
    }
    let eval = RowEvaluator::new(seed, input)?;
    Ok((0..seed.m).map(|i| eval.row(i)).collect())
}

// Both nodes of a loopback run share one process; one large transform at a
// time keeps peak memory to a single pair of buffers.
static LARGE_TRANSFORM: Mutex<()> = Mutex::new(());

/// `T·x` via an exact prime-field convolution.
pub fn toeplitz_ntt(seed: &ToeplitzSeed, input: &BitVec) -> Result<BitVec, PaError> {
    seed.check_input(input)?;
    let (n, m) = (seed.n, seed.m);
    if n > MAX_INPUT_BITS {
        return Err(PaError::TooLarge(n));
    }
    if m == 0 || n == 0 {
        return Ok(BitVec::zeros(m));
    }
    let len = (n + m - 1).next_power_of_two();
    if len > MAX_TRANSFORM_LEN {
        return Err(PaError::TooLarge(n + m - 1));
    }
    let _guard =
        (len >= 1 << 22).then(|| LARGE_TRANSFORM.lock().unwrap_or_else(|e| e.into_inner()));

    let unpack = |bits: &BitVec| {
        let mut v = vec![0u32; len];
        for (k, &w) in bits.words().iter().enumerate() {
            let mut w = w;
            while w != 0 {
                v[64 * k + w.trailing_zeros() as usize] = 1;
                w &= w - 1;
            }
        }
        v
    };
    let mut a = unpack(input);
    let mut b = unpack(&seed.bits);
    Ntt::new(len).cyclic_convolve(&mut a, &mut b);
    drop(b);
    // y_i = c[i + n − 1]; the cyclic wrap only touches indices below n − 1.
    Ok(a[n - 1..n - 1 + m].iter().map(|&c| c & 1 == 1).collect())
}

/// Checks `output` against directly evaluated rows.
pub fn spot_check(
    seed: &ToeplitzSeed,
    input: &BitVec,
    output: &BitVec,
    rows: &[usize],
) -> Result<(), PaError> {
    let eval = RowEvaluator::new(seed, input)?;
    for &i in rows {
        if eval.row(i) != output.get(i) {
            return Err(PaError::SpotCheck(i));
        }
    }
    Ok(())
}

/// Exactly `pa_dataset_bits` error-corrected bits ready for hashing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaFrame {
    pub frame_id: u64,
    pub corrected_bits: BitVec,
    pub block_ids: Vec<u64>,
    pub leak_bits: u64,
    pub tally: DecoyTally,
    /// Bit errors corrected in the contributing payload bits.
    pub corrected_errors: u64,
    /// Sifted bits of the blocks attributed to this frame, discarded ones included.
    pub sifted_bits: u64,
    /// Simulated slots attributed to this frame.
    pub elapsed_slots: u64,
    pub blocks: u64,
    pub failed_blocks: u64,
}

/// One reconciled (or discarded) block on its way into a frame.
#[derive(Debug, Clone)]
pub struct BlockInput<'a> {
    pub block_id: u64,
    /// Empty for a discarded block.
    pub payload: &'a BitVec,
    pub leak: u64,
    pub errors: u64,
    pub tally: DecoyTally,
    pub sifted_bits: u64,
    pub elapsed_slots: u64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
struct Contribution {
    block_id: u64,
    remaining: usize,
    len: usize,
    leak: u64,
    errors: u64,
}

/// Packs verified EC payloads into fixed-size frames. Bits beyond a frame
/// boundary spill into the next frame. A block's tally, sifted bits and
/// slots go to the frame holding its first bit (for a discarded block, the
/// next frame to be cut); leakage and error counts are split in proportion
/// to bits, rounding leakage up.
#[derive(Debug)]
pub struct FrameAssembler {
    frame_bits: usize,
    next_frame_id: u64,
    buffer: BitVec,
    contributions: Vec<Contribution>,
    open: PaFrame,
}

impl FrameAssembler {
    pub fn new(frame_bits: usize) -> Self {
        assert!(frame_bits > 0);
        FrameAssembler {
            frame_bits,
            next_frame_id: 0,
            buffer: BitVec::new(),
            contributions: Vec::new(),
            open: Self::empty_frame(0),
        }
    }

    fn empty_frame(frame_id: u64) -> PaFrame {
        PaFrame {
            frame_id,
            corrected_bits: BitVec::new(),
            block_ids: Vec::new(),
            leak_bits: 0,
            tally: DecoyTally::default(),
            corrected_errors: 0,
            sifted_bits: 0,
            elapsed_slots: 0,
            blocks: 0,
            failed_blocks: 0,
        }
    }

    pub fn buffered_bits(&self) -> usize {
        self.buffer.len()
    }

    pub fn push_block(&mut self, block: BlockInput<'_>) -> Vec<PaFrame> {
        // The buffer always holds less than one frame here, so the first bit
        // of this block lands in the frame that is cut next.
        self.open.tally.merge(&block.tally);
        self.open.sifted_bits += block.sifted_bits;
        self.open.elapsed_slots += block.elapsed_slots;
        self.open.blocks += 1;
        self.open.failed_blocks += u64::from(block.failed);
        if !block.payload.is_empty() {
            self.buffer.extend_from_bitvec(block.payload);
            self.contributions.push(Contribution {
                block_id: block.block_id,
                remaining: block.payload.len(),
                len: block.payload.len(),
                leak: block.leak,
                errors: block.errors,
            });
        }
        let mut frames = Vec::new();
        while self.buffer.len() >= self.frame_bits {
            frames.push(self.cut());
        }
        frames
    }

    fn cut(&mut self) -> PaFrame {
        self.next_frame_id += 1;
        let mut frame = std::mem::replace(&mut self.open, Self::empty_frame(self.next_frame_id));
        frame.corrected_bits = self.buffer.drain_front(self.frame_bits);
        let mut need = self.frame_bits;
        for c in self.contributions.iter_mut() {
            if need == 0 {
                break;
            }
            let take = c.remaining.min(need);
            let len = c.len as u128;
            let consumed_before = (c.len - c.remaining) as u128;
            let consumed_after = consumed_before + take as u128;
            // Cumulative ceil split so the parts add up to the block total.
            let share = |total: u64, upto: u128| (total as u128 * upto).div_ceil(len) as u64;
            frame.leak_bits += share(c.leak, consumed_after) - share(c.leak, consumed_before);
            frame.corrected_errors +=
                share(c.errors, consumed_after) - share(c.errors, consumed_before);
            frame.block_ids.push(c.block_id);
            c.remaining -= take;
            need -= take;
        }
        self.contributions.retain(|c| c.remaining > 0);
        frame
    }
}

/// Alice to Bob: the Toeplitz seed and output length for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaSeedMessage {
    pub frame_id: u64,
    pub seed: u64,
    pub secure_bits: u64,
}

impl PaSeedMessage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.frame_id).u64(self.seed).u64(self.secure_bits);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf);
        let msg = PaSeedMessage {
            frame_id: r.u64()?,
            seed: r.u64()?,
            secure_bits: r.u64()?,
        };
        r.finish()?;
        Ok(msg)
    }
}

/// Final key of one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMaterial {
    pub frame_id: u64,
    pub key: BitVec,
}

/// Seeds already consumed by this node.
#[derive(Debug, Default)]
pub struct SeedRegistry {
    used: HashSet<u64>,
}

impl SeedRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.used.contains(&id)
    }
}

/// Hashes a frame down to `secure_bits`. A seed may serve only one frame.
pub fn compress_frame(
    frame: PaFrame,
    secure_bits: usize,
    seed: &ToeplitzSeed,
    registry: &mut SeedRegistry,
) -> Result<KeyMaterial, PaError> {
    let n = frame.corrected_bits.len();
    if secure_bits == 0 {
        return Ok(KeyMaterial {
            frame_id: frame.frame_id,
            key: BitVec::new(),
        });
    }
    if secure_bits > n / 3 {
        return Err(PaError::AboveCeiling { m: secure_bits, n });
    }
    if seed.output_len() != secure_bits {
        return Err(PaError::SeedLength {
            expected: n + secure_bits - 1,
            actual: seed.bits.len(),
        });
    }
    if registry.used.contains(&seed.id) {
        return Err(PaError::SeedReuse(seed.id));
    }
    let key = toeplitz_ntt(seed, &frame.corrected_bits)?;
    registry.used.insert(seed.id);
    Ok(KeyMaterial {
        frame_id: frame.frame_id,
        key,
    })
}

/// One key-store record: big-endian frame id (u64) and key length in bits
/// (u32), the key bytes (LSB first), then a big-endian CRC-32 of all of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyRecord {
    pub frame_id: u64,
    pub key: BitVec,
}

fn encode_record(frame_id: u64, key: &BitVec) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + key.len().div_ceil(8));
    buf.extend_from_slice(&frame_id.to_be_bytes());
    buf.extend_from_slice(&(key.len() as u32).to_be_bytes());
    buf.extend_from_slice(&key.to_bytes());
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_be_bytes());
    buf
}

/// Append-only key file.
#[derive(Debug)]
pub struct KeyStore {
    path: PathBuf,
    file: File,
}

impl KeyStore {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(KeyStore {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Starts an empty store, discarding any previous contents.
    pub fn create(path: &Path) -> io::Result<Self> {
        File::create(path)?.sync_all()?;
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one record and syncs it to disk.
    pub fn append(&mut self, frame_id: u64, key: &BitVec) -> io::Result<()> {
        let rec = encode_record(frame_id, key);
        let mut w = BufWriter::new(&mut self.file);
        w.write_all(&rec)?;
        w.flush()?;
        drop(w);
        self.file.sync_data()
    }
}

/// Contents of a key file: the longest checksum-valid prefix of records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyStoreContents {
    pub records: Vec<KeyRecord>,
    pub valid_bytes: u64,
    /// Bytes after the valid prefix (an interrupted or corrupted write).
    pub trailing_bytes: u64,
}

pub fn read_key_store(path: &Path) -> io::Result<KeyStoreContents> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Ok(parse_key_store(&bytes))
}

pub fn parse_key_store(bytes: &[u8]) -> KeyStoreContents {
    let mut out = KeyStoreContents::default();
    let mut pos = 0usize;
    while bytes.len() - pos >= 16 {
        let frame_id = u64::from_be_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let len = u32::from_be_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize;
        let body = 12 + len.div_ceil(8);
        if bytes.len() - pos < body + 4 {
            break;
        }
        let crc = u32::from_be_bytes(bytes[pos + body..pos + body + 4].try_into().unwrap());
        if crc32fast::hash(&bytes[pos..pos + body]) != crc {
            break;
        }
        out.records.push(KeyRecord {
            frame_id,
            key: BitVec::from_bytes(&bytes[pos + 12..pos + body], len),
        });
        pos += body + 4;
    }
    out.valid_bytes = pos as u64;
    out.trailing_bytes = (bytes.len() - pos) as u64;
    out
}
