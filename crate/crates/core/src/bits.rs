//! Packed bit sequences.
//!
//! Keys, syndromes and sample disclosures are all carried as [`BitVec`], a
//! little-endian packing of bits into `u64` words. Bits past `len` in the last
//! word are always zero, so word-wise equality and hashing are well defined.

use std::fmt;

#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct BitVec {
    words: Vec<u64>,
    len: usize,
}

#[inline]
fn words_for(len: usize) -> usize {
    len.div_ceil(64)
}

impl BitVec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeros(len: usize) -> Self {
        BitVec {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn with_capacity(bits: usize) -> Self {
        BitVec {
            words: Vec::with_capacity(words_for(bits)),
            len: 0,
        }
    }

    /// Builds a vector from raw words; bits beyond `len` are cleared.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        words.resize(words_for(len), 0);
        let mut v = BitVec { words, len };
        v.clear_tail();
        v
    }

    pub fn from_bools<I: IntoIterator<Item = bool>>(bits: I) -> Self {
        let mut v = BitVec::new();
        for b in bits {
            v.push(b);
        }
        v
    }

    /// Unpacks from bytes, LSB first within each byte.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        assert!(
            bytes.len() * 8 >= len,
            "byte buffer too short for {len} bits"
        );
        let mut words = vec![0u64; words_for(len)];
        for (i, &b) in bytes.iter().enumerate().take(len.div_ceil(8)) {
            words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        let mut v = BitVec { words, len };
        v.clear_tail();
        v
    }

    /// Packs into `ceil(len / 8)` bytes, LSB first within each byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push((self.words[i / 8] >> ((i % 8) * 8)) as u8);
        }
        out
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        debug_assert!(i < self.len);
        let mask = 1u64 << (i & 63);
        if value {
            self.words[i >> 6] |= mask;
        } else {
            self.words[i >> 6] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        debug_assert!(i < self.len);
        self.words[i >> 6] ^= 1u64 << (i & 63);
    }

    #[inline]
    pub fn push(&mut self, value: bool) {
        if self.len & 63 == 0 {
            self.words.push(0);
        }
        if value {
            self.words[self.len >> 6] |= 1u64 << (self.len & 63);
        }
        self.len += 1;
    }

    pub fn extend_from_bitvec(&mut self, other: &BitVec) {
        self.extend_from_range(other, 0, other.len);
    }

    /// Appends `other[start..end]`.
    pub fn extend_from_range(&mut self, other: &BitVec, start: usize, end: usize) {
        assert!(start <= end && end <= other.len);
        let mut i = start;
        // Bit-at-a-time until the destination is word aligned.
        while i < end && self.len & 63 != 0 {
            self.push(other.get(i));
            i += 1;
        }
        while i + 64 <= end {
            self.words.push(other.word_at(i));
            self.len += 64;
            i += 64;
        }
        while i < end {
            self.push(other.get(i));
            i += 1;
        }
    }

    /// The 64 bits starting at arbitrary bit offset `pos`, zero-filled past the end.
    #[inline]
    pub fn word_at(&self, pos: usize) -> u64 {
        let w = pos >> 6;
        let sh = pos & 63;
        let lo = self.words.get(w).copied().unwrap_or(0);
        if sh == 0 {
            lo
        } else {
            let hi = self.words.get(w + 1).copied().unwrap_or(0);
            (lo >> sh) | (hi << (64 - sh))
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> BitVec {
        let mut out = BitVec::with_capacity(end - start);
        out.extend_from_range(self, start, end);
        out
    }

    pub fn truncate(&mut self, len: usize) {
        if len < self.len {
            self.len = len;
            self.words.truncate(words_for(len));
            self.clear_tail();
        }
    }

    /// Removes and returns the first `n` bits.
    pub fn drain_front(&mut self, n: usize) -> BitVec {
        assert!(n <= self.len);
        let head = self.slice(0, n);
        let tail = self.slice(n, self.len);
        *self = tail;
        head
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming_distance(&self, other: &BitVec) -> usize {
        assert_eq!(self.len, other.len, "hamming distance of unequal lengths");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn xor_assign(&mut self, other: &BitVec) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    fn clear_tail(&mut self) {
        let r = self.len & 63;
        if r != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << r) - 1;
            }
        }
    }
}

impl fmt::Debug for BitVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVec[{}; ", self.len)?;
        for b in self.iter().take(64) {
            f.write_str(if b { "1" } else { "0" })?;
        }
        if self.len > 64 {
            f.write_str("…")?;
        }
        f.write_str("]")
    }
}

impl FromIterator<bool> for BitVec {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        BitVec::from_bools(iter)
    }
}
