//! 64-bit verification tags: polynomial evaluation hash over GF(2^64).
//!
//! The key, packed into 64-bit words and followed by a length word, is the
//! coefficient list of a polynomial evaluated at the secret point `r`; the
//! result is masked with `s`. Two distinct inputs of at most `k` words collide
//! with probability at most `(k + 1) / 2^64` over the choice of `r`.

use crate::bits::BitVec;

/// Carry-less product of two 64-bit polynomials.
#[inline]
fn clmul(a: u64, mut b: u64) -> u128 {
    let a = a as u128;
    let mut r = 0u128;
    while b != 0 {
        r ^= a << b.trailing_zeros();
        b &= b - 1;
    }
    r
}

#[inline]
fn reduce(x: u128) -> u64 {
    // x^64 = x^4 + x^3 + x + 1; the second fold carries at most 4 bits.
    let hi = (x >> 64) as u64;
    let lo = x as u64;
    let carry = hi >> 63 ^ hi >> 61 ^ hi >> 60;
    let hi = hi ^ carry;
    lo ^ hi ^ hi << 1 ^ hi << 3 ^ hi << 4
}

/// Product in GF(2^64).
pub fn gf_mul(a: u64, b: u64) -> u64 {
    reduce(clmul(a, b))
}

/// Per-block hash key, drawn fresh from shared randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashSeed {
    pub point: u64,
    pub mask: u64,
}

/// Tag of `key` under `seed`.
pub fn tag(key: &BitVec, seed: HashSeed) -> u64 {
    let mut acc = 0u64;
    for &w in key.words() {
        acc = gf_mul(acc ^ w, seed.point);
    }
    acc = gf_mul(acc ^ key.len() as u64, seed.point);
    acc ^ seed.mask
}

/// Tags of both keys and whether they agree.
pub fn verify(alice: &BitVec, bob: &BitVec, seed: HashSeed) -> (u64, u64, bool) {
    let a = tag(alice, seed);
    let b = tag(bob, seed);
    (a, b, a == b)
}
