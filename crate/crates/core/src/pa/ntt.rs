//! Number-theoretic transform over the prime 3·2^30 + 1.
//!
//! Elements are `u32` in ordinary form; twiddles are kept in Montgomery form
//! (multiplied by 2^32) so that one Montgomery product with a twiddle yields
//! an ordinary-form result. Lengths are powers of two up to 2^30.

/// 3·2^30 + 1.
pub const PRIME: u32 = 3_221_225_473;
/// Multiplicative generator of the field.
pub const GENERATOR: u32 = 5;
/// Largest supported transform length (the 2-adic order of `PRIME - 1`).
pub const MAX_LOG_LEN: u32 = 30;

const P64: u64 = PRIME as u64;
/// PRIME^-1 mod 2^32.
const P_INV: u32 = 0x4000_0001;
/// 2^64 mod PRIME, the Montgomery form of R.
const R2: u64 = ((1u128 << 64) % PRIME as u128) as u64;

#[inline(always)]
pub fn add(a: u32, b: u32) -> u32 {
    let s = a as u64 + b as u64;
    if s >= P64 {
        (s - P64) as u32
    } else {
        s as u32
    }
}

#[inline(always)]
pub fn sub(a: u32, b: u32) -> u32 {
    if a >= b {
        a - b
    } else {
        (a as u64 + P64 - b as u64) as u32
    }
}

/// a·b·2^-32 mod p.
#[inline(always)]
pub fn mont_mul(a: u32, b: u32) -> u32 {
    let t = a as u64 * b as u64;
    let m = (t as u32).wrapping_mul(P_INV);
    let mp = m as u64 * P64;
    // Low halves of t and mp agree, so the difference is exact in the high half.
    let (hi_t, hi_mp) = ((t >> 32) as u32, (mp >> 32) as u32);
    if hi_t >= hi_mp {
        hi_t - hi_mp
    } else {
        (hi_t as u64 + P64 - hi_mp as u64) as u32
    }
}

#[inline]
pub fn to_mont(a: u32) -> u32 {
    mont_mul(a, R2 as u32)
}

pub fn pow_mod(base: u32, mut exp: u64) -> u32 {
    let mut acc = 1u64;
    let mut b = base as u64 % P64;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * b % P64;
        }
        b = b * b % P64;
        exp >>= 1;
    }
    acc as u32
}

/// Primitive root of unity of order `len`.
pub fn root_of_unity(len: usize) -> u32 {
    assert!(len.is_power_of_two() && len.trailing_zeros() <= MAX_LOG_LEN);
    pow_mod(GENERATOR, (P64 - 1) / len as u64)
}

/// Montgomery-form powers w^0 .. w^(len/2 - 1) of the order-`len` root.
fn twiddles(len: usize) -> Vec<u32> {
    let half = len / 2;
    let mut tw = Vec::with_capacity(half.max(1));
    let w = to_mont(root_of_unity(len));
    let mut cur = to_mont(1);
    for _ in 0..half.max(1) {
        tw.push(cur);
        cur = mont_mul(cur, w);
    }
    tw
}

/// Precomputed tables for one transform length.
#[derive(Debug, Clone)]
pub struct Ntt {
    len: usize,
    tw: Vec<u32>,
}

impl Ntt {
    pub fn new(len: usize) -> Self {
        assert!(len.is_power_of_two(), "length {len} is not a power of two");
        assert!(
            len.trailing_zeros() <= MAX_LOG_LEN,
            "length {len} exceeds 2^{MAX_LOG_LEN}"
        );
        Ntt {
            len,
            tw: twiddles(len),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Decimation in frequency: natural order in, bit-reversed order out.
    pub fn forward(&self, a: &mut [u32]) {
        assert_eq!(a.len(), self.len);
        let n = self.len;
        let mut half = n / 2;
        while half >= 1 {
            let stride = n / (2 * half);
            for block in a.chunks_exact_mut(2 * half) {
                let (lo, hi) = block.split_at_mut(half);
                let (u0, v0) = (lo[0], hi[0]);
                lo[0] = add(u0, v0);
                hi[0] = sub(u0, v0);
                for j in 1..half {
                    let (u, v) = (lo[j], hi[j]);
                    lo[j] = add(u, v);
                    hi[j] = mont_mul(sub(u, v), self.tw[j * stride]);
                }
            }
            half /= 2;
        }
    }

    /// Decimation in time: bit-reversed order in, natural order out, scaled by 1/len.
    pub fn inverse(&self, a: &mut [u32]) {
        self.inverse_unscaled(a);
        let scale = to_mont(pow_mod(self.len as u32 % PRIME, P64 - 2));
        for x in a.iter_mut() {
            *x = mont_mul(*x, scale);
        }
    }

    /// Inverse transform without the 1/len factor.
    pub fn inverse_unscaled(&self, a: &mut [u32]) {
        assert_eq!(a.len(), self.len);
        let n = self.len;
        let mut half = 1;
        while half < n {
            let stride = n / (2 * half);
            for block in a.chunks_exact_mut(2 * half) {
                let (lo, hi) = block.split_at_mut(half);
                let (u0, v0) = (lo[0], hi[0]);
                lo[0] = add(u0, v0);
                hi[0] = sub(u0, v0);
                // w^-j = -w^(n/2 - j): multiply by the positive power and swap the signs.
                for j in 1..half {
                    let u = lo[j];
                    let v = mont_mul(hi[j], self.tw[n / 2 - j * stride]);
                    lo[j] = sub(u, v);
                    hi[j] = add(u, v);
                }
            }
            half *= 2;
        }
    }

    /// Exact cyclic convolution of `a` and `b` (both consumed as workspace);
    /// the result is left in `a`.
    pub fn cyclic_convolve(&self, a: &mut [u32], b: &mut [u32]) {
        self.forward(a);
        self.forward(b);
        for (x, &y) in a.iter_mut().zip(b.iter()) {
            *x = mont_mul(*x, y);
        }
        // Pointwise Montgomery products carry a 2^-32 factor; undo it with the 1/len scale.
        self.inverse_unscaled(a);
        let inv_len = pow_mod(self.len as u32 % PRIME, P64 - 2);
        let scale = to_mont(to_mont(inv_len));
        for x in a.iter_mut() {
            *x = mont_mul(*x, scale);
        }
    }
}
