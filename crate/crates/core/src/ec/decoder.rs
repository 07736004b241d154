//! Layered normalized min-sum decoding against a known syndrome.
//!
//! Each base row of the protograph is one layer: its `lift` check nodes touch
//! disjoint variables, so a whole layer is updated as a block. Check-to-variable
//! messages are kept per circulant as `lift`-long arrays indexed by the check's
//! position within the circulant.

use crate::bits::BitVec;

use super::code::LdpcCode;

/// Large finite LLR standing in for "known": shortened positions are zero on
/// both sides. Finite so that `x - x` never produces NaN.
const KNOWN_LLR: f32 = 1.0e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub max_iterations: usize,
    pub normalization: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            max_iterations: 60,
            normalization: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeOutcome {
    /// Hard decision whose syndrome matches the target.
    Converged { word: BitVec, iterations: usize },
    /// Syndrome still unsatisfied after the iteration budget.
    Failed { word: BitVec, iterations: usize },
}

impl DecodeOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, DecodeOutcome::Converged { .. })
    }

    pub fn iterations(&self) -> usize {
        match self {
            DecodeOutcome::Converged { iterations, .. }
            | DecodeOutcome::Failed { iterations, .. } => *iterations,
        }
    }

    pub fn word(&self) -> &BitVec {
        match self {
            DecodeOutcome::Converged { word, .. } | DecodeOutcome::Failed { word, .. } => word,
        }
    }

    pub fn into_word(self) -> Option<BitVec> {
        match self {
            DecodeOutcome::Converged { word, .. } => Some(word),
            DecodeOutcome::Failed { .. } => None,
        }
    }
}

/// Log-likelihood ratio of a binary symmetric channel with crossover `p`.
pub fn bsc_llr(p: f64) -> f32 {
    let p = p.clamp(1e-6, 0.5 - 1e-6);
    ((1.0 - p) / p).ln() as f32
}

/// Decodes `noisy` (length `code.n()`) towards the codeword whose syndrome is
/// `target`. `known` marks positions fixed to zero (shortened).
pub fn decode(
    code: &LdpcCode,
    noisy: &BitVec,
    known: &BitVec,
    target: &BitVec,
    crossover: f64,
    config: &DecoderConfig,
) -> DecodeOutcome {
    let n = code.n();
    let l = code.lift();
    assert_eq!(noisy.len(), n);
    assert_eq!(known.len(), n);
    assert_eq!(target.len(), code.m());

    let mag = bsc_llr(crossover);
    let mut posterior: Vec<f32> = (0..n)
        .map(|i| {
            if known.get(i) {
                KNOWN_LLR
            } else if noisy.get(i) {
                -mag
            } else {
                mag
            }
        })
        .collect();

    let hard = |post: &[f32]| -> BitVec {
        let mut w = BitVec::zeros(n);
        for (i, &v) in post.iter().enumerate() {
            if v < 0.0 {
                w.set(i, true);
            }
        }
        w
    };

    let word = hard(&posterior);
    if code.syndrome(&word).expect("length checked") == *target {
        return DecodeOutcome::Converged {
            word,
            iterations: 0,
        };
    }

    // +1.0 / -1.0 per check, folding the syndrome bit into the sign product.
    let check_sign: Vec<f32> = (0..code.m())
        .map(|i| if target.get(i) { -1.0 } else { 1.0 })
        .collect();

    let max_deg = (0..code.base_rows())
        .map(|r| code.row_entries(r).len())
        .max()
        .unwrap_or(0);
    let mut messages = vec![0f32; code.entries().len() * l];
    let mut t = vec![0f32; max_deg * l];
    let mut min1 = vec![0f32; l];
    let mut min2 = vec![0f32; l];
    let mut argmin = vec![0u16; l];
    let mut sign = vec![0f32; l];
    let alpha = config.normalization;

    let mut entry_base = 0;
    let mut row_offsets = Vec::with_capacity(code.base_rows());
    for r in 0..code.base_rows() {
        row_offsets.push(entry_base);
        entry_base += code.row_entries(r).len();
    }

    for iter in 1..=config.max_iterations {
        for r in 0..code.base_rows() {
            let entries = code.row_entries(r);
            let first = row_offsets[r];
            min1.iter_mut().for_each(|x| *x = f32::MAX);
            min2.iter_mut().for_each(|x| *x = f32::MAX);
            sign.copy_from_slice(&check_sign[r * l..(r + 1) * l]);

            for (k, e) in entries.iter().enumerate() {
                let msg = &messages[(first + k) * l..(first + k + 1) * l];
                let tk = &mut t[k * l..(k + 1) * l];
                let col = &posterior[e.col * l..(e.col + 1) * l];
                // tk[i] = posterior[col][(i + shift) % l] - msg[i]
                let (head, tail) = col.split_at(e.shift);
                let split = l - e.shift;
                for ((o, &p), &m) in tk[..split].iter_mut().zip(tail).zip(&msg[..split]) {
                    *o = p - m;
                }
                for ((o, &p), &m) in tk[split..].iter_mut().zip(head).zip(&msg[split..]) {
                    *o = p - m;
                }
                for i in 0..l {
                    let v = tk[i];
                    let a = v.abs();
                    sign[i] = if v < 0.0 { -sign[i] } else { sign[i] };
                    if a < min1[i] {
                        min2[i] = min1[i];
                        min1[i] = a;
                        argmin[i] = k as u16;
                    } else if a < min2[i] {
                        min2[i] = a;
                    }
                }
            }

            for (k, e) in entries.iter().enumerate() {
                let msg = &mut messages[(first + k) * l..(first + k + 1) * l];
                let tk = &t[k * l..(k + 1) * l];
                for i in 0..l {
                    let m = if argmin[i] as usize == k {
                        min2[i]
                    } else {
                        min1[i]
                    };
                    let s = if tk[i] < 0.0 { -sign[i] } else { sign[i] };
                    msg[i] = alpha * s * m;
                }
                let col = &mut posterior[e.col * l..(e.col + 1) * l];
                let split = l - e.shift;
                let (head, tail) = col.split_at_mut(e.shift);
                for ((p, &tv), &m) in tail.iter_mut().zip(&tk[..split]).zip(&msg[..split]) {
                    *p = tv + m;
                }
                for ((p, &tv), &m) in head.iter_mut().zip(&tk[split..]).zip(&msg[split..]) {
                    *p = tv + m;
                }
            }
        }

        let word = hard(&posterior);
        if code.syndrome(&word).expect("length checked") == *target {
            return DecodeOutcome::Converged {
                word,
                iterations: iter,
            };
        }
        if iter == config.max_iterations {
            return DecodeOutcome::Failed {
                word,
                iterations: iter,
            };
        }
    }
    DecodeOutcome::Failed {
        word: hard(&posterior),
        iterations: config.max_iterations,
    }
}
