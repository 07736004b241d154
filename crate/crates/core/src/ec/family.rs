//! The rate-adaptive code family and rate selection.
//!
//! Every mother code shares the codeword length `base_cols * lift`; the rate
//! is set by the number of base rows. A block's payload is spread over
//! several codewords, each shortened to carry an equal share, and the rows
//! are split between two adjacent mother codes so that the total syndrome
//! length tracks the target rate to within one circulant.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::code::{construct, CodeDesign, DegreeProfile, LdpcCode};
use super::EcError;
use crate::params::entropy_unchecked;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyConfig {
    pub base_cols: usize,
    pub lift: usize,
    pub min_rate: f64,
    pub max_rate: f64,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            base_cols: 120,
            lift: 1024,
            min_rate: 0.60,
            max_rate: 0.90,
            seed: 0x1d9c_0de5,
        }
    }
}

/// Column-weight profile used for a mother code with `rows` base rows.
pub fn profile_for(rows: usize, cols: usize) -> DegreeProfile {
    DegreeProfile {
        deg2: rows - 1,
        heavy: (cols / 5).min(cols - rows),
        heavy_degree: 10.min(rows),
        spine: usize::from(rows >= 16),
    }
}

/// Lazily built mother codes, shared by all users of the family.
#[derive(Debug)]
pub struct CodeFamily {
    config: FamilyConfig,
    codes: Mutex<HashMap<usize, Arc<LdpcCode>>>,
}

impl CodeFamily {
    pub fn new(config: FamilyConfig) -> Result<Self, EcError> {
        let fam = CodeFamily {
            config,
            codes: Mutex::new(HashMap::new()),
        };
        if fam.min_rows() > fam.max_rows() || fam.min_rows() == 0 {
            return Err(EcError::InvalidCode(format!(
                "empty rate range in {config:?}"
            )));
        }
        Ok(fam)
    }

    pub fn config(&self) -> &FamilyConfig {
        &self.config
    }

    pub fn codeword_bits(&self) -> usize {
        self.config.base_cols * self.config.lift
    }

    /// Fewest base rows, i.e. the highest rate in the family.
    pub fn min_rows(&self) -> usize {
        ((1.0 - self.config.max_rate) * self.config.base_cols as f64 - 1e-9).ceil() as usize
    }

    pub fn max_rows(&self) -> usize {
        ((1.0 - self.config.min_rate) * self.config.base_cols as f64 + 1e-9).floor() as usize
    }

    /// Design rates of all mother codes, highest first.
    pub fn rates(&self) -> Vec<f64> {
        (self.min_rows()..=self.max_rows())
            .map(|r| 1.0 - r as f64 / self.config.base_cols as f64)
            .collect()
    }

    pub fn code(&self, base_rows: usize) -> Result<Arc<LdpcCode>, EcError> {
        if !(self.min_rows()..=self.max_rows()).contains(&base_rows) {
            return Err(EcError::NoCode(format!(
                "{base_rows} base rows outside the family"
            )));
        }
        let mut codes = self.codes.lock().expect("code cache poisoned");
        if let Some(c) = codes.get(&base_rows) {
            return Ok(Arc::clone(c));
        }
        let code = Arc::new(construct(&CodeDesign {
            base_rows,
            base_cols: self.config.base_cols,
            lift: self.config.lift,
            profile: profile_for(base_rows, self.config.base_cols),
            seed: self.config.seed ^ base_rows as u64,
        })?);
        codes.insert(base_rows, Arc::clone(&code));
        Ok(code)
    }

    /// Picks the codeword layout for `payload_bits` at the given estimate.
    ///
    /// The target rate is `1 - f_target * h(qber_est + margin)`, capped at the
    /// family's highest rate. The chosen layout never exceeds the target.
    pub fn select_rate(
        &self,
        qber_est: f64,
        margin: f64,
        f_target: f64,
        payload_bits: usize,
    ) -> Result<RateSelection, EcError> {
        let q = qber_est + margin;
        if !(0.0..0.11).contains(&q) || q.is_nan() {
            return Err(EcError::NoCode(format!(
                "QBER {qber_est:.4} + margin {margin:.4} beyond the code family"
            )));
        }
        if payload_bits == 0 {
            return Err(EcError::NoCode("empty payload".into()));
        }
        self.select_for_target(1.0 - f_target * entropy_unchecked(q), payload_bits)
    }

    /// Picks the codeword layout for `payload_bits` at a target rate, capped
    /// at the family's highest rate. The chosen layout never exceeds the target.
    pub fn select_for_target(
        &self,
        target: f64,
        payload_bits: usize,
    ) -> Result<RateSelection, EcError> {
        if payload_bits == 0 {
            return Err(EcError::NoCode("empty payload".into()));
        }
        let target = target.min(self.config.max_rate);
        if !(target >= self.config.min_rate) {
            return Err(EcError::NoCode(format!(
                "target rate {target:.4} below {}",
                self.config.min_rate
            )));
        }
        let n = self.codeword_bits();
        let lift = self.config.lift;
        let codewords = payload_bits.div_ceil(n);
        let needed_syndrome = ((1.0 - target) * payload_bits as f64).ceil() as usize;
        let total_rows = needed_syndrome
            .div_ceil(lift)
            .max(codewords * self.min_rows());
        let low = total_rows / codewords;
        let n_high = total_rows % codewords;
        if low < self.min_rows() || low + usize::from(n_high > 0) > self.max_rows() {
            return Err(EcError::NoCode(format!(
                "{total_rows} rows over {codewords} codewords"
            )));
        }
        let rows: Vec<usize> = (0..codewords)
            .map(|i| {
                if i >= codewords - n_high {
                    low + 1
                } else {
                    low
                }
            })
            .collect();
        // Payload shares proportional to the rows, so every codeword runs at
        // the same rate; an even split if that overfills a codeword.
        let mut shares: Vec<usize> = rows
            .iter()
            .map(|&r| payload_bits * r / total_rows)
            .collect();
        if shares.iter().any(|&b| b + 1 > n) {
            shares = vec![payload_bits / codewords; codewords];
        }
        let mut rest = payload_bits - shares.iter().sum::<usize>();
        for share in shares.iter_mut().rev() {
            if rest == 0 {
                break;
            }
            *share += 1;
            rest -= 1;
        }
        let segments: Vec<Segment> = rows
            .iter()
            .zip(&shares)
            .map(|(&base_rows, &payload_bits)| Segment {
                base_rows,
                payload_bits,
            })
            .collect();
        let syndrome_bits = total_rows * lift;
        Ok(RateSelection {
            target_rate: target,
            effective_rate: 1.0 - syndrome_bits as f64 / payload_bits as f64,
            segments,
            syndrome_bits,
        })
    }
}

/// One codeword of a block: which mother code and how many payload bits it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub base_rows: usize,
    pub payload_bits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSelection {
    pub target_rate: f64,
    /// `1 - syndrome_bits / payload_bits`.
    pub effective_rate: f64,
    pub segments: Vec<Segment>,
    pub syndrome_bits: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn family() -> CodeFamily {
        CodeFamily::new(FamilyConfig::default()).unwrap()
    }

    #[test]
    fn grid_contains_the_coarse_rates() {
        let rates = family().rates();
        for r in [0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90] {
            assert!(rates.iter().any(|x| (x - r).abs() < 1e-12), "{r}");
        }
        assert!(rates.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn three_percent_selection() {
        let fam = family();
        let sel = fam.select_rate(0.03, 0.0, 1.19, 1 << 20).unwrap();
        let bound = 1.0 - 1.19 * entropy_unchecked(0.03);
        assert!((bound - 0.7687).abs() < 5e-4);
        assert!((sel.target_rate - bound).abs() < 1e-12);
        assert!(sel.effective_rate <= bound);
        // Within one circulant of the target.
        assert!(bound - sel.effective_rate < fam.config().lift as f64 / (1 << 20) as f64);
        let total: usize = sel.segments.iter().map(|s| s.payload_bits).sum();
        assert_eq!(total, 1 << 20);
        for s in &sel.segments {
            assert!(s.payload_bits <= fam.codeword_bits());
        }
        let rate = |s: &Segment| s.payload_bits as f64 / (s.base_rows * fam.config().lift) as f64;
        let (lo, hi) = sel
            .segments
            .iter()
            .map(rate)
            .fold((f64::MAX, 0.0f64), |(a, b), r| (a.min(r), b.max(r)));
        assert!(hi - lo < 0.01, "{lo} {hi}");
    }

    #[test]
    fn full_payload_falls_back_to_even_split() {
        let fam = family();
        let n = fam.codeword_bits();
        let sel = fam.select_rate(0.03, 0.0, 1.19, 2 * n - 1).unwrap();
        assert_eq!(
            sel.segments.iter().map(|s| s.payload_bits).sum::<usize>(),
            2 * n - 1
        );
        assert!(sel.segments.iter().all(|s| s.payload_bits <= n));
    }

    #[test]
    fn zero_qber_takes_the_highest_rate() {
        let fam = family();
        let sel = fam.select_rate(0.0, 0.0, 1.19, 1 << 20).unwrap();
        assert!(sel.segments.iter().all(|s| s.base_rows == fam.min_rows()));
        assert!((sel.target_rate - 0.90).abs() < 1e-12);
    }

    #[test]
    fn high_qber_has_no_code() {
        let fam = family();
        assert!(matches!(
            fam.select_rate(0.12, 0.005, 1.19, 1 << 20),
            Err(EcError::NoCode(_))
        ));
        assert!(matches!(
            fam.select_rate(0.10, 0.0, 1.19, 1 << 20),
            Err(EcError::NoCode(_))
        ));
    }

    #[test]
    fn codes_are_cached_and_deterministic() {
        let a = family();
        let b = family();
        let x = a.code(30).unwrap();
        assert!(Arc::ptr_eq(&x, &a.code(30).unwrap()));
        assert_eq!(*x, *b.code(30).unwrap());
        assert!((x.rate() - 0.75).abs() < 1e-12);
        assert!(a.code(5).is_err());
    }
}
