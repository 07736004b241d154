//! Protocol and link configuration, plus the closed-form quantities derived
//! from it: sifting efficiency, binary entropy, per-pulse detection
//! probability and the asymptotic key rate.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamsError {
    #[error("binary entropy argument {0} outside [0, 1]")]
    EntropyDomain(f64),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("unknown config key `{key}` on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid parameters: {0}")]
    Invalid(ValidationReport),
    #[error("reading config: {0}")]
    Io(String),
}

/// Decoy-state BB84 settings shared by both nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolParams {
    pub clock_rate_hz: f64,
    pub flux_signal: f64,
    pub flux_decoy: f64,
    pub flux_vacuum: f64,
    pub prob_signal: f64,
    pub prob_decoy: f64,
    pub prob_vacuum: f64,
    pub prob_z: f64,
    pub prob_x: f64,
    pub prob_stabilization: f64,
    pub pa_dataset_bits: u64,
    pub epsilon_security: f64,
}

/// Largest privacy-amplification frame the hashing stage accepts.
pub const MAX_PA_DATASET_BITS: u64 = 1 << 27;

/// 96 x 1024 x 1024 bits.
pub const DEFAULT_PA_DATASET_BITS: u64 = 96 * 1024 * 1024;

impl Default for ProtocolParams {
    fn default() -> Self {
        ProtocolParams {
            clock_rate_hz: 1.0e9,
            flux_signal: 0.4,
            flux_decoy: 0.1,
            flux_vacuum: 0.0007,
            prob_signal: 0.96973,
            prob_decoy: 0.01661,
            prob_vacuum: 0.01466,
            prob_z: 0.96677,
            prob_x: 0.03323,
            prob_stabilization: 1.0 / 128.0,
            pa_dataset_bits: DEFAULT_PA_DATASET_BITS,
            epsilon_security: 1e-10,
        }
    }
}

/// Quantum channel and single-photon detector model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDetectorParams {
    pub channel_loss_db: f64,
    pub detector_efficiency: f64,
    pub receiver_loss_db: f64,
    /// Per detector, per gate.
    pub dark_count_prob: f64,
    pub afterpulse_prob: f64,
    pub misalignment_error: f64,
}

impl Default for ChannelDetectorParams {
    fn default() -> Self {
        ChannelDetectorParams {
            channel_loss_db: 2.0,
            detector_efficiency: 0.31,
            receiver_loss_db: 2.0,
            // 450 kHz combined over two detectors gated at 1 GHz.
            dark_count_prob: 2.25e-4,
            afterpulse_prob: 0.044,
            misalignment_error: 0.0055,
        }
    }
}

/// Result of [`ProtocolParams::validate`]; empty means valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn check(&mut self, ok: bool, rule: &str) {
        if !ok {
            self.violations.push(rule.to_string());
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            f.write_str("ok")
        } else {
            f.write_str(&self.violations.join("; "))
        }
    }
}

// Table 1 intensity probabilities, as printed, sum to 1.001.
const SUM_TOLERANCE: f64 = 2e-3;

fn is_prob(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl ProtocolParams {
    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        r.check(
            self.clock_rate_hz.is_finite() && self.clock_rate_hz > 0.0,
            "f > 0",
        );
        r.check(
            [self.prob_signal, self.prob_decoy, self.prob_vacuum]
                .iter()
                .all(|&p| is_prob(p)),
            "p_u, p_v, p_w in [0, 1]",
        );
        r.check(
            (self.prob_signal + self.prob_decoy + self.prob_vacuum - 1.0).abs() <= SUM_TOLERANCE,
            "p_u + p_v + p_w = 1",
        );
        r.check(
            is_prob(self.prob_z) && is_prob(self.prob_x),
            "p_Z, p_X in [0, 1]",
        );
        r.check(
            (self.prob_z + self.prob_x - 1.0).abs() <= SUM_TOLERANCE,
            "p_Z + p_X = 1",
        );
        r.check(self.prob_z >= 0.5, "p_Z ≥ 1/2");
        r.check(
            self.flux_signal > self.flux_decoy
                && self.flux_decoy > self.flux_vacuum
                && self.flux_vacuum >= 0.0,
            "u > v > w ≥ 0",
        );
        r.check(
            (0.0..1.0).contains(&self.prob_stabilization),
            "0 ≤ p_st < 1",
        );
        r.check(
            self.pa_dataset_bits > 0 && self.pa_dataset_bits <= MAX_PA_DATASET_BITS,
            "0 < PA dataset ≤ 2^27 bits",
        );
        r.check(
            self.epsilon_security > 0.0 && self.epsilon_security < 1.0,
            "0 < ε < 1",
        );
        r
    }

    /// Flux for an intensity class.
    pub fn flux(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Signal => self.flux_signal,
            Intensity::Decoy => self.flux_decoy,
            Intensity::Vacuum => self.flux_vacuum,
        }
    }

    pub fn intensity_prob(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Signal => self.prob_signal,
            Intensity::Decoy => self.prob_decoy,
            Intensity::Vacuum => self.prob_vacuum,
        }
    }

    pub fn basis_prob(&self, basis: Basis) -> f64 {
        match basis {
            Basis::Z => self.prob_z,
            Basis::X => self.prob_x,
        }
    }
}

impl ChannelDetectorParams {
    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        r.check(
            [
                self.detector_efficiency,
                self.dark_count_prob,
                self.afterpulse_prob,
                self.misalignment_error,
            ]
            .iter()
            .all(|&p| is_prob(p)),
            "detector probabilities in [0, 1]",
        );
        r.check(
            self.channel_loss_db >= 0.0 && self.receiver_loss_db >= 0.0,
            "losses ≥ 0 dB",
        );
        r.check(self.afterpulse_prob < 1.0, "afterpulse probability < 1");
        r
    }

    /// Probability that a photon leaving Alice produces an avalanche.
    pub fn transmittance(&self) -> f64 {
        10f64.powf(-(self.channel_loss_db + self.receiver_loss_db) / 10.0)
            * self.detector_efficiency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intensity {
    Signal,
    Decoy,
    Vacuum,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::Signal, Intensity::Decoy, Intensity::Vacuum];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    Z,
    X,
}

impl Basis {
    pub const ALL: [Basis; 2] = [Basis::Z, Basis::X];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// `(1 - p_st) * p_u * p_Z^2`: the fraction of slots that end up in the sifted key
/// per detection.
pub fn sifting_efficiency(params: &ProtocolParams) -> f64 {
    (1.0 - params.prob_stabilization) * params.prob_signal * params.prob_z * params.prob_z
}

/// `h(x) = -x log2 x - (1 - x) log2 (1 - x)`, with `h(0) = h(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64, ParamsError> {
    if !(0.0..=1.0).contains(&x) || x.is_nan() {
        return Err(ParamsError::EntropyDomain(x));
    }
    Ok(entropy_unchecked(x))
}

/// [`binary_entropy`] for callers that have already clamped their argument.
pub(crate) fn entropy_unchecked(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
    }
}

/// Asymptotic secure key rate in bits per second,
/// `f * eta_d * eta_sift * (p1 * (1 - h(e1)) - f_ec * h(e))`, clamped at zero.
/// `eta_d` is the signal-pulse detection probability of the channel model.
pub fn asymptotic_rate(
    params: &ProtocolParams,
    channel: &ChannelDetectorParams,
    p1_lower: f64,
    e1_upper: f64,
    qber: f64,
    f_ec: f64,
) -> f64 {
    let eta_d = DetectionModel::new(params, channel).detection_probability(params.flux_signal);
    rate_from_detection(params, eta_d, p1_lower, e1_upper, qber, f_ec)
}

/// As [`asymptotic_rate`] with an explicit detection probability.
pub fn rate_from_detection(
    params: &ProtocolParams,
    eta_d: f64,
    p1_lower: f64,
    e1_upper: f64,
    qber: f64,
    f_ec: f64,
) -> f64 {
    let e1 = e1_upper.clamp(0.0, 0.5);
    let per_bit = p1_lower.clamp(0.0, 1.0) * (1.0 - entropy_unchecked(e1))
        - f_ec * entropy_unchecked(qber.clamp(0.0, 0.5));
    (params.clock_rate_hz * eta_d * sifting_efficiency(params) * per_bit).max(0.0)
}

/// Closed-form detection statistics of the simulated receiver.
///
/// Photon arrivals are Poisson-thinned by the total transmittance, so each
/// detector sees an independent Poisson photon stream. Dark counts are
/// independent per gate. Afterpulses arrive at a stationary per-detector rate
/// `a` solving `a = 1 - exp(-p_a * C / 2)`, where `C` is the mean number of
/// retained clicks per slot (which itself depends on `a`).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionModel {
    transmittance: f64,
    dark: f64,
    misalignment: f64,
    afterpulse_arrival: f64,
}

impl DetectionModel {
    pub fn new(params: &ProtocolParams, channel: &ChannelDetectorParams) -> Self {
        let mut model = DetectionModel {
            transmittance: channel.transmittance(),
            dark: channel.dark_count_prob,
            misalignment: channel.misalignment_error,
            afterpulse_arrival: 0.0,
        };
        if channel.afterpulse_prob > 0.0 {
            let mut a = 0.0;
            for _ in 0..200 {
                model.afterpulse_arrival = a;
                let c = model.mean_clicks_per_slot(params);
                let next = 1.0 - (-channel.afterpulse_prob * c / 2.0).exp();
                if (next - a).abs() < 1e-15 {
                    a = next;
                    break;
                }
                a = next;
            }
            model.afterpulse_arrival = a;
        }
        model
    }

    pub fn transmittance(&self) -> f64 {
        self.transmittance
    }

    /// Per-detector probability that an afterpulse lands in a given gate.
    pub fn afterpulse_arrival(&self) -> f64 {
        self.afterpulse_arrival
    }

    /// Probability that a detector clicks given a mean of `photons` arriving at it.
    pub fn click_probability(&self, photons: f64) -> f64 {
        1.0 - (-photons).exp() * (1.0 - self.dark) * (1.0 - self.afterpulse_arrival)
    }

    /// Probability that at least one detector clicks for a pulse of flux `mu`.
    pub fn detection_probability(&self, mu: f64) -> f64 {
        let quiet = 1.0 - self.dark;
        let no_ap = 1.0 - self.afterpulse_arrival;
        1.0 - (-mu * self.transmittance).exp() * quiet * quiet * no_ap * no_ap
    }

    /// Click probabilities of the bit-correct and bit-wrong detectors for a
    /// basis-matched pulse of flux `mu`.
    pub fn matched_click_probabilities(&self, mu: f64) -> (f64, f64) {
        let arriving = mu * self.transmittance;
        (
            self.click_probability(arriving * (1.0 - self.misalignment)),
            self.click_probability(arriving * self.misalignment),
        )
    }

    /// Error probability per basis-matched detection at flux `mu`, with
    /// double clicks assigned a random bit.
    pub fn matched_error_rate(&self, mu: f64) -> f64 {
        let (pc, pw) = self.matched_click_probabilities(mu);
        let detect = 1.0 - (1.0 - pc) * (1.0 - pw);
        if detect == 0.0 {
            return 0.0;
        }
        (pw * (1.0 - pc) + 0.5 * pc * pw) / detect
    }

    fn mean_clicks_per_slot(&self, params: &ProtocolParams) -> f64 {
        let matched = params.prob_z * params.prob_z + params.prob_x * params.prob_x;
        let clicks_unbiased = |mu: f64| 2.0 * self.click_probability(mu * self.transmittance / 2.0);
        let clicks_matched = |mu: f64| {
            let (c, w) = self.matched_click_probabilities(mu);
            c + w
        };
        let mut payload = 0.0;
        for i in Intensity::ALL {
            let mu = params.flux(i);
            payload += params.intensity_prob(i)
                * (matched * clicks_matched(mu) + (1.0 - matched) * clicks_unbiased(mu));
        }
        params.prob_stabilization * clicks_unbiased(params.flux_signal)
            + (1.0 - params.prob_stabilization) * payload
    }
}

/// Both parameter blocks, as read from a `key = value` config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub protocol: ProtocolParams,
    pub channel: ChannelDetectorParams,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ParamsError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ParamsError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// The result is validated.
    pub fn parse(text: &str) -> Result<Self, ParamsError> {
        let mut cfg = Config::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ParamsError::Config {
                line: line_no,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let num = || -> Result<f64, ParamsError> {
                parse_number(value).ok_or_else(|| ParamsError::Config {
                    line: line_no,
                    message: format!("`{value}` is not a number"),
                })
            };
            let p = &mut cfg.protocol;
            let c = &mut cfg.channel;
            match key {
                "clock_rate_hz" => p.clock_rate_hz = num()?,
                "flux_signal" => p.flux_signal = num()?,
                "flux_decoy" => p.flux_decoy = num()?,
                "flux_vacuum" => p.flux_vacuum = num()?,
                "prob_signal" => p.prob_signal = num()?,
                "prob_decoy" => p.prob_decoy = num()?,
                "prob_vacuum" => p.prob_vacuum = num()?,
                "prob_z" => p.prob_z = num()?,
                "prob_x" => p.prob_x = num()?,
                "prob_stabilization" => p.prob_stabilization = num()?,
                "pa_dataset_bits" => {
                    let v = num()?;
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(ParamsError::Config {
                            line: line_no,
                            message: "pa_dataset_bits must be a non-negative integer".into(),
                        });
                    }
                    p.pa_dataset_bits = v as u64;
                }
                "epsilon_security" => p.epsilon_security = num()?,
                "channel_loss_db" => c.channel_loss_db = num()?,
                "detector_efficiency" => c.detector_efficiency = num()?,
                "receiver_loss_db" => c.receiver_loss_db = num()?,
                "dark_count_prob" => c.dark_count_prob = num()?,
                "afterpulse_prob" => c.afterpulse_prob = num()?,
                "misalignment_error" => c.misalignment_error = num()?,
                other => {
                    return Err(ParamsError::UnknownKey {
                        line: line_no,
                        key: other.to_string(),
                    })
                }
            }
        }
        let mut report = cfg.protocol.validate();
        report.violations.extend(cfg.channel.validate().violations);
        if !report.is_ok() {
            return Err(ParamsError::Invalid(report));
        }
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let p = &self.protocol;
        let c = &self.channel;
        format!(
            "clock_rate_hz = {}\nflux_signal = {}\nflux_decoy = {}\nflux_vacuum = {}\n\
             prob_signal = {}\nprob_decoy = {}\nprob_vacuum = {}\nprob_z = {}\nprob_x = {}\n\
             prob_stabilization = {}\npa_dataset_bits = {}\nepsilon_security = {}\n\
             channel_loss_db = {}\ndetector_efficiency = {}\nreceiver_loss_db = {}\n\
             dark_count_prob = {}\nafterpulse_prob = {}\nmisalignment_error = {}\n",
            p.clock_rate_hz,
            p.flux_signal,
            p.flux_decoy,
            p.flux_vacuum,
            p.prob_signal,
            p.prob_decoy,
            p.prob_vacuum,
            p.prob_z,
            p.prob_x,
            p.prob_stabilization,
            p.pa_dataset_bits,
            p.epsilon_security,
            c.channel_loss_db,
            c.detector_efficiency,
            c.receiver_loss_db,
            c.dark_count_prob,
            c.afterpulse_prob,
            c.misalignment_error,
        )
    }
}

/// Accepts plain floats and simple fractions such as `1/128`.
fn parse_number(s: &str) -> Option<f64> {
    if let Some((a, b)) = s.split_once('/') {
        let a: f64 = a.trim().parse().ok()?;
        let b: f64 = b.trim().parse().ok()?;
        (b != 0.0).then(|| a / b)
    } else {
        s.parse().ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_validates() {
        let p = ProtocolParams::default();
        assert!(p.validate().is_ok(), "{}", p.validate());
        assert!(ChannelDetectorParams::default().validate().is_ok());
    }

    #[test]
    fn minority_z_basis_is_rejected() {
        let p = ProtocolParams {
            prob_z: 0.4,
            prob_x: 0.6,
            ..Default::default()
        };
        let report = p.validate();
        assert_eq!(report.violations, vec!["p_Z ≥ 1/2".to_string()]);
    }

    #[test]
    fn equal_thirds_satisfy_sum_rule() {
        let p = ProtocolParams {
            prob_signal: 1.0 / 3.0,
            prob_decoy: 1.0 / 3.0,
            prob_vacuum: 1.0 / 3.0,
            ..Default::default()
        };
        assert!(p.validate().is_ok());
    }

    #[test]
    fn flux_ordering_and_ranges_checked() {
        let p = ProtocolParams {
            flux_decoy: 0.5,
            prob_stabilization: 1.0,
            pa_dataset_bits: (1 << 27) + 1,
            epsilon_security: 0.0,
            ..Default::default()
        };
        let v = p.validate().violations;
        assert!(v.contains(&"u > v > w ≥ 0".to_string()));
        assert!(v.contains(&"0 ≤ p_st < 1".to_string()));
        assert!(v.contains(&"0 < PA dataset ≤ 2^27 bits".to_string()));
        assert!(v.contains(&"0 < ε < 1".to_string()));
    }

    #[test]
    fn sifting_efficiency_table1() {
        let eta = sifting_efficiency(&ProtocolParams::default());
        assert!((eta - 0.8993).abs() < 5e-4, "{eta}");
    }

    #[test]
    fn sifting_efficiency_exact_cases() {
        let mut p = ProtocolParams {
            prob_stabilization: 0.0,
            prob_signal: 1.0,
            prob_z: 1.0,
            ..Default::default()
        };
        assert_eq!(sifting_efficiency(&p), 1.0);
        p.prob_stabilization = 0.5;
        p.prob_signal = 0.5;
        p.prob_z = 0.5;
        assert_eq!(sifting_efficiency(&p), 1.0 / 16.0);
    }

    #[test]
    fn sifting_efficiency_monotone() {
        let base = ProtocolParams::default();
        let e0 = sifting_efficiency(&base);
        let up_u = ProtocolParams {
            prob_signal: 0.98,
            ..base.clone()
        };
        let up_z = ProtocolParams {
            prob_z: 0.98,
            ..base.clone()
        };
        let up_st = ProtocolParams {
            prob_stabilization: 0.05,
            ..base.clone()
        };
        assert!(sifting_efficiency(&up_u) > e0);
        assert!(sifting_efficiency(&up_z) > e0);
        assert!(sifting_efficiency(&up_st) < e0);
    }

    #[test]
    fn discarded_basis_fraction_is_small() {
        let p = ProtocolParams::default();
        assert!(2.0 * p.prob_x * p.prob_z < 0.125);
    }

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.5).unwrap() - 1.0).abs() < 1e-15);
        // -0.03 log2 0.03 - 0.97 log2 0.97, evaluated with mpmath at 30 digits.
        assert!((binary_entropy(0.03).unwrap() - 0.194391857).abs() < 1e-5);
        assert!(matches!(
            binary_entropy(1.5),
            Err(ParamsError::EntropyDomain(_))
        ));
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn entropy_symmetric_on_grid() {
        for i in 0..=1000 {
            let x = i as f64 / 1000.0;
            let a = binary_entropy(x).unwrap();
            let b = binary_entropy(1.0 - x).unwrap();
            assert!((a - b).abs() < 1e-12, "h({x})");
        }
    }

    #[test]
    fn noiseless_rate_is_ceiling() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let eta_d = DetectionModel::new(&p, &c).detection_probability(p.flux_signal);
        let r = asymptotic_rate(&p, &c, 1.0, 0.0, 0.0, 1.0);
        let ceiling = p.clock_rate_hz * eta_d * sifting_efficiency(&p);
        assert!((r - ceiling).abs() / ceiling < 1e-12);
    }

    #[test]
    fn rate_vanishes_at_bb84_threshold() {
        // Bisection root of 1 - 2 h(x) on (0, 0.5).
        let (mut lo, mut hi) = (0.01f64, 0.5f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 1.0 - 2.0 * entropy_unchecked(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((lo - 0.1100).abs() < 1e-4, "{lo}");
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let ceiling = asymptotic_rate(&p, &c, 1.0, 0.0, 0.0, 1.0);
        let r = asymptotic_rate(&p, &c, 1.0, 0.11, 0.11, 1.0);
        assert!(r / ceiling < 1e-3, "{r}");
    }

    #[test]
    fn rate_monotone_in_errors() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let mut last = f64::INFINITY;
        for i in 0..=20 {
            let q = i as f64 * 0.006;
            let r = asymptotic_rate(&p, &c, 0.7, 0.02, q, 1.2);
            assert!(r >= 0.0 && r <= last);
            last = r;
        }
        last = f64::INFINITY;
        for i in 0..=20 {
            let e1 = i as f64 * 0.025;
            let r = asymptotic_rate(&p, &c, 0.7, e1, 0.03, 1.2);
            assert!(r >= 0.0 && r <= last);
            last = r;
        }
    }

    #[test]
    fn paper_operating_point_rate() {
        // Detection probability chosen so that f * eta_d * eta_sift = 47.83 Mb/s,
        // then p1 solved so the per-bit bracket equals the 0.292 compression.
        let p = ProtocolParams::default();
        let eta_d = 47.83e6 / (p.clock_rate_hz * sifting_efficiency(&p));
        let (e1, qber, f_ec) = (0.02, 0.0307, 1.34);
        let p1 = (0.292 + f_ec * entropy_unchecked(qber)) / (1.0 - entropy_unchecked(e1));
        let r = rate_from_detection(&p, eta_d, p1, e1, qber, f_ec);
        assert!((13.7e6..=14.0e6).contains(&r), "{r}");
        assert!((r - 47.83e6 * 0.292).abs() < 1.0);
    }

    #[test]
    fn detection_model_matches_poisson_closed_form_without_noise() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams {
            dark_count_prob: 0.0,
            afterpulse_prob: 0.0,
            ..Default::default()
        };
        let m = DetectionModel::new(&p, &c);
        let t = c.transmittance();
        assert!((m.detection_probability(0.4) - (1.0 - (-0.4 * t).exp())).abs() < 1e-15);
        assert_eq!(m.afterpulse_arrival(), 0.0);
    }

    #[test]
    fn default_channel_gives_paper_scale_rates() {
        let p = ProtocolParams::default();
        let c = ChannelDetectorParams::default();
        let m = DetectionModel::new(&p, &c);
        let sifted =
            p.clock_rate_hz * sifting_efficiency(&p) * m.detection_probability(p.flux_signal);
        assert!((sifted - 47.83e6).abs() / 47.83e6 < 0.10, "{sifted}");
        let q = m.matched_error_rate(p.flux_signal);
        assert!((q - 0.0307).abs() < 0.004, "{q}");
    }

    #[test]
    fn config_parsing() {
        let cfg =
            Config::parse("# comment\nflux_decoy = 0.08\nprob_stabilization = 1/128\n").unwrap();
        assert_eq!(cfg.protocol.flux_decoy, 0.08);
        assert_eq!(cfg.protocol.prob_stabilization, 1.0 / 128.0);
        assert!(matches!(
            Config::parse("flux_gamma = 1"),
            Err(ParamsError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            Config::parse("prob_z = 0.4\nprob_x = 0.6"),
            Err(ParamsError::Invalid(_))
        ));
        assert!(matches!(
            Config::parse("prob_z"),
            Err(ParamsError::Config { line: 1, .. })
        ));
        let round = Config::parse(&Config::default().to_config_string()).unwrap();
        assert_eq!(round, Config::default());
    }
}
