//! Finite-size secure key length.
//!
//! Vacuum + weak decoy bounds on the single-photon yield `Y1` and error rate
//! `e1`, with every observed count replaced by its worst case under a
//! multiplicative Chernoff bound. Gains are per pulse sent in a basis and
//! measured in the same basis, so each count is divided by the number of
//! pulses Alice sent in that basis and by Bob's probability of choosing it.
//! Yields come from the Z basis; the error bound uses X-basis signal errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{
    entropy_unchecked, Basis, ChannelDetectorParams, DetectionModel, Intensity, ProtocolParams,
};
use crate::sifting::DecoyTally;

/// Number of one-sided corrections sharing the estimation budget.
pub const CORRECTION_TERMS: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("no {0:?}-intensity pulses recorded in the Z basis")]
    NothingSent(Intensity),
    #[error("no decoy detections in the Z basis")]
    NoDecoyDetections,
    #[error("no signal detections in the X basis")]
    NoPhaseStatistics,
    #[error("fluxes must satisfy u > v > w >= 0 with u > v + w")]
    Fluxes,
}

/// How the failure probability is spread over the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBudget {
    pub total: f64,
    /// Failure probability of each count correction.
    pub per_correction: f64,
    pub corrections: usize,
    /// Bits subtracted for smoothing and hashing.
    pub delta_bits: f64,
}

impl EpsilonBudget {
    pub fn new(epsilon: f64) -> Self {
        EpsilonBudget {
            total: epsilon,
            per_correction: epsilon / CORRECTION_TERMS as f64,
            corrections: CORRECTION_TERMS,
            delta_bits: finite_size_delta(epsilon),
        }
    }
}

/// `6 log2(21/ε) + log2(2/ε)`.
pub fn finite_size_delta(epsilon: f64) -> f64 {
    6.0 * (21.0 / epsilon).log2() + (2.0 / epsilon).log2()
}

/// Largest mean consistent with observing `x` at failure probability `e^-beta`.
pub fn chernoff_upper(x: f64, beta: f64) -> f64 {
    x + beta + (beta * beta + 2.0 * beta * x).sqrt()
}

/// Smallest mean consistent with observing `x` at failure probability `e^-beta`.
pub fn chernoff_lower(x: f64, beta: f64) -> f64 {
    (x + beta / 2.0 - (beta * beta / 4.0 + 2.0 * beta * x).sqrt()).max(0.0)
}

/// Decoy-state estimates at one confidence level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyEstimate {
    pub y0_lower: f64,
    pub y1_lower: f64,
    /// Lower bound on the single-photon share of Z-basis signal detections.
    pub p1_lower: f64,
    pub e1_upper: f64,
    /// Lower bound on single-photon Z-basis signal detections in the tally.
    pub n1_lower: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityBounds {
    /// Z-basis signal detections the estimate refers to.
    pub sifted_count: u64,
    pub n1_z_lower: f64,
    pub e1_upper: f64,
    pub finite: DecoyEstimate,
    /// Same tally with all corrections set to zero.
    pub asymptotic: DecoyEstimate,
    pub epsilon_budget: EpsilonBudget,
}

struct Rates {
    gain: [f64; 3],
    x_signal_error_gain: f64,
}

fn estimate(tally: &DecoyTally, params: &ProtocolParams, beta: f64) -> DecoyEstimate {
    let (u, v, w) = (params.flux_signal, params.flux_decoy, params.flux_vacuum);
    let sent_z = |i: Intensity| tally.sent(i, Basis::Z) as f64 * params.prob_z;
    let det_z = |i: Intensity| tally.detected(i, Basis::Z) as f64;
    let gain_up = |i: Intensity| chernoff_upper(det_z(i), beta) / sent_z(i);
    let gain_lo = |i: Intensity| chernoff_lower(det_z(i), beta) / sent_z(i);

    let r = Rates {
        gain: [
            gain_up(Intensity::Signal),
            gain_lo(Intensity::Decoy),
            gain_up(Intensity::Vacuum),
        ],
        x_signal_error_gain: chernoff_upper(tally.errors(Intensity::Signal, Basis::X) as f64, beta)
            / (tally.sent(Intensity::Signal, Basis::X) as f64 * params.prob_x),
    };

    let y0 = ((v * gain_lo(Intensity::Vacuum) * w.exp() - w * gain_up(Intensity::Decoy) * v.exp())
        / (v - w))
        .max(0.0);
    let [qu, qv, qw] = r.gain;
    let y1 = (u / (u * v - u * w - v * v + w * w)
        * (qv * v.exp() - qw * w.exp() - (v * v - w * w) / (u * u) * (qu * u.exp() - y0)))
        .clamp(0.0, 1.0);

    let e1 = if y1 > 0.0 {
        ((r.x_signal_error_gain * u.exp() - y0 / 2.0) / (u * y1)).clamp(0.0, 0.5)
    } else {
        0.5
    };

    let n1_expected = sent_z(Intensity::Signal) * u * (-u).exp() * y1;
    let n1 = if beta > 0.0 {
        (n1_expected - (2.0 * beta * n1_expected).sqrt()).max(0.0)
    } else {
        n1_expected
    };
    let d = det_z(Intensity::Signal);
    let n1 = n1.min(d);
    DecoyEstimate {
        y0_lower: y0,
        y1_lower: y1,
        p1_lower: if d > 0.0 { n1 / d } else { 0.0 },
        e1_upper: e1,
        n1_lower: n1,
    }
}

/// Single-photon bounds for a frame's tally at total failure probability `epsilon`.
pub fn decoy_bounds(
    tally: &DecoyTally,
    params: &ProtocolParams,
    epsilon: f64,
) -> Result<SecurityBounds, EstimationError> {
    let (u, v, w) = (params.flux_signal, params.flux_decoy, params.flux_vacuum);
    if !(u > v && v > w && w >= 0.0 && u > v + w) {
        return Err(EstimationError::Fluxes);
    }
    for i in Intensity::ALL {
        if tally.sent(i, Basis::Z) == 0 {
            return Err(EstimationError::NothingSent(i));
        }
    }
    if tally.detected(Intensity::Decoy, Basis::Z) == 0 {
        return Err(EstimationError::NoDecoyDetections);
    }
    if tally.sent(Intensity::Signal, Basis::X) == 0
        || tally.detected(Intensity::Signal, Basis::X) == 0
    {
        return Err(EstimationError::NoPhaseStatistics);
    }
    let budget = EpsilonBudget::new(epsilon);
    let finite = estimate(tally, params, (1.0 / budget.per_correction).ln());
    let asymptotic = estimate(tally, params, 0.0);
    Ok(SecurityBounds {
        sifted_count: tally.detected(Intensity::Signal, Basis::Z),
        n1_z_lower: finite.n1_lower,
        e1_upper: finite.e1_upper,
        finite,
        asymptotic,
        epsilon_budget: budget,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureLengthResult {
    pub secure_bits: u64,
    /// `secure_bits / frame_bits`.
    pub compression_ratio: f64,
    pub asymptotic_bits: u64,
    /// Finite-size length before clamping; may be negative.
    pub raw_bits: f64,
    /// Asymptotic length before clamping.
    pub raw_asymptotic_bits: f64,
    /// Single-photon lower bound scaled to the frame.
    pub n1_frame: f64,
}

impl SecureLengthResult {
    /// Ratio of unclamped finite-size to asymptotic length.
    pub fn finite_to_asymptotic(&self) -> f64 {
        self.raw_bits / self.raw_asymptotic_bits
    }
}

/// `ℓ = n1·[1 − h(e1)] − leak_ec − verify − Δ`, clamped to `[0, frame/3]`.
///
/// `n1` is the bound's single-photon share applied to the frame length
/// `params.pa_dataset_bits`. The measured QBER enters only through the
/// actual leakage.
pub fn secure_length(
    bounds: &SecurityBounds,
    _qber_measured: f64,
    leak_ec_bits: u64,
    verify_bits: u64,
    params: &ProtocolParams,
) -> SecureLengthResult {
    let n = params.pa_dataset_bits as f64;
    let cost = leak_ec_bits as f64 + verify_bits as f64;
    let raw = |est: &DecoyEstimate, delta: f64| {
        n * est.p1_lower * (1.0 - entropy_unchecked(est.e1_upper)) - cost - delta
    };
    let raw_bits = raw(&bounds.finite, bounds.epsilon_budget.delta_bits);
    let raw_asymptotic_bits = raw(&bounds.asymptotic, 0.0);
    let ceiling = params.pa_dataset_bits / 3;
    let clamp = |x: f64| {
        if x <= 0.0 {
            0
        } else {
            (x.floor() as u64).min(ceiling)
        }
    };
    let secure_bits = clamp(raw_bits);
    SecureLengthResult {
        secure_bits,
        compression_ratio: secure_bits as f64 / n,
        asymptotic_bits: clamp(raw_asymptotic_bits),
        raw_bits,
        raw_asymptotic_bits,
        n1_frame: n * bounds.finite.p1_lower,
    }
}

/// Mean tally for a run long enough to yield `sifted_bits` Z-basis signal
/// detections, from the closed-form detection model. Counts are rounded.
pub fn expected_tally(
    params: &ProtocolParams,
    channel: &ChannelDetectorParams,
    sifted_bits: f64,
) -> DecoyTally {
    let model = DetectionModel::new(params, channel);
    let payload = 1.0 - params.prob_stabilization;
    let q_signal = model.detection_probability(params.flux_signal);
    let slots =
        sifted_bits / (payload * params.prob_signal * params.prob_z * params.prob_z * q_signal);
    let mut t = DecoyTally::default();
    for i in Intensity::ALL {
        let mu = params.flux(i);
        let q = model.detection_probability(mu);
        let e = model.matched_error_rate(mu);
        for b in Basis::ALL {
            let pb = params.basis_prob(b);
            let sent = slots * payload * params.intensity_prob(i) * pb;
            let det = sent * pb * q;
            t.sent[i.index()][b.index()] = sent.round() as u64;
            t.detected[i.index()][b.index()] = det.round() as u64;
            t.errors[i.index()][b.index()] = (det * e).round() as u64;
        }
    }
    t
}

/// One JSON-lines record per privacy-amplified frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub frame_id: u64,
    pub n_sifted: u64,
    pub qber: f64,
    pub n1_lower: f64,
    pub e1_upper: f64,
    pub leak_ec: u64,
    pub secure_bits: u64,
    pub ratio: f64,
}

impl FrameStats {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric record")
    }
}
