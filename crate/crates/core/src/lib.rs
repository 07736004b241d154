//! Post-processing for a decoy-state BB84 link with biased basis choice:
//! optical simulation, sifting, finite-key estimation, LDPC reconciliation,
//! Toeplitz privacy amplification and the two-node runtime.

pub mod bits;
pub mod codec;
pub mod ec;
pub mod link;
pub mod pa;
pub mod params;
pub mod photonic;
pub mod security;
pub mod sifting;

pub use bits::BitVec;
pub use ec::reconcile::{EcBlock, EcConfig, Reconciler};
pub use link::{NodeConfig, NodeReport, Role, RunStats};
pub use pa::{KeyStore, PaFrame, ToeplitzSeed};
pub use params::{Basis, ChannelDetectorParams, Config, Intensity, ProtocolParams};
pub use photonic::{DetectionEvent, PulseRecord, TruthTally};
pub use security::{FrameStats, SecureLengthResult, SecurityBounds};
pub use sifting::{DecoyTally, SiftedBlock};
