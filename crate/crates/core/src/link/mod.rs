//! Two-node runtime: framing, transports, the stage pipeline and run statistics.

pub mod node;
pub mod stats;
pub mod transport;
pub mod wire;

pub use node::{run_loopback, run_node, FrameSink, NodeConfig, NodeError, NodeReport, Role};
pub use stats::{read_stats, summarize, RunStats, RunSummary, StatsWriter};
pub use transport::{Authenticator, Link, NoAuth};
pub use wire::{decode_frame, encode_frame, MsgType, WireError, WireFrame};
