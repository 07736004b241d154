pub mod code;
pub mod decoder;
pub mod family;
pub mod reconcile;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EcError {
    #[error("invalid code description: {0}")]
    InvalidCode(String),
    #[error("length mismatch: expected {expected} bits, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no suitable code: {0}")]
    NoCode(String),
    #[error("reconciliation protocol violation: {0}")]
    Protocol(String),
}
