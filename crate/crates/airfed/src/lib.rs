//! Desk-scale simulator of cooperative edge learning over a shared Gaussian
//! multiple-access uplink.
//!
//! Four training protocols — Independent Learning (IL), Federated Learning
//! (FL), Federated Distillation (FD), and Hybrid Federated Distillation
//! (HFD) — run over three interchangeable uplink transports:
//!
//! - `ideal`: noiseless, lossless averaging at the parameter server;
//! - `digital`: quantize-and-code under a Shannon-capacity bit budget, with
//!   top-magnitude / sign-mean sparsification and error feedback;
//! - `analog`: uncoded over-the-air superposition, with random-projection
//!   compression + AMP decoding for weight updates and repetition coding for
//!   logit tables.
//!
//! The crate is organised to mirror the moving parts of the system:
//!
//! - [`nn`] — a small from-scratch CNN with exact manual gradients;
//! - [`data`] — MNIST IDX ingestion and the heterogeneous device partition;
//! - [`compress`] — sparsifiers, the uniform quantizer, error feedback, and
//!   bit-budget arithmetic;
//! - [`channel`] — the Gaussian MAC, power accounting, and the error-free
//!   digital bit pipe;
//! - [`otac`] — analog (over-the-air computing) encoders and the AMP decoder;
//! - [`protocols`] — the four training protocols over an abstract transport;
//! - [`harness`] — run configuration, evaluation, sweeps, and CSV output.

pub mod channel;
pub mod compress;
pub mod data;
pub mod harness;
pub mod nn;
pub mod otac;
pub mod protocols;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    // ---- data / IDX ----
    #[error("bad IDX magic in {path}: expected {expected}, got {got}")]
    BadMagic {
        path: String,
        expected: u32,
        got: u32,
    },
    #[error("truncated IDX file {path}: need {need} bytes, have {have}")]
    TruncatedIdx { path: String, need: usize, have: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("device {device} drew only {have} samples of target label {label}, need {need}")]
    InsufficientTargetSamples {
        device: usize,
        label: usize,
        have: usize,
        need: usize,
    },
    #[error("label {label} has no samples")]
    EmptyLabel { label: usize },
    #[error("partition needs {need} samples, corpus has {have}")]
    CorpusTooSmall { need: usize, have: usize },

    // ---- nn ----
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    BadArch(String),

    // ---- compress / channel ----
    #[error("sparsity level {q} out of range for dimension {n}")]
    QOutOfRange { q: usize, n: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("payload of {bits} bits exceeds budget {budget}")]
    BudgetViolation { bits: f64, budget: f64 },
    #[error("device {device} frame power {measured} exceeds limit {limit}")]
    PowerViolation {
        device: usize,
        measured: f64,
        limit: f64,
    },

    // ---- protocols / otac ----
    #[error("leave-one-out average requires at least 2 devices")]
    LeaveOneOutSingleDevice,
    #[error("repetition coding unsupported: T = {t} < L^2 = {l2}")]
    RhoUnsupported { t: usize, l2: usize },
    #[error("nonpositive power scaling factor")]
    BadScaling,

    // ---- harness ----
    #[error("config error: {0}")]
    Config(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Attach a round index to an error bubbling out of a protocol round.
    pub fn in_round(self, round: usize) -> Error {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
