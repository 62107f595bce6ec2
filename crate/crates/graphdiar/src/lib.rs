//! Graph-refined speaker embeddings for diarization.
//!
//! Per-segment speaker embeddings from one session are connected into a
//! similarity graph, refined by a two-layer linear graph convolutional
//! network, and clustered. The crate covers the whole loop:
//!
//! * [`embedding`]: the segment/embedding data model and its on-disk formats
//!   (binary embedding files, RTTM).
//! * [`graph`]: thresholded session affinity graphs and the self-loop
//!   normalized propagation matrix the GCN multiplies by.
//! * [`refiner`]: the GCN encoder, cosine and FC pair scorers, checkpoints.
//! * [`losses`]: histogram loss, nuclear-norm penalty and pairwise BCE with
//!   exact analytic gradients, the hand-written backward pass, and Adam.
//! * [`gradcheck`]: central finite-difference verification of every gradient.
//! * [`trainer`]: session-batched training, k-fold splits, threshold tuning.
//! * [`clustering`]: speaker-count estimation (eigenvalue threshold and
//!   eigengap) plus normalized spectral clustering; `diarize` composes the
//!   full pipeline.
//! * [`simulator`]: synthetic meetings with ground truth, so training and
//!   evaluation run without any external corpus.
//! * [`evaluation`]: confusion-only DER with optimal label assignment,
//!   speaker-count error, threshold sweeps.
//!
//! Everything is deterministic given a single seed; see [`rng`] for how
//! sub-streams are derived.

use std::path::PathBuf;

use thiserror::Error;

// Anchor the system BLAS/LAPACK link; `lapack-sys` only declares the FFI
// symbols and relies on a provider crate being linked in.
use openblas_src as _;

pub mod clustering;
pub mod embedding;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod refiner;
pub mod rng;
pub mod simulator;
pub mod trainer;

/// Crate-wide error type. Variants map onto failure classes the CLI
/// distinguishes: usage/config problems versus data and numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },
    /// Structural misconfiguration: non-chaining layer dims, k > N, etc.
    #[error("config error: {0}")]
    Config(String),
    /// Inputs that are valid in shape but carry no usable signal
    /// (zero-norm rows, single-speaker sessions for a ranking loss, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// LAPACK failures and non-finite intermediate values.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// API misuse: stale forward cache, wrong scorer kind, asymmetric input.
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
