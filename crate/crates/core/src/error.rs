use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    EmptyTensor(&'static str),
    NotScalar(Vec<usize>),
    NotRecorded,
    InvalidArgument(String),

    // graph / linear algebra
    NodeIdOutOfRange { id: usize, n_nodes: usize },
    Parse { line: usize, message: String },
    EigFailure { iterations: usize },
    Unstable { min_real_eig: f64 },
    SingularSystem,
    NonSymmetric { max_asymmetry: f64 },

    // sde
    TimeOutOfRange(f64),
    ZeroSigma(f64),

    // score model / training
    InvalidConfig(String),
    OddDim(usize),
    IndexOutOfRange { index: usize, len: usize },
    NonFiniteActivation(&'static str),
    EmptyBatch,
    Diverged { epoch: usize, val_loss: f64 },

    // sampler
    NonFiniteState { step: usize },
    MissingLabels,
    ConfigMismatch(String),

    // metrics / data
    TooFewSamples { needed: usize, got: usize },
    TooShort { needed: usize, got: usize },
    ZeroStd { feature: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::EmptyTensor(op) => write!(f, "{op}: empty tensor"),
            Error::NotScalar(shape) => write!(f, "expected a scalar, got shape {shape:?}"),
            Error::NotRecorded => write!(f, "variable does not belong to this tape"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::NodeIdOutOfRange { id, n_nodes } => {
                write!(f, "node id {id} out of range for {n_nodes} nodes")
            }
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::EigFailure { iterations } => {
                write!(f, "eigensolver did not converge after {iterations} sweeps")
            }
            Error::Unstable { min_real_eig } => write!(
                f,
                "I - alpha*A is not stable (min real eigenvalue {min_real_eig:.6})"
            ),
            Error::SingularSystem => write!(f, "linear system is singular"),
            Error::NonSymmetric { max_asymmetry } => {
                write!(f, "matrix is not symmetric (max |a_ij - a_ji| = {max_asymmetry:e})")
            }
            Error::TimeOutOfRange(t) => write!(f, "diffusion time {t} outside [0, 1]"),
            Error::ZeroSigma(t) => write!(f, "marginal std vanishes at t = {t}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::OddDim(d) => write!(f, "embedding dimension {d} must be even"),
            Error::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            Error::NonFiniteActivation(at) => write!(f, "non-finite activation in {at}"),
            Error::EmptyBatch => write!(f, "empty batch"),
            Error::Diverged { epoch, val_loss } => {
                write!(f, "training diverged at epoch {epoch} (validation loss {val_loss})")
            }
            Error::NonFiniteState { step } => {
                write!(f, "reverse trajectory left the finite range at step {step}")
            }
            Error::MissingLabels => write!(
                f,
                "adaptive sampling needs ground-truth labels or a calibrated schedule"
            ),
            Error::ConfigMismatch(msg) => write!(f, "config mismatch: {msg}"),
            Error::TooFewSamples { needed, got } => {
                write!(f, "need at least {needed} ensemble members, got {got}")
            }
            Error::TooShort { needed, got } => {
                write!(f, "series too short: need {needed} steps, got {got}")
            }
            Error::ZeroStd { feature } => write!(f, "feature {feature} has zero variance"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
