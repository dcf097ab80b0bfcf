//! Error types shared across the core crate.
//!
//! Contract violations on in-memory tensor plumbing (mismatched shapes fed
//! to tape ops, non-scalar loss in `backward`) panic with a descriptive
//! message; everything driven by user data (volumes, configs, files,
//! optimization runs) returns one of the errors below.

use std::fmt;

/// Errors from volume/patch/label construction and manipulation.
#[derive(Debug, Clone, PartialEq)]
pub enum VolumeError {
    /// Extent or patch shape violates a precondition.
    BadShape(String),
    /// Non-finite voxel encountered where finite data is required.
    NonFinite { index: usize },
    /// A label value is outside `[0, num_class)`.
    BadLabel { index: usize, value: u32, num_class: usize },
    /// Patch list does not match the grid it is merged against.
    GridMismatch(String),
}

impl fmt::Display for VolumeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeError::BadShape(msg) => write!(f, "bad shape: {msg}"),
            VolumeError::NonFinite { index } => {
                write!(f, "non-finite value at flat index {index}")
            }
            VolumeError::BadLabel { index, value, num_class } => {
                write!(f, "label {value} at flat index {index} outside [0, {num_class})")
            }
            VolumeError::GridMismatch(msg) => write!(f, "patch grid mismatch: {msg}"),
        }
    }
}

impl std::error::Error for VolumeError {}

/// Errors from attack and training runs.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    /// Configuration value rejected before the run started.
    BadConfig(String),
    /// The optimized objective became non-finite; carries the step at which
    /// divergence was detected.
    NonFiniteLoss { context: String, step: usize },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::BadConfig(msg) => write!(f, "invalid config: {msg}"),
            RunError::NonFiniteLoss { context, step } => {
                write!(f, "non-finite loss in {context} at step {step}")
            }
        }
    }
}

impl std::error::Error for RunError {}

/// Errors from the synthetic dataset generator.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    BadSpec(String),
    /// Shape placement kept erasing an earlier class; gives the sample and
    /// class that could not be packed and the number of attempts made.
    Packing { sample: usize, class: usize, attempts: usize },
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadSpec(msg) => write!(f, "invalid dataset spec: {msg}"),
            SynthError::Packing { sample, class, attempts } => write!(
                f,
                "could not place shapes for class {class} in sample {sample} after {attempts} attempts"
            ),
        }
    }
}

impl std::error::Error for SynthError {}

/// Structured parse error for the binary volume / checkpoint formats.
/// Always names the byte offset at which parsing stopped.
#[derive(Debug)]
pub enum FileError {
    Io(std::io::Error),
    BadMagic { offset: usize, expected: &'static [u8], got: Vec<u8> },
    BadVersion { offset: usize, got: u16 },
    Truncated { offset: usize, expected: usize, actual: usize },
    Corrupt { offset: usize, what: String },
}

impl fmt::Display for FileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileError::Io(e) => write!(f, "io error: {e}"),
            FileError::BadMagic { offset, expected, got } => write!(
                f,
                "bad magic at byte offset {offset}: expected {expected:?}, got {got:?}"
            ),
            FileError::BadVersion { offset, got } => {
                write!(f, "unsupported format version {got} at byte offset {offset}")
            }
            FileError::Truncated { offset, expected, actual } => write!(
                f,
                "truncated at byte offset {offset}: expected {expected} bytes, got {actual}"
            ),
            FileError::Corrupt { offset, what } => {
                write!(f, "corrupt field at byte offset {offset}: {what}")
            }
        }
    }
}

impl std::error::Error for FileError {}

impl From<std::io::Error> for FileError {
    fn from(e: std::io::Error) -> Self {
        FileError::Io(e)
    }
}
