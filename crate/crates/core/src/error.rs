//! Error type shared by every stage of the engine.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("MagicMismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("VersionUnsupported: file version {0}")]
    VersionUnsupported(u32),

    #[error("TruncatedFile: needed {needed} bytes at offset {offset}, {available} available")]
    TruncatedFile {
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("TrailingBytes: {0} unread bytes after the last section")]
    TrailingBytes(usize),

    #[error("InvalidUtf8: string at offset {0} is not valid UTF-8")]
    InvalidUtf8(usize),

    #[error("LabelOutOfRange: row {row} has label {label}, but only {classes} classes exist")]
    LabelOutOfRange { row: usize, label: u32, classes: usize },

    #[error("NonFiniteValue: {matrix} row {row}, column {col} (byte offset {offset})")]
    NonFiniteValue {
        matrix: &'static str,
        row: usize,
        col: usize,
        offset: usize,
    },

    #[error("ZeroNormRow: row {0} has zero (or non-finite) L2 norm")]
    ZeroNormRow(usize),

    #[error("DuplicateClassName: {0:?}")]
    DuplicateClassName(String),

    #[error("DimensionMismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("LengthMismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("EmptyBatch")]
    EmptyBatch,

    #[error("NonFiniteLoss: {0}")]
    NonFiniteLoss(String),

    #[error("ClassTooSmall: class {class} has {size} sample(s), at least 2 required")]
    ClassTooSmall { class: usize, size: usize },

    #[error("RatioOutOfRange: {0} is not in the open interval (0, 1)")]
    RatioOutOfRange(f64),

    #[error("SpecInvalid: {0}")]
    SpecInvalid(String),

    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),

    #[error("IoError: {0}")]
    Io(#[from] io::Error),

    #[error("JsonError: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CsvError: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable variant name, printed by the CLI on failure.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MagicMismatch { .. } => "MagicMismatch",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::TruncatedFile { .. } => "TruncatedFile",
            Error::TrailingBytes(_) => "TrailingBytes",
            Error::InvalidUtf8(_) => "InvalidUtf8",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::ZeroNormRow(_) => "ZeroNormRow",
            Error::DuplicateClassName(_) => "DuplicateClassName",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::EmptyBatch => "EmptyBatch",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::ClassTooSmall { .. } => "ClassTooSmall",
            Error::RatioOutOfRange(_) => "RatioOutOfRange",
            Error::SpecInvalid(_) => "SpecInvalid",
            Error::ConfigInvalid(_) => "ConfigInvalid",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
        }
    }

    /// True for failures caused by the inputs rather than by a stage that
    /// ran on valid inputs.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss(_))
    }
}
