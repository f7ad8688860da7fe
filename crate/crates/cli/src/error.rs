//! Mapping of library errors onto process exit codes.

use hdrtv::color::ColorError;
use hdrtv::data_io::DataError;
use hdrtv::lut::LutError;
use hdrtv::metrics::MetricError;
use hdrtv::nn::NnError;
use hdrtv::train::ModelError;

pub const USAGE: u8 = 64;
pub const INPUT: u8 = 66;
pub const NUMERIC: u8 = 70;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            msg: msg.into(),
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Self {
            code: INPUT,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self {
            code: NUMERIC,
            msg: msg.into(),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<ColorError> for Failure {
    fn from(e: ColorError) -> Self {
        match e {
            ColorError::InvalidParam(_) => Self::usage(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Self::input(e.to_string())
    }
}

impl From<LutError> for Failure {
    fn from(e: LutError) -> Self {
        match e {
            LutError::NonFinite { .. } => Self::numeric(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Checkpoint(_) | NnError::Io(_) | NnError::Json(_) => Self::input(e.to_string()),
            _ => Self::numeric(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(n) => n.into(),
            ModelError::Config(_) => Self::usage(e.to_string()),
            ModelError::Diverged { .. } => Self::numeric(e.to_string()),
            _ => Self::input(e.to_string()),
        }
    }
}
