// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use av3d_core::alignment::AlignmentError;
use av3d_core::embedding::EmbeddingError;
use av3d_core::fsse::FsseError;
use av3d_core::geometry::GeometryError;
use av3d_core::io::IoError;
use av3d_core::metrics::MetricsError;
use av3d_core::pseudo_box::PseudoBoxError;
use av3d_core::synth::SynthError;

/// Failure of a subcommand, split by who is at fault.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable or inconsistent inputs. Exit code 1.
    #[error("{0}")]
    Input(String),
    /// A check on our own output failed. Exit code 2.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        })*
    };
}

input_error!(
    IoError,
    FsseError,
    MetricsError,
    PseudoBoxError,
    SynthError,
    EmbeddingError,
    AlignmentError,
    GeometryError
);

pub type Result<T, E = CliError> = std::result::Result<T, E>;
