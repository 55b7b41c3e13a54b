//! Library surface of the experiment harness; the `drlabel` binary is a
//! thin argument-parsing wrapper over [`commands`].

pub mod commands;
pub mod config;
pub mod report;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input, unreadable files, incompatible shapes. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// A property audit exceeded its tolerance. Exit code 2.
    #[error("audit failed: {0}")]
    AuditFailed(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::AuditFailed(_) => 2,
        }
    }
}

macro_rules! from_error {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    };
}

from_error!(std::io::Error);
from_error!(serde_json::Error);
from_error!(drlabel::sim::SimError);
from_error!(drlabel::graph::GraphError);
from_error!(drlabel::geometry::GeometryError);
from_error!(drlabel::dataset::DatasetError);
from_error!(drlabel::model::ModelError);
