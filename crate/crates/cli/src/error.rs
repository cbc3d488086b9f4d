use std::fmt;
use std::process::ExitCode;

/// Failure of one command, split by who has to fix it.
#[derive(Debug)]
pub enum CliError {
    /// Bad or inconsistent flags; nothing has been read yet.
    Usage(String),
    /// Unreadable or invalid inputs, or a failure while processing them.
    Data(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Data(_) => ExitCode::from(2),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Data(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

macro_rules! data_error {
    ($($t:ty),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.into())
            }
        })*
    };
}

data_error!(
    std::io::Error,
    serde_json::Error,
    trafficmoe_core::flow::FlowStoreError,
    trafficmoe_core::flow::PcapError,
    trafficmoe_core::token::TokenError,
    trafficmoe_core::model::ModelError,
    trafficmoe_core::train::TrainError,
    trafficmoe_core::eval::BenchError,
    trafficmoe_core::eval::ShiftError,
);

pub type CliResult<T = ()> = Result<T, CliError>;
