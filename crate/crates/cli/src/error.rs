use morphobricks::damage::DamageError;
use morphobricks::engine::EngineError;
use morphobricks::protocol::ProtocolError;
use morphobricks::sim::SimError;
use morphobricks::training::TrainError;
use morphobricks::voxel::VoxelError;
use thiserror::Error;

/// Validation failures exit with status 1, runtime faults with status 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn io(context: impl std::fmt::Display, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<VoxelError> for CliError {
    fn from(e: VoxelError) -> Self {
        match e {
            VoxelError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::BadChannel(_) | EngineError::ChannelMismatch { .. } => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Engine(inner) => inner.into(),
            TrainError::EmptyDataset
            | TrainError::EmptyGrid
            | TrainError::BadLabel(_)
            | TrainError::Unlabeled(_)
            | TrainError::Config(_)
            | TrainError::Checkpoint(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonFinite { .. } | SimError::Io(_) | SimError::Telemetry { .. } => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<DamageError> for CliError {
    fn from(e: DamageError) -> Self {
        match e {
            DamageError::Train(inner) => inner.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}
