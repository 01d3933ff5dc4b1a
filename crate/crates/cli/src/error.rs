use shipnet_train::TrainError;

/// Errors split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Core(e) => e.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<shipnet_core::Error> for CliError {
    fn from(e: shipnet_core::Error) -> Self {
        match e {
            shipnet_core::Error::Config(m) | shipnet_core::Error::Spec(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(format!("i/o: {e}"))
    }
}

impl From<shipnet_dataserver::ClientError> for CliError {
    fn from(e: shipnet_dataserver::ClientError) -> Self {
        CliError::Runtime(format!("data server: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
