use shipnet_dataserver::ClientError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] shipnet_core::Error),
    #[error("data server: {0}")]
    Client(#[from] ClientError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    /// A peer sent something that violates the runtime protocol. Recoverable
    /// for the receiver (the message is dropped).
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Unrecoverable inconsistency; the run must stop.
    #[error("fatal: {0}")]
    Fatal(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("population stopped after {completed} chips: {source}")]
    Partial {
        completed: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("run aborted")]
    Aborted,
}

pub type Result<T> = std::result::Result<T, TrainError>;
