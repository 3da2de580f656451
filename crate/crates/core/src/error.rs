use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),
    #[error("value error at row {row}: {message}")]
    Value { row: usize, message: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ill-posed problem: {0}")]
    IllPosed(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("test undefined: {0}")]
    TestUndefined(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Attach the name of the pipeline stage that produced this error.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by malformed input rather than by estimation.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::MissingColumn(_)
            | Error::Value { .. }
            | Error::InvalidDataset(_)
            | Error::Io(_)
            | Error::Csv(_) => true,
            Error::Stage { source, .. } => source.is_input_error(),
            _ => false,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
