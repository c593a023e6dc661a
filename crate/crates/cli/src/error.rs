use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("malformed config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{0}")]
    Pipeline(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::MissingInput(_) => "missing_input",
            CliError::Input(_) => "input",
            CliError::Pipeline(_) => "pipeline",
            CliError::Io(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MissingInput(_) | CliError::Input(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: String,
        }
        serde_json::json!({ "error": Body { kind: self.kind(), message: self.to_string() } }).to_string()
    }
}

macro_rules! pipeline_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Pipeline(e.to_string())
            }
        })*
    };
}

pipeline_from!(
    pathfound::slide::SlideError,
    pathfound::sampler::SampleError,
    pathfound::splitter::SplitError,
    pathfound::dino::SslError,
    pathfound::nn::NnError,
    pathfound::agata::AggError,
    pathfound::evalstat::StatError,
    pathfound::featviz::VizError,
    pathfound::views::ViewError,
    csv::Error,
    serde_json::Error,
    image::ImageError
);

impl From<pathfound::store::StoreError> for CliError {
    fn from(e: pathfound::store::StoreError) -> Self {
        match e {
            pathfound::store::StoreError::DimMismatch { .. } => CliError::Input(e.to_string()),
            other => CliError::Pipeline(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
