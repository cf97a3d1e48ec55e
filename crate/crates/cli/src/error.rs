use std::path::{Path, PathBuf};

use thiserror::Error;
use vtec_bnn::bnn::BnnError;
use vtec_bnn::calibrate::CalibrationError;
use vtec_bnn::checkpoint::CheckpointError;
use vtec_bnn::dataset::DatasetError;
use vtec_bnn::eval::EvalError;
use vtec_bnn::inference::InferenceError;
use vtec_bnn::ionex::IonexError;
use vtec_bnn::spaceweather::SpaceWeatherError;
use vtec_bnn::synth::SynthError;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {detail}")]
    Data { context: String, detail: String },
    #[error("numerical failure: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Data { .. } => 4,
            CliError::Divergence(_) => 5,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn data(context: impl Into<String>, detail: impl ToString) -> Self {
        CliError::Data {
            context: context.into(),
            detail: detail.to_string(),
        }
    }
}

impl From<BnnError> for CliError {
    fn from(e: BnnError) -> Self {
        match e {
            BnnError::Divergence { .. } | BnnError::NonFinite(_) | BnnError::NonFiniteLoss => {
                CliError::Divergence(e.to_string())
            }
            BnnError::BadToken { .. } | BnnError::BadHead(_) | BnnError::EmptyArchitecture | BnnError::Config(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::data("training", e),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::EmptyTrain => CliError::Config(e.to_string()),
            _ => CliError::data("dataset", e),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::EnsembleSize(_) => CliError::Config(e.to_string()),
            InferenceError::NonFinite => CliError::Divergence(e.to_string()),
            _ => CliError::data("prediction", e),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::BandWidth(_) => CliError::Config(e.to_string()),
            _ => CliError::data("calibration", e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Bands(inner) => inner.into(),
            _ => CliError::data("evaluation", e),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::MapsPerDay(_) => CliError::Config(e.to_string()),
            _ => CliError::data("synthesis", e),
        }
    }
}

impl From<IonexError> for CliError {
    fn from(e: IonexError) -> Self {
        CliError::data("IONEX", e)
    }
}

impl From<SpaceWeatherError> for CliError {
    fn from(e: SpaceWeatherError) -> Self {
        CliError::data("space weather", e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::data("checkpoint", e)
    }
}
