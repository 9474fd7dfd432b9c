use std::fmt;
use std::path::Path;

use surge_core::correction::CorrectionError;
use surge_core::geo_graph::GraphError;
use surge_core::ingest::IngestError;
use surge_core::model::ModelError;
use surge_core::numerics::NumericsError;
use surge_core::synth::SynthError;
use surge_core::training::TrainError;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Io = 1,
    BadInput = 2,
    DataQuality = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn bad_input(message: impl Into<String>) -> Self {
        Self::new(ExitKind::BadInput, message)
    }

    pub fn data_quality(message: impl Into<String>) -> Self {
        Self::new(ExitKind::DataQuality, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ExitKind::Io, format!("{}: {err}", path.display()))
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

fn with_kind(kind: ExitKind, err: impl fmt::Display) -> CliError {
    CliError::new(kind, err.to_string())
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let kind = match &e {
            IngestError::Io { .. } => ExitKind::Io,
            IngestError::DegenerateDataset(_) | IngestError::NoValidData { .. } => {
                ExitKind::DataQuality
            }
            _ => ExitKind::BadInput,
        };
        with_kind(kind, e)
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        let kind = match &e {
            GraphError::Io { .. } => ExitKind::Io,
            GraphError::ZeroVariance { .. } | GraphError::TooShort(_) => ExitKind::DataQuality,
            _ => ExitKind::BadInput,
        };
        with_kind(kind, e)
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        with_kind(ExitKind::Numerical, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match &e {
            ModelError::Io { .. } => ExitKind::Io,
            ModelError::Numerics(_) => ExitKind::Numerical,
            _ => ExitKind::BadInput,
        };
        with_kind(kind, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Numerics(n) => n.into(),
            TrainError::NonFiniteLoss { .. } => with_kind(ExitKind::Numerical, e),
            TrainError::EmptyDataset(_) => with_kind(ExitKind::DataQuality, e),
            TrainError::InvalidConfig(_) | TrainError::Mismatch(_) => {
                with_kind(ExitKind::BadInput, e)
            }
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { .. } => with_kind(ExitKind::Io, e),
            SynthError::Ingest(i) => i.into(),
            SynthError::Graph(g) => g.into(),
            _ => with_kind(ExitKind::BadInput, e),
        }
    }
}

impl From<CorrectionError> for CliError {
    fn from(e: CorrectionError) -> Self {
        let kind = match &e {
            CorrectionError::Io { .. } => ExitKind::Io,
            CorrectionError::EmptyWindow(_) => ExitKind::DataQuality,
            _ => ExitKind::BadInput,
        };
        with_kind(kind, e)
    }
}
