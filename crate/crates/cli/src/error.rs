use ctshift::imaging::ImagingError;
use ctshift::metrics::MetricsError;
use ctshift::nncore::NnError;
use ctshift::pipeline::PipelineError;

/// Failure of a CLI command, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, flag or argument. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Missing, unreadable or malformed input data. Exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values or degenerate training. Exit code 4.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Config(_) => CliError::Config(e.to_string()),
            NnError::NonFinite { .. } | NnError::Training(_) => CliError::Numeric(e.to_string()),
            NnError::Dimension(_)
            | NnError::UnsupportedVersion { .. }
            | NnError::CorruptCheckpoint(_)
            | NnError::Io { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Nn(e) => e.into(),
            PipelineError::Imaging(e) => e.into(),
            PipelineError::Metrics(e) => e.into(),
            PipelineError::Input(_) => CliError::Data(e.to_string()),
            PipelineError::MultiplierUndefined(_) => CliError::Numeric(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Data(String::new()).exit_code(), 3);
        assert_eq!(CliError::Numeric(String::new()).exit_code(), 4);
    }

    #[test]
    fn nn_errors_map_by_kind() {
        let e: CliError = NnError::NonFinite {
            layer: "conv1".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 4);
        let e: CliError = NnError::CorruptCheckpoint("short".into()).into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = PipelineError::Nn(NnError::Config("side".into())).into();
        assert_eq!(e.exit_code(), 2);
    }
}
