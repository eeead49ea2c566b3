use field_ekf_core::FilterError;

/// Harness failures, classified by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration: unknown key, unparseable value, invalid parameter.
    #[error("config: {0}")]
    Config(String),

    /// Dataset schema or IO problem. When several files are wrong the
    /// message lists every violation, one per line.
    #[error("dataset: {0}")]
    Dataset(String),

    /// Output-side IO failure.
    #[error("writing {path}: {source}")]
    Output {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Core numerics failed outside the run loop (inside it, divergence is
    /// recorded in the run outcome instead).
    #[error(transparent)]
    Filter(#[from] FilterError),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 3,
            Self::Dataset(_) => 4,
            Self::Output { .. } | Self::Filter(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
