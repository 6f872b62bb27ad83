use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error(transparent)]
    Core(#[from] ghostvec::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Missing(_) | Self::Core(ghostvec::Error::DanglingReference(_)) => 2,
            Self::Config(_) => 3,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "missing_prerequisite",
            3 => "config",
            _ => "internal",
        }
    }

    /// Single-line JSON description for stderr.
    pub fn machine_line(&self, stage: Option<&str>) -> String {
        serde_json::json!({
            "error": self.kind(),
            "code": self.exit_code(),
            "stage": stage,
            "message": self.to_string(),
        })
        .to_string()
    }
}
