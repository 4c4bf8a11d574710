use crate::config::FieldError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:{}", list(.0))]
    Config(Vec<FieldError>),
    #[error("correctness check failed: {0}")]
    Correctness(String),
    #[error(transparent)]
    Core(#[from] moesim_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

fn list(errs: &[FieldError]) -> String {
    errs.iter().map(|e| format!("\n  {e}")).collect()
}

impl CliError {
    /// 1 for configuration problems, 2 when a correctness gate trips.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Correctness(_) => 2,
            _ => 1,
        }
    }
}
