use std::path::PathBuf;

use alignvtoff_core::Error as CoreError;

/// Everything the pipeline can fail with. Each variant maps to one process
/// exit code so scripts can branch on the class of failure.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: unreadable image: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("VAE reconstruction gate unmet: validation PSNR {psnr:.2} dB is not above {gate} dB after {steps} steps")]
    Gate { psnr: f64, gate: f64, steps: usize },
    #[error("{failed} of {total} ablation runs failed; the partial table is at {}", table.display())]
    Partial { failed: usize, total: usize, table: PathBuf },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code. 1 is left for panics and 2 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(e) => match e {
                CoreError::Config(_) => 3,
                CoreError::Dimension(_) => 4,
                CoreError::Size(_) => 5,
                CoreError::Range(_) => 6,
                CoreError::Contract(_) => 7,
                CoreError::Numerical(_) => 8,
                CoreError::State(_) => 9,
                CoreError::Format(_) => 10,
            },
            Self::Io { .. } => 11,
            Self::Image { .. } => 10,
            Self::Gate { .. } => 12,
            Self::Partial { .. } => 13,
        }
    }
}

/// Shorthand for core errors raised in this crate.
pub(crate) fn core(kind: fn(String) -> CoreError, msg: impl Into<String>) -> PipelineError {
    PipelineError::Core(kind(msg.into()))
}
