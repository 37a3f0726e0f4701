use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Error, Debug)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unsupported Zernike mode j={j}: radial order {n} exceeds the supported maximum {max}")]
    UnsupportedMode { j: usize, n: u32, max: u32 },

    #[error("numerical domain error in {context} at indices ({i}, {j})")]
    NumericalDomain {
        context: &'static str,
        i: usize,
        j: usize,
    },

    #[error("quadrature failed to converge for {context} (estimate {estimate:e}, error {error:e})")]
    QuadratureNonConvergence {
        context: &'static str,
        estimate: f64,
        error: f64,
    },

    #[error("aperture mask is empty; cannot form a PSF")]
    DegenerateAperture,

    #[error("covariance build needs {needed_bytes} bytes, above the {budget_bytes} byte budget; reduce the anchor grid")]
    MemoryBudget {
        needed_bytes: usize,
        budget_bytes: usize,
    },

    #[error("scene of {pixels} pixels exceeds the brute-force guard of {guard}; pass allow_large to override")]
    SizeGuard { pixels: usize, guard: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("unsupported {kind} file version {got} (supported: {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        got: u16,
        supported: u16,
    },

    #[error("asset mismatch: {0}")]
    AssetMismatch(String),

    #[error("training diverged at epoch {epoch}; last stable epoch {last_stable}")]
    TrainingDiverged { epoch: usize, last_stable: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl CoreError {
    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
