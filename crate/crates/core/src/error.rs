use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("grid with spacing {h} in dimension {dim} exceeds the atom cap of {cap}")]
    AtomCap { dim: usize, h: f64, cap: usize },

    #[error("image {image:?} of atom {index} leaves the closed unit ball (norm {norm})")]
    ImageOutsideBall { index: usize, image: Vec<f64>, norm: f64 },

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dual solver did not converge after {sweeps} sweeps (last residual {residual:e})")]
    NonConvergence { sweeps: usize, residual: f64 },

    #[error("inconsistent state: {0}")]
    Inconsistent(String),

    #[error("{what} did not converge (KKT residual {residual:e})")]
    Subproblem { what: &'static str, residual: f64 },

    #[error("neighbourhood graph is disconnected at radius {radius}; smallest connecting radius is {smallest}")]
    Disconnected { radius: f64, smallest: f64 },

    #[error("degenerate convex hull: {0}")]
    DegenerateHull(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{atoms} atoms exceed the exact solver cap of {cap}")]
    ExactCap { atoms: usize, cap: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable short name used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidMeasure(_) => "invalid_measure",
            Error::AtomCap { .. } => "atom_cap",
            Error::ImageOutsideBall { .. } => "image_outside_ball",
            Error::InvalidMap(_) => "invalid_map",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::Empty(_) => "empty",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Inconsistent(_) => "inconsistent",
            Error::Subproblem { .. } => "subproblem",
            Error::Disconnected { .. } => "disconnected",
            Error::DegenerateHull(_) => "degenerate_hull",
            Error::Precondition(_) => "precondition",
            Error::ExactCap { .. } => "exact_cap",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error comes from an iterative solve rather than from the input.
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::Subproblem { .. } | Error::Inconsistent(_)
        )
    }
}
