use thiserror::Error;

/// Crate-wide error type. Variants carry the failing quantity or stage so
/// callers (CLI, C API) can map them to exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("linear program unbounded in the queried direction")]
    Unbounded,
    #[error("polytope is empty")]
    InfeasibleSet,
    #[error("shape matrix is singular or too ill-conditioned (cond = {cond:.3e})")]
    SingularShape { cond: f64 },
    #[error("closed-loop matrix is not contractive (spectral radius = {rho:.6})")]
    NotContractive { rho: f64 },
    #[error("RPI tail bound not met within {cap} iterations")]
    NoConvergence { cap: usize },
    #[error("degenerate system: {0}")]
    DegenerateSystem(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("persistence-of-excitation violated: Gram matrix min/max eigenvalue ratio {ratio:.3e}")]
    PEViolation { ratio: f64 },
    #[error("LP solver failed: {0}")]
    LPFailure(String),
    #[error("feasible parameter set unbounded in coordinate {coord}")]
    UnboundedParameter { coord: usize },
    #[error("missing identified row (state {i}, horizon {j})")]
    MissingRow { i: usize, j: usize },
    #[error("problem infeasible: {0}")]
    Infeasible(String),
    #[error("solver failure: {0}")]
    SolverFailure(String),
    #[error("nominal closed loop unstable (spectral radius = {rho:.6})")]
    UnstableNominal { rho: f64 },
    #[error("no invariant terminal scaling exists: {0}")]
    NoInvariantScaling(String),
    #[error("design artifact does not match the supplied model (hash mismatch)")]
    UnverifiedDesign,
    #[error("observed-data mode requires a dataset")]
    MissingDataset,
    #[error("missing pipeline artifact: {0}")]
    MissingArtifact(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code mapping: 0 ok, 2 config error, 3 infeasible, 4 solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Infeasible(_) | Error::InfeasibleSet | Error::NoInvariantScaling(_) => 3,
            Error::SolverFailure(_) | Error::LPFailure(_) | Error::NoConvergence { .. } => 4,
            _ => 1,
        }
    }
}
