use thiserror::Error;

/// Crate-wide error type. Numeric failure modes carry enough context to
/// diagnose the offending input without re-running the computation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input fails a shape or domain check before any computation starts.
    #[error("invalid input: {0}")]
    Validation(String),

    /// QR iteration did not converge or a returned eigenpair failed the
    /// residual bound.
    #[error("eigendecomposition did not converge (dim {dim}, residual {residual:.3e})")]
    NonConvergence { dim: usize, residual: f64 },

    /// Penalized normal matrix is numerically singular.
    #[error("singular system: condition number {cond:.3e} exceeds 1e12")]
    SingularSystem { cond: f64 },

    /// An observed joint table violates the full-rank requirement that
    /// identification rests on.
    #[error("rank-deficient joint table at x={x_level}: condition number {cond:.3e}")]
    RankDeficient { x_level: usize, cond: f64 },

    /// Eigenvalues came out complex beyond the tolerated rounding level.
    #[error("complex eigenvalue spectrum at x={x_level}: |imag| {imag:.3e} exceeds tolerance {tol:.3e}")]
    ComplexSpectrum { x_level: usize, imag: f64, tol: f64 },

    /// The latent-class ordering recovered from the eigendecomposition
    /// cannot be reconciled across exposure levels.
    #[error("latent class ordering is inconsistent across exposure levels: {orderings}")]
    OrderInstability { orderings: String },

    /// A cell of the observed table needed for conditioning is empty.
    #[error("empty stratum: {0}")]
    EmptyStratum(String),

    /// No eigenvalue of the correlation matrix exceeds one and no factor
    /// count override was supplied.
    #[error("factor count selection found no eigenvalue above 1; pass an explicit factor count")]
    NoFactors,

    /// Covariance spectrum has too few positive eigenvalues for the
    /// requested factor count.
    #[error("degenerate spectrum: {positive} positive eigenvalues, {requested} factors requested")]
    DegenerateSpectrum { positive: usize, requested: usize },

    /// Every row subset of the loading matrix was rank deficient, so the
    /// rotation search had no candidate directions.
    #[error("rotation search found no candidate directions")]
    NoCandidates,

    /// The big-M bound is smaller than an attainable rotated loading.
    #[error("bound M={m} is below the largest attainable |loading| {needed:.3}")]
    BadBound { m: f64, needed: f64 },

    /// First-stage design matrix is numerically singular.
    #[error("first stage singular for outcome {outcome}: condition number {cond:.3e}")]
    FirstStageSingular { outcome: usize, cond: f64 },

    /// A log transform was requested on a column with non-positive entries.
    #[error("log transform requested but column {column} has a non-positive entry at row {row}")]
    NonPositiveLog { column: String, row: usize },

    /// Covariate block is rank deficient after adding the intercept.
    #[error("covariate columns are collinear; drop redundant covariates")]
    CovariateCollinearity,

    /// Input file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Command line or configuration usage error.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the command line interface.
    ///
    /// 0 success, 1 usage, 2 parse, 3 estimation, 4 replication failure
    /// rate. Estimation covers every numeric failure mode.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Parse(_) => 2,
            Error::Io(_) => 2,
            _ => 3,
        }
    }
}
