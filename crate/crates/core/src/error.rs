use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid noise model: alpha={alpha}, beta={beta} (both must lie in (0, 1])")]
    InvalidNoise { alpha: f64, beta: f64 },

    #[error("circuit depth must be at least 1")]
    ZeroDepth,

    #[error("invalid measurement record: {successes} successes out of {shots} shots")]
    InvalidRecord { shots: u64, successes: f64 },

    #[error("variance diverges: |sin(n*theta + phi)| = {sin_abs:e} is below the singular tolerance")]
    VarianceDivergence { sin_abs: f64 },

    #[error("grid of {grid_size} cells is too coarse for circuit depth {depth} (need at least 32 cells per period)")]
    GridTooCoarse { grid_size: usize, depth: u32 },

    #[error("grid size {0} is below the minimum of 64 cells")]
    GridTooSmall(usize),

    #[error("observation has zero likelihood everywhere on the posterior support")]
    ImpossibleObservation,

    #[error("circular mean is undefined: resultant length {0:e} is too small")]
    UndefinedMean(f64),

    #[error("insufficient resources: {available} left, circuit depth {depth}")]
    InsufficientResources { available: u64, depth: u32 },

    #[error("interval of half-width {inner} cannot nest inside interval of half-width {outer}")]
    InfeasibleInterval { inner: f64, outer: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("qubit count {0} outside the supported range 1..=24")]
    QubitCountOutOfRange(u32),

    #[error("Chernoff chain needs {needed:.1} unitary applications but only {available} are available")]
    InfeasibleChain { needed: f64, available: u64 },

    #[error("degenerate fit input: {0}")]
    DegenerateFit(String),

    #[error("empty aggregation group")]
    EmptyGroup,

    #[error("{0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
