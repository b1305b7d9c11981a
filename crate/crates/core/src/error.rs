use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point {0} lies outside the tabulated grid")]
    OutOfGrid(f64),
    #[error("quadrature supports at most 3 dimensions, got {0}")]
    QuadratureDimension(usize),
    #[error("parameter lies in the kernel null space (z = {0})")]
    NullSpaceParameter(f64),
    #[error("zero numerator: theta^T psi(x) = 0")]
    ZeroNumerator,
    #[error("moment tensor needs {entries} entries, budget is {budget}")]
    EntryBudget { entries: u128, budget: u128 },
    #[error("derivative undefined at the kink a = 0")]
    Kink,
    #[error("measure kind does not factorize: {0}")]
    NotFactorizable(String),
    #[error("density not normalized: mass {0}")]
    NotNormalized(f64),
    #[error("ratio bound r0 = {0} outside (0, 1)")]
    RatioOutOfRange(f64),
    #[error("acceptance rate {0} below 1e-4")]
    LowAcceptance(f64),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("integration failed: {0}")]
    Integration(String),
}

pub type Result<T> = std::result::Result<T, Error>;
