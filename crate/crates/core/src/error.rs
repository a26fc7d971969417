//! Error types shared across the compiler pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// The solve target occurs nonlinearly (power != 1 or inside a divisor).
    #[error("equation is not linear in the solve target {0}")]
    NonLinearTarget(String),

    /// The solve target has an identically zero coefficient.
    #[error("solve target {0} is absent from the equation")]
    TargetAbsent(String),

    /// Finite-difference weight system is singular (repeated offsets).
    #[error("singular weight system: repeated stencil offsets")]
    SingularSystem,

    /// A stencil offset exceeds the halo of the accessed function.
    #[error("stencil on {func} reaches offset {offset} beyond halo {halo}")]
    HaloExceeded {
        func: String,
        offset: i64,
        halo: i64,
    },

    /// A time operation was applied to a function without a time dimension.
    #[error("function {0} is not time-varying")]
    NotTimeVarying(String),

    /// A sparse point (or its containing cell) lies outside the grid.
    #[error("point {0:?} is outside the grid interior")]
    OutOfDomain(Vec<f64>),

    /// A spacing placeholder symbol survived to scheduling.
    #[error("spacing symbol {0} has no numeric substitution")]
    UnboundSpacing(String),

    /// A kernel argument is missing from the data binding.
    #[error("no data bound for symbol {0}")]
    MissingBinding(String),

    /// A bound buffer does not match the declared shape.
    #[error("shape mismatch for {name}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// An expression is too deep for the tape evaluation stack.
    #[error("expression needs stack depth {needed}, tape bound is {bound}")]
    StackOverflowBound { needed: usize, bound: usize },

    /// A derivative node survived where only discretized input is valid.
    #[error("unexpanded derivative node in {0}")]
    UnexpandedDerivative(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Parse(String),
}
