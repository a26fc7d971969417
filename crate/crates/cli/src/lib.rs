//! Worked examples driving the stencil compiler end to end: a linear
//! convection flow, a Laplace steady-state solve with low-level boundary
//! expressions, and acoustic wave propagation with forward and adjoint
//! operators verified by the dot test. Also hosts C code generation for the
//! demo kernels and a small benchmark matrix.

pub mod bench;
pub mod demos;
pub mod model;

/// Errors of the demo layer on top of the core pipeline.
#[derive(Debug)]
pub enum Error {
    Core(stencilforge_core::Error),
    /// Time step violates the stability bound.
    CflViolation { dt: f64, limit: f64 },
    /// Iteration cap reached before the convergence criterion.
    NonConvergence { iterations: usize, last_change: f64 },
    UnknownDemo(String),
}

impl std::fmt::Display for Error {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Error::Core(e) => write!(f, "{e}"),
            Error::CflViolation { dt, limit } => {
                write!(f, "time step {dt} violates the CFL bound {limit}")
            }
            Error::NonConvergence {
                iterations,
                last_change,
            } => write!(
                f,
                "no convergence after {iterations} iterations (last change {last_change:e})"
            ),
            Error::UnknownDemo(id) => write!(f, "unknown demo id {id:?}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<stencilforge_core::Error> for Error {
    fn from(e: stencilforge_core::Error) -> Self {
        Error::Core(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
