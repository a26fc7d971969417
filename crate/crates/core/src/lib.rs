//! Symbolic finite-difference stencil compiler.
//!
//! The pipeline mirrors how the pieces are used together:
//!
//! 1. [`expr`] — immutable symbolic expressions, simplification and a linear
//!    solve that rearranges an equation into an explicit update stencil.
//! 2. [`grid`] / [`fd`] — cartesian grids, grid functions with cyclic time
//!    buffers, and expansion of derivative shorthands into indexed stencils
//!    built from exact-rational finite-difference weights.
//! 3. [`sparse`] — off-grid point sets with linear interpolation (gather)
//!    and injection (scatter-add) operators.
//! 4. [`dse`] — symbolic optimization: common-subexpression elimination,
//!    time-invariant hoisting, weight factorization and flop accounting.
//! 5. [`schedule`] — lowering to an explicit loop-nest IR with bounds,
//!    blocking, parallel/SIMD annotations and block-size auto-tuning.
//! 6. [`exec`] — kernel execution through a flat instruction tape (with a
//!    tree-walking reference interpreter) plus benchmark reporting.
//! 7. [`emitc`] — deterministic C source emission for a scheduled kernel.

pub mod dse;
pub mod elem;
pub mod emitc;
pub mod error;
pub mod exec;
pub mod expr;
pub mod fd;
pub mod grid;
pub mod schedule;
pub mod sparse;
#[cfg(test)]
pub(crate) mod testkit;

pub use elem::Elem;
pub use error::{Error, Result};
pub use expr::{Access, Axis, Equation, Expr, IndexExpr, Side, Sym};
pub use grid::{FnMeta, Grid, GridFunction};
