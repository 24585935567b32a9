//! Release-schedule optimization for cascaded hydropower reservoirs.
//!
//! A convex surrogate of the scheduling problem (linear generation and
//! level-volume relations) is continuously deformed into the full nonlinear
//! problem by a homotopy parameter `θ ∈ [0, 1]`. Every intermediate problem is
//! solved by a primal log-barrier Newton method warm-started from the
//! previous `θ`.

// `!(a < b)` is used on purpose so NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barrier;
pub mod continuation;
pub mod io;
pub mod linalg;
pub mod model;
pub mod nlp;
pub mod structure;
