//! Dense arrays with a small eager reverse-mode autodiff tape.
//!
//! Everything in the lane detector is expressed with the primitive ops on
//! [`Tape`]. Forward values are computed eagerly when an op is recorded, so
//! graph construction may branch on values; [`Tape::gradients`] walks the
//! recorded nodes once in reverse order.
//!
//! Training runs in `f32`; the gradient checker runs the same graphs in `f64`.

mod array;
mod backward;
pub mod checkpoint;
mod error;
mod gemm;
pub mod gradcheck;
mod ops;
pub mod optim;
mod real;
mod tape;

pub use array::Array;
pub use error::{NumericsError, Result};
pub use real::Real;
pub use tape::{Tape, Var};
