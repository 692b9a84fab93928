//! Dense arrays and tape-based reverse-mode differentiation.

mod dense;
mod gradcheck;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{check_gradient, GradCheckReport};
pub use tape::{BinaryKind, ConvGeom, DiffValue, Tape, UnaryKind, ValueId};
