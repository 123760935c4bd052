//! Reverse-mode differentiation over flat parameter arrays, the Adam
//! optimizer, and a finite-difference validation harness.

mod adam;
mod fd;
mod param;
mod tape;

pub use adam::AdamState;
pub use fd::{fd_check, FdReport};
pub use param::{ParamGroup, ParamStore};
pub use tape::{CustomOp, Tape, Tensor, Var};
