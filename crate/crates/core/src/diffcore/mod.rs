//! Dense f64 tensors, a reverse-mode tape, forward-mode duals for small
//! geometric kernels, and a finite-difference gradient checker.

mod dual;
mod gradcheck;
mod tape;
mod tensor;

pub use dual::{jacobian, Dual, Real, SmoothFn};
pub use gradcheck::{grad_check, GradReport, REL_ERR_FLOOR};
pub use tape::{OpKind, Tape, Var};
pub(crate) use tape::sigmoid;
pub use tensor::{load_all, save_all, Tensor, DTYPE_F64, T4DR_MAGIC, T4DR_VERSION};
