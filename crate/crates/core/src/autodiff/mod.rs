//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, param_finite_diff_check, relative_error};
pub use params::{ParamId, ParamStore};
pub use tape::{log_softmax_rows, log_sum_exp, softmax_rows, Gradients, Tape, Var};
