//! Dense 64-bit tensors and a reverse-mode tape.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GRAD_CHECK_FLOOR};
pub use tape::{sigmoid, ParamId, ParamStore, Tape, Var};
pub use tensor::{log_add_exp, log_sum_exp, Tensor, MASKED_CUTOFF, MASK_SENTINEL};

#[cfg(test)]
mod tests;
