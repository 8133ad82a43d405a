//! Minimal dense-tensor math: 2-D tensors, a reverse-mode tape, stable
//! log-domain primitives and keyed random streams.

pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::{standard_normal, RngStream};
pub use tape::{finite_diff_check, Grads, Tape, Var};
pub use tensor::{gaussian_log_pdf, log_sum_exp, pairwise_sum, Tensor, LN_2PI};
