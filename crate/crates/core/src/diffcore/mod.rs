//! Dense tensors, seeded random streams and a reverse-mode tape over the
//! fixed operation set used by the denoiser and the erasure energy.

mod float;
mod gradcheck;
pub mod kernels;
mod rng;
mod tape;
mod tensor;

pub use float::Float;
pub use gradcheck::{grad_check, GradCheck, REL_FLOOR};
pub use rng::{Rng, Stream};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
