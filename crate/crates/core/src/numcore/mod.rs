//! Dense tensors, seeded random streams and reverse-mode differentiation.

pub mod linalg;
mod rng;
mod tape;
mod tensor;

pub use rng::{Rng, SampleKind};
pub use tape::{concat, Tape, Var};
pub use tensor::Tensor;
