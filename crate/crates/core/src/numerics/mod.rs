//! Tensor arithmetic, reverse-mode gradients, keyed random streams and the
//! shared numerical kernels.

pub mod autodiff;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod rng;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{correlation_matrix, sample_poisson, softmax, CorrelationMatrix};
pub use rng::SeededRng;
pub use tensor::Tensor;
