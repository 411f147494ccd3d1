//! Dense tensors, reverse-mode differentiation, and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradcheckOptions, GradcheckReport};
pub use params::{Bound, ParamSet};
pub use tape::{Gradients, Tape, Var, COSINE_EPS};
pub use tensor::Tensor;

