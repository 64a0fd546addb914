//! Dense tensors, a fixed layer menu with reverse-mode gradients, and Adam.

mod adam;
mod gradcheck;
mod layers;
mod norm;
mod tensor;

pub use adam::{adam_step, sgd_step, AdamState, Parameter, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, FD_STEP, RELATIVE_FLOOR};
pub use layers::{Layer, LayerSpec, LayerStack};
pub use norm::InstanceNorm;
pub use tensor::Tensor;
