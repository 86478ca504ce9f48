//! Minimal dense numerics for training small convolutional networks on the
//! CPU: tensors, a reverse-mode tape, conv / pool / upsample kernels, a
//! grouped parameter store with Adadelta, and a binary checkpoint format.

mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use error::{NdError, Result};
pub use kernels::Padding;
pub use params::{Adadelta, Bound, Group, Param, ParamGrads, ParamStore};
pub use tape::{Gradients, Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;
