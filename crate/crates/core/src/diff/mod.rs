//! Dense tensors, reverse-mode gradients, Adam and parameter storage.

mod activation;
mod adam;
pub mod checkpoint;
mod init;
mod param;
mod tape;
mod tensor;

pub use adam::Adam;
pub use init::{xavier_bound, xavier_init};
pub(crate) use init::xavier_with;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub(crate) use activation::sigmoid;
pub use tensor::Tensor;
