//! Minimal neural-network toolkit: tensors, a reverse-mode tape, a UNet and Adam.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod unet;

pub use graph::{Gradients, Graph, Var};
pub use optim::{cosine_lr, Adam};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
pub use unet::{UNet, UNetConfig};
