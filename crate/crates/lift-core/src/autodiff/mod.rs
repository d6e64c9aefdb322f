//! From-scratch reverse-mode automatic differentiation in f64: a dynamic
//! tape over dense tensors, the layer zoo the models need (dense, conv,
//! transposed conv, pooling, recurrent gates, blur, slicing), seeded
//! parameter stores with Adam/AdamW, and finite-difference verification.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod recurrent;
pub mod tensor;

pub use graph::{Binding, Grads, Graph, NodeId};
pub use params::{Init, OptimConfig, OptimMode, Param, ParamStore};
pub use recurrent::{register_bigru, register_gru, BiGru, GruCell};
pub use tensor::Tensor;
