//! A small reverse-mode differentiation engine with the layers the
//! protector, recognizers and attackers need.

pub mod arcface;
pub mod checkpoint;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use arcface::{arcface_value, cosine_logits, MarginConfig, MarginKind};
pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Graph, Param, ParamStore, Var};
pub use model::{build_generator, build_recognizer, build_recovery, ArcFaceHead, Model, ModelSpec, Topology};
pub use optim::{Adam, Sgd};
pub use tensor::Tensor;
