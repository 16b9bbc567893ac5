//! Dense matrix math with reverse-mode gradients and transformer blocks.

mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{sigmoid, AttnMask, Graph, Var};
pub use nn::{multi_head_attention, transformer_encoder_layer, LayerDims};
pub use optim::Adam;
pub use params::{Gradients, Param, ParameterSet};
pub use tensor::{cosine, dot, norm, Tensor};
