//! Minimal CPU neural-network substrate with hand-written backpropagation.

mod backbone;
mod layers;
mod tensor;

pub use backbone::{densenet121_features, BackboneKind, ForwardPass, Network};
pub use layers::{
    AvgPool2d, BatchNorm2d, Conv2d, DenseConcat, Layer, MaxPool2d, Param, Relu, Sequential,
};
pub use tensor::{mm, mm_at, mm_bt, Tensor};
