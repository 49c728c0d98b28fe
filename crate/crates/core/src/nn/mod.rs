//! Dense numerical kernel: matrices, the layer forward/backward pairs, and Adam.

pub mod adam;
pub mod matrix;
pub mod ops;
pub mod sparse;

pub use adam::{adam_step, AdamConfig, ParamTensor};
pub use matrix::DenseMatrix;
pub use ops::{
    affine_backward, affine_forward, dropout_backward, dropout_forward, log_softmax, relu,
    relu_backward, sigmoid, sigmoid_backward, sigmoid_scalar, softmax_cross_entropy, AffineGrads,
    DropoutMask,
};
pub use sparse::CsrMatrix;
