//! Dense tensor math, layers with analytic gradients, SGD and a
//! finite-difference oracle.

pub mod fd;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use fd::{finite_diff_grad, relative_error};
pub use layers::{
    affine_backward, affine_forward, cosine_similarity, l2_normalize, relu, relu_backward,
    softmax, softmax_cross_entropy, AffineCache,
};
pub use optim::{accumulate, sgd_step, GradSet, ParamSet};
pub use rng::{Concern, RngStream, RNG_ALGORITHM};
pub use tensor::{dot, matmul, norm, squared_distance, Tensor};
