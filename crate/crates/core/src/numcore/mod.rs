//! Dense numeric substrate: tensors, softmax, a tanh MLP with exact backward
//! passes, SGD with momentum and a central-difference gradient oracle.

mod finite_diff;
mod mlp;
mod optim;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error, richardson_grad, REL_ERR_FLOOR};
pub use mlp::{
    mlp_backward, mlp_forward, mlp_forward_backward, Activation, Linear, LinearGrad, MlpGrads,
    MlpParams, MlpTrace,
};
pub use optim::{Sgd, SgdConfig};
pub use tensor::{log_sum_exp, masked_softmax, softmax, Tensor, UNSEEN_LOGIT};
