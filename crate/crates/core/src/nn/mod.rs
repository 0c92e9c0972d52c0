//! Layer forward/backward passes and the sequential network that chains them.

mod activation;
mod conv;
mod dense;
mod network;
mod pool;

pub use activation::{
    dropout, relu, relu_backward, softmax, softmax_backward, softmax_cross_entropy_grad, DropoutMask,
};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_cached, im2col, ConvCache, ConvGrads, ConvSpec, Pad};
pub use dense::{fc_backward, fc_forward, DenseGrads};
pub use network::{Layer, Mode, Network, Trace};
pub use pool::{pool_backward, pool_forward, PoolCache, PoolMode, PoolSpec};
