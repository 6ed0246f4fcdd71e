//! Primitive layer operations with forward and backward passes.

pub mod activation;
pub mod channels;
pub mod conv;
pub mod dense;
pub mod loss;
pub mod pool;

pub use activation::{relu_backward, relu_forward};
pub use channels::{concat_channels, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_output_shape, same_padding, ConvWeights, GradBundle};
pub use dense::{dense_backward, dense_forward, DenseWeights};
pub use loss::{softmax, softmax_xent};
pub use pool::{
    global_maxpool_backward, global_maxpool_forward, maxpool_backward, maxpool_forward, PoolIndices,
};
