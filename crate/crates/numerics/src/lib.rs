//! f64 tensors, a reverse-mode tape and the small set of kernels the
//! pipeline needs: matmul, softmax, cosine, multi-head attention, layer
//! norm, depthwise convolution, top-k and k-means.

pub mod binio;
pub mod error;
pub mod gradcheck;
pub mod kmeans;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{check_tape_fn, finite_difference_check, relative_error, FdConfig, FdReport};
pub use kmeans::{kmeans, kmeans_plus_plus, KMeansResult};
pub use ops::{
    argmax, cosine_similarity, depthwise_conv2d, layer_norm, matmul, multi_head_attention,
    softmax, softmax_rows, softmax_vec, top_k, AttentionParams,
};
pub use tape::{GradRecord, Gradients, Var};
pub use tensor::{dot, l2_norm, normalized, Tensor};
