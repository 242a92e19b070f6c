//! Transformer encoder with disentangled attention and a tied masked-LM head.

mod attention;
mod config;
mod encoder;

pub use attention::{
    bucket_matrix, disentangled_attention, relative_bucket, AttentionDims, AttentionOutput,
    MASKED_SCORE,
};
pub use config::ModelConfig;
pub use encoder::{
    parameter_shapes, BoundEncoder, Embedded, EmbeddingOptions, Encoder, EncoderParams,
    LayerParams,
};
