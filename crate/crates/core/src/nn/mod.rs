//! Trainable layers built on the tensor primitives.

mod attention;
mod conv_blocks;
mod head;
mod params;

pub use attention::{
    crop, pad_to_multiple, padded_extents, patchify, unpatchify, AttentionCache, AttentionScale,
    AttentionSpec, HeadConvention, Linear, MultiHeadAttention, NormParams, PatchEmbedding,
    TransformerCache, TransformerLayer,
};
pub use conv_blocks::{ConvDecoder, ConvEncoder, ConvLayerSpec, DecoderCache, EncoderCache, EncoderSpec};
pub use head::{predict, HeadCache, MlpHead};
pub use params::{he_uniform, normal_init, ParamEntry, ParamId, ParamStore};
