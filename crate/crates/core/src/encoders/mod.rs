//! Image and text towers.

mod layers;
mod text;
mod vit;

pub use layers::{LayerNorm, Linear, Mode, MultiHeadAttention, Projection, TransformerBlock};
pub(crate) use layers::interleave_rows;
pub use text::{TextConfig, TextEncoder, Vocabulary, BOS, CONTEXT_LEN, PAD, UNK};
pub use vit::{BatchEncoding, EncoderOutput, VisionTransformer, VitConfig};
