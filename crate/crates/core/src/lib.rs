//! Streaming dual-mode Conformer inference for chunked voice conversion.
//!
//! The model runs in two modes over the same weights. Non-streaming mode sees
//! the whole utterance. Streaming mode restricts attention to a chunk mask
//! and convolution to frames already available at the chunk's right edge,
//! and can be driven incrementally through [`stream::StreamState`] with
//! results identical to the full-sequence masked pass.

pub mod attention;
pub mod bench;
pub mod conformer;
pub mod conv;
pub mod error;
pub mod io;
pub mod masking;
pub mod selftest;
pub mod stream;
pub mod tensor;

pub use conformer::{ConformerConfig, ConversionModel, ModelWeights, SpeakerEmbedding};
pub use conv::Mode;
pub use error::{Error, Result};
pub use masking::ChunkSpec;
pub use stream::{open_stream, open_stream_with_spec, StreamState};
pub use tensor::Tensor;
