//! Group-masked token modeling over grouped residual-quantized token grids.
//!
//! * [`token`]: token grids, coarse/fine views and the `GACT` file format
//! * [`codec`]: a small grouped residual vector quantizer and bitrate arithmetic
//! * [`world`]: a synthetic token world with an exact posterior oracle
//! * [`nn`]: the prediction network with a cached cross-attention prompt path
//! * [`train`]: group-wise masking, masked cross-entropy and the training loop
//! * [`sampler`]: grouped iterative parallel decoding and a level-wise baseline
//! * [`bench`]: runtime benchmarks with CSV and SVG output

pub mod bench;
pub mod codec;
pub mod config;
pub mod error;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod scalar;
pub mod token;
pub mod train;
pub mod world;

#[cfg(test)]
mod properties;

pub use error::{Error, Result};
pub use model::{LogitsGrid, TokenModel};
pub use scalar::Scalar;
pub use token::{Cell, CodecParams, Fill, GridShape, SemanticSeq, TokenGrid, TokenId};

pub type GrvqCodec64 = codec::GrvqCodec<f64>;
pub type GrvqCodec32 = codec::GrvqCodec<f32>;
pub type Predictor64 = nn::Predictor<f64>;
pub type Predictor32 = nn::Predictor<f32>;
