//! Predictor checkpoints.
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `GMLM` |
//! | 1 | version (1) |
//! | 4 × 10 | u32: d_model, heads, layers, ff_dim, encoder_layers, groups, levels, codebook_size, semantic_vocab, max_frames |
//! | 8 | u64 parameter count |
//! | 4 × count | f32 parameters, blocks in [`Layout::blocks`](super::Layout::blocks) order, each row-major |
//!
//! Everything is little-endian.

use std::path::Path;

use super::{Predictor, PredictorConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::token::{GridShape, Reader};

pub const MODEL_MAGIC: [u8; 4] = *b"GMLM";
pub const MODEL_VERSION: u8 = 1;

impl<S: Scalar> Predictor<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(53 + 4 * self.params.len());
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        for v in [
            c.d_model,
            c.heads,
            c.layers,
            c.ff_dim,
            c.encoder_layers,
            c.shape.groups,
            c.shape.levels,
            c.shape.codebook_size,
            c.semantic_vocab,
            c.max_frames,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u8("version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut f = [0usize; 10];
        for v in &mut f {
            *v = r.u32("config")? as usize;
        }
        let config = PredictorConfig {
            d_model: f[0],
            heads: f[1],
            layers: f[2],
            ff_dim: f[3],
            encoder_layers: f[4],
            shape: GridShape { groups: f[5], levels: f[6], codebook_size: f[7] },
            semantic_vocab: f[8],
            max_frames: f[9],
        };
        config.validate()?;
        let count = r.u64("parameter count")? as usize;
        let params = (0..count)
            .map(|_| r.f32("parameters").map(|v| S::from_f32(v).unwrap_or_else(S::nan)))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Predictor::from_parts(config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
