//! The prediction network.
//!
//! Target frames are embedded as the sum of a semantic embedding, one
//! acoustic (or per-slot MASK) embedding for every `(group, level)` slot, and
//! a learned position embedding. They pass through `layers` pre-norm blocks
//! of self-attention, cross-attention into the prompt, and a GELU
//! feed-forward, then a final norm and one output head per slot.
//!
//! The prompt is embedded from acoustic tokens and positions only, run through
//! a small self-attention encoder, and projected once per block into cross
//! attention keys and values ([`PromptCache`]). Decoding iterations reuse the
//! cache and never touch prompt-side weights again.
//!
//! All parameters live in one flat vector described by [`Layout`]; gradients
//! and optimizer state share that layout.

mod adam;
mod backward;
mod checkpoint;
mod ops;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LogitsGrid, TokenModel};
use crate::scalar::Scalar;
use crate::token::{Cell, GridShape, SemanticSeq, TokenGrid};

pub use adam::{adam_step, adam_update, AdamConfig, AdamState};
pub use checkpoint::{MODEL_MAGIC, MODEL_VERSION};
pub use ops::{gelu, gelu_grad, softmax_in_place};

use ops::{attention, layer_norm, linear, NormTape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictorConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub shape: GridShape,
    pub semantic_vocab: usize,
    /// Longest target or prompt the position tables cover.
    pub max_frames: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            d_model: 128,
            heads: 4,
            layers: 4,
            ff_dim: 512,
            encoder_layers: 2,
            shape: GridShape { groups: 2, levels: 2, codebook_size: 1024 },
            semantic_vocab: 512,
            max_frames: 512,
        }
    }
}

impl PredictorConfig {
    /// Desk-scale defaults for a given grid shape and vocabulary.
    pub fn new(shape: GridShape, semantic_vocab: usize, max_frames: usize) -> Self {
        PredictorConfig { shape, semantic_vocab, max_frames, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("model dim {} is not a multiple of {} heads", self.d_model, self.heads));
        }
        if self.layers == 0 || self.ff_dim == 0 || self.semantic_vocab == 0 || self.max_frames == 0 {
            return bad("layers, feed-forward dim, vocabulary and max frames must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// A parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormBlocks {
    pub gain: Block,
    pub bias: Block,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnBlocks {
    pub wq: Block,
    pub wk: Block,
    pub wv: Block,
    pub wo: Block,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfBlocks {
    pub w1: Block,
    pub b1: Block,
    pub w2: Block,
    pub b2: Block,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderBlocks {
    pub norm_attn: NormBlocks,
    pub attn: AttnBlocks,
    pub norm_ff: NormBlocks,
    pub ff: FfBlocks,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecoderBlocks {
    pub norm_self: NormBlocks,
    pub self_attn: AttnBlocks,
    pub norm_cross: NormBlocks,
    pub cross_attn: AttnBlocks,
    pub norm_ff: NormBlocks,
    pub ff: FfBlocks,
}

/// Where every parameter block sits. Block order is the checkpoint order.
#[derive(Debug, Clone)]
pub struct Layout {
    blocks: Vec<(String, Block)>,
    total: usize,
    pub(crate) semantic: Block,
    /// `slots × codebook_size` rows of acoustic embeddings, shared with the prompt.
    pub(crate) acoustic: Block,
    pub(crate) mask: Block,
    pub(crate) target_pos: Block,
    pub(crate) prompt_pos: Block,
    pub(crate) encoder: Vec<EncoderBlocks>,
    pub(crate) encoder_norm: NormBlocks,
    pub(crate) decoder: Vec<DecoderBlocks>,
    pub(crate) final_norm: NormBlocks,
    /// `slots` stacked `d × C` head matrices.
    pub(crate) head_w: Block,
    pub(crate) head_b: Block,
}

struct LayoutBuilder {
    blocks: Vec<(String, Block)>,
    total: usize,
}

impl LayoutBuilder {
    fn alloc(&mut self, name: String, rows: usize, cols: usize) -> Block {
        let b = Block { offset: self.total, rows, cols };
        self.total += b.len();
        self.blocks.push((name, b));
        b
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormBlocks {
        NormBlocks { gain: self.alloc(format!("{prefix}.gain"), 1, d), bias: self.alloc(format!("{prefix}.bias"), 1, d) }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnBlocks {
        AttnBlocks {
            wq: self.alloc(format!("{prefix}.wq"), d, d),
            wk: self.alloc(format!("{prefix}.wk"), d, d),
            wv: self.alloc(format!("{prefix}.wv"), d, d),
            wo: self.alloc(format!("{prefix}.wo"), d, d),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FfBlocks {
        FfBlocks {
            w1: self.alloc(format!("{prefix}.w1"), d, f),
            b1: self.alloc(format!("{prefix}.b1"), 1, f),
            w2: self.alloc(format!("{prefix}.w2"), f, d),
            b2: self.alloc(format!("{prefix}.b2"), 1, d),
        }
    }
}

impl Layout {
    pub fn new(cfg: &PredictorConfig) -> Self {
        let d = cfg.d_model;
        let slots = cfg.shape.slots();
        let c = cfg.shape.codebook_size;
        let mut b = LayoutBuilder { blocks: Vec::new(), total: 0 };
        let semantic = b.alloc("embed.semantic".into(), cfg.semantic_vocab, d);
        let acoustic = b.alloc("embed.acoustic".into(), slots * c, d);
        let mask = b.alloc("embed.mask".into(), slots, d);
        let target_pos = b.alloc("embed.target_pos".into(), cfg.max_frames, d);
        let prompt_pos = b.alloc("embed.prompt_pos".into(), cfg.max_frames, d);
        let encoder = (0..cfg.encoder_layers)
            .map(|l| {
                let p = format!("encoder.{l}");
                EncoderBlocks {
                    norm_attn: b.norm(&format!("{p}.norm_attn"), d),
                    attn: b.attn(&format!("{p}.attn"), d),
                    norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                    ff: b.ff(&format!("{p}.ff"), d, cfg.ff_dim),
                }
            })
            .collect();
        let encoder_norm = b.norm("encoder.norm", d);
        let decoder = (0..cfg.layers)
            .map(|l| {
                let p = format!("decoder.{l}");
                DecoderBlocks {
                    norm_self: b.norm(&format!("{p}.norm_self"), d),
                    self_attn: b.attn(&format!("{p}.self_attn"), d),
                    norm_cross: b.norm(&format!("{p}.norm_cross"), d),
                    cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                    norm_ff: b.norm(&format!("{p}.norm_ff"), d),
                    ff: b.ff(&format!("{p}.ff"), d, cfg.ff_dim),
                }
            })
            .collect();
        let final_norm = b.norm("final_norm", d);
        let head_w = b.alloc("heads.w".into(), slots * d, c);
        let head_b = b.alloc("heads.b".into(), slots, c);
        Layout {
            blocks: b.blocks,
            total: b.total,
            semantic,
            acoustic,
            mask,
            target_pos,
            prompt_pos,
            encoder,
            encoder_norm,
            decoder,
            final_norm,
            head_w,
            head_b,
        }
    }

    /// Named blocks in storage order.
    pub fn blocks(&self) -> &[(String, Block)] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, b)| *b)
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// Work tallies. Multiply-accumulates are split by where they happen.
#[derive(Debug, Default)]
pub struct OpCounters {
    prompt_encodes: AtomicU64,
    prompt_projections: AtomicU64,
    forwards: AtomicU64,
    prompt_macs: AtomicU64,
    target_macs: AtomicU64,
    cross_attention_macs: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Prompt encoder stack runs.
    pub prompt_encodes: u64,
    /// Key/value projections of prompt states into a cache.
    pub prompt_projections: u64,
    /// Decoder passes over target frames.
    pub forwards: u64,
    /// Encoder blocks and key/value projections.
    pub prompt_macs: u64,
    /// Everything in a forward except the cross-attention score/value products.
    pub target_macs: u64,
    /// Cross-attention scores and weighted value sums.
    pub cross_attention_macs: u64,
}

impl OpCounters {
    fn add(counter: &AtomicU64, v: usize) {
        counter.fetch_add(v as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            prompt_encodes: self.prompt_encodes.load(Ordering::Relaxed),
            prompt_projections: self.prompt_projections.load(Ordering::Relaxed),
            forwards: self.forwards.load(Ordering::Relaxed),
            prompt_macs: self.prompt_macs.load(Ordering::Relaxed),
            target_macs: self.target_macs.load(Ordering::Relaxed),
            cross_attention_macs: self.cross_attention_macs.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [
            &self.prompt_encodes,
            &self.prompt_projections,
            &self.forwards,
            &self.prompt_macs,
            &self.target_macs,
            &self.cross_attention_macs,
        ] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Output of the prompt encoder, before projection.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptStates<S> {
    pub frames: usize,
    pub states: Vec<S>,
}

/// Per-block cross-attention keys and values over the prompt frames.
/// Row `i` of `keys[l]` holds all heads side by side (head `h` in columns
/// `h·dk..(h+1)·dk`).
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCache<S> {
    pub frames: usize,
    pub keys: Vec<Vec<S>>,
    pub values: Vec<Vec<S>>,
}

impl<S: Scalar> PromptCache<S> {
    /// Key of prompt frame `row` for `head` in block `layer`.
    pub fn key(&self, layer: usize, head: usize, row: usize, head_dim: usize) -> &[S] {
        let d = self.keys[layer].len() / self.frames;
        let o = row * d + head * head_dim;
        &self.keys[layer][o..o + head_dim]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnTape<S> {
    pub input: Vec<S>,
    pub q: Vec<S>,
    pub k: Vec<S>,
    pub v: Vec<S>,
    pub probs: Vec<S>,
    pub ctx: Vec<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct FfTape<S> {
    pub input: Vec<S>,
    pub pre: Vec<S>,
    pub act: Vec<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderLayerTape<S> {
    pub norm_attn: NormTape<S>,
    pub attn: AttnTape<S>,
    pub norm_ff: NormTape<S>,
    pub ff: FfTape<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderLayerTape<S> {
    pub norm_self: NormTape<S>,
    pub self_attn: AttnTape<S>,
    pub norm_cross: NormTape<S>,
    /// `k`/`v` are left empty: they live in the prompt cache.
    pub cross_attn: AttnTape<S>,
    pub norm_ff: NormTape<S>,
    pub ff: FfTape<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderTape<S> {
    pub prompt: TokenGrid,
    pub layers: Vec<EncoderLayerTape<S>>,
    pub norm: NormTape<S>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderTape<S> {
    pub sem: SemanticSeq,
    pub grid: TokenGrid,
    pub layers: Vec<DecoderLayerTape<S>>,
    pub final_norm: NormTape<S>,
    pub hidden: Vec<S>,
}

/// Everything a training forward keeps for [`Predictor::backward`].
#[derive(Debug, Clone)]
pub struct Tape<S> {
    generation: u64,
    pub(crate) encoder: EncoderTape<S>,
    pub(crate) states: PromptStates<S>,
    pub(crate) cache: PromptCache<S>,
    pub(crate) decoder: DecoderTape<S>,
}

/// Parameter gradients in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub values: Vec<S>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros(len: usize) -> Self {
        Gradients { values: vec![S::zero(); len] }
    }

    pub fn block(&self, b: Block) -> &[S] {
        &self.values[b.range()]
    }

    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: S) {
        for v in &mut self.values {
            *v *= k;
        }
    }

    pub fn norm(&self) -> S {
        self.values.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub struct Predictor<S> {
    config: PredictorConfig,
    layout: Layout,
    params: Vec<S>,
    generation: u64,
    counters: OpCounters,
}

impl<S: Scalar> Clone for Predictor<S> {
    /// Clones parameters; the clone starts with zeroed counters.
    fn clone(&self) -> Self {
        Predictor {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.clone(),
            generation: self.generation,
            counters: OpCounters::default(),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Predictor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Predictor").field("config", &self.config).field("params", &self.params.len()).finish()
    }
}

impl<S: Scalar> Predictor<S> {
    /// Uniform initialization in `±1/√fan_in` for every matrix and embedding;
    /// norm gains start at one, biases at zero.
    pub fn init(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![S::zero(); layout.total()];
        let d = config.d_model as f64;
        for (name, block) in layout.blocks() {
            let scale = if name.ends_with(".gain") {
                for v in &mut params[block.range()] {
                    *v = S::one();
                }
                continue;
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name == "heads.b" {
                continue;
            } else if name.ends_with(".w2") {
                1.0 / (config.ff_dim as f64).sqrt()
            } else {
                1.0 / d.sqrt()
            };
            for v in &mut params[block.range()] {
                *v = S::lit(rng.random_range(-scale..scale));
            }
        }
        Ok(Predictor { config, layout, params, generation: 0, counters: OpCounters::default() })
    }

    pub(crate) fn from_parts(config: PredictorConfig, params: Vec<S>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::ShapeMismatch(format!("{} parameters, layout needs {}", params.len(), layout.total())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        Ok(Predictor { config, layout, params, generation: 0, counters: OpCounters::default() })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[S] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [S] {
        self.generation += 1;
        &mut self.params
    }

    pub fn block(&self, b: Block) -> &[S] {
        &self.params[b.range()]
    }

    pub fn counters(&self) -> &OpCounters {
        &self.counters
    }

    fn p(&self, b: Block) -> &[S] {
        &self.params[b.range()]
    }

    fn check_frames(&self, frames: usize, what: &str) -> Result<()> {
        if frames == 0 || frames > self.config.max_frames {
            return Err(Error::ShapeMismatch(format!("{what} of {frames} frames, model supports 1..={}", self.config.max_frames)));
        }
        Ok(())
    }

    fn check_shape(&self, grid: &TokenGrid) -> Result<()> {
        if grid.shape() != self.config.shape {
            return Err(Error::ShapeMismatch(format!("grid shape {:?} vs model {:?}", grid.shape(), self.config.shape)));
        }
        Ok(())
    }

    fn add_row(dst: &mut [S], src: &[S]) {
        for (a, &b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }

    /// Target frame inputs: semantic + per-slot acoustic or MASK + position.
    pub fn embed_frames(&self, sem: &SemanticSeq, grid: &TokenGrid) -> Result<Vec<S>> {
        self.check_shape(grid)?;
        if sem.len() != grid.frames() {
            return Err(Error::ShapeMismatch(format!("semantic length {} vs {} frames", sem.len(), grid.frames())));
        }
        if sem.vocab() > self.config.semantic_vocab {
            return Err(Error::ShapeMismatch(format!("semantic vocabulary {} exceeds model's {}", sem.vocab(), self.config.semantic_vocab)));
        }
        self.check_frames(grid.frames(), "target")?;
        let d = self.config.d_model;
        let shape = self.config.shape;
        let (sem_tab, ac, mask, pos) =
            (self.p(self.layout.semantic), self.p(self.layout.acoustic), self.p(self.layout.mask), self.p(self.layout.target_pos));
        let mut x = vec![S::zero(); grid.frames() * d];
        for (t, row) in x.chunks_exact_mut(d).enumerate() {
            let s = sem.ids()[t] as usize;
            row.copy_from_slice(&sem_tab[s * d..(s + 1) * d]);
            for g in 0..shape.groups {
                for j in 0..shape.levels {
                    let slot = shape.slot(g, j);
                    match grid.get(Cell::new(t, g, j)) {
                        Some(tok) => {
                            let r = slot * shape.codebook_size + tok as usize;
                            Self::add_row(row, &ac[r * d..(r + 1) * d]);
                        }
                        None => Self::add_row(row, &mask[slot * d..(slot + 1) * d]),
                    }
                }
            }
            Self::add_row(row, &pos[t * d..(t + 1) * d]);
        }
        Ok(x)
    }

    /// Prompt frame inputs: acoustic embeddings + prompt position.
    pub fn embed_prompt(&self, prompt: &TokenGrid) -> Result<Vec<S>> {
        self.check_shape(prompt)?;
        self.check_frames(prompt.frames(), "prompt")?;
        if let Some(cell) = prompt.first_masked() {
            return Err(Error::MaskedCell(cell));
        }
        let d = self.config.d_model;
        let shape = self.config.shape;
        let (ac, pos) = (self.p(self.layout.acoustic), self.p(self.layout.prompt_pos));
        let mut x = vec![S::zero(); prompt.frames() * d];
        for (t, row) in x.chunks_exact_mut(d).enumerate() {
            row.copy_from_slice(&pos[t * d..(t + 1) * d]);
            for g in 0..shape.groups {
                for j in 0..shape.levels {
                    let r = shape.slot(g, j) * shape.codebook_size + prompt.token(Cell::new(t, g, j)) as usize;
                    Self::add_row(row, &ac[r * d..(r + 1) * d]);
                }
            }
        }
        Ok(x)
    }

    fn self_attention(&self, blocks: &AttnBlocks, input: Vec<S>, macs: &mut usize) -> AttnTape<S> {
        let d = self.config.d_model;
        let n = input.len() / d;
        let mut q = vec![S::zero(); n * d];
        let mut k = vec![S::zero(); n * d];
        let mut v = vec![S::zero(); n * d];
        linear(&input, d, self.p(blocks.wq), d, None, &mut q);
        linear(&input, d, self.p(blocks.wk), d, None, &mut k);
        linear(&input, d, self.p(blocks.wv), d, None, &mut v);
        let mut probs = vec![S::zero(); self.config.heads * n * n];
        let mut ctx = vec![S::zero(); n * d];
        attention(&q, &k, &v, d, self.config.heads, &mut probs, &mut ctx);
        *macs += 3 * n * d * d + 2 * n * n * d;
        AttnTape { input, q, k, v, probs, ctx }
    }

    /// Adds `ctx·wo` to the residual stream.
    fn attn_out(&self, wo: Block, ctx: &[S], x: &mut [S], macs: &mut usize) {
        let d = self.config.d_model;
        let mut out = vec![S::zero(); ctx.len()];
        linear(ctx, d, self.p(wo), d, None, &mut out);
        *macs += ctx.len() * d;
        Self::add_row(x, &out);
    }

    fn feed_forward(&self, blocks: &FfBlocks, input: Vec<S>, x: &mut [S], macs: &mut usize) -> FfTape<S> {
        let d = self.config.d_model;
        let f = self.config.ff_dim;
        let n = input.len() / d;
        let mut pre = vec![S::zero(); n * f];
        linear(&input, d, self.p(blocks.w1), f, Some(self.p(blocks.b1)), &mut pre);
        let act: Vec<S> = pre.iter().map(|&v| ops::gelu(v)).collect();
        let mut out = vec![S::zero(); n * d];
        linear(&act, f, self.p(blocks.w2), d, Some(self.p(blocks.b2)), &mut out);
        *macs += 2 * n * d * f;
        Self::add_row(x, &out);
        FfTape { input, pre, act }
    }

    fn norm(&self, blocks: &NormBlocks, x: &[S]) -> (Vec<S>, NormTape<S>) {
        let mut out = vec![S::zero(); x.len()];
        let tape = layer_norm(x, self.config.d_model, self.p(blocks.gain), self.p(blocks.bias), &mut out);
        (out, tape)
    }

    fn run_encoder(&self, prompt: &TokenGrid) -> Result<(PromptStates<S>, EncoderTape<S>)> {
        let mut x = self.embed_prompt(prompt)?;
        let mut macs = 0;
        let mut layers = Vec::with_capacity(self.layout.encoder.len());
        for blocks in &self.layout.encoder {
            let (h, norm_attn) = self.norm(&blocks.norm_attn, &x);
            let attn = self.self_attention(&blocks.attn, h, &mut macs);
            self.attn_out(blocks.attn.wo, &attn.ctx, &mut x, &mut macs);
            let (h, norm_ff) = self.norm(&blocks.norm_ff, &x);
            let ff = self.feed_forward(&blocks.ff, h, &mut x, &mut macs);
            layers.push(EncoderLayerTape { norm_attn, attn, norm_ff, ff });
        }
        let (states, norm) = self.norm(&self.layout.encoder_norm, &x);
        OpCounters::add(&self.counters.prompt_encodes, 1);
        OpCounters::add(&self.counters.prompt_macs, macs);
        Ok((PromptStates { frames: prompt.frames(), states }, EncoderTape { prompt: prompt.clone(), layers, norm }))
    }

    /// Runs the prompt encoder only.
    pub fn encode_prompt_states(&self, prompt: &TokenGrid) -> Result<PromptStates<S>> {
        Ok(self.run_encoder(prompt)?.0)
    }

    /// Projects encoder states into per-block cross-attention keys and values.
    pub fn project_prompt(&self, states: &PromptStates<S>) -> PromptCache<S> {
        let d = self.config.d_model;
        let n = states.frames;
        let mut keys = Vec::with_capacity(self.layout.decoder.len());
        let mut values = Vec::with_capacity(self.layout.decoder.len());
        for blocks in &self.layout.decoder {
            let mut k = vec![S::zero(); n * d];
            let mut v = vec![S::zero(); n * d];
            linear(&states.states, d, self.p(blocks.cross_attn.wk), d, None, &mut k);
            linear(&states.states, d, self.p(blocks.cross_attn.wv), d, None, &mut v);
            keys.push(k);
            values.push(v);
        }
        OpCounters::add(&self.counters.prompt_projections, 1);
        OpCounters::add(&self.counters.prompt_macs, 2 * n * d * d * self.layout.decoder.len());
        PromptCache { frames: n, keys, values }
    }

    /// Encoder plus projection: the per-decode prompt cache.
    pub fn encode_prompt(&self, prompt: &TokenGrid) -> Result<PromptCache<S>> {
        let states = self.encode_prompt_states(prompt)?;
        Ok(self.project_prompt(&states))
    }

    fn run_decoder(&self, sem: &SemanticSeq, grid: &TokenGrid, cache: &PromptCache<S>) -> Result<(LogitsGrid<S>, DecoderTape<S>)> {
        if cache.keys.len() != self.layout.decoder.len() {
            return Err(Error::ShapeMismatch("prompt cache built for a different depth".into()));
        }
        let mut x = self.embed_frames(sem, grid)?;
        let d = self.config.d_model;
        let heads = self.config.heads;
        let n = grid.frames();
        let m = cache.frames;
        let mut macs = 0;
        let mut cross_macs = 0;
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for (l, blocks) in self.layout.decoder.iter().enumerate() {
            let (h, norm_self) = self.norm(&blocks.norm_self, &x);
            let self_attn = self.self_attention(&blocks.self_attn, h, &mut macs);
            self.attn_out(blocks.self_attn.wo, &self_attn.ctx, &mut x, &mut macs);

            let (h, norm_cross) = self.norm(&blocks.norm_cross, &x);
            let mut q = vec![S::zero(); n * d];
            linear(&h, d, self.p(blocks.cross_attn.wq), d, None, &mut q);
            macs += n * d * d;
            let mut probs = vec![S::zero(); heads * n * m];
            let mut ctx = vec![S::zero(); n * d];
            attention(&q, &cache.keys[l], &cache.values[l], d, heads, &mut probs, &mut ctx);
            cross_macs += 2 * n * m * d;
            self.attn_out(blocks.cross_attn.wo, &ctx, &mut x, &mut macs);
            let cross_attn = AttnTape { input: h, q, k: Vec::new(), v: Vec::new(), probs, ctx };

            let (h, norm_ff) = self.norm(&blocks.norm_ff, &x);
            let ff = self.feed_forward(&blocks.ff, h, &mut x, &mut macs);
            layers.push(DecoderLayerTape { norm_self, self_attn, norm_cross, cross_attn, norm_ff, ff });
        }
        let (hidden, final_norm) = self.norm(&self.layout.final_norm, &x);

        let shape = self.config.shape;
        let c = shape.codebook_size;
        let slots = shape.slots();
        let mut logits = LogitsGrid::zeros(shape, n);
        let (hw, hb) = (self.p(self.layout.head_w), self.p(self.layout.head_b));
        {
            let out = logits.data_mut();
            for t in 0..n {
                for s in 0..slots {
                    out[(t * slots + s) * c..(t * slots + s + 1) * c].copy_from_slice(&hb[s * c..(s + 1) * c]);
                }
            }
            for s in 0..slots {
                S::gemm(
                    n,
                    d,
                    c,
                    S::one(),
                    crate::scalar::View::rows(&hidden, d),
                    crate::scalar::View::rows(&hw[s * d * c..(s + 1) * d * c], c),
                    S::one(),
                    &mut out[s * c..],
                    slots * c,
                );
            }
        }
        macs += n * d * c * slots;
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        OpCounters::add(&self.counters.forwards, 1);
        OpCounters::add(&self.counters.target_macs, macs);
        OpCounters::add(&self.counters.cross_attention_macs, cross_macs);
        Ok((logits, DecoderTape { sem: sem.clone(), grid: grid.clone(), layers, final_norm, hidden }))
    }

    /// One decoding pass against a prebuilt prompt cache.
    pub fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, cache: &PromptCache<S>) -> Result<LogitsGrid<S>> {
        Ok(self.run_decoder(sem, grid, cache)?.0)
    }

    /// Same as [`forward`](Self::forward) but projects `states` into keys and
    /// values on every call instead of using a cache.
    pub fn forward_reprojecting(&self, sem: &SemanticSeq, grid: &TokenGrid, states: &PromptStates<S>) -> Result<LogitsGrid<S>> {
        let cache = self.project_prompt(states);
        self.forward(sem, grid, &cache)
    }

    /// Training forward: encodes `prompt`, runs the decoder and keeps the tape.
    pub fn forward_train(&self, sem: &SemanticSeq, grid: &TokenGrid, prompt: &TokenGrid) -> Result<(LogitsGrid<S>, Tape<S>)> {
        let (states, encoder) = self.run_encoder(prompt)?;
        let cache = self.project_prompt(&states);
        let (logits, decoder) = self.run_decoder(sem, grid, &cache)?;
        Ok((logits, Tape { generation: self.generation, encoder, states, cache, decoder }))
    }
}

impl<S: Scalar> TokenModel<S> for Predictor<S> {
    type Prompt = PromptCache<S>;

    fn encode_prompt(&self, prompt: &TokenGrid) -> Result<PromptCache<S>> {
        Predictor::encode_prompt(self, prompt)
    }

    fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, prompt: &PromptCache<S>) -> Result<LogitsGrid<S>> {
        Predictor::forward(self, sem, grid, prompt)
    }
}

/// Adapter that recomputes the whole prompt side (encoder and projections)
/// on every forward, as a model without a prompt cache would.
pub struct Uncached<'a, S>(pub &'a Predictor<S>);

impl<S> Clone for Uncached<'_, S> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<S> Copy for Uncached<'_, S> {}

impl<S: Scalar> TokenModel<S> for Uncached<'_, S> {
    type Prompt = TokenGrid;

    fn encode_prompt(&self, prompt: &TokenGrid) -> Result<TokenGrid> {
        if let Some(cell) = prompt.first_masked() {
            return Err(Error::MaskedCell(cell));
        }
        Ok(prompt.clone())
    }

    fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, prompt: &TokenGrid) -> Result<LogitsGrid<S>> {
        let cache = self.0.encode_prompt(prompt)?;
        self.0.forward(sem, grid, &cache)
    }
}

#[cfg(test)]
mod tests;
