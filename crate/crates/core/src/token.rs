//! Acoustic token grids, semantic sequences and the `GACT` token file format.
//!
//! A grid holds `frames × groups × levels` token ids in frame-major,
//! group-major, level-minor order, each with a mask flag. Level 0 of every
//! group forms the coarse tokens; deeper levels are the fine tokens.
//!
//! `GACT` layout (all integers little-endian):
//!
//! | offset | width | field                              |
//! |--------|-------|------------------------------------|
//! | 0      | 4     | magic `"GACT"`                     |
//! | 4      | 1     | version (1)                        |
//! | 5      | 4     | frame count T (u32)                |
//! | 9      | 1     | groups G (u8)                      |
//! | 10     | 1     | levels N_q (u8)                    |
//! | 11     | 4     | codebook size C (u32)              |
//! | 15     | 4     | semantic vocabulary size S_v (u32) |
//! | 19     | 2·T   | semantic ids (u16)                 |
//! | …      | 2·T·G·N_q | tokens (u16), grid order       |

use std::fmt;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const GACT_MAGIC: [u8; 4] = *b"GACT";
pub const GACT_VERSION: u8 = 1;
pub const GACT_HEADER_LEN: usize = 19;

/// The token-facing part of the codec parameters: how many groups and
/// levels a frame has and how many ids each codebook holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub groups: usize,
    pub levels: usize,
    pub codebook_size: usize,
}

impl GridShape {
    pub fn new(groups: usize, levels: usize, codebook_size: usize) -> Result<Self> {
        let shape = GridShape { groups, levels, codebook_size };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.levels == 0 {
            return Err(Error::InvalidParams("groups and levels must be at least 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidParams("codebook size must be at least 2".into()));
        }
        Ok(())
    }

    /// Cells per frame.
    pub fn slots(&self) -> usize {
        self.groups * self.levels
    }

    /// Position of `(group, level)` within a frame.
    pub fn slot(&self, group: usize, level: usize) -> usize {
        group * self.levels + level
    }
}

/// Codec-level parameters: grid shape plus latent width and frame rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecParams {
    pub groups: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub frames_per_second: f64,
}

impl Default for CodecParams {
    /// Two groups, two levels, 1024-entry codebooks at 50 frames/s.
    fn default() -> Self {
        CodecParams { groups: 2, levels: 2, codebook_size: 1024, latent_dim: 16, frames_per_second: 50.0 }
    }
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        self.shape().validate()?;
        if self.latent_dim == 0 || self.latent_dim % self.groups != 0 {
            return Err(Error::InvalidParams(format!(
                "latent dim {} must be a positive multiple of groups {}",
                self.latent_dim, self.groups
            )));
        }
        if !(self.frames_per_second.is_finite() && self.frames_per_second > 0.0) {
            return Err(Error::InvalidParams("frames per second must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> GridShape {
        GridShape { groups: self.groups, levels: self.levels, codebook_size: self.codebook_size }
    }

    pub fn group_dim(&self) -> usize {
        self.latent_dim / self.groups
    }
}

/// One `(frame, group, level)` position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub frame: usize,
    pub group: usize,
    pub level: usize,
}

impl Cell {
    pub fn new(frame: usize, group: usize, level: usize) -> Self {
        Cell { frame, group, level }
    }

    pub fn is_coarse(&self) -> bool {
        self.level == 0
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(t={}, g={}, j={})", self.frame, self.group, self.level)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fill {
    Token(TokenId),
    AllMasked,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    shape: GridShape,
    frames: usize,
    tokens: Vec<TokenId>,
    mask: Vec<bool>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, frames: usize, fill: Fill) -> Result<Self> {
        shape.validate()?;
        if frames == 0 {
            return Err(Error::ZeroFrames);
        }
        let n = frames * shape.slots();
        let (token, masked) = match fill {
            Fill::Token(id) => {
                if id as usize >= shape.codebook_size {
                    return Err(Error::TokenOutOfRange { id, codebook_size: shape.codebook_size });
                }
                (id, false)
            }
            Fill::AllMasked => (0, true),
        };
        Ok(TokenGrid { shape, frames, tokens: vec![token; n], mask: vec![masked; n] })
    }

    /// Builds a fully unmasked grid from tokens in grid order.
    pub fn from_tokens(shape: GridShape, frames: usize, tokens: Vec<TokenId>) -> Result<Self> {
        shape.validate()?;
        if frames == 0 {
            return Err(Error::ZeroFrames);
        }
        if tokens.len() != frames * shape.slots() {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for {} frames of {} slots",
                tokens.len(),
                frames,
                shape.slots()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= shape.codebook_size) {
            return Err(Error::TokenOutOfRange { id, codebook_size: shape.codebook_size });
        }
        let mask = vec![false; tokens.len()];
        Ok(TokenGrid { shape, frames, tokens, mask })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, cell: Cell) -> usize {
        debug_assert!(cell.frame < self.frames && cell.group < self.shape.groups && cell.level < self.shape.levels);
        cell.frame * self.shape.slots() + self.shape.slot(cell.group, cell.level)
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        let slots = self.shape.slots();
        let within = index % slots;
        Cell::new(index / slots, within / self.shape.levels, within % self.shape.levels)
    }

    pub fn token(&self, cell: Cell) -> TokenId {
        self.tokens[self.index(cell)]
    }

    /// Token at `cell`, or `None` while masked.
    pub fn get(&self, cell: Cell) -> Option<TokenId> {
        let i = self.index(cell);
        (!self.mask[i]).then_some(self.tokens[i])
    }

    pub fn is_masked(&self, cell: Cell) -> bool {
        self.mask[self.index(cell)]
    }

    /// Writes `id` and clears the mask flag.
    pub fn set(&mut self, cell: Cell, id: TokenId) -> Result<()> {
        if id as usize >= self.shape.codebook_size {
            return Err(Error::TokenOutOfRange { id, codebook_size: self.shape.codebook_size });
        }
        let i = self.index(cell);
        self.tokens[i] = id;
        self.mask[i] = false;
        Ok(())
    }

    /// Masks `cell`. The stored id is zeroed so nothing downstream can read it.
    pub fn mask_cell(&mut self, cell: Cell) {
        let i = self.index(cell);
        self.tokens[i] = 0;
        self.mask[i] = true;
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_unmasked(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }

    pub fn first_masked(&self) -> Option<Cell> {
        self.mask.iter().position(|&m| m).map(|i| self.cell_at(i))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.len()).map(move |i| self.cell_at(i))
    }

    /// Coarse (level 0 of every group) and fine (levels ≥ 1) cells, each in grid order.
    pub fn coarse_fine_views(&self) -> (Vec<Cell>, Vec<Cell>) {
        self.cells().partition(|c| c.is_coarse())
    }

    /// Frames `range` as a new grid, masks included.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<TokenGrid> {
        if start >= end || end > self.frames {
            return Err(Error::ShapeMismatch(format!("frame range {start}..{end} of {}", self.frames)));
        }
        let slots = self.shape.slots();
        Ok(TokenGrid {
            shape: self.shape,
            frames: end - start,
            tokens: self.tokens[start * slots..end * slots].to_vec(),
            mask: self.mask[start * slots..end * slots].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticSeq {
    ids: Vec<TokenId>,
    vocab: usize,
}

impl SemanticSeq {
    pub fn new(ids: Vec<TokenId>, vocab: usize) -> Result<Self> {
        if vocab < 1 {
            return Err(Error::InvalidParams("semantic vocabulary must be non-empty".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::SemanticOutOfRange { id, vocab });
        }
        Ok(SemanticSeq { ids, vocab })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> SemanticSeq {
        SemanticSeq { ids: self.ids[start..end].to_vec(), vocab: self.vocab }
    }
}

pub fn serialize_tokens(grid: &TokenGrid, sem: &SemanticSeq) -> Result<Vec<u8>> {
    if let Some(cell) = grid.first_masked() {
        return Err(Error::MaskedCell(cell));
    }
    if sem.len() != grid.frames() {
        return Err(Error::ShapeMismatch(format!(
            "semantic length {} vs grid frames {}",
            sem.len(),
            grid.frames()
        )));
    }
    let shape = grid.shape();
    if shape.codebook_size > u16::MAX as usize {
        return Err(Error::ValueTooLarge { what: "codebook size", value: shape.codebook_size });
    }
    if sem.vocab() > u16::MAX as usize {
        return Err(Error::ValueTooLarge { what: "semantic vocabulary", value: sem.vocab() });
    }
    let groups = u8::try_from(shape.groups).map_err(|_| Error::ValueTooLarge { what: "groups", value: shape.groups })?;
    let levels = u8::try_from(shape.levels).map_err(|_| Error::ValueTooLarge { what: "levels", value: shape.levels })?;
    let frames = u32::try_from(grid.frames()).map_err(|_| Error::ValueTooLarge { what: "frames", value: grid.frames() })?;

    let mut out = Vec::with_capacity(GACT_HEADER_LEN + 2 * (sem.len() + grid.len()));
    out.extend_from_slice(&GACT_MAGIC);
    out.push(GACT_VERSION);
    out.extend_from_slice(&frames.to_le_bytes());
    out.push(groups);
    out.push(levels);
    out.extend_from_slice(&(shape.codebook_size as u32).to_le_bytes());
    out.extend_from_slice(&(sem.vocab() as u32).to_le_bytes());
    for &id in sem.ids() {
        out.extend_from_slice(&(id as u16).to_le_bytes());
    }
    for &id in grid.tokens() {
        out.extend_from_slice(&(id as u16).to_le_bytes());
    }
    Ok(out)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { found, expected });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(Error::TrailingBytes(n)),
        }
    }
}

pub fn deserialize_tokens(bytes: &[u8]) -> Result<(TokenGrid, SemanticSeq)> {
    let mut r = Reader::new(bytes);
    r.magic(GACT_MAGIC)?;
    let version = r.u8("version")?;
    if version != GACT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let frames = r.u32("frame count")? as usize;
    let groups = r.u8("groups")? as usize;
    let levels = r.u8("levels")? as usize;
    let codebook_size = r.u32("codebook size")? as usize;
    let vocab = r.u32("semantic vocabulary")? as usize;
    let shape = GridShape::new(groups, levels, codebook_size)?;
    if frames == 0 {
        return Err(Error::ZeroFrames);
    }

    let ids = (0..frames).map(|_| r.u16("semantic ids").map(TokenId::from)).collect::<Result<Vec<_>>>()?;
    let sem = SemanticSeq::new(ids, vocab)?;
    let tokens = (0..frames * shape.slots())
        .map(|_| r.u16("tokens").map(TokenId::from))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let grid = TokenGrid::from_tokens(shape, frames, tokens)?;
    Ok((grid, sem))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(g: usize, l: usize, c: usize) -> GridShape {
        GridShape::new(g, l, c).unwrap()
    }

    #[test]
    fn make_grid_fills() {
        let masked = TokenGrid::new(shape(2, 2, 4), 3, Fill::AllMasked).unwrap();
        assert_eq!(masked.len(), 12);
        assert!(masked.mask().iter().all(|&m| m));

        let zeros = TokenGrid::new(shape(2, 2, 4), 3, Fill::Token(0)).unwrap();
        assert!(zeros.tokens().iter().all(|&t| t == 0));
        assert!(zeros.is_fully_unmasked());

        let one = TokenGrid::new(shape(1, 1, 2), 1, Fill::Token(1)).unwrap();
        assert_eq!(one.tokens(), &[1]);
    }

    #[test]
    fn make_grid_errors() {
        assert!(matches!(TokenGrid::new(shape(2, 2, 4), 0, Fill::AllMasked), Err(Error::ZeroFrames)));
        assert!(matches!(
            TokenGrid::new(shape(2, 2, 4), 2, Fill::Token(4)),
            Err(Error::TokenOutOfRange { id: 4, .. })
        ));
        assert!(GridShape::new(2, 2, 1).is_err());
        assert!(GridShape::new(0, 2, 4).is_err());
    }

    #[test]
    fn codec_params_validation() {
        assert!(CodecParams::default().validate().is_ok());
        let odd = CodecParams { latent_dim: 5, ..CodecParams::default() };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn view_counts() {
        let g = TokenGrid::new(shape(2, 2, 4), 5, Fill::AllMasked).unwrap();
        let (c, f) = g.coarse_fine_views();
        assert_eq!((c.len(), f.len()), (10, 10));

        let g = TokenGrid::new(shape(2, 1, 4), 5, Fill::AllMasked).unwrap();
        assert!(g.coarse_fine_views().1.is_empty());

        let g = TokenGrid::new(shape(2, 3, 4), 4, Fill::AllMasked).unwrap();
        let (c, f) = g.coarse_fine_views();
        assert_eq!((c.len(), f.len()), (8, 16));
    }

    #[test]
    fn index_order_is_frame_group_level() {
        let g = TokenGrid::new(shape(2, 3, 4), 2, Fill::AllMasked).unwrap();
        assert_eq!(g.index(Cell::new(0, 0, 2)), 2);
        assert_eq!(g.index(Cell::new(0, 1, 0)), 3);
        assert_eq!(g.index(Cell::new(1, 0, 0)), 6);
        for i in 0..g.len() {
            assert_eq!(g.index(g.cell_at(i)), i);
        }
    }

    #[test]
    fn minimal_file_layout() {
        let grid = TokenGrid::new(shape(1, 1, 2), 1, Fill::Token(1)).unwrap();
        let sem = SemanticSeq::new(vec![3], 4).unwrap();
        let bytes = serialize_tokens(&grid, &sem).unwrap();
        // 4 magic + 1 version + 4 T + 1 G + 1 N_q + 4 C + 4 S_v, then one
        // semantic id and one token of two bytes each.
        assert_eq!(bytes.len(), 19 + 2 + 2);
        assert_eq!(
            bytes,
            vec![b'G', b'A', b'C', b'T', 1, 1, 0, 0, 0, 1, 1, 2, 0, 0, 0, 4, 0, 0, 0, 3, 0, 1, 0]
        );
    }

    #[test]
    fn roundtrip_and_stability() {
        let mut grid = TokenGrid::new(shape(2, 2, 300), 3, Fill::Token(0)).unwrap();
        for (i, cell) in grid.clone().cells().enumerate() {
            grid.set(cell, (i * 37 % 300) as u32).unwrap();
        }
        let sem = SemanticSeq::new(vec![5, 0, 511], 512).unwrap();
        let a = serialize_tokens(&grid, &sem).unwrap();
        let b = serialize_tokens(&grid, &sem).unwrap();
        assert_eq!(a, b);
        let (g2, s2) = deserialize_tokens(&a).unwrap();
        assert_eq!((g2, s2), (grid, sem));
    }

    #[test]
    fn serialize_errors() {
        let mut grid = TokenGrid::new(shape(2, 2, 4), 2, Fill::Token(1)).unwrap();
        let sem = SemanticSeq::new(vec![0, 1], 2).unwrap();
        grid.mask_cell(Cell::new(1, 1, 0));
        assert!(matches!(serialize_tokens(&grid, &sem), Err(Error::MaskedCell(c)) if c == Cell::new(1, 1, 0)));

        let big = TokenGrid::new(shape(1, 1, 70_000), 2, Fill::Token(1)).unwrap();
        assert!(matches!(serialize_tokens(&big, &sem), Err(Error::ValueTooLarge { .. })));

        let grid = TokenGrid::new(shape(1, 1, 4), 2, Fill::Token(1)).unwrap();
        let big_vocab = SemanticSeq::new(vec![0, 1], 70_000).unwrap();
        assert!(matches!(serialize_tokens(&grid, &big_vocab), Err(Error::ValueTooLarge { .. })));
        let short = SemanticSeq::new(vec![0], 2).unwrap();
        assert!(matches!(serialize_tokens(&grid, &short), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn deserialize_errors() {
        let grid = TokenGrid::new(shape(2, 2, 4), 2, Fill::Token(3)).unwrap();
        let sem = SemanticSeq::new(vec![0, 1], 2).unwrap();
        let good = serialize_tokens(&grid, &sem).unwrap();

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(deserialize_tokens(&bad), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(deserialize_tokens(&bad), Err(Error::UnsupportedVersion(2))));

        // cut in the middle of the last token
        assert!(matches!(deserialize_tokens(&good[..good.len() - 1]), Err(Error::Truncated("tokens"))));
        assert!(matches!(deserialize_tokens(&good[..7]), Err(Error::Truncated(_))));

        let mut bad = good.clone();
        let n = bad.len();
        bad[n - 2..].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(deserialize_tokens(&bad), Err(Error::TokenOutOfRange { id: 9, .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(deserialize_tokens(&bad), Err(Error::TrailingBytes(1))));
    }
}
