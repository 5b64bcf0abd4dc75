//! The forward contract shared by the predictor, the oracle and the samplers.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::token::{Cell, GridShape, SemanticSeq, TokenGrid};

/// `frames × groups × levels × codebook_size` logits in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsGrid<S> {
    shape: GridShape,
    frames: usize,
    data: Vec<S>,
}

impl<S: Scalar> LogitsGrid<S> {
    pub fn zeros(shape: GridShape, frames: usize) -> Self {
        LogitsGrid { shape, frames, data: vec![S::zero(); frames * shape.slots() * shape.codebook_size] }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    fn offset(&self, cell: Cell) -> usize {
        (cell.frame * self.shape.slots() + self.shape.slot(cell.group, cell.level)) * self.shape.codebook_size
    }

    pub fn row(&self, cell: Cell) -> &[S] {
        let o = self.offset(cell);
        &self.data[o..o + self.shape.codebook_size]
    }

    pub fn row_mut(&mut self, cell: Cell) -> &mut [S] {
        let o = self.offset(cell);
        let c = self.shape.codebook_size;
        &mut self.data[o..o + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Anything that maps (semantic ids, partially masked grid, prompt) to logits.
///
/// `encode_prompt` runs once per decode; `forward` once per iteration.
pub trait TokenModel<S: Scalar> {
    type Prompt;

    fn encode_prompt(&self, prompt: &TokenGrid) -> Result<Self::Prompt>;

    fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, prompt: &Self::Prompt) -> Result<LogitsGrid<S>>;
}

impl<S: Scalar, M: TokenModel<S> + ?Sized> TokenModel<S> for &M {
    type Prompt = M::Prompt;

    fn encode_prompt(&self, prompt: &TokenGrid) -> Result<Self::Prompt> {
        (**self).encode_prompt(prompt)
    }

    fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, prompt: &Self::Prompt) -> Result<LogitsGrid<S>> {
        (**self).forward(sem, grid, prompt)
    }
}
