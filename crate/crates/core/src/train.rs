//! Group-wise masked training.
//!
//! A training example is one utterance split at a delimiter frame `t`: frames
//! before `t` are the prompt, the rest is the target. With level indicator
//! `l = 0` every fine target cell is masked and, in each group separately,
//! `⌈γ(u)·T_tgt⌉` coarse cells chosen uniformly; with `l = 1` the coarse cells
//! stay visible and the same count of fine cells is masked per group and
//! fine level. `γ(u) = cos(πu/2)`. The loss covers masked cells only.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::LogitsGrid;
use crate::nn::{adam_step, AdamConfig, AdamState, Gradients, Predictor};
use crate::scalar::Scalar;
use crate::token::{Cell, TokenGrid};
use crate::world::Utterance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPlan {
    /// First target frame.
    pub delimiter: usize,
    /// 0: train coarse tokens, 1: train fine tokens.
    pub level: u8,
    /// `u` in `(0, 1]`.
    pub fraction: f64,
}

/// `max(1, ⌊T/8⌋)`.
pub fn default_epsilon(frames: usize) -> usize {
    (frames / 8).max(1)
}

pub fn gamma(u: f64) -> f64 {
    (std::f64::consts::FRAC_PI_2 * u).cos()
}

/// `⌈γ(u)·T_tgt⌉`, at most `T_tgt`.
pub fn masked_per_group(u: f64, target_frames: usize) -> usize {
    ((gamma(u) * target_frames as f64).ceil() as usize).min(target_frames)
}

pub fn sample_mask_plan(frames: usize, epsilon: usize, rng: &mut impl Rng) -> Result<MaskPlan> {
    if frames == 0 || epsilon > frames - 1 {
        return Err(Error::InvalidParams(format!("epsilon {epsilon} exceeds T-1 for T = {frames}")));
    }
    Ok(MaskPlan {
        delimiter: rng.random_range(epsilon..frames),
        level: rng.random_bool(0.5) as u8,
        fraction: 1.0 - rng.random::<f64>(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub prompt: TokenGrid,
    /// Target frames with the masked cells cleared.
    pub input: TokenGrid,
    /// Unmasked target frames.
    pub reference: TokenGrid,
    /// Loss flags in target grid order; equal to `input`'s mask.
    pub flags: Vec<bool>,
}

impl MaskedExample {
    pub fn flagged_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| self.input.cell_at(i))
    }
}

pub fn apply_gmlm_mask(grid: &TokenGrid, plan: &MaskPlan, rng: &mut impl Rng) -> Result<MaskedExample> {
    if let Some(cell) = grid.first_masked() {
        return Err(Error::MaskedCell(cell));
    }
    let frames = grid.frames();
    if plan.delimiter == 0 || plan.delimiter >= frames {
        return Err(Error::InvalidParams(format!("delimiter {} leaves an empty prompt or target in {frames} frames", plan.delimiter)));
    }
    if plan.level > 1 || !(plan.fraction > 0.0 && plan.fraction <= 1.0) {
        return Err(Error::InvalidParams(format!("bad mask plan {plan:?}")));
    }
    let prompt = grid.slice_frames(0, plan.delimiter)?;
    let reference = grid.slice_frames(plan.delimiter, frames)?;
    let t_tgt = reference.frames();
    let k = masked_per_group(plan.fraction, t_tgt);
    let shape = grid.shape();
    let mut input = reference.clone();
    if plan.level == 0 {
        for g in 0..shape.groups {
            for t in sample(rng, t_tgt, k) {
                input.mask_cell(Cell::new(t, g, 0));
            }
        }
        for t in 0..t_tgt {
            for g in 0..shape.groups {
                for j in 1..shape.levels {
                    input.mask_cell(Cell::new(t, g, j));
                }
            }
        }
    } else {
        for g in 0..shape.groups {
            for j in 1..shape.levels {
                for t in sample(rng, t_tgt, k) {
                    input.mask_cell(Cell::new(t, g, j));
                }
            }
        }
    }
    let flags = input.mask().to_vec();
    Ok(MaskedExample { prompt, input, reference, flags })
}

/// Mean negative log-likelihood over flagged cells and its gradient at the
/// logits (`(softmax − onehot)/n` at flagged cells, zero elsewhere).
pub fn masked_cross_entropy<S: Scalar>(logits: &LogitsGrid<S>, targets: &TokenGrid, flags: &[bool]) -> Result<(S, LogitsGrid<S>)> {
    if logits.shape() != targets.shape() || logits.frames() != targets.frames() || flags.len() != targets.len() {
        return Err(Error::ShapeMismatch("logits, targets and flags disagree".into()));
    }
    let n = flags.iter().filter(|&&f| f).count();
    if n == 0 {
        return Err(Error::NoFlaggedCells);
    }
    let inv_n = S::one() / S::from_usize(n).unwrap();
    let mut grad = LogitsGrid::zeros(logits.shape(), logits.frames());
    let mut loss = S::zero();
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let cell = targets.cell_at(i);
        let target = targets.get(cell).ok_or(Error::MaskedCell(cell))? as usize;
        let row = logits.row(cell);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[target];
        let g = grad.row_mut(cell);
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() * inv_n;
        }
        g[target] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Argmax hits at flagged cells, split by level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Hits {
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
}

impl Hits {
    pub fn add(&mut self, o: Hits) {
        self.coarse.0 += o.coarse.0;
        self.coarse.1 += o.coarse.1;
        self.fine.0 += o.fine.0;
        self.fine.1 += o.fine.1;
    }

    fn ratio((hit, n): (usize, usize)) -> Option<f64> {
        (n > 0).then(|| hit as f64 / n as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        Self::ratio((self.coarse.0 + self.fine.0, self.coarse.1 + self.fine.1))
    }

    pub fn coarse_accuracy(&self) -> Option<f64> {
        Self::ratio(self.coarse)
    }

    pub fn fine_accuracy(&self) -> Option<f64> {
        Self::ratio(self.fine)
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn masked_hits<S: Scalar>(logits: &LogitsGrid<S>, targets: &TokenGrid, flags: &[bool]) -> Hits {
    let mut h = Hits::default();
    for (i, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
        let cell = targets.cell_at(i);
        let hit = Some(argmax(logits.row(cell)) as u32) == targets.get(cell);
        let slot = if cell.is_coarse() { &mut h.coarse } else { &mut h.fine };
        slot.0 += hit as usize;
        slot.1 += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Linear learning-rate warmup length in steps (0 disables).
    pub warmup_steps: usize,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Smallest delimiter; `None` uses [`default_epsilon`] of the batch length.
    pub epsilon: Option<usize>,
    /// Longest batch crop; each batch is cropped to the shortest utterance drawn
    /// or this, whichever is smaller.
    pub max_frames: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            steps: 1000,
            adam: AdamConfig::default(),
            warmup_steps: 100,
            grad_clip: 1.0,
            epsilon: None,
            max_frames: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParams("batch size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::InvalidParams(format!("bad optimizer settings {:?}", self.adam)));
        }
        if self.max_frames.is_some_and(|m| m < 2) {
            return Err(Error::InvalidParams("max_frames must be at least 2".into()));
        }
        Ok(())
    }

    /// Keys: `batch_size steps lr beta1 beta2 adam_eps warmup_steps grad_clip
    /// epsilon max_frames seed`.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        Self::take_from(&mut kv)
            .and_then(|cfg| kv.finish().map(|_| cfg))
            .and_then(|cfg| cfg.validate().map(|_| cfg))
    }

    /// Takes the training keys out of `kv`, leaving any others.
    pub fn take_from(kv: &mut KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            steps: kv.take_or("steps", d.steps)?,
            adam: AdamConfig {
                lr: kv.take_or("lr", d.adam.lr)?,
                beta1: kv.take_or("beta1", d.adam.beta1)?,
                beta2: kv.take_or("beta2", d.adam.beta2)?,
                eps: kv.take_or("adam_eps", d.adam.eps)?,
            },
            warmup_steps: kv.take_or("warmup_steps", d.warmup_steps)?,
            grad_clip: kv.take_or("grad_clip", d.grad_clip)?,
            epsilon: kv.take("epsilon")?,
            max_frames: kv.take("max_frames")?,
            seed: kv.take_or("seed", d.seed)?,
        })
    }
}

/// One optimizer step's statistics; accuracies are argmax hits on masked cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub coarse_accuracy: Option<f64>,
    pub fine_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainStats {
    pub steps: usize,
    pub mean_loss: f64,
    pub hits: Hits,
}

/// Owns a predictor, its optimizer state and the batch RNG.
pub struct Trainer<S> {
    model: Predictor<S>,
    adam: AdamState<S>,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Predictor<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = AdamState::new(model.params().len());
        Ok(Trainer { model, adam, rng: ChaCha8Rng::seed_from_u64(cfg.seed), cfg, step: 0 })
    }

    pub fn model(&self) -> &Predictor<S> {
        &self.model
    }

    pub fn into_model(self) -> Predictor<S> {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn lr(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        if w == 0 {
            self.cfg.adam.lr
        } else {
            self.cfg.adam.lr * ((self.step + 1) as f64 / w as f64).min(1.0)
        }
    }

    /// Draws a batch, masks it, and takes one optimizer step.
    pub fn step(&mut self, corpus: &[Utterance]) -> Result<StepStats> {
        Ok(self.step_with_hits(corpus)?.0)
    }

    fn step_with_hits(&mut self, corpus: &[Utterance]) -> Result<(StepStats, Hits)> {
        if corpus.is_empty() {
            return Err(Error::InvalidParams("empty corpus".into()));
        }
        let picks: Vec<&Utterance> = (0..self.cfg.batch_size).map(|_| &corpus[self.rng.random_range(0..corpus.len())]).collect();
        let frames = picks.iter().map(|u| u.frames()).min().unwrap().min(self.cfg.max_frames.unwrap_or(usize::MAX));
        if frames < 2 {
            return Err(Error::NotEnoughFrames { needed: 2, got: frames });
        }
        let epsilon = self.cfg.epsilon.unwrap_or_else(|| default_epsilon(frames)).clamp(1, frames - 1);
        let mut grads = Gradients::zeros(self.model.params().len());
        let mut loss = 0.0;
        let mut hits = Hits::default();
        for utt in picks {
            let start = self.rng.random_range(0..=utt.frames() - frames);
            let utt = utt.crop(start, start + frames)?;
            let plan = sample_mask_plan(frames, epsilon, &mut self.rng)?;
            let ex = apply_gmlm_mask(&utt.grid, &plan, &mut self.rng)?;
            let sem = utt.sem.slice(plan.delimiter, frames);
            let (logits, tape) = self.model.forward_train(&sem, &ex.input, &ex.prompt)?;
            let (l, dlogits) = masked_cross_entropy(&logits, &ex.reference, &ex.flags)?;
            hits.add(masked_hits(&logits, &ex.reference, &ex.flags));
            self.model.backward_into(&tape, &dlogits, &mut grads)?;
            loss += l.to_f64().unwrap_or(f64::NAN);
        }
        let b = self.cfg.batch_size as f64;
        grads.scale(S::lit(1.0 / b));
        if self.cfg.grad_clip > 0.0 {
            let norm = grads.norm().to_f64().unwrap_or(f64::INFINITY);
            if norm > self.cfg.grad_clip {
                grads.scale(S::lit(self.cfg.grad_clip / norm));
            }
        }
        let adam = AdamConfig { lr: self.lr(), ..self.cfg.adam };
        adam_step(&mut self.model, &grads, &adam, &mut self.adam)?;
        self.step += 1;
        let loss = loss / b;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let stats = StepStats {
            step: self.step,
            loss,
            accuracy: hits.accuracy(),
            coarse_accuracy: hits.coarse_accuracy(),
            fine_accuracy: hits.fine_accuracy(),
        };
        Ok((stats, hits))
    }

    /// Runs the configured number of steps, handing each step's stats to `on_step`.
    pub fn run(&mut self, corpus: &[Utterance], mut on_step: impl FnMut(&StepStats) -> Result<()>) -> Result<TrainStats> {
        let mut total = 0.0;
        let mut hits = Hits::default();
        for _ in 0..self.cfg.steps {
            let (s, h) = self.step_with_hits(corpus)?;
            total += s.loss;
            hits.add(h);
            on_step(&s)?;
        }
        let n = self.cfg.steps;
        Ok(TrainStats { steps: n, mean_loss: if n == 0 { f64::NAN } else { total / n as f64 }, hits })
    }
}

/// Trains `model` in place for `cfg.steps` steps.
pub fn train_epoch<S: Scalar>(model: &mut Predictor<S>, corpus: &[Utterance], cfg: &TrainConfig) -> Result<TrainStats> {
    if corpus.is_empty() {
        return Err(Error::InvalidParams("empty corpus".into()));
    }
    let placeholder = Predictor::init(*model.config(), 0)?;
    let mut trainer = Trainer::new(std::mem::replace(model, placeholder), *cfg)?;
    let stats = trainer.run(corpus, |_| Ok(()));
    *model = trainer.into_model();
    stats
}

/// Appends [`StepStats`] rows to a CSV file, writing the header once.
pub struct StatsWriter {
    inner: csv::Writer<std::fs::File>,
}

impl StatsWriter {
    pub const HEADER: &'static str = "step,loss,accuracy,coarse_accuracy,fine_accuracy";

    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", Self::HEADER)?;
        Ok(StatsWriter { inner: csv::WriterBuilder::new().has_headers(false).from_writer(file) })
    }

    pub fn write(&mut self, s: &StepStats) -> Result<()> {
        self.inner.serialize(s)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
