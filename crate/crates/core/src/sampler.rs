//! Iterative parallel decoding.
//!
//! [`gipd_decode`] fills the coarse cells of all groups in one pooled search
//! space: each iteration samples every masked coarse cell, ranks the samples
//! by confidence across groups, keeps the cosine schedule's share and
//! re-masks the rest. Fine cells follow in a single greedy pass.
//! [`ipd_baseline_decode`] runs the same loop one `(group, level)` slice at a
//! time, coarse slices first.

use std::cmp::Ordering;
use std::path::Path;

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{LogitsGrid, TokenModel};
use crate::scalar::Scalar;
use crate::token::{Cell, Fill, SemanticSeq, TokenGrid, TokenId};

/// Per-iteration fix counts and the masked count left after each iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeSchedule {
    pub counts: Vec<usize>,
    pub remaining: Vec<usize>,
}

/// `remaining(s) = ⌊cos(π/2 · s/S) · M⌋`, clamped to decrease by at least
/// one per iteration and to reach zero at `s = S`.
pub fn cosine_schedule(cells: usize, iterations: usize) -> Result<DecodeSchedule> {
    if iterations == 0 || iterations > cells {
        return Err(Error::ScheduleTooLong { iterations, cells });
    }
    let mut remaining = Vec::with_capacity(iterations);
    let mut counts = Vec::with_capacity(iterations);
    let mut prev = cells;
    for s in 1..=iterations {
        let raw = ((std::f64::consts::FRAC_PI_2 * s as f64 / iterations as f64).cos() * cells as f64).floor();
        let raw = if s == iterations { 0 } else { raw.max(0.0) as usize };
        // leave at least one cell for each later iteration
        let r = raw.min(prev - 1).max(iterations - s);
        counts.push(prev - r);
        remaining.push(r);
        prev = r;
    }
    Ok(DecodeSchedule { counts, remaining })
}

/// One standard Gumbel draw, `−ln(−ln U)` with `U` in the open unit interval.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// `row + τ·g`. With `τ = 0` the row is returned unchanged and `rng` is untouched.
pub fn gumbel_perturb(row: &[f64], tau: f64, rng: &mut impl Rng) -> Vec<f64> {
    if tau == 0.0 {
        return row.to_vec();
    }
    row.iter().map(|&y| y + tau * gumbel(rng)).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Which probability ranks a sampled token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Confidence {
    /// Softmax of the model's logits.
    #[default]
    Clean,
    /// Softmax of the Gumbel-perturbed logits.
    Perturbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRequest {
    /// Semantic ids of the frames to generate.
    pub sem: SemanticSeq,
    pub prompt: TokenGrid,
    /// Coarse iterations `N_c`; the fine pass adds one more forward.
    pub iterations: usize,
    /// Initial Gumbel temperature `τ0`; iteration `s` uses `τ0·(1 − s/N_c)`.
    pub temperature: f64,
    pub seed: u64,
    pub confidence: Confidence,
}

impl DecodeRequest {
    pub fn new(sem: SemanticSeq, prompt: TokenGrid, iterations: usize, seed: u64) -> Self {
        DecodeRequest { sem, prompt, iterations, temperature: 1.0, seed, confidence: Confidence::Clean }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParams("at least one iteration".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParams(format!("temperature {} must be finite and non-negative", self.temperature)));
        }
        if self.sem.is_empty() {
            return Err(Error::ZeroFrames);
        }
        if let Some(cell) = self.prompt.first_masked() {
            return Err(Error::MaskedCell(cell));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Fixed,
    Remasked,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub cell: Cell,
    pub token: TokenId,
    pub confidence: f64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    /// 1-based within its phase.
    pub iteration: usize,
    /// `None` for a pooled coarse iteration, `Some((g, j))` for a baseline slice.
    pub slice: Option<(usize, usize)>,
    pub temperature: f64,
    pub candidates: Vec<Candidate>,
    /// Cells of the search space still masked afterwards.
    pub masked_after: usize,
}

impl IterationTrace {
    pub fn fixed(&self) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(|c| c.action == Action::Fixed)
    }

    pub fn remasked(&self) -> usize {
        self.candidates.iter().filter(|c| c.action == Action::Remasked).count()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SamplerTrace {
    pub iterations: Vec<IterationTrace>,
    /// Forward passes the sampler issued, including the fine pass.
    pub forwards: usize,
    /// Prompt encodings the sampler requested.
    pub prompt_encodes: usize,
}

fn row_f64<S: Scalar>(logits: &LogitsGrid<S>, cell: Cell) -> Vec<f64> {
    logits.row(cell).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
}

struct Decoder<'a, M, R> {
    model: &'a M,
    sem: &'a SemanticSeq,
    temperature: f64,
    confidence: Confidence,
    rng: R,
    trace: SamplerTrace,
}

impl<M, R: Rng> Decoder<'_, M, R> {
    fn forward<S: Scalar>(&mut self, grid: &TokenGrid, prompt: &<M as TokenModel<S>>::Prompt) -> Result<LogitsGrid<S>>
    where
        M: TokenModel<S>,
    {
        self.trace.forwards += 1;
        let logits = self.model.forward(self.sem, grid, prompt)?;
        if logits.frames() != grid.frames() || logits.shape() != grid.shape() {
            return Err(Error::ShapeMismatch("model returned logits of the wrong shape".into()));
        }
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        Ok(logits)
    }

    /// Iterative fill of `space` (all masked in `grid`) following `cosine_schedule`.
    fn fill<S: Scalar>(
        &mut self,
        grid: &mut TokenGrid,
        prompt: &<M as TokenModel<S>>::Prompt,
        space: &[Cell],
        iterations: usize,
        slice: Option<(usize, usize)>,
    ) -> Result<()>
    where
        M: TokenModel<S>,
    {
        let schedule = cosine_schedule(space.len(), iterations)?;
        for s in 1..=iterations {
            let logits = self.forward::<S>(grid, prompt)?;
            let tau = self.temperature * (1.0 - s as f64 / iterations as f64);
            let mut cands: Vec<Candidate> = Vec::new();
            for &cell in space.iter().filter(|&&c| grid.is_masked(c)) {
                let row = row_f64(&logits, cell);
                let noisy = gumbel_perturb(&row, tau, &mut self.rng);
                let token = argmax(&noisy);
                let confidence = match self.confidence {
                    Confidence::Clean => softmax(&row)[token],
                    Confidence::Perturbed => softmax(&noisy)[token],
                };
                cands.push(Candidate { cell, token: token as TokenId, confidence, action: Action::Remasked });
            }
            // stable: equal confidences keep (frame, group, level) order
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| cands[b].confidence.partial_cmp(&cands[a].confidence).unwrap_or(Ordering::Equal));
            for &i in order.iter().take(schedule.counts[s - 1]) {
                cands[i].action = Action::Fixed;
                grid.set(cands[i].cell, cands[i].token)?;
            }
            let masked_after = space.iter().filter(|&&c| grid.is_masked(c)).count();
            debug_assert_eq!(masked_after, schedule.remaining[s - 1]);
            self.trace.iterations.push(IterationTrace { iteration: s, slice, temperature: tau, candidates: cands, masked_after });
        }
        Ok(())
    }
}

fn coarse_cells(grid: &TokenGrid) -> Vec<Cell> {
    let shape = grid.shape();
    (0..grid.frames()).flat_map(|t| (0..shape.groups).map(move |g| Cell::new(t, g, 0))).collect()
}

/// Group-pooled iterative decoding followed by the greedy fine pass.
///
/// Issues `N_c` coarse forwards plus one fine forward (none when the grid
/// has a single level) and encodes the prompt once.
pub fn gipd_decode<S: Scalar, M: TokenModel<S>>(model: &M, req: &DecodeRequest) -> Result<(TokenGrid, SamplerTrace)> {
    gipd_decode_with_rng(model, req, ChaCha8Rng::seed_from_u64(req.seed))
}

pub fn gipd_decode_with_rng<S: Scalar, M: TokenModel<S>>(model: &M, req: &DecodeRequest, rng: impl Rng) -> Result<(TokenGrid, SamplerTrace)> {
    req.validate()?;
    let shape = req.prompt.shape();
    let mut grid = TokenGrid::new(shape, req.sem.len(), Fill::AllMasked)?;
    let space = coarse_cells(&grid);
    if req.iterations > space.len() {
        return Err(Error::ScheduleTooLong { iterations: req.iterations, cells: space.len() });
    }
    let mut dec = Decoder { model, sem: &req.sem, temperature: req.temperature, confidence: req.confidence, rng, trace: SamplerTrace::default() };
    let prompt = model.encode_prompt(&req.prompt)?;
    dec.trace.prompt_encodes += 1;
    dec.fill::<S>(&mut grid, &prompt, &space, req.iterations, None)?;
    if shape.levels > 1 {
        dec.trace.forwards += 1;
        grid = fine_greedy_fill(model, &grid, &req.sem, &prompt)?;
    }
    Ok((grid, dec.trace))
}

/// Sets every fine cell to the argmax of one forward pass.
pub fn fine_greedy_fill<S: Scalar, M: TokenModel<S>>(model: &M, grid: &TokenGrid, sem: &SemanticSeq, prompt: &M::Prompt) -> Result<TokenGrid> {
    let (coarse, fine) = grid.coarse_fine_views();
    if let Some(&cell) = coarse.iter().find(|&&c| grid.is_masked(c)) {
        return Err(Error::MaskedCell(cell));
    }
    if fine.iter().any(|&c| !grid.is_masked(c)) {
        return Err(Error::InvalidParams("fine cells must all be masked before the fine pass".into()));
    }
    let logits = model.forward(sem, grid, prompt)?;
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = grid.clone();
    for cell in fine {
        out.set(cell, argmax(&row_f64(&logits, cell)) as TokenId)?;
    }
    Ok(out)
}

/// Slice order of the baseline: all groups at level 0, then level 1, ….
pub fn baseline_slices(groups: usize, levels: usize) -> Vec<(usize, usize)> {
    (0..levels).flat_map(|j| (0..groups).map(move |g| (g, j))).collect()
}

/// `(N − (S−1), 1, …, 1)` over `S` slices; `N` must be at least `S`.
pub fn default_baseline_budgets(total: usize, slices: usize) -> Result<Vec<usize>> {
    if slices == 0 || total < slices {
        return Err(Error::InvalidParams(format!("{total} iterations cannot cover {slices} slices")));
    }
    let mut v = vec![1; slices];
    v[0] = total - (slices - 1);
    Ok(v)
}

/// Slice-by-slice decoding with per-slice budgets in [`baseline_slices`] order.
/// `req.iterations` is ignored; the forward count is the budget sum.
pub fn ipd_baseline_decode<S: Scalar, M: TokenModel<S>>(model: &M, req: &DecodeRequest, budgets: &[usize]) -> Result<(TokenGrid, SamplerTrace)> {
    ipd_baseline_decode_with_rng(model, req, budgets, ChaCha8Rng::seed_from_u64(req.seed))
}

pub fn ipd_baseline_decode_with_rng<S: Scalar, M: TokenModel<S>>(
    model: &M,
    req: &DecodeRequest,
    budgets: &[usize],
    rng: impl Rng,
) -> Result<(TokenGrid, SamplerTrace)> {
    req.validate()?;
    let shape = req.prompt.shape();
    let slices = baseline_slices(shape.groups, shape.levels);
    if budgets.len() != slices.len() {
        return Err(Error::InvalidParams(format!("{} budgets for {} slices", budgets.len(), slices.len())));
    }
    let frames = req.sem.len();
    if let Some(&b) = budgets.iter().find(|&&b| b == 0 || b > frames) {
        return Err(Error::ScheduleTooLong { iterations: b, cells: frames });
    }
    let mut grid = TokenGrid::new(shape, frames, Fill::AllMasked)?;
    let mut dec = Decoder { model, sem: &req.sem, temperature: req.temperature, confidence: req.confidence, rng, trace: SamplerTrace::default() };
    let prompt = model.encode_prompt(&req.prompt)?;
    dec.trace.prompt_encodes += 1;
    for (&(g, j), &b) in slices.iter().zip(budgets) {
        let space: Vec<Cell> = (0..frames).map(|t| Cell::new(t, g, j)).collect();
        dec.fill::<S>(&mut grid, &prompt, &space, b, Some((g, j)))?;
    }
    Ok((grid, dec.trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMetrics {
    /// Token accuracy per `(group, level)` slot, in slot order.
    pub per_slot: Vec<f64>,
    pub overall: f64,
    pub coarse: f64,
    /// `None` when the grid has one level.
    pub fine: Option<f64>,
    /// Fraction of frames whose cells all match.
    pub frame_match: f64,
}

pub fn accuracy_metrics(pred: &TokenGrid, reference: &TokenGrid) -> Result<AccuracyMetrics> {
    if pred.shape() != reference.shape() || pred.frames() != reference.frames() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames of {:?} vs {} frames of {:?}",
            pred.frames(),
            pred.shape(),
            reference.frames(),
            reference.shape()
        )));
    }
    let shape = pred.shape();
    let slots = shape.slots();
    let frames = pred.frames() as f64;
    let mut slot_hits = vec![0usize; slots];
    let mut frame_hits = 0;
    for t in 0..pred.frames() {
        let mut all = true;
        for g in 0..shape.groups {
            for j in 0..shape.levels {
                let c = Cell::new(t, g, j);
                let hit = pred.get(c).is_some() && pred.get(c) == reference.get(c);
                slot_hits[shape.slot(g, j)] += hit as usize;
                all &= hit;
            }
        }
        frame_hits += all as usize;
    }
    let per_slot: Vec<f64> = slot_hits.iter().map(|&h| h as f64 / frames).collect();
    let level_mean = |fine: bool| {
        let hits: usize = (0..shape.groups)
            .flat_map(|g| (0..shape.levels).filter(move |&j| (j > 0) == fine).map(move |j| shape.slot(g, j)))
            .map(|s| slot_hits[s])
            .sum();
        let n = if fine { shape.groups * (shape.levels - 1) } else { shape.groups };
        hits as f64 / (n as f64 * frames)
    };
    Ok(AccuracyMetrics {
        overall: slot_hits.iter().sum::<usize>() as f64 / (slots as f64 * frames),
        coarse: level_mean(false),
        fine: (shape.levels > 1).then(|| level_mean(true)),
        frame_match: frame_hits as f64 / frames,
        per_slot,
    })
}

/// Writes `phase,iteration,frame,group,level,token,confidence,action` rows.
/// `phase` is `coarse`, a slice label like `g1j0`, or `fine` for the final pass
/// (which is not itemized).
pub fn write_trace_csv(trace: &SamplerTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["phase", "iteration", "frame", "group", "level", "token", "confidence", "action"])?;
    for it in &trace.iterations {
        let phase = match it.slice {
            None => "coarse".to_string(),
            Some((g, j)) => format!("g{g}j{j}"),
        };
        for c in &it.candidates {
            let action = match c.action {
                Action::Fixed => "fixed",
                Action::Remasked => "remasked",
            };
            w.write_record([
                phase.clone(),
                it.iteration.to_string(),
                c.cell.frame.to_string(),
                c.cell.group.to_string(),
                c.cell.level.to_string(),
                c.token.to_string(),
                format!("{:.6}", c.confidence),
                action.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
