//! Synthetic token world with a known conditional structure.
//!
//! Every cell has a *base* token computed by a fixed mixing hash of the
//! frame's semantic id, the speaker, the cell's `(group, level)` and the
//! tokens it depends on:
//!
//! * coarse group 0 depends on nothing else,
//! * coarse group `g ≥ 1` additionally hashes the frame's coarse group-0 token,
//! * every fine cell hashes all coarse tokens of its frame.
//!
//! The emitted token equals the base with probability `1 - p_noise` and is
//! uniform over the codebook otherwise, so the exact conditional of a cell
//! given its dependencies is `(1 - p_noise) + p_noise / C` at the base and
//! `p_noise / C` elsewhere.
//!
//! The hash is the splitmix64 finalizer (`0xBF58476D1CE4E5B9`,
//! `0x94D049BB133111EB`, shifts 30/27/31) folded over the inputs with the
//! golden-ratio increment `0x9E3779B97F4A7C15`; see [`base_token`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{LogitsGrid, TokenModel};
use crate::scalar::Scalar;
use crate::token::{deserialize_tokens, serialize_tokens, Cell, Fill, GridShape, SemanticSeq, TokenGrid, TokenId};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SEMANTIC_STAY: f64 = 0.6;
/// Floor applied before taking logs so oracle logits stay finite.
const MIN_PROB: f64 = 1e-30;

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub shape: GridShape,
    pub semantic_vocab: usize,
    pub speakers: usize,
    pub p_noise: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.semantic_vocab < 2 {
            return Err(Error::InvalidParams("semantic vocabulary must be at least 2".into()));
        }
        if self.speakers < 1 {
            return Err(Error::InvalidParams("need at least one speaker".into()));
        }
        if !(0.0..1.0).contains(&self.p_noise) {
            return Err(Error::InvalidParams(format!("p_noise {} outside [0, 1)", self.p_noise)));
        }
        Ok(())
    }

    /// Reads `groups`, `levels`, `codebook_size`, `semantic_vocab`,
    /// `speakers`, `p_noise` and `seed` from a key=value file. Missing keys
    /// fall back to a 2×2×16 grid, 16 semantic ids, 8 speakers, 10% noise.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let shape = GridShape {
            groups: kv.take_or("groups", 2)?,
            levels: kv.take_or("levels", 2)?,
            codebook_size: kv.take_or("codebook_size", 16)?,
        };
        let spec = WorldSpec {
            shape,
            semantic_vocab: kv.take_or("semantic_vocab", 16)?,
            speakers: kv.take_or("speakers", 8)?,
            p_noise: kv.take_or("p_noise", 0.1)?,
            seed: kv.take_or("seed", 0)?,
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }
}

/// What the oracle needs to know about an utterance besides its tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UttContext {
    pub speaker: u32,
    pub sem: SemanticSeq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub speaker: u32,
    pub sem: SemanticSeq,
    pub grid: TokenGrid,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.grid.frames()
    }

    pub fn context(&self) -> UttContext {
        UttContext { speaker: self.speaker, sem: self.sem.clone() }
    }

    /// Frames `start..end` as their own utterance.
    pub fn crop(&self, start: usize, end: usize) -> Result<Utterance> {
        Ok(Utterance { speaker: self.speaker, sem: self.sem.slice(start, end), grid: self.grid.slice_frames(start, end)? })
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Base token of `(group, level)` for a frame with semantic id `sem_id`,
/// given the tokens of the cells it depends on (in [`dependencies`] order).
pub fn base_token(spec: &WorldSpec, sem_id: TokenId, speaker: u32, group: usize, level: usize, deps: &[TokenId]) -> TokenId {
    let mut h = mix64(spec.seed ^ GOLDEN);
    let fixed = [sem_id as u64, speaker as u64, group as u64, level as u64];
    for v in fixed.into_iter().chain(deps.iter().map(|&d| d as u64)) {
        h = mix64(h.wrapping_add(GOLDEN) ^ v);
    }
    (h % spec.shape.codebook_size as u64) as TokenId
}

/// Cells whose tokens enter the base of `cell`.
pub fn dependencies(shape: GridShape, cell: Cell) -> Vec<Cell> {
    match (cell.level, cell.group) {
        (0, 0) => Vec::new(),
        (0, _) => vec![Cell::new(cell.frame, 0, 0)],
        _ => (0..shape.groups).map(|g| Cell::new(cell.frame, g, 0)).collect(),
    }
}

/// Cells of one frame in generation order: coarse groups, then each finer level.
fn generation_order(shape: GridShape, frame: usize) -> impl Iterator<Item = Cell> {
    (0..shape.levels).flat_map(move |j| (0..shape.groups).map(move |g| Cell::new(frame, g, j)))
}

fn semantic_chain(spec: &WorldSpec, frames: usize, rng: &mut impl Rng) -> Vec<TokenId> {
    let v = spec.semantic_vocab as u32;
    let mut ids = Vec::with_capacity(frames);
    let mut cur = rng.random_range(0..v);
    ids.push(cur);
    for _ in 1..frames {
        if !rng.random_bool(SEMANTIC_STAY) {
            // uniform over the other ids
            let step = rng.random_range(1..v);
            cur = (cur + step) % v;
        }
        ids.push(cur);
    }
    ids
}

/// Emits the token grid for a given speaker and semantic sequence.
pub fn render_grid(spec: &WorldSpec, speaker: u32, sem: &SemanticSeq, rng: &mut impl Rng) -> Result<TokenGrid> {
    let frames = sem.len();
    let mut grid = TokenGrid::new(spec.shape, frames, Fill::AllMasked)?;
    let c = spec.shape.codebook_size as u32;
    for t in 0..frames {
        for cell in generation_order(spec.shape, t) {
            let deps: Vec<TokenId> = dependencies(spec.shape, cell).iter().map(|&d| grid.token(d)).collect();
            let base = base_token(spec, sem.ids()[t], speaker, cell.group, cell.level, &deps);
            let token = if spec.p_noise > 0.0 && rng.random_bool(spec.p_noise) { rng.random_range(0..c) } else { base };
            grid.set(cell, token)?;
        }
    }
    Ok(grid)
}

/// One utterance of `frames` frames, drawing everything from `rng`.
pub fn generate_utterance(spec: &WorldSpec, frames: usize, rng: &mut impl Rng) -> Result<Utterance> {
    spec.validate()?;
    let speaker = rng.random_range(0..spec.speakers as u32);
    let sem = SemanticSeq::new(semantic_chain(spec, frames, rng), spec.semantic_vocab)?;
    let grid = render_grid(spec, speaker, &sem, rng)?;
    Ok(Utterance { speaker, sem, grid })
}

/// `n` utterances with lengths uniform in `frame_range`. Each utterance gets
/// its own ChaCha stream seeded from `rng`, so utterances are independent of
/// one another's lengths.
pub fn generate_corpus(
    spec: &WorldSpec,
    n: usize,
    frame_range: (usize, usize),
    rng: &mut impl Rng,
) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let (lo, hi) = frame_range;
    if n == 0 {
        return Err(Error::InvalidParams("corpus size must be at least 1".into()));
    }
    if lo < 2 || hi < lo {
        return Err(Error::InvalidParams(format!("bad frame range {lo}..={hi}")));
    }
    (0..n)
        .map(|_| {
            let mut utt_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let frames = utt_rng.random_range(lo..=hi);
            generate_utterance(spec, frames, &mut utt_rng)
        })
        .collect()
}

fn conditional(spec: &WorldSpec, base: TokenId) -> Vec<f64> {
    let c = spec.shape.codebook_size;
    let floor = spec.p_noise / c as f64;
    let mut p = vec![floor; c];
    p[base as usize] += 1.0 - spec.p_noise;
    p
}

/// Exact distribution of `cell` given its (unmasked) dependencies.
pub fn oracle_posterior(spec: &WorldSpec, ctx: &UttContext, grid: &TokenGrid, cell: Cell) -> Result<Vec<f64>> {
    let mut deps = Vec::new();
    for d in dependencies(spec.shape, cell) {
        match grid.get(d) {
            Some(tok) => deps.push(tok),
            None => return Err(Error::UnresolvedDependency { cell, dependency: d }),
        }
    }
    let base = base_token(spec, ctx.sem.ids()[cell.frame], ctx.speaker, cell.group, cell.level, &deps);
    Ok(conditional(spec, base))
}

/// Distribution of `cell` given the unmasked cells of its frame, with masked
/// dependencies summed out under their own conditionals (generation order).
/// Equals [`oracle_posterior`] when every dependency is unmasked.
pub fn oracle_marginal(spec: &WorldSpec, ctx: &UttContext, grid: &TokenGrid, cell: Cell) -> Vec<f64> {
    let deps = dependencies(spec.shape, cell);
    let sem_id = ctx.sem.ids()[cell.frame];
    let c = spec.shape.codebook_size;
    let mut out = vec![spec.p_noise / c as f64; c];

    // Enumerate joint assignments of the dependency cells with non-zero
    // probability. Group 0's coarse cell (if present) always comes first.
    let mut stack: Vec<(usize, Vec<TokenId>, f64)> = vec![(0, Vec::with_capacity(deps.len()), 1.0)];
    while let Some((k, assigned, w)) = stack.pop() {
        if k == deps.len() {
            let base = base_token(spec, sem_id, ctx.speaker, cell.group, cell.level, &assigned);
            out[base as usize] += (1.0 - spec.p_noise) * w;
            continue;
        }
        let dep = deps[k];
        match grid.get(dep) {
            Some(tok) => {
                let mut a = assigned;
                a.push(tok);
                stack.push((k + 1, a, w));
            }
            None => {
                let dep_deps: Vec<TokenId> = if dep.group == 0 { Vec::new() } else { vec![assigned[0]] };
                let base = base_token(spec, sem_id, ctx.speaker, dep.group, dep.level, &dep_deps);
                for (tok, p) in conditional(spec, base).into_iter().enumerate() {
                    if p > 0.0 {
                        let mut a = assigned.clone();
                        a.push(tok as TokenId);
                        stack.push((k + 1, a, w * p));
                    }
                }
            }
        }
    }
    out
}

/// The oracle behind the model contract. It ignores the prompt: the speaker
/// is part of its context.
#[derive(Debug, Clone)]
pub struct OracleModel<'a> {
    pub spec: &'a WorldSpec,
    pub ctx: UttContext,
}

impl<'a> OracleModel<'a> {
    pub fn new(spec: &'a WorldSpec, ctx: UttContext) -> Self {
        OracleModel { spec, ctx }
    }
}

impl<S: Scalar> TokenModel<S> for OracleModel<'_> {
    type Prompt = ();

    fn encode_prompt(&self, _prompt: &TokenGrid) -> Result<()> {
        Ok(())
    }

    fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, _prompt: &()) -> Result<LogitsGrid<S>> {
        if sem.len() != grid.frames() || sem != &self.ctx.sem {
            return Err(Error::ShapeMismatch("oracle queried with a different semantic sequence".into()));
        }
        let mut logits = LogitsGrid::zeros(grid.shape(), grid.frames());
        for cell in grid.cells() {
            let p = oracle_marginal(self.spec, &self.ctx, grid, cell);
            for (l, q) in logits.row_mut(cell).iter_mut().zip(p) {
                *l = S::lit(q.max(MIN_PROB).ln());
            }
        }
        Ok(logits)
    }
}

/// Writes `utt_NNNNN.gact` files plus a manifest of `filename speaker frames` lines.
pub fn write_corpus(dir: &Path, utts: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, u) in utts.iter().enumerate() {
        let name = format!("utt_{i:05}.gact");
        fs::write(dir.join(&name), serialize_tokens(&u.grid, &u.sem)?)?;
        manifest.push_str(&format!("{name} {} {}\n", u.speaker, u.frames()));
    }
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<Utterance>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut out = Vec::new();
    for (n, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Config(format!("manifest line {}: expected `filename speaker frames`", n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let speaker: u32 = fields[1].parse().map_err(|_| bad())?;
        let frames: usize = fields[2].parse().map_err(|_| bad())?;
        let (grid, sem) = deserialize_tokens(&fs::read(dir.join(fields[0]))?)?;
        if grid.frames() != frames {
            return Err(Error::ShapeMismatch(format!("{}: manifest says {frames} frames, file has {}", fields[0], grid.frames())));
        }
        out.push(Utterance { speaker, sem, grid });
    }
    Ok(out)
}
