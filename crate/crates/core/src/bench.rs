//! Decode-time benchmarks.
//!
//! Each configuration point decodes the same synthetic utterance in every
//! mode; repetitions interleave modes so slow drift hits all of them alike.
//! Times cover the whole decode including the prompt encoding, in
//! milliseconds.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::{LogitsGrid, TokenModel};
use crate::nn::{Predictor, PromptStates, Uncached};
use crate::sampler::{accuracy_metrics, default_baseline_budgets, gipd_decode, ipd_baseline_decode, DecodeRequest, SamplerTrace};
use crate::scalar::Scalar;
use crate::token::{SemanticSeq, TokenGrid};
use crate::world::{generate_utterance, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    /// Prompt encoded and projected once per decode.
    Gipd,
    /// Level-by-level baseline with a cached prompt.
    IpdBaseline,
    /// Prompt encoder and projections rerun on every forward.
    GipdNocache,
    /// Encoder once, key/value projections rerun on every forward.
    GipdReproject,
}

impl BenchMode {
    pub const ALL: [BenchMode; 4] = [BenchMode::Gipd, BenchMode::IpdBaseline, BenchMode::GipdNocache, BenchMode::GipdReproject];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Gipd => "gipd",
            BenchMode::IpdBaseline => "ipd-baseline",
            BenchMode::GipdNocache => "gipd-nocache",
            BenchMode::GipdReproject => "gipd-reproject",
        }
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}; expected one of gipd, ipd-baseline, gipd-nocache, gipd-reproject")))
    }
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub prompt_lengths: Vec<usize>,
    pub target_lengths: Vec<usize>,
    /// Coarse iteration counts `N_c`; baseline rows spend the same total `N_c + 1`.
    pub iterations: Vec<usize>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
    pub modes: Vec<BenchMode>,
    pub temperature: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            prompt_lengths: vec![64, 128, 256],
            target_lengths: vec![256],
            iterations: vec![26],
            repetitions: 3,
            warmup: 1,
            seed: 0,
            modes: vec![BenchMode::Gipd, BenchMode::IpdBaseline, BenchMode::GipdNocache],
            temperature: 1.0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, v: bool| if v { Err(Error::Config(format!("{name} list is empty"))) } else { Ok(()) };
        empty("prompt_lengths", self.prompt_lengths.is_empty())?;
        empty("target_lengths", self.target_lengths.is_empty())?;
        empty("iterations", self.iterations.is_empty())?;
        empty("modes", self.modes.is_empty())?;
        if self.repetitions < 3 || self.warmup < 1 {
            return Err(Error::Config(format!("need repetitions >= 3 and warmup >= 1, got {} and {}", self.repetitions, self.warmup)));
        }
        if self.prompt_lengths.contains(&0) || self.target_lengths.contains(&0) || self.iterations.contains(&0) {
            return Err(Error::Config("lengths and iteration counts must be positive".into()));
        }
        Ok(())
    }

    /// Keys: `prompt_lengths target_lengths iterations modes` (comma lists),
    /// `repetitions warmup seed temperature`.
    pub fn from_config(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let d = BenchConfig::default();
        let cfg = BenchConfig {
            prompt_lengths: kv.take_list("prompt_lengths")?.unwrap_or(d.prompt_lengths),
            target_lengths: kv.take_list("target_lengths")?.unwrap_or(d.target_lengths),
            iterations: kv.take_list("iterations")?.unwrap_or(d.iterations),
            modes: kv.take_list("modes")?.unwrap_or(d.modes),
            repetitions: kv.take_or("repetitions", d.repetitions)?,
            warmup: kv.take_or("warmup", d.warmup)?,
            seed: kv.take_or("seed", d.seed)?,
            temperature: kv.take_or("temperature", d.temperature)?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub prompt_len: usize,
    pub target_len: usize,
    pub n_c: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub forwards: usize,
    pub accuracy: f64,
}

pub const BENCH_HEADER: &str = "mode,prompt_len,target_len,n_c,median_ms,iqr_ms,forwards,accuracy";

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.5), quantile(&v, 0.75) - quantile(&v, 0.25))
}

/// Encoder once per decode, projections on every forward.
struct Reprojecting<'a, S>(&'a Predictor<S>);

impl<S: Scalar> TokenModel<S> for Reprojecting<'_, S> {
    type Prompt = PromptStates<S>;

    fn encode_prompt(&self, prompt: &TokenGrid) -> Result<PromptStates<S>> {
        self.0.encode_prompt_states(prompt)
    }

    fn forward(&self, sem: &SemanticSeq, grid: &TokenGrid, prompt: &PromptStates<S>) -> Result<LogitsGrid<S>> {
        self.0.forward_reprojecting(sem, grid, prompt)
    }
}

fn decode_once<S: Scalar>(model: &Predictor<S>, mode: BenchMode, req: &DecodeRequest) -> Result<(TokenGrid, SamplerTrace)> {
    match mode {
        BenchMode::Gipd => gipd_decode(model, req),
        BenchMode::GipdNocache => gipd_decode(&Uncached(model), req),
        BenchMode::GipdReproject => gipd_decode(&Reprojecting(model), req),
        BenchMode::IpdBaseline => {
            let shape = req.prompt.shape();
            let budgets = default_baseline_budgets(req.iterations + 1, shape.slots())?;
            ipd_baseline_decode(model, req, &budgets)
        }
    }
}

struct Case {
    prompt_len: usize,
    target_len: usize,
    reference: TokenGrid,
    req: DecodeRequest,
    times: Vec<Vec<f64>>,
    outcome: Vec<(usize, f64)>,
}

/// Times every `(prompt, target, N_c, mode)` point. Rows come out in that
/// nesting order with modes in `cfg.modes` order.
///
/// Each repetition visits every point once, so slow phases of the machine
/// spread over all points instead of landing on one prompt length.
pub fn bench_runtime<S: Scalar>(model: &Predictor<S>, world: &WorldSpec, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    world.validate()?;
    if world.shape != model.config().shape {
        return Err(Error::ShapeMismatch("world and model grid shapes differ".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    for &p in &cfg.prompt_lengths {
        for &t in &cfg.target_lengths {
            let utt = generate_utterance(world, p + t, &mut rng)?;
            let prompt = utt.grid.slice_frames(0, p)?;
            let reference = utt.grid.slice_frames(p, p + t)?;
            let sem = utt.sem.slice(p, p + t);
            for &n_c in &cfg.iterations {
                let req = DecodeRequest { temperature: cfg.temperature, ..DecodeRequest::new(sem.clone(), prompt.clone(), n_c, cfg.seed) };
                cases.push(Case {
                    prompt_len: p,
                    target_len: t,
                    reference: reference.clone(),
                    req,
                    times: vec![Vec::new(); cfg.modes.len()],
                    outcome: vec![(0, 0.0); cfg.modes.len()],
                });
            }
        }
    }
    for rep in 0..cfg.warmup + cfg.repetitions {
        for case in cases.iter_mut() {
            for (k, &mode) in cfg.modes.iter().enumerate() {
                let before = model.counters().snapshot().forwards;
                let start = Instant::now();
                let (out, trace) = decode_once(model, mode, &case.req)?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                let counted = model.counters().snapshot().forwards - before;
                if counted != trace.forwards as u64 {
                    return Err(Error::InvalidParams(format!("{mode}: model counted {counted} forwards, sampler {}", trace.forwards)));
                }
                if rep >= cfg.warmup {
                    case.times[k].push(elapsed);
                }
                case.outcome[k] = (trace.forwards, accuracy_metrics(&out, &case.reference)?.overall);
            }
        }
    }
    let mut rows = Vec::new();
    for case in &cases {
        for (k, &mode) in cfg.modes.iter().enumerate() {
            let (median_ms, iqr_ms) = median_iqr(&case.times[k]);
            rows.push(BenchRow {
                mode,
                prompt_len: case.prompt_len,
                target_len: case.target_len,
                n_c: case.req.iterations,
                median_ms,
                iqr_ms,
                forwards: case.outcome[k].0,
                accuracy: case.outcome[k].1,
            });
        }
    }
    Ok(rows)
}

pub fn write_rows(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != BENCH_HEADER {
        return Err(Error::Csv(format!("unexpected header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Line chart of median time against prompt length (or target length when
/// only that varies), one polyline per mode and fixed remaining parameters.
pub fn emit_plot(rows: &[BenchRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidParams("no rows to plot".into()));
    }
    let distinct = |f: fn(&BenchRow) -> usize| {
        let mut v: Vec<usize> = rows.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let by_prompt = distinct(|r| r.prompt_len) >= distinct(|r| r.target_len);
    let x_of = |r: &BenchRow| if by_prompt { r.prompt_len } else { r.target_len } as f64;
    let other = |r: &BenchRow| if by_prompt { r.target_len } else { r.prompt_len };

    let mut series: Vec<((BenchMode, usize, usize), Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let key = (r.mode, other(r), r.n_c);
        match series.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((x_of(r), r.median_ms)),
            None => series.push((key, vec![(x_of(r), r.median_ms)])),
        }
    }
    for (_, pts) in &mut series {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let (xmin, xmax) = rows.iter().map(x_of).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let ymax = rows.iter().map(|r| r.median_ms).fold(0.0, f64::max).max(1e-9);
    let sx = |x: f64| if xmax > xmin { MARGIN + (x - xmin) / (xmax - xmin) * (WIDTH - 2.0 * MARGIN) } else { WIDTH / 2.0 };
    let sy = |y: f64| HEIGHT - MARGIN - y / ymax * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let xlabel = if by_prompt { "prompt length (frames)" } else { "target length (frames)" };
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{xlabel}</text>"#, WIDTH / 2.0, HEIGHT - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {:.1})">median decode time (ms)</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{ymax:.1}</text>"#, MARGIN - 4.0, sy(ymax) + 4.0);
    let mut ticks: Vec<f64> = rows.iter().map(x_of).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{x}</text>"#, sx(x), HEIGHT - MARGIN + 14.0);
    }
    for (i, ((mode, o, n_c), pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let label = if by_prompt { format!("{mode} T={o} Nc={n_c}") } else { format!("{mode} P={o} Nc={n_c}") };
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{label}</title></polyline>"#, points.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{color}">{label}</text>"#, MARGIN + 10.0);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders `rows` to `path`; nothing is written on error.
pub fn write_plot(rows: &[BenchRow], path: &Path) -> Result<()> {
    let svg = emit_plot(rows)?;
    std::fs::write(path, svg)?;
    Ok(())
}
