//! `gmlm`: synthetic data, training, decoding, evaluation and benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gmlm_core::bench::{bench_runtime, read_rows, write_plot, write_rows, BenchConfig, BenchMode};
use gmlm_core::config::KeyValues;
use gmlm_core::nn::{Predictor, PredictorConfig};
use gmlm_core::sampler::{accuracy_metrics, gipd_decode, ipd_baseline_decode, write_trace_csv, Confidence, DecodeRequest};
use gmlm_core::token::{deserialize_tokens, serialize_tokens};
use gmlm_core::train::{StatsWriter, TrainConfig, Trainer};
use gmlm_core::world::{generate_corpus, read_corpus, write_corpus, WorldSpec};
use gmlm_core::{SemanticSeq, TokenGrid};

#[derive(Parser, Debug)]
#[command(name = "gmlm", version, about = "Group-masked token modeling on a synthetic token world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus: GACT files plus manifest.txt
    GenData {
        /// World spec (key = value)
        #[arg(long)]
        spec: PathBuf,
        /// Number of utterances
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        t_min: usize,
        #[arg(long, default_value_t = 32)]
        t_max: usize,
        /// Corpus sampling seed; the world's hash seed comes from the world file
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a predictor on a corpus directory
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Training and model settings (key = value)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Per-step statistics CSV
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Generate target tokens for semantic ids, conditioned on a prompt
    Decode {
        #[arg(long)]
        model: PathBuf,
        /// Prompt GACT file (its semantic ids are ignored)
        #[arg(long)]
        prompt: PathBuf,
        /// Target semantic ids: a GACT file or whitespace/comma separated text
        #[arg(long)]
        sem: PathBuf,
        /// Coarse iterations N_c
        #[arg(long, default_value_t = 5)]
        nc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial Gumbel temperature
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Rank by the perturbed rather than the clean probability
        #[arg(long)]
        perturbed_confidence: bool,
        /// Decode slice by slice with these budgets (g0j0,g1j0,g0j1,g1j1,...)
        #[arg(long, value_delimiter = ',')]
        baseline: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
        /// Sampler trace CSV
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare predicted and reference GACT files
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Metrics CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time decoding across prompt lengths, target lengths and modes
    Bench {
        #[arg(long)]
        model: PathBuf,
        /// Bench settings (key = value); flags below override it
        #[arg(long)]
        config: Option<PathBuf>,
        /// World used to draw prompts and targets; defaults to the model's shape
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        prompt_lengths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        target_lengths: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        iterations: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        modes: Option<Vec<BenchMode>>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Render a bench CSV as SVG
    Plot {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_gact(path: &Path) -> Result<(TokenGrid, SemanticSeq)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    deserialize_tokens(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_sem(path: &Path, vocab: usize) -> Result<SemanticSeq> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"GACT") {
        return Ok(deserialize_tokens(&bytes).with_context(|| format!("parsing {}", path.display()))?.1);
    }
    let text = String::from_utf8(bytes).context("semantic id file is neither GACT nor text")?;
    let ids = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().with_context(|| format!("bad semantic id {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SemanticSeq::new(ids, vocab)?)
}

fn gen_data(spec: &Path, n: usize, out: &Path, t_min: usize, t_max: usize, seed: u64) -> Result<()> {
    let spec = WorldSpec::from_config(&read_text(spec)?).context("world spec")?;
    let utts = generate_corpus(&spec, n, (t_min, t_max), &mut ChaCha8Rng::seed_from_u64(seed))?;
    write_corpus(out, &utts)?;
    eprintln!("wrote {n} utterances to {}", out.display());
    Ok(())
}

fn train(corpus: &Path, config: Option<&Path>, out: &Path, stats: Option<&Path>) -> Result<()> {
    let utts = read_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    let first = utts.first().context("corpus is empty")?;
    let text = match config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut kv = KeyValues::parse(&text)?;
    let base = PredictorConfig::new(first.grid.shape(), first.sem.vocab(), utts.iter().map(|u| u.frames()).max().unwrap_or(1));
    let pcfg = PredictorConfig {
        d_model: kv.take_or("d_model", base.d_model)?,
        heads: kv.take_or("heads", base.heads)?,
        layers: kv.take_or("layers", base.layers)?,
        ff_dim: kv.take_or("ff_dim", base.ff_dim)?,
        encoder_layers: kv.take_or("encoder_layers", base.encoder_layers)?,
        max_frames: kv.take_or("max_frames_model", base.max_frames)?,
        ..base
    };
    let model_seed = kv.take_or("model_seed", 0u64)?;
    let cfg = TrainConfig::take_from(&mut kv)?;
    kv.finish().context("training config")?;
    let mut trainer = Trainer::new(Predictor::<f64>::init(pcfg, model_seed)?, cfg)?;
    let mut writer = stats.map(StatsWriter::create).transpose()?;
    let summary = trainer.run(&utts, |s| {
        if let Some(w) = writer.as_mut() {
            w.write(s)?;
        }
        if s.step % 100 == 0 {
            eprintln!("step {} loss {:.4}", s.step, s.loss);
        }
        Ok(())
    })?;
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    trainer.model().save(out)?;
    if summary.steps > 0 {
        eprintln!("{} steps, mean loss {:.4}", summary.steps, summary.mean_loss);
    }
    eprintln!("saved {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn decode(
    model: &Path,
    prompt: &Path,
    sem: &Path,
    nc: usize,
    seed: u64,
    tau: f64,
    perturbed: bool,
    baseline: Option<&[usize]>,
    out: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    let p = Predictor::<f32>::load(model).with_context(|| format!("loading {}", model.display()))?;
    let (prompt, _) = read_gact(prompt)?;
    let sem = read_sem(sem, p.config().semantic_vocab)?;
    let mut req = DecodeRequest::new(sem, prompt, nc, seed);
    req.temperature = tau;
    req.confidence = if perturbed { Confidence::Perturbed } else { Confidence::Clean };
    let (grid, tr) = match baseline {
        Some(b) => ipd_baseline_decode(&p, &req, b)?,
        None => gipd_decode(&p, &req)?,
    };
    fs::write(out, serialize_tokens(&grid, &req.sem)?).with_context(|| format!("writing {}", out.display()))?;
    if let Some(t) = trace {
        write_trace_csv(&tr, t)?;
    }
    eprintln!("{} forwards; wrote {}", tr.forwards, out.display());
    Ok(())
}

fn eval(pred: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let (p, _) = read_gact(pred)?;
    let (r, _) = read_gact(reference)?;
    let m = accuracy_metrics(&p, &r)?;
    let shape = r.shape();
    let mut csv = String::from("metric,value\n");
    for g in 0..shape.groups {
        for j in 0..shape.levels {
            csv.push_str(&format!("g{g}j{j},{:.6}\n", m.per_slot[shape.slot(g, j)]));
        }
    }
    csv.push_str(&format!("overall,{:.6}\ncoarse,{:.6}\n", m.overall, m.coarse));
    if let Some(f) = m.fine {
        csv.push_str(&format!("fine,{f:.6}\n"));
    }
    csv.push_str(&format!("frame_match,{:.6}\n", m.frame_match));
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

struct BenchArgs {
    model: PathBuf,
    config: Option<PathBuf>,
    world: Option<PathBuf>,
    prompt_lengths: Option<Vec<usize>>,
    target_lengths: Option<Vec<usize>>,
    iterations: Option<Vec<usize>>,
    modes: Option<Vec<BenchMode>>,
    repetitions: Option<usize>,
    out: PathBuf,
    plot: Option<PathBuf>,
}

/// Builds the bench config; validation failures are usage errors.
fn bench_config(a: &BenchArgs) -> Result<std::result::Result<BenchConfig, String>> {
    let mut cfg = match &a.config {
        Some(p) => match BenchConfig::from_config(&read_text(p)?) {
            Ok(c) => c,
            Err(e) => return Ok(Err(e.to_string())),
        },
        None => BenchConfig::default(),
    };
    if let Some(v) = &a.prompt_lengths {
        cfg.prompt_lengths = v.clone();
    }
    if let Some(v) = &a.target_lengths {
        cfg.target_lengths = v.clone();
    }
    if let Some(v) = &a.iterations {
        cfg.iterations = v.clone();
    }
    if let Some(v) = &a.modes {
        cfg.modes = v.clone();
    }
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    Ok(cfg.validate().map(|_| cfg).map_err(|e| e.to_string()))
}

fn bench(a: &BenchArgs, cfg: &BenchConfig) -> Result<()> {
    let p = Predictor::<f32>::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let world = match &a.world {
        Some(w) => WorldSpec::from_config(&read_text(w)?)?,
        None => WorldSpec { shape: p.config().shape, semantic_vocab: p.config().semantic_vocab, speakers: 8, p_noise: 0.1, seed: 0 },
    };
    let rows = bench_runtime(&p, &world, cfg)?;
    write_rows(&rows, &a.out)?;
    if let Some(svg) = &a.plot {
        write_plot(&rows, svg)?;
    }
    eprintln!("{} rows written to {}", rows.len(), a.out.display());
    Ok(())
}

fn plot(rows: &Path, out: &Path) -> Result<()> {
    let path = rows;
    let rows = read_rows(path).with_context(|| format!("reading {}", path.display()))?;
    if rows.is_empty() {
        bail!("{} has no rows", path.display());
    }
    write_plot(&rows, out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, n, out, t_min, t_max, seed } => gen_data(&spec, n, &out, t_min, t_max, seed),
        Command::Train { corpus, config, out, stats } => train(&corpus, config.as_deref(), &out, stats.as_deref()),
        Command::Decode { model, prompt, sem, nc, seed, tau, perturbed_confidence, baseline, out, trace } => decode(
            &model,
            &prompt,
            &sem,
            nc,
            seed,
            tau,
            perturbed_confidence,
            baseline.as_deref(),
            &out,
            trace.as_deref(),
        ),
        Command::Eval { pred, reference, out } => eval(&pred, &reference, out.as_deref()),
        Command::Bench { .. } | Command::Plot { .. } => unreachable!("handled in main"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench { model, config, world, prompt_lengths, target_lengths, iterations, modes, repetitions, out, plot } => {
            let args = BenchArgs { model, config, world, prompt_lengths, target_lengths, iterations, modes, repetitions, out, plot };
            match bench_config(&args) {
                Ok(Ok(cfg)) => bench(&args, &cfg),
                Ok(Err(msg)) => {
                    use clap::CommandFactory;
                    let mut cmd = Cli::command();
                    cmd.build();
                    let sub = cmd.find_subcommand_mut("bench").expect("bench subcommand");
                    sub.error(clap::error::ErrorKind::InvalidValue, msg).exit()
                }
                Err(e) => Err(e),
            }
        }
        Command::Plot { rows, out } => plot(&rows, &out),
        other => run(Cli { command: other }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
