use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::token::Fill;

fn tiny_config() -> PredictorConfig {
    PredictorConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        ff_dim: 16,
        encoder_layers: 1,
        shape: GridShape::new(2, 2, 5).unwrap(),
        semantic_vocab: 4,
        max_frames: 6,
    }
}

fn random_grid(shape: GridShape, frames: usize, mask_p: f64, rng: &mut ChaCha8Rng) -> TokenGrid {
    let mut grid = TokenGrid::new(shape, frames, Fill::AllMasked).unwrap();
    for cell in grid.cells().collect::<Vec<_>>() {
        if !rng.random_bool(mask_p) {
            grid.set(cell, rng.random_range(0..shape.codebook_size as u32)).unwrap();
        }
    }
    grid
}

fn random_sem(vocab: usize, frames: usize, rng: &mut ChaCha8Rng) -> SemanticSeq {
    SemanticSeq::new((0..frames).map(|_| rng.random_range(0..vocab as u32)).collect(), vocab).unwrap()
}

struct Case {
    sem: SemanticSeq,
    grid: TokenGrid,
    prompt: TokenGrid,
}

fn case(cfg: &PredictorConfig, target: usize, prompt: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Case {
        sem: random_sem(cfg.semantic_vocab, target, &mut rng),
        grid: random_grid(cfg.shape, target, 0.5, &mut rng),
        prompt: random_grid(cfg.shape, prompt, 0.0, &mut rng),
    }
}

/// Gives every parameter a nonzero random value so no gradient path is trivially dead.
fn perturbed(cfg: PredictorConfig, seed: u64) -> Predictor<f64> {
    let mut p = Predictor::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for v in p.params_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    p
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config();
    assert_eq!(cfg.head_dim(), 4);
    cfg.d_model = 9;
    assert!(matches!(Predictor::<f64>::init(cfg, 0), Err(Error::InvalidParams(_))));
    assert_eq!(PredictorConfig::default().ff_dim, 4 * PredictorConfig::default().d_model);
}

#[test]
fn init_is_deterministic() {
    let a = Predictor::<f64>::init(tiny_config(), 7).unwrap();
    let b = Predictor::<f64>::init(tiny_config(), 7).unwrap();
    let c = Predictor::<f64>::init(tiny_config(), 8).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(a.params().len(), a.layout().total());
    let gain = a.layout().block("final_norm.gain").unwrap();
    assert!(a.block(gain).iter().all(|&v| v == 1.0));
}

#[test]
fn layout_tiles_parameter_vector() {
    let layout = Layout::new(&tiny_config());
    let mut next = 0;
    for (_, b) in layout.blocks() {
        assert_eq!(b.offset, next);
        next += b.len();
    }
    assert_eq!(next, layout.total());
    let heads = layout.block("heads.w").unwrap();
    assert_eq!(heads.len(), 4 * 8 * 5);
}

#[test]
fn fully_masked_embedding_is_sum_of_parts() {
    let cfg = tiny_config();
    let p = perturbed(cfg, 1);
    let sem = SemanticSeq::new(vec![3, 1], 4).unwrap();
    let grid = TokenGrid::new(cfg.shape, 2, Fill::AllMasked).unwrap();
    let x = p.embed_frames(&sem, &grid).unwrap();
    let lay = p.layout();
    let d = 8;
    for t in 0..2 {
        let s = sem.ids()[t] as usize;
        for i in 0..d {
            let mut want = p.block(lay.semantic)[s * d + i] + p.block(lay.target_pos)[t * d + i];
            for slot in 0..4 {
                want += p.block(lay.mask)[slot * d + i];
            }
            assert!((x[t * d + i] - want).abs() < 1e-12);
        }
    }
    // identical frames at identical positions embed identically; positions differ here
    assert_ne!(&x[..d], &x[d..]);
}

#[test]
fn unmasking_is_local_to_its_frame() {
    let cfg = tiny_config();
    let p = perturbed(cfg, 2);
    let c = case(&cfg, 4, 2, 3);
    let before = p.embed_frames(&c.sem, &c.grid).unwrap();
    let mut grid = c.grid.clone();
    let cell = grid.first_masked().unwrap();
    grid.set(cell, 1).unwrap();
    let after = p.embed_frames(&c.sem, &grid).unwrap();
    for t in 0..4 {
        let same = before[t * 8..(t + 1) * 8] == after[t * 8..(t + 1) * 8];
        assert_eq!(same, t != cell.frame, "frame {t}");
    }
}

#[test]
fn frame_limit_and_shape_errors() {
    let cfg = tiny_config();
    let p = perturbed(cfg, 2);
    let c = case(&cfg, 7, 2, 3);
    assert!(matches!(p.embed_frames(&c.sem, &c.grid), Err(Error::ShapeMismatch(_))));
    let c = case(&cfg, 3, 2, 3);
    let short = c.sem.slice(0, 2);
    assert!(matches!(p.embed_frames(&short, &c.grid), Err(Error::ShapeMismatch(_))));
    let masked_prompt = TokenGrid::new(cfg.shape, 2, Fill::AllMasked).unwrap();
    assert!(matches!(p.encode_prompt(&masked_prompt), Err(Error::MaskedCell(_))));
}

#[test]
fn prompt_cache_shape_and_determinism() {
    let cfg = PredictorConfig { layers: 2, ..tiny_config() };
    let p = perturbed(cfg, 4);
    let c = case(&cfg, 3, 1, 5);
    let cache = p.encode_prompt(&c.prompt).unwrap();
    assert_eq!(cache.frames, 1);
    assert_eq!(cache.keys.len(), 2);
    assert_eq!(cache.keys[0].len(), 8);
    assert_eq!(cache.key(1, 1, 0, 4), &cache.keys[1][4..8]);
    assert_eq!(cache, p.encode_prompt(&c.prompt).unwrap());
}

#[test]
fn cached_and_reprojected_forward_agree() {
    let cfg = PredictorConfig { layers: 2, ..tiny_config() };
    let p = perturbed(cfg, 5);
    for seed in 0..5 {
        let c = case(&cfg, 5, 3, seed);
        let states = p.encode_prompt_states(&c.prompt).unwrap();
        let cache = p.project_prompt(&states);
        let a = p.forward(&c.sem, &c.grid, &cache).unwrap();
        let b = p.forward_reprojecting(&c.sem, &c.grid, &states).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn attention_rows_normalized_in_tape() {
    let cfg = tiny_config();
    let p = perturbed(cfg, 6);
    let c = case(&cfg, 4, 3, 6);
    let (_, tape) = p.forward_train(&c.sem, &c.grid, &c.prompt).unwrap();
    let layer = &tape.decoder.layers[0];
    for row in layer.cross_attn.probs.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for row in layer.self_attn.probs.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn head_row_permutation_only_moves_that_head() {
    let cfg = tiny_config();
    let mut p = perturbed(cfg, 7);
    let c = case(&cfg, 3, 2, 7);
    let cache = p.encode_prompt(&c.prompt).unwrap();
    let before = p.forward(&c.sem, &c.grid, &cache).unwrap();
    // swap output columns 0 and 3 of slot (1, 0): codebook entries trade logits
    let slot = cfg.shape.slot(1, 0);
    let (hw, hb) = (p.layout().head_w, p.layout().head_b);
    let (d, cs) = (8, 5);
    let params = p.params_mut();
    for r in 0..d {
        params.swap(hw.offset + slot * d * cs + r * cs, hw.offset + slot * d * cs + r * cs + 3);
    }
    params.swap(hb.offset + slot * cs, hb.offset + slot * cs + 3);
    let after = p.forward(&c.sem, &c.grid, &cache).unwrap();
    for cell in c.grid.cells() {
        let (a, b) = (before.row(cell), after.row(cell));
        if cell.group == 1 && cell.level == 0 {
            assert_eq!((a[0], a[3], a[1]), (b[3], b[0], b[1]));
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn zero_cross_values_ignore_prompt_content() {
    let cfg = PredictorConfig { layers: 2, ..tiny_config() };
    let mut p = perturbed(cfg, 8);
    let blocks: Vec<Block> = p.layout().decoder.iter().map(|b| b.cross_attn.wv).collect();
    for b in blocks {
        p.params_mut()[b.range()].fill(0.0);
    }
    let c = case(&cfg, 4, 3, 8);
    let other = case(&cfg, 4, 5, 9).prompt;
    let a = p.forward(&c.sem, &c.grid, &p.encode_prompt(&c.prompt).unwrap()).unwrap();
    let b = p.forward(&c.sem, &c.grid, &p.encode_prompt(&other).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cross_attention_is_permutation_equivariant_without_positions() {
    let cfg = tiny_config();
    let mut p = perturbed(cfg, 9);
    let pos = p.layout().prompt_pos;
    p.params_mut()[pos.range()].fill(0.0);
    let c = case(&cfg, 4, 4, 10);
    let order = [2, 0, 3, 1];
    let mut shuffled = c.prompt.clone();
    for (dst, &src) in order.iter().enumerate() {
        for g in 0..2 {
            for j in 0..2 {
                shuffled.set(Cell::new(dst, g, j), c.prompt.token(Cell::new(src, g, j))).unwrap();
            }
        }
    }
    let a = p.forward(&c.sem, &c.grid, &p.encode_prompt(&c.prompt).unwrap()).unwrap();
    let b = p.forward(&c.sem, &c.grid, &p.encode_prompt(&shuffled).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

fn weighted_loss(p: &Predictor<f64>, c: &Case, w: &[f64]) -> f64 {
    let (logits, _) = p.forward_train(&c.sem, &c.grid, &c.prompt).unwrap();
    logits.data().iter().zip(w).map(|(a, b)| a * b).sum()
}

#[test]
fn gradients_match_central_differences() {
    let cfg = PredictorConfig { encoder_layers: 2, ..tiny_config() };
    let mut p = perturbed(cfg, 11);
    let c = case(&cfg, 4, 3, 12);
    let (logits, tape) = p.forward_train(&c.sem, &c.grid, &c.prompt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut dl = LogitsGrid::zeros(cfg.shape, 4);
    for v in dl.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let w = dl.data().to_vec();
    assert_eq!(logits.data().len(), w.len());
    let grads = p.backward(&tape, &dl).unwrap();
    let h = 1e-3;
    let layout = p.layout().clone();
    for (name, block) in layout.blocks() {
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in block.range() {
            let orig = p.params()[i];
            p.params_mut()[i] = orig + h;
            let up = weighted_loss(&p, &c, &w);
            p.params_mut()[i] = orig - h;
            let down = weighted_loss(&p, &c, &w);
            p.params_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            diff += (num - grads.values[i]).powi(2);
            scale = scale.max(num.abs()).max(grads.values[i].abs());
        }
        let norm = (block.len() as f64).sqrt() * scale;
        let rel = if scale == 0.0 { 0.0 } else { diff.sqrt() / norm };
        assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let cfg = tiny_config();
    let p = perturbed(cfg, 14);
    let c = case(&cfg, 3, 2, 14);
    let (_, tape) = p.forward_train(&c.sem, &c.grid, &c.prompt).unwrap();
    let g = p.backward(&tape, &LogitsGrid::zeros(cfg.shape, 3)).unwrap();
    assert!(g.values.iter().all(|&v| v == 0.0));
}

#[test]
fn stale_tape_is_rejected() {
    let cfg = tiny_config();
    let mut p = perturbed(cfg, 15);
    let c = case(&cfg, 3, 2, 15);
    let (logits, tape) = p.forward_train(&c.sem, &c.grid, &c.prompt).unwrap();
    p.params_mut()[0] += 1.0;
    assert!(matches!(p.backward(&tape, &logits), Err(Error::StaleTape(_))));
    let (_, tape) = p.forward_train(&c.sem, &c.grid, &c.prompt).unwrap();
    assert!(matches!(p.backward(&tape, &LogitsGrid::zeros(cfg.shape, 2)), Err(Error::StaleTape(_))));
}

#[test]
fn cached_forward_cost_is_linear_in_prompt_only_through_cross_attention() {
    let cfg = PredictorConfig { layers: 2, ..tiny_config() };
    let p = perturbed(cfg, 16);
    let mut per_prompt = Vec::new();
    for prompt_len in [1, 2, 4] {
        let c = case(&cfg, 5, prompt_len, 17);
        let cache = p.encode_prompt(&c.prompt).unwrap();
        p.counters().reset();
        for _ in 0..3 {
            p.forward(&c.sem, &c.grid, &cache).unwrap();
        }
        let n = p.counters().snapshot();
        assert_eq!((n.prompt_encodes, n.prompt_projections, n.prompt_macs, n.forwards), (0, 0, 0, 3));
        per_prompt.push(n);
    }
    assert!(per_prompt.iter().all(|n| n.target_macs == per_prompt[0].target_macs));
    let x: Vec<u64> = per_prompt.iter().map(|n| n.cross_attention_macs).collect();
    assert_eq!(x[1] - x[0], x[0]);
    assert_eq!(x[2] - x[1], 2 * x[0]);

    let c = case(&cfg, 5, 2, 17);
    p.counters().reset();
    let uncached = Uncached(&p);
    let prompt = uncached.encode_prompt(&c.prompt).unwrap();
    for _ in 0..3 {
        uncached.forward(&c.sem, &c.grid, &prompt).unwrap();
    }
    let n = p.counters().snapshot();
    assert_eq!((n.prompt_encodes, n.prompt_projections), (3, 3));
}

#[test]
fn clone_resets_counters() {
    let cfg = tiny_config();
    let p = perturbed(cfg, 18);
    p.encode_prompt(&case(&cfg, 2, 2, 1).prompt).unwrap();
    assert_eq!(p.counters().snapshot().prompt_encodes, 1);
    let q = p.clone();
    assert_eq!(q.counters().snapshot(), OpCounts::default());
    assert_eq!(q.params(), p.params());
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config();
    let p = Predictor::<f32>::init(cfg, 19).unwrap();
    let bytes = p.to_bytes();
    assert_eq!(&bytes[..4], b"GMLM");
    assert_eq!(bytes.len(), 4 + 1 + 40 + 8 + 4 * p.params().len());
    let q = Predictor::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(q.config(), p.config());
    assert_eq!(q.params(), p.params());

    let wide = perturbed(cfg, 19);
    let narrow = Predictor::<f64>::from_bytes(&wide.to_bytes()).unwrap();
    for (a, b) in wide.params().iter().zip(narrow.params()) {
        assert_eq!(*a as f32 as f64, *b);
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Predictor::<f32>::from_bytes(&bad), Err(Error::BadMagic { .. })));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(Predictor::<f32>::from_bytes(&bad), Err(Error::UnsupportedVersion(2))));
    assert!(matches!(Predictor::<f32>::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Predictor::<f32>::from_bytes(&long), Err(Error::TrailingBytes(1))));
}

#[test]
fn f32_and_f64_models_agree() {
    let cfg = tiny_config();
    let p64 = Predictor::<f64>::from_bytes(&Predictor::<f32>::init(cfg, 20).unwrap().to_bytes()).unwrap();
    let p32 = Predictor::<f32>::init(cfg, 20).unwrap();
    let c = case(&cfg, 4, 3, 21);
    let a = p64.forward(&c.sem, &c.grid, &p64.encode_prompt(&c.prompt).unwrap()).unwrap();
    let b = p32.forward(&c.sem, &c.grid, &p32.encode_prompt(&c.prompt).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_equivalence_holds_for_random_inputs(seed in any::<u64>(), target in 1usize..6, prompt in 1usize..6) {
        let cfg = PredictorConfig { layers: 2, ..tiny_config() };
        let p = perturbed(cfg, seed % 7);
        let c = case(&cfg, target, prompt, seed);
        let states = p.encode_prompt_states(&c.prompt).unwrap();
        let cached = p.forward(&c.sem, &c.grid, &p.project_prompt(&states)).unwrap();
        let again = p.forward_reprojecting(&c.sem, &c.grid, &states).unwrap();
        let max = cached.data().iter().zip(again.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(max <= 1e-6);
    }
}
