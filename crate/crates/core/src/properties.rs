//! Cross-module properties: file format, masking, schedule, codec and oracle recovery.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{GrvqCodec, LatentFrame};
use crate::sampler::{cosine_schedule, gipd_decode, ipd_baseline_decode, DecodeRequest};
use crate::token::{deserialize_tokens, serialize_tokens};
use crate::train::{apply_gmlm_mask, masked_per_group, MaskPlan};
use crate::world::{generate_utterance, OracleModel, WorldSpec};
use crate::{Cell, CodecParams, GridShape, SemanticSeq, TokenGrid};

fn shape_strategy() -> impl Strategy<Value = GridShape> {
    (1usize..=3, 1usize..=3, prop::sample::select(vec![2usize, 4, 16, 1024])).prop_map(|(g, l, c)| GridShape::new(g, l, c).unwrap())
}

fn grid_strategy() -> impl Strategy<Value = (TokenGrid, SemanticSeq)> {
    (shape_strategy(), 1usize..=20, 2usize..=600).prop_flat_map(|(shape, frames, vocab)| {
        let cells = frames * shape.slots();
        (
            prop::collection::vec(0..shape.codebook_size as u32, cells),
            prop::collection::vec(0..vocab as u32, frames),
        )
            .prop_map(move |(tokens, sem)| (TokenGrid::from_tokens(shape, frames, tokens).unwrap(), SemanticSeq::new(sem, vocab).unwrap()))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gact_roundtrip((grid, sem) in grid_strategy()) {
        let bytes = serialize_tokens(&grid, &sem).unwrap();
        let (g2, s2) = deserialize_tokens(&bytes).unwrap();
        prop_assert_eq!(&g2, &grid);
        prop_assert_eq!(&s2, &sem);
        prop_assert_eq!(serialize_tokens(&g2, &s2).unwrap(), bytes);
    }

    #[test]
    fn masked_grids_are_not_serialized((grid, sem) in grid_strategy(), pick in any::<prop::sample::Index>()) {
        let mut grid = grid;
        let cell = grid.cell_at(pick.index(grid.len()));
        grid.mask_cell(cell);
        prop_assert!(serialize_tokens(&grid, &sem).is_err());
    }

    #[test]
    fn truncated_gact_is_rejected((grid, sem) in grid_strategy(), cut in 1usize..64) {
        let bytes = serialize_tokens(&grid, &sem).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(deserialize_tokens(&bytes[..keep]).is_err());
    }

    #[test]
    fn schedule_partitions_cells(m in 1usize..400, s_frac in 0.0f64..1.0) {
        let s = 1 + ((m - 1) as f64 * s_frac) as usize;
        let sched = cosine_schedule(m, s).unwrap();
        prop_assert_eq!(sched.counts.iter().sum::<usize>(), m);
        prop_assert!(sched.counts.iter().all(|&c| c >= 1));
        prop_assert!(sched.remaining.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(*sched.remaining.last().unwrap(), 0);
        prop_assert!(cosine_schedule(m, m + 1).is_err());
    }

    #[test]
    fn mask_splits_prompt_and_target(
        shape in shape_strategy(),
        frames in 2usize..40,
        delim_frac in 0.0f64..1.0,
        level in 0u8..=1,
        fraction in 0.001f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..frames * shape.slots()).map(|i| (i % shape.codebook_size) as u32).collect();
        let grid = TokenGrid::from_tokens(shape, frames, tokens).unwrap();
        let delimiter = 1 + ((frames - 2) as f64 * delim_frac) as usize;
        let plan = MaskPlan { delimiter, level, fraction };
        let ex = apply_gmlm_mask(&grid, &plan, &mut rng).unwrap();
        prop_assert_eq!(ex.prompt.frames() + ex.reference.frames(), frames);
        prop_assert_eq!(ex.prompt.masked_count(), 0);
        prop_assert_eq!(&ex.flags[..], ex.input.mask());
        let k = masked_per_group(fraction, frames - delimiter);
        let coarse = ex.flagged_cells().filter(|c| c.level == 0).count();
        let fine = ex.flagged_cells().filter(|c| c.level > 0).count();
        let fine_slots = shape.groups * (shape.levels - 1);
        if level == 0 {
            prop_assert_eq!(coarse, k * shape.groups);
            prop_assert_eq!(fine, fine_slots * (frames - delimiter));
        } else {
            prop_assert_eq!(coarse, 0);
            prop_assert_eq!(fine, fine_slots * k);
        }
        for cell in ex.input.cells().filter(|&c| !ex.input.is_masked(c)) {
            prop_assert_eq!(ex.input.token(cell), grid.token(Cell::new(cell.frame + delimiter, cell.group, cell.level)));
        }
    }

    #[test]
    fn codec_full_depth_is_default_decode(
        seed in any::<u64>(),
        points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 8..40),
    ) {
        let params = CodecParams { groups: 2, levels: 2, codebook_size: 4, latent_dim: 4, frames_per_second: 50.0 };
        let latents: Vec<LatentFrame<f64>> = points.into_iter().map(LatentFrame).collect();
        let codec = GrvqCodec::fit(&latents, params, 10, seed).unwrap();
        for z in &latents {
            let tokens = codec.encode_frame(z).unwrap();
            prop_assert!(tokens.iter().all(|&t| t < 4));
            prop_assert_eq!(codec.decode_frame_depth(&tokens, 2).unwrap(), codec.decode_frame(&tokens).unwrap());
            prop_assert_eq!(codec.encode_frame(z).unwrap(), tokens);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn noiseless_oracle_is_recovered(
        world_seed in any::<u64>(),
        utt_seed in any::<u64>(),
        frames in 3usize..24,
        groups in 1usize..=3,
        levels in 1usize..=3,
        n_c_frac in 0.0f64..1.0,
    ) {
        let shape = GridShape::new(groups, levels, 8).unwrap();
        let spec = WorldSpec { shape, semantic_vocab: 5, speakers: 3, p_noise: 0.0, seed: world_seed };
        let utt = generate_utterance(&spec, frames, &mut ChaCha8Rng::seed_from_u64(utt_seed)).unwrap();
        let target = utt.crop(1, frames).unwrap();
        let cells = groups * (frames - 1);
        let n_c = 1 + ((cells - 1) as f64 * n_c_frac) as usize;
        let oracle = OracleModel::new(&spec, target.context());
        let req = DecodeRequest::new(target.sem.clone(), utt.grid.slice_frames(0, 1).unwrap(), n_c, utt_seed);
        let (out, trace) = gipd_decode::<f64, _>(&oracle, &req).unwrap();
        prop_assert_eq!(&out, &target.grid);
        prop_assert_eq!(trace.forwards, n_c + (levels > 1) as usize);
        let budgets = vec![1; groups * levels];
        let (out, trace) = ipd_baseline_decode::<f64, _>(&oracle, &req, &budgets).unwrap();
        prop_assert_eq!(&out, &target.grid);
        prop_assert_eq!(trace.forwards, groups * levels);
    }
}
