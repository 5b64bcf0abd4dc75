//! Toy grouped residual vector quantizer.
//!
//! The latent vector is split into `groups` contiguous slices; each slice is
//! quantized by its own residual cascade of `levels` codebooks.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::token::{CodecParams, Reader, TokenId};

pub const GRVQ_MAGIC: [u8; 4] = *b"GRVQ";
pub const GRVQ_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame<S>(pub Vec<S>);

impl<S: Scalar> LatentFrame<S> {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn squared_distance(&self, other: &Self) -> S {
        sq_dist(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bitrate {
    /// Bits carried by one quantizer layer per frame.
    pub bits_per_layer: u32,
    pub bits_per_second: f64,
}

/// Bits per quantizer layer and total rate when the budget is spread
/// evenly over `groups × levels` layers of `codebook_size` entries.
pub fn bitrate(params: &CodecParams) -> Result<Bitrate> {
    let c = params.codebook_size;
    if !c.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(c));
    }
    let bits_per_layer = c.trailing_zeros();
    let bits_per_second = params.frames_per_second * (params.groups * params.levels) as f64 * bits_per_layer as f64;
    Ok(Bitrate { bits_per_layer, bits_per_second })
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `codebook` (rows of width `dim`); ties go to the lowest index.
pub fn nearest<S: Scalar>(codebook: &[S], dim: usize, x: &[S]) -> usize {
    let mut best = 0;
    let mut best_d = S::infinity();
    for (i, c) in codebook.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means on `points` (rows of width `dim`).
///
/// Centroids start at `k` distinct data points drawn uniformly from `rng`.
/// A centroid that loses all its points is moved onto the point farthest
/// from its current centroid.
pub fn kmeans<S: Scalar>(points: &[S], dim: usize, k: usize, iters: usize, rng: &mut impl Rng) -> Result<Vec<S>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!("{} values do not form rows of {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::NotEnoughFrames { needed: k, got: n });
    }
    if iters == 0 {
        return Err(Error::InvalidParams("k-means needs at least one iteration".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }

    let mut centroids = Vec::with_capacity(k * dim);
    for i in index::sample(rng, n, k).into_iter() {
        centroids.extend_from_slice(&points[i * dim..(i + 1) * dim]);
    }

    let mut assign = vec![usize::MAX; n];
    let mut sums = vec![S::zero(); k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let a = nearest(&centroids, dim, p);
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        sums.iter_mut().for_each(|s| *s = S::zero());
        counts.iter_mut().for_each(|c| *c = 0);
        for (p, &a) in points.chunks_exact(dim).zip(&assign) {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }

        let mut dist: Vec<S> = points
            .chunks_exact(dim)
            .zip(&assign)
            .map(|(p, &a)| sq_dist(p, &centroids[a * dim..(a + 1) * dim]))
            .collect();
        for c in 0..k {
            let centroid = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                let mut far = 0;
                for (i, &d) in dist.iter().enumerate() {
                    if d > dist[far] {
                        far = i;
                    }
                }
                centroid.copy_from_slice(&points[far * dim..(far + 1) * dim]);
                for (d, p) in dist.iter_mut().zip(points.chunks_exact(dim)) {
                    *d = d.min(sq_dist(p, centroid));
                }
            } else {
                let inv = S::one() / S::from_usize(counts[c]).unwrap();
                for (x, &s) in centroid.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *x = s * inv;
                }
            }
        }
    }
    Ok(centroids)
}

/// Per-(group, level) codebooks, stored as `[group][level][code][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrvqCodec<S> {
    params: CodecParams,
    codebooks: Vec<S>,
}

impl<S: Scalar> GrvqCodec<S> {
    pub fn from_codebooks(params: CodecParams, codebooks: Vec<S>) -> Result<Self> {
        params.validate()?;
        let want = params.groups * params.levels * params.codebook_size * params.group_dim();
        if codebooks.len() != want {
            return Err(Error::ShapeMismatch(format!("{} codebook values, expected {want}", codebooks.len())));
        }
        if codebooks.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebooks"));
        }
        Ok(GrvqCodec { params, codebooks })
    }

    /// Fits every (group, level) codebook greedily: level `j` of a group is
    /// fit on that group's residuals after the frozen levels `< j`.
    pub fn fit(latents: &[LatentFrame<S>], params: CodecParams, iters: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        if latents.len() < params.codebook_size {
            return Err(Error::NotEnoughFrames { needed: params.codebook_size, got: latents.len() });
        }
        if let Some(bad) = latents.iter().find(|z| z.dim() != params.latent_dim) {
            return Err(Error::ShapeMismatch(format!("latent of dim {} for codec dim {}", bad.dim(), params.latent_dim)));
        }
        if latents.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("latent frames"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gd = params.group_dim();
        let c = params.codebook_size;
        let mut codebooks = Vec::with_capacity(params.groups * params.levels * c * gd);
        for g in 0..params.groups {
            let mut residual: Vec<S> = latents.iter().flat_map(|z| z.0[g * gd..(g + 1) * gd].iter().copied()).collect();
            for _ in 0..params.levels {
                let book = kmeans(&residual, gd, c, iters, &mut rng)?;
                for r in residual.chunks_exact_mut(gd) {
                    let code = nearest(&book, gd, r);
                    for (x, &y) in r.iter_mut().zip(&book[code * gd..(code + 1) * gd]) {
                        *x -= y;
                    }
                }
                codebooks.extend_from_slice(&book);
            }
        }
        Ok(GrvqCodec { params, codebooks })
    }

    pub fn params(&self) -> &CodecParams {
        &self.params
    }

    pub fn codebooks(&self) -> &[S] {
        &self.codebooks
    }

    /// Codebook of `(group, level)` as rows of width `latent_dim / groups`.
    pub fn codebook(&self, group: usize, level: usize) -> &[S] {
        let len = self.params.codebook_size * self.params.group_dim();
        let start = (group * self.params.levels + level) * len;
        &self.codebooks[start..start + len]
    }

    fn check_dim(&self, z: &LatentFrame<S>) -> Result<()> {
        if z.dim() != self.params.latent_dim {
            return Err(Error::ShapeMismatch(format!("latent of dim {} for codec dim {}", z.dim(), self.params.latent_dim)));
        }
        Ok(())
    }

    /// Tokens for one frame in slot order (group-major, level-minor).
    pub fn encode_frame(&self, z: &LatentFrame<S>) -> Result<Vec<TokenId>> {
        self.check_dim(z)?;
        let gd = self.params.group_dim();
        let mut tokens = Vec::with_capacity(self.params.groups * self.params.levels);
        for g in 0..self.params.groups {
            let mut residual = z.0[g * gd..(g + 1) * gd].to_vec();
            for j in 0..self.params.levels {
                let book = self.codebook(g, j);
                let code = nearest(book, gd, &residual);
                for (x, &y) in residual.iter_mut().zip(&book[code * gd..(code + 1) * gd]) {
                    *x -= y;
                }
                tokens.push(code as TokenId);
            }
        }
        Ok(tokens)
    }

    pub fn decode_frame(&self, tokens: &[TokenId]) -> Result<LatentFrame<S>> {
        self.decode_frame_depth(tokens, self.params.levels)
    }

    /// Reconstruction using only the first `depth` levels of each group.
    pub fn decode_frame_depth(&self, tokens: &[TokenId], depth: usize) -> Result<LatentFrame<S>> {
        let p = &self.params;
        if tokens.len() != p.groups * p.levels {
            return Err(Error::ShapeMismatch(format!("{} tokens for {} slots", tokens.len(), p.groups * p.levels)));
        }
        if depth > p.levels {
            return Err(Error::InvalidParams(format!("depth {depth} exceeds {} levels", p.levels)));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= p.codebook_size) {
            return Err(Error::TokenOutOfRange { id, codebook_size: p.codebook_size });
        }
        let gd = p.group_dim();
        let mut out = vec![S::zero(); p.latent_dim];
        for g in 0..p.groups {
            for j in 0..depth {
                let code = tokens[g * p.levels + j] as usize;
                let v = &self.codebook(g, j)[code * gd..(code + 1) * gd];
                for (o, &x) in out[g * gd..(g + 1) * gd].iter_mut().zip(v) {
                    *o += x;
                }
            }
        }
        Ok(LatentFrame(out))
    }

    /// Checkpoint bytes: magic, version, G, N_q, C, D (u32), frame rate
    /// (f64), then codebook values as f32 in `(group, level, code, dim)` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(29 + 4 * self.codebooks.len());
        out.extend_from_slice(&GRVQ_MAGIC);
        out.push(GRVQ_VERSION);
        for v in [p.groups, p.levels, p.codebook_size, p.latent_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&p.frames_per_second.to_le_bytes());
        for v in &self.codebooks {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(GRVQ_MAGIC)?;
        let version = r.u8("version")?;
        if version != GRVQ_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let groups = r.u32("groups")? as usize;
        let levels = r.u32("levels")? as usize;
        let codebook_size = r.u32("codebook size")? as usize;
        let latent_dim = r.u32("latent dim")? as usize;
        let frames_per_second = r.f64("frame rate")?;
        let params = CodecParams { groups, levels, codebook_size, latent_dim, frames_per_second };
        params.validate()?;
        let n = groups * levels * codebook_size * params.group_dim();
        let codebooks = (0..n)
            .map(|_| r.f32("codebooks").map(|v| S::from_f32(v).unwrap_or_else(S::nan)))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_codebooks(params, codebooks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_codec() -> GrvqCodec<f64> {
        let params = CodecParams { groups: 2, levels: 2, codebook_size: 2, latent_dim: 2, frames_per_second: 50.0 };
        // group 0: L0 {+1, -1}, L1 {+0.1, -0.1}; group 1: L0 {+0.5, -0.5}, L1 {+0.1, -0.1}
        GrvqCodec::from_codebooks(params, vec![1.0, -1.0, 0.1, -0.1, 0.5, -0.5, 0.1, -0.1]).unwrap()
    }

    #[test]
    fn hand_example_encode_decode() {
        let codec = hand_codec();
        let z = LatentFrame(vec![0.9, -0.4]);
        // group 0: 0.9 -> +1.0 (code 0), residual -0.1 -> -0.1 (code 1)
        // group 1: -0.4 -> -0.5 (code 1), residual +0.1 -> +0.1 (code 0)
        let tokens = codec.encode_frame(&z).unwrap();
        assert_eq!(tokens, vec![0, 1, 1, 0]);
        let back = codec.decode_frame(&tokens).unwrap();
        assert!((back.0[0] - 0.9).abs() < 1e-15 && (back.0[1] + 0.4).abs() < 1e-15);
        assert_eq!(codec.decode_frame_depth(&tokens, 1).unwrap().0, vec![1.0, -0.5]);
    }

    #[test]
    fn zero_residual_picks_zero_codeword() {
        let params = CodecParams { groups: 1, levels: 2, codebook_size: 3, latent_dim: 2, frames_per_second: 50.0 };
        let books = vec![
            1.0, 2.0, -1.0, 0.0, 3.0, 3.0, // level 0
            0.5, 0.5, 0.0, 0.0, -0.5, 0.0, // level 1 contains the zero vector at code 1
        ];
        let codec = GrvqCodec::<f64>::from_codebooks(params, books).unwrap();
        assert_eq!(codec.encode_frame(&LatentFrame(vec![-1.0, 0.0])).unwrap(), vec![1, 1]);
    }

    #[test]
    fn equidistant_tie_takes_lowest_index() {
        let book = [9.0, 9.0, 0.0, 7.0, 7.0, 2.0];
        // codes 2 (0.0) and 5 (2.0) are both at distance 1 from 1.0
        assert_eq!(nearest(&book, 1, &[1.0]), 2);
    }

    #[test]
    fn bitrate_arithmetic() {
        let base = CodecParams { groups: 2, levels: 2, codebook_size: 1024, latent_dim: 16, frames_per_second: 50.0 };
        assert_eq!(bitrate(&base).unwrap(), Bitrate { bits_per_layer: 10, bits_per_second: 2000.0 });
        let unit = CodecParams { groups: 1, levels: 1, codebook_size: 2, latent_dim: 1, frames_per_second: 1.0 };
        assert_eq!(bitrate(&unit).unwrap().bits_per_second, 1.0);
        let wide = CodecParams { groups: 2, levels: 4, codebook_size: 1024, latent_dim: 16, frames_per_second: 75.0 };
        assert_eq!(bitrate(&wide).unwrap().bits_per_second, 6000.0);
        let odd = CodecParams { codebook_size: 1000, ..base };
        assert!(matches!(bitrate(&odd), Err(Error::NotPowerOfTwo(1000))));
    }

    #[test]
    fn single_centroid_is_mean() {
        let pts = [1.0f64, 2.0, 3.0, 6.0, 5.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = kmeans(&pts, 2, 1, 10, &mut rng).unwrap();
        assert!((c[0] - 3.0).abs() < 1e-12 && (c[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_cover_of_repeated_points() {
        let distinct = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
        let latents: Vec<LatentFrame<f64>> = (0..40).map(|i| LatentFrame(distinct[i % 4].to_vec())).collect();
        let params = CodecParams { groups: 1, levels: 2, codebook_size: 4, latent_dim: 2, frames_per_second: 50.0 };
        for seed in 0..20 {
            let codec = GrvqCodec::fit(&latents, params, 50, seed).unwrap();
            let mut got: Vec<(i64, i64)> =
                codec.codebook(0, 0).chunks(2).map(|c| (c[0].round() as i64, c[1].round() as i64)).collect();
            got.sort();
            assert_eq!(got, vec![(0, 0), (0, 5), (5, 0), (5, 5)], "seed {seed}");
            for z in &latents {
                let t = codec.encode_frame(z).unwrap();
                let level0 = codec.decode_frame_depth(&t, 1).unwrap();
                assert_eq!(level0.squared_distance(z), 0.0);
            }
        }
    }

    #[test]
    fn fit_errors() {
        let params = CodecParams { groups: 1, levels: 1, codebook_size: 4, latent_dim: 2, frames_per_second: 50.0 };
        let few = vec![LatentFrame(vec![0.0, 1.0]); 3];
        assert!(matches!(GrvqCodec::fit(&few, params, 5, 0), Err(Error::NotEnoughFrames { needed: 4, got: 3 })));
        let mut bad = vec![LatentFrame(vec![0.0, 1.0]); 8];
        bad[3].0[1] = f64::NAN;
        assert!(matches!(GrvqCodec::fit(&bad, params, 5, 0), Err(Error::NonFinite(_))));
        let codec = GrvqCodec::fit(&vec![LatentFrame(vec![0.0, 1.0]); 8], params, 5, 0).unwrap();
        assert!(matches!(codec.encode_frame(&LatentFrame(vec![0.0])), Err(Error::ShapeMismatch(_))));
        assert!(matches!(codec.decode_frame(&[4]), Err(Error::TokenOutOfRange { id: 4, .. })));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let codec = hand_codec();
        let bytes = codec.to_bytes();
        let back = GrvqCodec::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), codec.params());
        for (a, b) in back.codebooks().iter().zip(codec.codebooks()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(matches!(GrvqCodec::<f64>::from_bytes(&bytes[..bytes.len() - 2]), Err(Error::Truncated(_))));
    }
}
