//! Reverse pass over a recorded [`Tape`].

use super::ops::{attention_backward, gelu_grad, layer_norm_backward, linear_backward, NormTape};
use super::{AttnBlocks, AttnTape, Block, FfBlocks, FfTape, Gradients, NormBlocks, Predictor, Tape};
use crate::error::{Error, Result};
use crate::model::LogitsGrid;
use crate::scalar::{Scalar, View};
use crate::token::Cell;

/// Two disjoint mutable blocks of one vector; `a` must precede `b`.
fn pair<'a, S>(v: &'a mut [S], a: Block, b: Block) -> (&'a mut [S], &'a mut [S]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = v.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

fn add<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

impl<S: Scalar> Predictor<S> {
    /// Parameter gradients of `Σ dlogits · logits` for the forward recorded in
    /// `tape`. Fails if parameters changed since the tape was taken.
    pub fn backward(&self, tape: &Tape<S>, dlogits: &LogitsGrid<S>) -> Result<Gradients<S>> {
        let mut grads = Gradients::zeros(self.layout.total());
        self.backward_into(tape, dlogits, &mut grads)?;
        Ok(grads)
    }

    /// [`backward`](Self::backward), accumulating into `grads`.
    pub fn backward_into(&self, tape: &Tape<S>, dlogits: &LogitsGrid<S>, grads: &mut Gradients<S>) -> Result<()> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape("parameters changed after the forward pass"));
        }
        let dec = &tape.decoder;
        if dlogits.shape() != self.config.shape || dlogits.frames() != dec.grid.frames() {
            return Err(Error::StaleTape("logit gradient does not match the recorded forward"));
        }
        if !dlogits.is_finite() {
            return Err(Error::NonFinite("logit gradient"));
        }
        let d = self.config.d_model;
        let n = dec.grid.frames();
        let m = tape.cache.frames;
        let shape = self.config.shape;
        let slots = shape.slots();
        let c = shape.codebook_size;
        let lay = &self.layout;
        if grads.values.len() != lay.total() {
            return Err(Error::ShapeMismatch(format!("{} gradient slots, layout has {}", grads.values.len(), lay.total())));
        }
        let g = &mut grads.values;

        // Output heads.
        let mut dx = vec![S::zero(); n * d];
        {
            let hw = self.p(lay.head_w);
            let dl = dlogits.data();
            let (dw, db) = pair(g, lay.head_w, lay.head_b);
            for s in 0..slots {
                let dls = View { data: &dl[s * c..], rs: slots * c, cs: 1 };
                S::gemm(n, c, d, S::one(), dls, View::rows(&hw[s * d * c..(s + 1) * d * c], c).t(), S::one(), &mut dx, d);
                S::gemm(d, n, c, S::one(), View::rows(&dec.hidden, d).t(), dls, S::one(), &mut dw[s * d * c..(s + 1) * d * c], c);
                for t in 0..n {
                    let row = &dl[(t * slots + s) * c..(t * slots + s + 1) * c];
                    add(&mut db[s * c..(s + 1) * c], row);
                }
            }
        }
        let dhidden = dx;
        let mut dx = vec![S::zero(); n * d];
        self.norm_backward(&lay.final_norm, &dec.final_norm, &dhidden, g, &mut dx);

        let mut dkeys: Vec<Vec<S>> = vec![Vec::new(); lay.decoder.len()];
        let mut dvalues: Vec<Vec<S>> = vec![Vec::new(); lay.decoder.len()];
        for (l, (blocks, lt)) in lay.decoder.iter().zip(&dec.layers).enumerate().rev() {
            let dh = self.ff_backward(&blocks.ff, &lt.ff, &dx, g);
            self.norm_backward(&blocks.norm_ff, &lt.norm_ff, &dh, g, &mut dx);

            // Cross-attention against the cached keys and values.
            let dctx = self.out_backward(blocks.cross_attn.wo, &lt.cross_attn.ctx, &dx, g);
            let mut dq = vec![S::zero(); n * d];
            let mut dk = vec![S::zero(); m * d];
            let mut dv = vec![S::zero(); m * d];
            attention_backward(
                &lt.cross_attn.q,
                &tape.cache.keys[l],
                &tape.cache.values[l],
                &lt.cross_attn.probs,
                &dctx,
                d,
                self.config.heads,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            let mut dh = vec![S::zero(); n * d];
            linear_backward(&lt.cross_attn.input, d, self.p(blocks.cross_attn.wq), d, &dq, &mut g[blocks.cross_attn.wq.range()], None, Some(&mut dh));
            self.norm_backward(&blocks.norm_cross, &lt.norm_cross, &dh, g, &mut dx);
            dkeys[l] = dk;
            dvalues[l] = dv;

            let dh = self.self_attn_backward(&blocks.self_attn, &lt.self_attn, &dx, g);
            self.norm_backward(&blocks.norm_self, &lt.norm_self, &dh, g, &mut dx);
        }
        self.embed_frames_backward(tape, &dx, g);

        // Prompt side: projections, then the encoder stack.
        let states = &tape.states.states;
        let mut dstates = vec![S::zero(); m * d];
        for (l, blocks) in lay.decoder.iter().enumerate() {
            let ca = &blocks.cross_attn;
            linear_backward(states, d, self.p(ca.wk), d, &dkeys[l], &mut g[ca.wk.range()], None, Some(&mut dstates));
            linear_backward(states, d, self.p(ca.wv), d, &dvalues[l], &mut g[ca.wv.range()], None, Some(&mut dstates));
        }
        let enc = &tape.encoder;
        let mut dx = vec![S::zero(); m * d];
        self.norm_backward(&lay.encoder_norm, &enc.norm, &dstates, g, &mut dx);
        for (blocks, lt) in lay.encoder.iter().zip(&enc.layers).rev() {
            let dh = self.ff_backward(&blocks.ff, &lt.ff, &dx, g);
            self.norm_backward(&blocks.norm_ff, &lt.norm_ff, &dh, g, &mut dx);
            let dh = self.self_attn_backward(&blocks.attn, &lt.attn, &dx, g);
            self.norm_backward(&blocks.norm_attn, &lt.norm_attn, &dh, g, &mut dx);
        }
        let ac = lay.acoustic;
        let pos = lay.prompt_pos;
        for (t, row) in dx.chunks_exact(d).enumerate() {
            add(&mut g[pos.offset + t * d..pos.offset + (t + 1) * d], row);
            for gi in 0..shape.groups {
                for j in 0..shape.levels {
                    let r = shape.slot(gi, j) * c + enc.prompt.token(Cell::new(t, gi, j)) as usize;
                    add(&mut g[ac.offset + r * d..ac.offset + (r + 1) * d], row);
                }
            }
        }
        Ok(())
    }

    fn norm_backward(&self, blocks: &NormBlocks, tape: &NormTape<S>, dy: &[S], g: &mut [S], dx: &mut [S]) {
        let (dgain, dbias) = pair(g, blocks.gain, blocks.bias);
        layer_norm_backward(dy, self.config.d_model, tape, self.p(blocks.gain), dgain, dbias, dx);
    }

    /// Backward of the feed-forward branch; returns the gradient at its (normed) input.
    fn ff_backward(&self, blocks: &FfBlocks, tape: &FfTape<S>, dout: &[S], g: &mut [S]) -> Vec<S> {
        let d = self.config.d_model;
        let f = self.config.ff_dim;
        let mut dact = vec![S::zero(); tape.act.len()];
        {
            let (dw2, db2) = pair(g, blocks.w2, blocks.b2);
            linear_backward(&tape.act, f, self.p(blocks.w2), d, dout, dw2, Some(db2), Some(&mut dact));
        }
        for (da, &p) in dact.iter_mut().zip(&tape.pre) {
            *da *= gelu_grad(p);
        }
        let mut dh = vec![S::zero(); tape.input.len()];
        let (dw1, db1) = pair(g, blocks.w1, blocks.b1);
        linear_backward(&tape.input, d, self.p(blocks.w1), f, &dact, dw1, Some(db1), Some(&mut dh));
        dh
    }

    /// Backward of the output projection; returns the gradient at the head context.
    fn out_backward(&self, wo: Block, ctx: &[S], dout: &[S], g: &mut [S]) -> Vec<S> {
        let d = self.config.d_model;
        let mut dctx = vec![S::zero(); ctx.len()];
        linear_backward(ctx, d, self.p(wo), d, dout, &mut g[wo.range()], None, Some(&mut dctx));
        dctx
    }

    fn self_attn_backward(&self, blocks: &AttnBlocks, tape: &AttnTape<S>, dout: &[S], g: &mut [S]) -> Vec<S> {
        let d = self.config.d_model;
        let dctx = self.out_backward(blocks.wo, &tape.ctx, dout, g);
        let len = tape.input.len();
        let (mut dq, mut dk, mut dv) = (vec![S::zero(); len], vec![S::zero(); len], vec![S::zero(); len]);
        attention_backward(&tape.q, &tape.k, &tape.v, &tape.probs, &dctx, d, self.config.heads, &mut dq, &mut dk, &mut dv);
        let mut dh = vec![S::zero(); len];
        for (w, dy) in [(blocks.wq, &dq), (blocks.wk, &dk), (blocks.wv, &dv)] {
            linear_backward(&tape.input, d, self.p(w), d, dy, &mut g[w.range()], None, Some(&mut dh));
        }
        dh
    }

    fn embed_frames_backward(&self, tape: &Tape<S>, dx: &[S], g: &mut [S]) {
        let d = self.config.d_model;
        let shape = self.config.shape;
        let lay = &self.layout;
        let dec = &tape.decoder;
        for (t, row) in dx.chunks_exact(d).enumerate() {
            let s = dec.sem.ids()[t] as usize;
            add(&mut g[lay.semantic.offset + s * d..lay.semantic.offset + (s + 1) * d], row);
            add(&mut g[lay.target_pos.offset + t * d..lay.target_pos.offset + (t + 1) * d], row);
            for gi in 0..shape.groups {
                for j in 0..shape.levels {
                    let slot = shape.slot(gi, j);
                    let o = match dec.grid.get(Cell::new(t, gi, j)) {
                        Some(tok) => lay.acoustic.offset + (slot * shape.codebook_size + tok as usize) * d,
                        None => lay.mask.offset + slot * d,
                    };
                    add(&mut g[o..o + d], row);
                }
            }
        }
    }
}
