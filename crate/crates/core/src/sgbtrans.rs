//! Two-stream transformer: a caption stream over noised analog bits and a
//! graph stream over `f_g`, each cross-attending to the other.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::nn::{sinusoidal, Attention, Ctx, LayerNorm, Linear, Mlp, ParamId, ParamSet};
use crate::synthdata::vocab::MAX_LEN;
use crate::tensor::{AttnSpec, Matrix, Real, Var};
use crate::textdiff::BITS;

/// One stream of one block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StreamLayer {
    pub ln_sa: LayerNorm,
    pub sa: Attention,
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub ca: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub phi: Linear,
}

/// Intermediates of one stream update.
pub struct StreamTrace<'t, F: Real> {
    pub out: Var<'t, F>,
    /// Cross-attention node before its output projection (absent in
    /// identity mode).
    pub cross: Option<Var<'t, F>>,
}

impl StreamLayer {
    fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            ln_sa: LayerNorm::new(ps, &format!("{name}.ln_sa"), d),
            sa: Attention::new(ps, rng, &format!("{name}.sa"), d, heads),
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), d),
            ln_kv: LayerNorm::new(ps, &format!("{name}.ln_kv"), d),
            ca: Attention::new(ps, rng, &format!("{name}.ca"), d, heads),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), d),
            ffn: Mlp::new(ps, rng, &format!("{name}.ffn"), d, 4 * d, d),
            phi: Linear::identity(ps, &format!("{name}.phi"), d),
        }
    }

    /// `f' = SA(f)`, `u = FFN(f' + CA(f', other))`, `h = phi(u + f)`.
    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        f: Var<'t, F>,
        other: Var<'t, F>,
        self_spec: Rc<AttnSpec>,
        cross_spec: Rc<AttnSpec>,
        cross_attention: bool,
    ) -> StreamTrace<'t, F> {
        let a = self.ln_sa.forward(ctx, f);
        let f1 = self.sa.forward(ctx, a, a, self_spec);
        let q = self.ln_q.forward(ctx, f1);
        let (c, cross) = if cross_attention {
            let att = self.ca.attend(ctx, q, self.ln_kv.forward(ctx, other), cross_spec);
            (self.ca.o.forward(ctx, att), Some(att))
        } else {
            (q, None)
        };
        let u = self.ffn.forward(ctx, self.ln_ffn.forward(ctx, f1.add(c)));
        StreamTrace { out: self.phi.forward(ctx, u.add(f)), cross }
    }

    /// Linear layers whose zeroing removes every update except `phi`.
    pub fn output_projections(&self) -> [Linear; 3] {
        [self.sa.o, self.ca.o, self.ffn.l2]
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SgbBlock {
    pub caption: StreamLayer,
    pub graph: StreamLayer,
}

/// Attention layouts for a packed batch.
#[derive(Clone)]
pub struct Layout {
    pub caption_self: Rc<AttnSpec>,
    pub graph_self: Rc<AttnSpec>,
    pub caption_cross: Rc<AttnSpec>,
    pub graph_cross: Rc<AttnSpec>,
}

impl Layout {
    pub fn new(heads: usize, graph_lens: &[usize]) -> Result<Self> {
        if graph_lens.contains(&0) {
            return input("graph token sequence is empty");
        }
        let cap = vec![MAX_LEN; graph_lens.len()];
        Ok(Self {
            caption_self: Rc::new(AttnSpec::packed(heads, &cap)),
            graph_self: Rc::new(AttnSpec::packed(heads, graph_lens)),
            caption_cross: Rc::new(AttnSpec::cross(heads, &cap, graph_lens)),
            graph_cross: Rc::new(AttnSpec::cross(heads, graph_lens, &cap)),
        })
    }
}

pub struct BlockTrace<'t, F: Real> {
    pub h_c: Var<'t, F>,
    pub h_g: Var<'t, F>,
    pub caption_cross: Option<Var<'t, F>>,
    pub graph_cross: Option<Var<'t, F>>,
}

impl SgbBlock {
    /// Both streams read the block's input features of the other stream.
    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        f_c: Var<'t, F>,
        f_g: Var<'t, F>,
        layout: &Layout,
        cross_attention: bool,
    ) -> BlockTrace<'t, F> {
        let c = self.caption.forward(
            ctx,
            f_c,
            f_g,
            layout.caption_self.clone(),
            layout.caption_cross.clone(),
            cross_attention,
        );
        let g = self.graph.forward(ctx, f_g, f_c, layout.graph_self.clone(), layout.graph_cross.clone(), cross_attention);
        BlockTrace { h_c: c.out, h_g: g.out, caption_cross: c.cross, graph_cross: g.cross }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SgbTrans {
    pub bit_in: Linear,
    pub pos: ParamId,
    pub time: Linear,
    pub blocks: Vec<SgbBlock>,
    pub heads: usize,
    pub d: usize,
}

impl SgbTrans {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, d: usize, heads: usize, blocks: usize) -> Self {
        Self {
            bit_in: Linear::new(ps, rng, "sgb.bit_in", BITS, d),
            pos: ps.add("sgb.pos", crate::nn::normal(rng, MAX_LEN, d, 1.0), false),
            time: Linear::new(ps, rng, "sgb.time", d, d),
            blocks: (0..blocks)
                .map(|i| SgbBlock {
                    caption: StreamLayer::new(ps, rng, &format!("sgb.block{i}.caption"), d, heads),
                    graph: StreamLayer::new(ps, rng, &format!("sgb.block{i}.graph"), d, heads),
                })
                .collect(),
            heads,
            d,
        }
    }

    /// Caption-stream input: embedded bits plus position and time
    /// embeddings. `x_t` holds `MAX_LEN` rows per sample.
    pub fn caption_input<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x_t: &Matrix<F>, t: &[f64]) -> Var<'t, F> {
        assert_eq!(x_t.rows(), MAX_LEN * t.len(), "caption rows");
        let pos_idx: Vec<usize> = (0..t.len()).flat_map(|_| 0..MAX_LEN).collect();
        let mut temb = Matrix::zeros(x_t.rows(), self.d);
        for (b, &tb) in t.iter().enumerate() {
            let e = sinusoidal::<F>(tb * 1000.0, self.d);
            for r in 0..MAX_LEN {
                temb.row_mut(b * MAX_LEN + r).copy_from_slice(e.row(0));
            }
        }
        self.bit_in
            .forward(ctx, ctx.constant(x_t.clone()))
            .add(ctx.p(self.pos).gather_rows(Rc::new(pos_idx)))
            .add(self.time.forward(ctx, ctx.constant(temb)))
    }

    /// Runs every block; returns `(h_c, h_g)`.
    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        f_c: Var<'t, F>,
        f_g: Var<'t, F>,
        graph_lens: &[usize],
        cross_attention: bool,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let layout = Layout::new(self.heads, graph_lens)?;
        let (mut c, mut g) = (f_c, f_g);
        for b in &self.blocks {
            let tr = b.forward(ctx, c, g, &layout, cross_attention);
            c = tr.h_c;
            g = tr.h_g;
        }
        Ok((c, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, LossFn};
    use crate::nn::zero_linear;
    use crate::tensor::Tape;
    use crate::textdiff::{bit_loss, encode_bits, gaussian};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, blocks: usize) -> (ParamSet<f64>, SgbTrans) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = SgbTrans::new(&mut ps, &mut rng, d, 4, blocks);
        (ps, m)
    }

    fn rand(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        gaussian(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols)
    }

    #[test]
    fn single_graph_token_gets_all_weight() {
        let (ps, m) = setup(16, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, false);
        let layout = Layout::new(4, &[1]).unwrap();
        let tr = m.blocks[0].forward(&ctx, ctx.constant(rand(MAX_LEN, 16, 2)), ctx.constant(rand(1, 16, 3)), &layout, true);
        for p in tr.caption_cross.unwrap().attention_probs().unwrap() {
            assert_eq!(p.shape(), (MAX_LEN, 1));
            assert!(p.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn zero_projections_reduce_to_identity() {
        let (mut ps, m) = setup(16, 1);
        for l in m.blocks[0].caption.output_projections() {
            zero_linear(&mut ps, l);
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, false);
        let layout = Layout::new(4, &[3]).unwrap();
        let f_c = rand(MAX_LEN, 16, 4);
        for cross in [true, false] {
            let tr = m.blocks[0].forward(&ctx, ctx.constant(f_c.clone()), ctx.constant(rand(3, 16, 5)), &layout, cross);
            assert_eq!(tr.h_c.to_matrix(), f_c);
        }
    }

    #[test]
    fn caption_is_invariant_to_graph_token_order() {
        let (ps, m) = setup(16, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, false);
        let f_c = ctx.constant(rand(2 * MAX_LEN, 16, 6));
        let g = rand(7, 16, 7);
        // sample 0 has 3 graph tokens, sample 1 has 4; permute within each
        let perm = [2usize, 0, 1, 6, 4, 3, 5];
        let gp = g.select_rows(&perm);
        let (a, _) = m.forward(&ctx, f_c, ctx.constant(g), &[3, 4], true).unwrap();
        let (b, _) = m.forward(&ctx, f_c, ctx.constant(gp), &[3, 4], true).unwrap();
        let diff = a.to_matrix().data().iter().zip(b.to_matrix().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "max delta {diff}");
    }

    #[test]
    fn stack_shapes_and_single_block() {
        let (ps, m) = setup(16, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, false);
        let f_c = ctx.constant(rand(2 * MAX_LEN, 16, 8));
        let f_g = ctx.constant(rand(5, 16, 9));
        let (h_c, h_g) = m.forward(&ctx, f_c, f_g, &[2, 3], true).unwrap();
        assert_eq!(h_c.shape(), (2 * MAX_LEN, 16));
        assert_eq!(h_g.shape(), (5, 16));
        let tr = m.blocks[0].forward(&ctx, f_c, f_g, &Layout::new(4, &[2, 3]).unwrap(), true);
        assert_eq!(tr.h_c.to_matrix(), h_c.to_matrix());
        assert_eq!(tr.h_g.to_matrix(), h_g.to_matrix());
        assert!(m.forward(&ctx, f_c, f_g, &[5, 0], true).is_err());
    }

    #[test]
    fn cross_attention_rows_are_stochastic() {
        let (ps, m) = setup(16, 1);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, false);
        let layout = Layout::new(4, &[2, 5]).unwrap();
        let tr = m.blocks[0].forward(&ctx, ctx.constant(rand(2 * MAX_LEN, 16, 1)), ctx.constant(rand(7, 16, 2)), &layout, true);
        for v in [tr.caption_cross.unwrap(), tr.graph_cross.unwrap()] {
            for p in v.attention_probs().unwrap() {
                for r in 0..p.rows() {
                    assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_cross_attention_cuts_graph_gradient() {
        let (ps, m) = setup(16, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, true);
        let f_g = tape.param(rand(3, 16, 3));
        let (h_c, _) = m.forward(&ctx, ctx.constant(rand(MAX_LEN, 16, 4)), f_g, &[3], false).unwrap();
        let g = tape.backward(h_c.square().sum());
        assert!(g.wrt(f_g).is_none_or(|m| m.data().iter().all(|&v| v == 0.0)));

        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &ps, true);
        let f_g = tape.param(rand(3, 16, 3));
        let (h_c, _) = m.forward(&ctx, ctx.constant(rand(MAX_LEN, 16, 4)), f_g, &[3], true).unwrap();
        let g = tape.backward(h_c.square().sum());
        assert!(g.wrt(f_g).unwrap().norm() > 0.0);
    }

    struct BitObjective {
        m: SgbTrans,
        readout: Linear,
        graph: ParamId,
    }

    impl LossFn for BitObjective {
        fn eval<'t, F: Real>(&self, ctx: &Ctx<'t, F>) -> Var<'t, F> {
            let x0 = encode_bits::<F>(&[2, 7, 15, 3, 19, 2, 9, 14, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
            let x0 = Matrix::from_vec(2 * MAX_LEN, BITS, [x0.data(), x0.data()].concat());
            let x_t = x0.map(|v| v * F::c(0.6));
            let f_c = self.m.caption_input(ctx, &x_t, &[0.3, 0.8]);
            let (h_c, _) = self.m.forward(ctx, f_c, ctx.p(self.graph), &[2, 3], true).unwrap();
            let pred = self.readout.forward(ctx, h_c).tanh();
            let valid: Vec<bool> = (0..2 * MAX_LEN).map(|r| r % MAX_LEN < 9).collect();
            bit_loss(pred, &x0, &valid)
        }
    }

    #[test]
    fn bit_loss_gradient_through_stack_single_precision() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = SgbTrans::new(&mut ps, &mut rng, 16, 4, 2);
        let readout = Linear::new(&mut ps, &mut rng, "readout", 16, BITS);
        let graph = ps.add("graph", rand(5, 16, 3), false);
        let obj = BitObjective { m, readout, graph };
        let ids = gradcheck::all_ids(&ps);
        let r = gradcheck::check(&ps.cast::<f32>(), &ids, 4, 0, 1e-5, &obj);
        assert!(r.rel_error < 1e-3, "{r:?}");
    }
}
