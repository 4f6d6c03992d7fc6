//! Caption head, image encoder and mask head.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{xavier, Ctx, Linear, ParamId, ParamSet};
use crate::synthdata::Mask;
use crate::tensor::{ConvSpec, Matrix, Real, Var};
use crate::textdiff::{bit_loss, bit_table};

/// Channels of the fused visual map.
pub const VIS_CH: usize = 16;
/// Cosine position channels per axis (frequency 0 included).
pub const POS_FREQ: usize = 16;
/// Width of the per-pixel embedding.
pub const PIXEL_DIM: usize = VIS_CH + 2 * POS_FREQ;

const STAGES: [(usize, usize, usize); 4] = [(3, 8, 1), (8, 16, 2), (16, 32, 2), (32, 32, 2)];

/// Dice smoothing added to numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// Probability assumed for every pixel of a missing prediction.
pub const MISSING_P: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

/// Four-stage convolutional pyramid fused into a per-pixel embedding at
/// full resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Encoder {
    pub convs: Vec<ConvLayer>,
    pub laterals: Vec<Linear>,
    pub canvas: usize,
}

impl Encoder {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, canvas: usize) -> Self {
        assert!(canvas % 8 == 0, "canvas must be divisible by 8");
        let convs = STAGES
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, stride))| ConvLayer {
                w: ps.add(format!("enc.conv{i}.w"), xavier(rng, 9 * cin, cout), true),
                // a small positive bias keeps flat background regions off the ReLU kink
                b: ps.add(format!("enc.conv{i}.b"), Matrix::filled(1, cout, F::c(0.01)), false),
                cin,
                cout,
                stride,
            })
            .collect();
        let laterals = STAGES
            .iter()
            .enumerate()
            .map(|(i, &(_, cout, _))| Linear::new(ps, rng, &format!("enc.lateral{i}"), cout, VIS_CH))
            .collect();
        Self { convs, laterals, canvas }
    }

    /// `[batch * canvas^2, PIXEL_DIM]` pixel embeddings of NHWC images given
    /// as `[batch * canvas^2, 3]`.
    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, images: Var<'t, F>, batch: usize) -> Var<'t, F> {
        let mut x = images;
        let mut side = self.canvas;
        let mut fused: Option<Var<'t, F>> = None;
        let mut scale = 1;
        for (c, lat) in self.convs.iter().zip(&self.laterals) {
            let spec = ConvSpec { batch, h: side, w: side, cin: c.cin, cout: c.cout, k: 3, stride: c.stride, pad: 1 };
            x = x.conv2d(ctx.p(c.w), spec).add_row(ctx.p(c.b)).relu();
            side = spec.out_hw().0;
            scale *= c.stride;
            let mut l = lat.forward(ctx, x);
            if scale > 1 {
                l = l.upsample_nearest(batch, side, side, scale);
            }
            fused = Some(match fused {
                Some(f) => f.add(l),
                None => l,
            });
        }
        let vis = fused.expect("four stages");
        let pos = position_channels::<F>(self.canvas);
        let pos_all = ctx.constant(pos).gather_rows(Rc::new((0..batch).flat_map(|_| 0..self.canvas * self.canvas).collect()));
        ctx.tape.concat_cols(&[vis, pos_all])
    }
}

/// `canvas^2 x 2 POS_FREQ` cosine features of pixel centres.
pub fn position_channels<F: Real>(canvas: usize) -> Matrix<F> {
    let mut m = Matrix::zeros(canvas * canvas, 2 * POS_FREQ);
    for y in 0..canvas {
        for x in 0..canvas {
            let (fx, fy) = ((x as f64 + 0.5) / canvas as f64, (y as f64 + 0.5) / canvas as f64);
            for k in 0..POS_FREQ {
                let a = std::f64::consts::PI * k as f64;
                m.set(y * canvas + x, k, F::c((a * fx).cos()));
                m.set(y * canvas + x, POS_FREQ + k, F::c((a * fy).cos()));
            }
        }
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heads {
    pub caption: Linear,
    pub query: Linear,
    pub encoder: Encoder,
}

/// Mask logits for every node slot of a packed batch.
pub struct MaskPrediction<'t, F: Real> {
    /// One row of `canvas^2` logits per slot, samples concatenated.
    pub logits: Var<'t, F>,
    /// Query embedding per slot.
    pub queries: Var<'t, F>,
    pub slots: Vec<usize>,
}

impl Heads {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, d: usize, vocab: usize, canvas: usize) -> Self {
        Self {
            caption: Linear::new(ps, rng, "heads.caption", d, vocab),
            query: Linear::new(ps, rng, "heads.query", d, PIXEL_DIM),
            encoder: Encoder::new(ps, rng, canvas),
        }
    }

    pub fn caption_logits<'t, F: Real>(&self, ctx: &Ctx<'t, F>, h_c: Var<'t, F>) -> Var<'t, F> {
        self.caption.forward(ctx, h_c)
    }

    /// `slot_rows` index the node tokens of `h_g`, grouped per sample with
    /// `slots[b]` rows each; `pixels` is the encoder output.
    pub fn predict_masks<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        h_g: Var<'t, F>,
        slot_rows: &[usize],
        slots: &[usize],
        pixels: Var<'t, F>,
    ) -> MaskPrediction<'t, F> {
        let p = self.encoder.canvas * self.encoder.canvas;
        let queries = self.query.forward(ctx, h_g.gather_rows(Rc::new(slot_rows.to_vec())));
        let mut parts = Vec::new();
        let mut off = 0;
        for (b, &s) in slots.iter().enumerate() {
            if s > 0 {
                let q = queries.slice_rows(off, s);
                parts.push(q.matmul_t(pixels.slice_rows(b * p, p)));
            }
            off += s;
        }
        let logits = if parts.is_empty() { ctx.constant(Matrix::zeros(0, p)) } else { ctx.tape.concat_rows(&parts) };
        MaskPrediction { logits, queries, slots: slots.to_vec() }
    }
}

/// `x_hat_0 = softmax(logits) B`, with `B` the analog-bit table.
pub fn expected_bits<'t, F: Real>(logits: Var<'t, F>) -> Var<'t, F> {
    logits.softmax_rows().matmul(logits.tape().constant(bit_table()))
}

/// Mean token cross-entropy over rows flagged `valid`.
pub fn ce_loss<'t, F: Real>(logits: Var<'t, F>, targets: &[u32], valid: &[bool]) -> Var<'t, F> {
    assert_eq!(logits.rows(), targets.len(), "one target per row");
    let picks: Vec<(usize, usize)> =
        (0..targets.len()).filter(|&r| valid[r]).map(|r| (r, targets[r] as usize)).collect();
    if picks.is_empty() {
        return logits.tape().scalar(F::zero());
    }
    logits.log_softmax_rows().pick(Rc::new(picks)).mean().neg()
}

/// `L_bit + L_CE` with equal weights; returns `(total, bit, ce)`.
pub fn caption_loss<'t, F: Real>(
    logits: Var<'t, F>,
    x0: &Matrix<F>,
    targets: &[u32],
    valid: &[bool],
) -> (Var<'t, F>, Var<'t, F>, Var<'t, F>) {
    let bit = bit_loss(expected_bits(logits), x0, valid);
    let ce = ce_loss(logits, targets, valid);
    (bit.add(ce), bit, ce)
}

/// Soft Dice loss per row: `1 - (2 sum(p g) + s) / (sum p + sum g + s)`.
pub fn dice_rows<'t, F: Real>(probs: Var<'t, F>, gt: &Matrix<F>, smooth: f64) -> Var<'t, F> {
    let tape = probs.tape();
    let g = tape.constant(gt.clone());
    let gsum: Vec<F> = (0..gt.rows()).map(|r| gt.row(r).iter().copied().sum()).collect();
    let num = probs.mul(g).sum_cols().scale(F::c(2.0)).add_scalar(F::c(smooth));
    let den = probs.sum_cols().add_const(&Matrix::from_vec(gt.rows(), 1, gsum)).add_scalar(F::c(smooth));
    num.mul(den.recip()).neg().add_scalar(F::one())
}

/// Mean pixel BCE per row from logits.
pub fn bce_rows<'t, F: Real>(logits: Var<'t, F>, gt: &Matrix<F>) -> Var<'t, F> {
    let g = logits.tape().constant(gt.clone());
    logits.softplus().sub(logits.mul(g)).sum_cols().scale(F::one() / F::c(gt.cols() as f64))
}

/// Dice + BCE of an all-`MISSING_P` prediction against `gt`.
pub fn missing_mask_loss(gt: &Mask) -> f64 {
    let n = gt.bits.len() as f64;
    let g = gt.count() as f64;
    let p = MISSING_P;
    let dice = 1.0 - (2.0 * p * g + DICE_SMOOTH) / (p * n + g + DICE_SMOOTH);
    let bce = -(g * p.ln() + (n - g) * (1.0 - p).ln()) / n;
    dice + bce
}

pub fn mask_matrix<F: Real>(masks: &[&Mask]) -> Matrix<F> {
    let p = masks.first().map_or(0, |m| m.bits.len());
    let mut out = Matrix::zeros(masks.len(), p);
    for (r, m) in masks.iter().enumerate() {
        for (c, &b) in m.bits.iter().enumerate() {
            if b != 0 {
                out.set(r, c, F::one());
            }
        }
    }
    out
}

/// Dice + BCE averaged over ground-truth entities. Slot `j` of sample `b`
/// is matched to entity `j`; entities without a slot are scored against an
/// empty prediction and extra slots are ignored.
pub fn mask_loss<'t, F: Real>(pred: &MaskPrediction<'t, F>, gt: &[Vec<&Mask>]) -> Var<'t, F> {
    let tape = pred.logits.tape();
    let (mut rows, mut targets, mut missing, mut count) = (Vec::new(), Vec::new(), 0.0, 0usize);
    let mut off = 0;
    for (b, masks) in gt.iter().enumerate() {
        let s = pred.slots[b];
        for (j, m) in masks.iter().enumerate() {
            if j < s {
                rows.push(off + j);
                targets.push(*m);
            } else {
                missing += missing_mask_loss(m);
            }
            count += 1;
        }
        off += s;
    }
    if count == 0 {
        return tape.scalar(F::zero());
    }
    let mut total = tape.scalar(F::c(missing));
    if !rows.is_empty() {
        let z = pred.logits.gather_rows(Rc::new(rows));
        let g = mask_matrix::<F>(&targets);
        total = total.add(dice_rows(z.sigmoid(), &g, DICE_SMOOTH).add(bce_rows(z, &g)).sum());
    }
    total.scale(F::one() / F::c(count as f64))
}
