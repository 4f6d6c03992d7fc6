//! Full model: adaptor, two-stream denoiser, heads and alignment module,
//! with the batched training pass and the inference pipeline.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::graphcore::{coarse_subgraph, relevance_target, RelevanceTarget, SceneGraph};
use crate::heads::{caption_loss, mask_loss, mask_matrix, Heads};
use crate::hungarian;
use crate::mecl::{inter_loss, intra_loss, pool, score_matrix, Mecl};
use crate::nn::{Ctx, ParamSet};
use crate::psga::{
    adaptor_loss, inference_plan, propose_members, rank_rows, ranking_loss, teacher_plan, AdaptorOutput, GraphInput,
    Psga, RefinePlan,
};
use crate::sgbtrans::SgbTrans;
use crate::synthdata::render::rgb_to_matrix;
use crate::synthdata::vocab::{self, MAX_LEN, VOCAB_SIZE};
use crate::synthdata::{category, render_rgb, Mask, Sample};
use crate::tensor::{Matrix, Real, Tape, Var};
use crate::textdiff::{ddim_sample, decode_bits, encode_bits, gaussian, q_sample, BITS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub psga_blocks: usize,
    pub sgb_blocks: usize,
    /// Permutation columns.
    pub max_k: usize,
    pub canvas: usize,
    /// Drop nodes below the relevance threshold.
    pub filter: bool,
    /// Reorder nodes by the predicted permutation.
    pub rank: bool,
    /// Cross-attention between streams; identity when off.
    pub cross_attention: bool,
    pub iou_threshold: f64,
    pub theta: f64,
    /// Negatives-only contrastive denominators.
    pub strict_mecl: bool,
    pub sample_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            psga_blocks: 2,
            sgb_blocks: 6,
            max_k: 6,
            canvas: 64,
            filter: true,
            rank: true,
            cross_attention: true,
            iou_threshold: 0.5,
            theta: crate::psga::THETA,
            strict_mecl: false,
            sample_steps: crate::textdiff::STEPS,
        }
    }
}

impl ModelConfig {
    /// Desk-scale model: three denoiser blocks instead of six, which
    /// overfit a 1600-scene training split.
    pub fn desk() -> Self {
        Self { sgb_blocks: 3, ..Self::default() }
    }

    /// Small instance for gradient checks.
    pub fn tiny() -> Self {
        Self { d: 16, psga_blocks: 1, sgb_blocks: 2, canvas: 16, ..Self::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub psga: Psga,
    pub sgb: SgbTrans,
    pub heads: Heads,
    pub mecl: Mecl,
}

/// One prepared training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub graph: GraphInput,
    pub target: RelevanceTarget,
    /// Caption padded to `MAX_LEN`.
    pub tokens: Vec<u32>,
    /// Supervised caption rows (words plus `<eos>`).
    pub valid: usize,
    /// Color and shape token positions per entity, caption order.
    pub entity_words: Vec<[usize; 2]>,
    pub entity_categories: Vec<usize>,
    pub masks: Vec<Mask>,
    pub rgb: Vec<u8>,
    pub canvas: usize,
}

impl Example {
    pub fn from_sample(s: &Sample, iou_threshold: f64) -> Result<Self> {
        let g = SceneGraph::from_scene(&s.scene);
        let sub = coarse_subgraph(&g, s.caption.center)?;
        let objs: Vec<_> = s.caption.entity_links.iter().map(|&(_, o)| &s.scene.objects[o]).collect();
        let boxes: Vec<[f64; 4]> = objs.iter().map(|o| o.bbox).collect();
        let target = relevance_target(&sub.graph, &boxes, iou_threshold);
        Ok(Self {
            graph: GraphInput::from_subgraph(&sub),
            target,
            tokens: s.caption.padded(),
            valid: s.caption.tokens.len(),
            entity_words: (0..s.caption.num_entities()).map(|k| s.caption.entity_words(k)).collect(),
            entity_categories: objs.iter().map(|o| o.category()).collect(),
            masks: objs.iter().map(|o| o.mask.clone()).collect(),
            rgb: render_rgb(&s.scene),
            canvas: s.scene.canvas,
        })
    }
}

/// Per-sample diffusion time and noise for one training step.
#[derive(Debug, Clone)]
pub struct Noise<F> {
    pub t: Vec<f64>,
    /// `MAX_LEN * batch x BITS`.
    pub eps: Matrix<F>,
}

impl<F: Real> Noise<F> {
    pub fn sample(rng: &mut impl rand::Rng, batch: usize) -> Self {
        Self { t: (0..batch).map(|_| rng.random_range(0.0..1.0)).collect(), eps: gaussian(rng, MAX_LEN * batch, BITS) }
    }
}

/// Where alignment pooling takes its mask weights from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Gt,
    Predicted,
}

/// Which parts of the training pass to build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassOptions {
    pub caption: bool,
    pub masks: bool,
    pub mecl: Option<MaskSource>,
}

/// Loss components of one batch; absent entries were not computed.
pub struct LossParts<'t, F: Real> {
    pub caption: Option<Var<'t, F>>,
    pub bit: Option<Var<'t, F>>,
    pub ce: Option<Var<'t, F>>,
    pub mask: Option<Var<'t, F>>,
    pub adaptor: Var<'t, F>,
    pub ranking: Var<'t, F>,
    pub intra: Option<Var<'t, F>>,
    pub inter: Option<Var<'t, F>>,
}

impl<'t, F: Real> LossParts<'t, F> {
    pub fn sg(&self) -> Var<'t, F> {
        self.adaptor.add(self.ranking)
    }

    pub fn mec(&self) -> Option<Var<'t, F>> {
        Some(self.intra?.add(self.inter?))
    }
}

/// One generated (caption, masks) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCandidate {
    /// Caption words (no `<eos>` or padding).
    pub tokens: Vec<u32>,
    pub caption: String,
    pub masks: Vec<Mask>,
    /// Shape-word position linked to each mask; `None` when the caption
    /// has fewer entity phrases than the candidate has slots.
    pub links: Vec<Option<usize>>,
    /// Category named by each mask's linked words.
    pub categories: Vec<Option<usize>>,
    /// Mean probability inside each mask.
    pub mask_scores: Vec<f64>,
    /// Mean token log-probability up to `<eos>`.
    pub score: f64,
    /// Subgraph nodes behind this candidate, in slot order.
    pub members: Vec<usize>,
}

/// Mean log-probability over positions up to and including the first
/// `<eos>` (all positions when there is none).
pub fn sequence_score(logprobs: &[f64], tokens: &[u32]) -> f64 {
    let end = tokens.iter().position(|&t| t == vocab::EOS).map_or(tokens.len(), |p| p + 1);
    let end = end.min(logprobs.len()).max(1);
    logprobs[..end].iter().sum::<f64>() / end as f64
}

/// `(color, shape)` token positions in a decoded caption, one pair per
/// shape word preceded by a color word.
pub fn caption_entities(tokens: &[u32]) -> Vec<(usize, usize)> {
    let c = vocab::content(tokens);
    (1..c.len()).filter(|&i| vocab::is_shape(c[i]) && vocab::is_color(c[i - 1])).map(|i| (i - 1, i)).collect()
}

impl Model {
    pub fn new<F: Real>(config: ModelConfig, ps: &mut ParamSet<F>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        Self {
            psga: Psga::new(ps, &mut rng, c.d, c.heads, c.psga_blocks, c.max_k),
            sgb: SgbTrans::new(ps, &mut rng, c.d, c.heads, c.sgb_blocks),
            heads: Heads::new(ps, &mut rng, c.d, VOCAB_SIZE, c.canvas),
            mecl: Mecl::new(ps, &mut rng, c.d),
            config,
        }
    }

    fn images<F: Real>(&self, rgbs: &[&[u8]]) -> Result<Matrix<F>> {
        let p = self.config.canvas * self.config.canvas;
        let mut data = Vec::with_capacity(rgbs.len() * p * 3);
        for rgb in rgbs {
            if rgb.len() != p * 3 {
                return input(format!("image has {} bytes, expected {}", rgb.len(), p * 3));
            }
            data.extend_from_slice(rgb_to_matrix::<F>(rgb, p).data());
        }
        Ok(Matrix::from_vec(rgbs.len() * p, 3, data))
    }

    /// Teacher-forced training pass over a batch.
    pub fn losses<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        batch: &[&Example],
        noise: &Noise<F>,
        opts: PassOptions,
    ) -> Result<LossParts<'t, F>> {
        let cfg = &self.config;
        if batch.is_empty() {
            return input("empty batch");
        }
        let b = batch.len();
        let graphs: Vec<GraphInput> = batch.iter().map(|e| e.graph.clone()).collect();
        let lens: Vec<usize> = graphs.iter().map(|g| g.nodes.len()).collect();
        let x = self.psga.node_features(ctx, &graphs);
        let out = self.psga.adapt(ctx, x, &lens, None)?;
        let tape = ctx.tape;
        let adaptor = if cfg.filter {
            let scores: Vec<u8> = batch.iter().flat_map(|e| e.target.scores.iter().copied()).collect();
            adaptor_loss(out.logits, &scores)
        } else {
            tape.scalar(F::zero())
        };
        let ranking = if cfg.rank {
            let targets: Vec<&RelevanceTarget> = batch.iter().map(|e| &e.target).collect();
            ranking_loss(out.perm_logits, &rank_rows(&targets, &lens))
        } else {
            tape.scalar(F::zero())
        };
        let plans: Vec<RefinePlan> =
            batch.iter().map(|e| teacher_plan(&e.graph, &e.target, cfg.filter, cfg.rank)).collect();
        let gt = self.psga.graph_tokens(ctx, &out, &plans, cfg.filter, cfg.rank);

        let tokens: Vec<u32> = batch.iter().flat_map(|e| e.tokens.iter().copied()).collect();
        let x0 = encode_bits::<F>(&tokens)?;
        let mut x_t = Matrix::zeros(x0.rows(), BITS);
        for (i, &t) in noise.t.iter().enumerate().take(b) {
            let rows: Vec<usize> = (i * MAX_LEN..(i + 1) * MAX_LEN).collect();
            let xi = q_sample(&x0.select_rows(&rows), t, &noise.eps.select_rows(&rows))?;
            for (r, &row) in rows.iter().enumerate() {
                x_t.row_mut(row).copy_from_slice(xi.row(r));
            }
        }
        let f_c = self.sgb.caption_input(ctx, &x_t, &noise.t[..b]);
        let (h_c, h_g) = self.sgb.forward(ctx, f_c, gt.tokens, &gt.lens, cfg.cross_attention)?;

        let (mut caption, mut bit, mut ce) = (None, None, None);
        if opts.caption {
            let valid: Vec<bool> = batch.iter().flat_map(|e| (0..MAX_LEN).map(move |r| r < e.valid)).collect();
            let logits = self.heads.caption_logits(ctx, h_c);
            let (c, bl, cl) = caption_loss(logits, &x0, &tokens, &valid);
            caption = Some(c);
            bit = Some(bl);
            ce = Some(cl);
        }
        let (mut mask, mut intra, mut inter) = (None, None, None);
        if opts.masks || opts.mecl.is_some() {
            let rgbs: Vec<&[u8]> = batch.iter().map(|e| e.rgb.as_slice()).collect();
            let pixels = self.heads.encoder.forward(ctx, ctx.constant(self.images::<F>(&rgbs)?), b);
            let pred = self.heads.predict_masks(ctx, h_g, &gt.node_rows(), &gt.slots, pixels);
            if opts.masks {
                let gts: Vec<Vec<&Mask>> = batch.iter().map(|e| e.masks.iter().collect()).collect();
                mask = Some(mask_loss(&pred, &gts));
            }
            if let Some(source) = opts.mecl {
                let (a, i) = self.alignment(ctx, batch, &gt.slots, h_c, pixels, &pred, source)?;
                intra = Some(a);
                inter = Some(i);
            }
        }
        Ok(LossParts { caption, bit, ce, mask, adaptor, ranking, intra, inter })
    }

    #[allow(clippy::too_many_arguments)]
    fn alignment<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        batch: &[&Example],
        slots: &[usize],
        h_c: Var<'t, F>,
        pixels: Var<'t, F>,
        pred: &crate::heads::MaskPrediction<'t, F>,
        source: MaskSource,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let weights = match source {
            MaskSource::Predicted => pred.logits.sigmoid(),
            MaskSource::Gt => {
                // ground truth where a slot has an entity, prediction elsewhere
                let probs = pred.logits.sigmoid();
                let mut parts = Vec::new();
                let mut off = 0;
                for (e, &s) in batch.iter().zip(slots) {
                    for j in 0..s {
                        parts.push(match e.masks.get(j) {
                            Some(m) => ctx.constant(mask_matrix::<F>(&[m])),
                            None => probs.slice_rows(off + j, 1),
                        });
                    }
                    off += s;
                }
                ctx.tape.concat_rows(&parts)
            }
        };
        let pooled = pool(pixels, weights, slots);
        let m = self.mecl.mask_embeddings(ctx, pred.queries, pooled);
        let word_rows: Vec<usize> = batch
            .iter()
            .enumerate()
            .flat_map(|(b, e)| e.entity_words.iter().flat_map(move |w| w.map(|p| b * MAX_LEN + p)))
            .collect();
        let s = self.mecl.word_embeddings(ctx, h_c, &word_rows);
        let tau = self.mecl.tau(ctx);
        let (mut ms, mut ss) = (Vec::new(), Vec::new());
        let mut intra = ctx.tape.scalar(F::zero());
        let (mut moff, mut soff) = (0, 0);
        for (e, &n) in batch.iter().zip(slots) {
            let k = e.entity_words.len();
            let mb = m.slice_rows(moff, n);
            let sb = s.slice_rows(soff, 2 * k);
            let pos: Vec<Vec<usize>> = (0..n).map(|j| if j < k { vec![2 * j, 2 * j + 1] } else { vec![] }).collect();
            intra = intra.add(intra_loss(mb, sb, &pos, tau, self.config.strict_mecl)?);
            ms.push(mb);
            ss.push(sb);
            moff += n;
            soff += 2 * k;
        }
        let intra = intra.scale(F::one() / F::c(batch.len() as f64));
        let inter = inter_loss(score_matrix(&ms, &ss), tau);
        Ok((intra, inter))
    }

    /// Generates up to `k` candidates for the prompt node `graph.center`,
    /// sorted by score (best first).
    pub fn infer<F: Real>(
        &self,
        params: &ParamSet<F>,
        graph: &GraphInput,
        rgb: &[u8],
        k: usize,
        seed: u64,
    ) -> Result<Vec<PairCandidate>> {
        let mut c = self.generate(params, graph, rgb, k, seed)?;
        c.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(c)
    }

    /// Candidates in proposal order (threshold set first).
    pub fn generate<F: Real>(
        &self,
        params: &ParamSet<F>,
        graph: &GraphInput,
        rgb: &[u8],
        k: usize,
        seed: u64,
    ) -> Result<Vec<PairCandidate>> {
        let cfg = &self.config;
        if graph.nodes.is_empty() || graph.center >= graph.nodes.len() {
            return input("graph has no prompt node");
        }
        if k == 0 || k > 5 {
            return input(format!("candidate count {k} outside 1..=5"));
        }
        self.images::<F>(&[rgb])?;
        // adaptor pass
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let x = self.psga.node_features(&ctx, std::slice::from_ref(graph));
        let out = self.psga.adapt(&ctx, x, &[graph.nodes.len()], None)?;
        let relevance: Vec<f64> = out.relevance.value().data().iter().map(|v| v.f64()).collect();
        let perm = out.perm_logits.to_matrix().cast::<f64>();
        let member_sets = if cfg.filter {
            propose_members(&relevance, cfg.theta, graph.center, k)?
        } else {
            vec![(0..graph.nodes.len()).collect()]
        };
        let plans: Vec<RefinePlan> =
            member_sets.iter().map(|m| inference_plan(graph, m, &perm, cfg.rank)).collect();
        let n = plans.len();
        let rep: Vec<usize> = (0..n).flat_map(|_| 0..graph.nodes.len()).collect();
        let rep = Rc::new(rep);
        let tiled = AdaptorOutput {
            f_o: out.f_o.gather_rows(rep.clone()),
            logits: out.logits.gather_rows(rep.clone()),
            relevance: out.relevance.gather_rows(rep.clone()),
            perm_logits: out.perm_logits.gather_rows(rep),
            lens: vec![graph.nodes.len(); n],
        };
        let gt = self.psga.graph_tokens(&ctx, &tiled, &plans, cfg.filter, cfg.rank);
        let f_g = gt.tokens.to_matrix();
        drop(ctx);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_init = gaussian::<F>(&mut rng, MAX_LEN * n, BITS);
        let x = ddim_sample(x_init, cfg.sample_steps, |x_t, t| {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, params, false);
            let f_c = self.sgb.caption_input(&ctx, x_t, &vec![t; n]);
            let (h_c, _) = self.sgb.forward(&ctx, f_c, ctx.constant(f_g.clone()), &gt.lens, cfg.cross_attention)?;
            let logits = self.heads.caption_logits(&ctx, h_c);
            Ok(crate::heads::expected_bits(logits).to_matrix())
        })?;
        let tokens = decode_bits(&x);

        // clean pass for scores and masks
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, params, false);
        let x0 = encode_bits::<F>(&tokens)?;
        let f_c = self.sgb.caption_input(&ctx, &x0, &vec![0.0; n]);
        let (h_c, h_g) = self.sgb.forward(&ctx, f_c, ctx.constant(f_g), &gt.lens, cfg.cross_attention)?;
        let lp = self.heads.caption_logits(&ctx, h_c).log_softmax_rows().to_matrix();
        let rgb_rep: Vec<u8> = (0..n).flat_map(|_| rgb.iter().copied()).collect();
        let images = self.images::<F>(&rgb_rep.chunks(rgb.len()).collect::<Vec<_>>())?;
        let pixels = self.heads.encoder.forward(&ctx, ctx.constant(images), n);
        let pred = self.heads.predict_masks(&ctx, h_g, &gt.node_rows(), &gt.slots, pixels);
        let weights = pred.logits.sigmoid();
        let probs = weights.to_matrix();
        let m_emb = self.mecl.mask_embeddings(&ctx, pred.queries, pool(pixels, weights, &gt.slots)).to_matrix();
        let ents: Vec<Vec<(usize, usize)>> =
            (0..n).map(|ci| caption_entities(&tokens[ci * MAX_LEN..(ci + 1) * MAX_LEN])).collect();
        let word_rows: Vec<usize> = ents
            .iter()
            .enumerate()
            .flat_map(|(ci, es)| es.iter().flat_map(move |&(c, s)| [ci * MAX_LEN + c, ci * MAX_LEN + s]))
            .collect();
        let s_emb = if word_rows.is_empty() {
            Matrix::zeros(0, m_emb.cols())
        } else {
            self.mecl.word_embeddings(&ctx, h_c, &word_rows).to_matrix()
        };

        let side = cfg.canvas;
        let mut out_c = Vec::with_capacity(n);
        let (mut slot_off, mut word_off) = (0, 0);
        for (ci, plan) in plans.iter().enumerate() {
            let toks = &tokens[ci * MAX_LEN..(ci + 1) * MAX_LEN];
            let logprobs: Vec<f64> = (0..MAX_LEN).map(|r| lp.get(ci * MAX_LEN + r, toks[r] as usize).f64()).collect();
            let words = vocab::content(toks).to_vec();
            let (mut masks, mut rows, mut scores) = (Vec::new(), Vec::new(), Vec::new());
            for j in 0..plan.order.len() {
                let row = probs.row(slot_off + j);
                let mut m = Mask::new(side, side);
                let (mut sum, mut cnt) = (0.0, 0usize);
                for (i, &p) in row.iter().enumerate() {
                    if p.f64() > 0.5 {
                        m.set(i / side, i % side, true);
                        sum += p.f64();
                        cnt += 1;
                    }
                }
                if cnt == 0 {
                    continue;
                }
                masks.push(m);
                rows.push(slot_off + j);
                scores.push(sum / cnt as f64);
            }
            // each mask goes to the phrase whose color and shape embeddings
            // it matches best, one mask per phrase
            let cost: Vec<Vec<f64>> = rows
                .iter()
                .map(|&r| {
                    (0..ents[ci].len())
                        .map(|e| {
                            let sim = |w: usize| -> f64 {
                                m_emb.row(r).iter().zip(s_emb.row(word_off + w)).map(|(a, b)| a.f64() * b.f64()).sum()
                            };
                            -(sim(2 * e) + sim(2 * e + 1))
                        })
                        .collect()
                })
                .collect();
            let assigned = if ents[ci].is_empty() { vec![None; rows.len()] } else { hungarian::assign(&cost) };
            let (mut links, mut cats) = (Vec::new(), Vec::new());
            for a in assigned {
                let entity = a.map(|e| ents[ci][e]);
                links.push(entity.map(|(_, spos)| spos));
                cats.push(entity.map(|(cpos, spos)| {
                    let color = vocab::token_color(words[cpos]).expect("color word");
                    let shape = vocab::token_shape(words[spos]).expect("shape word");
                    category(shape, color)
                }));
            }
            word_off += 2 * ents[ci].len();
            out_c.push(PairCandidate {
                caption: vocab::detokenize(toks),
                tokens: words,
                masks,
                links,
                categories: cats,
                mask_scores: scores,
                score: sequence_score(&logprobs, toks),
                members: plan.order.clone(),
            });
            slot_off += plan.order.len();
        }
        Ok(out_c)
    }
}
