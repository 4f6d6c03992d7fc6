//! Prompt-centric scene graph adaptor.
//!
//! Scores how relevant each node of the coarse subgraph is to the caption,
//! predicts where each node falls in caption order, and turns the surviving
//! nodes plus the edges among them into the graph token sequence `f_g`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::graphcore::{RelevanceTarget, Subgraph};
use crate::hungarian;
use crate::nn::{Block, Ctx, Embedding, Linear, Mlp, ParamId, ParamSet};
use crate::synthdata::{Predicate, NUM_CATEGORIES};
use crate::tensor::{AttnSpec, Matrix, Real, Var};

/// Width of the hand-built box descriptor: 4 coordinates plus sine and
/// cosine at 8 frequencies per coordinate.
pub const BOX_FEATURES: usize = 4 + 4 * 2 * 8;

/// Default relevance threshold.
pub const THETA: f64 = 0.5;

/// Largest relevance margin a proposal may toggle.
pub const TOGGLE_MARGIN: f64 = 0.45;

pub fn box_features(b: &[f64; 4]) -> [f64; BOX_FEATURES] {
    let mut out = [0.0; BOX_FEATURES];
    out[..4].copy_from_slice(b);
    let mut i = 4;
    for &c in b {
        for k in 1..=8 {
            let a = std::f64::consts::PI * k as f64 * c;
            out[i] = a.sin();
            out[i + 1] = a.cos();
            i += 2;
        }
    }
    out
}

/// Adaptor input for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    /// `(category, box)` per node.
    pub nodes: Vec<(usize, [f64; 4])>,
    /// `(subject, predicate, object)` in node indices.
    pub edges: Vec<(usize, Predicate, usize)>,
    /// Prompt node.
    pub center: usize,
}

impl GraphInput {
    pub fn from_subgraph(s: &Subgraph) -> Self {
        Self {
            nodes: s.graph.nodes.iter().map(|n| (n.category, n.bbox)).collect(),
            edges: s.graph.edges.iter().filter(|e| e.valid).map(|e| (e.subject, e.predicate, e.object)).collect(),
            center: s.center,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Psga {
    pub category: Embedding,
    pub box_proj: Linear,
    pub prompt: ParamId,
    pub blocks: Vec<Block>,
    pub relevance: Linear,
    pub permutation: Mlp,
    pub rank: Embedding,
    pub predicate: Embedding,
    pub edge: Linear,
    pub node_type: ParamId,
    pub edge_type: ParamId,
    pub heads: usize,
    pub max_k: usize,
}

/// Partial adaptor output over a packed batch of graphs.
pub struct AdaptorOutput<'t, F: Real> {
    /// Updated node features, `n x D`.
    pub f_o: Var<'t, F>,
    /// Relevance logits, `n x 1`.
    pub logits: Var<'t, F>,
    /// Relevance probabilities, `n x 1`.
    pub relevance: Var<'t, F>,
    /// Permutation logits, `n x K`.
    pub perm_logits: Var<'t, F>,
    /// Node count per graph.
    pub lens: Vec<usize>,
}

/// Slot order of the nodes that feed the graph stream, with edges remapped
/// to slot indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinePlan {
    pub order: Vec<usize>,
    pub edges: Vec<(usize, Predicate, usize)>,
}

impl RefinePlan {
    pub fn new(order: Vec<usize>, graph: &GraphInput) -> Self {
        let slot = |n: usize| order.iter().position(|&o| o == n);
        let edges = graph
            .edges
            .iter()
            .filter_map(|&(s, p, o)| Some((slot(s)?, p, slot(o)?)))
            .collect();
        Self { order, edges }
    }
}

/// Graph token sequences for a packed batch.
pub struct GraphTokens<'t, F: Real> {
    /// Node tokens then edge tokens, per sample, packed.
    pub tokens: Var<'t, F>,
    pub lens: Vec<usize>,
    /// Node token count per sample.
    pub slots: Vec<usize>,
}

impl<'t, F: Real> GraphTokens<'t, F> {
    /// Row of node slot `j` of sample `b` inside any tensor aligned with
    /// `tokens`.
    pub fn node_row(&self, b: usize, j: usize) -> usize {
        self.lens[..b].iter().sum::<usize>() + j
    }

    pub fn node_rows(&self) -> Vec<usize> {
        (0..self.lens.len()).flat_map(|b| (0..self.slots[b]).map(move |j| (b, j))).map(|(b, j)| self.node_row(b, j)).collect()
    }
}

impl Psga {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        d: usize,
        heads: usize,
        blocks: usize,
        max_k: usize,
    ) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            category: Embedding::new(ps, rng, "psga.category", NUM_CATEGORIES, d),
            box_proj: Linear::new(ps, rng, "psga.box", BOX_FEATURES, d),
            prompt: ps.add("psga.prompt", crate::nn::normal(rng, 1, d, std), false),
            blocks: (0..blocks).map(|i| Block::new(ps, rng, &format!("psga.block{i}"), d, heads)).collect(),
            relevance: Linear::new(ps, rng, "psga.relevance", d, 1),
            permutation: Mlp::new(ps, rng, "psga.permutation", d, d, max_k),
            rank: Embedding::new(ps, rng, "psga.rank", max_k, d),
            predicate: Embedding::new(ps, rng, "psga.predicate", Predicate::ALL.len(), d),
            edge: Linear::new(ps, rng, "psga.edge", 3 * d, d),
            node_type: ps.add("psga.node_type", crate::nn::normal(rng, 1, d, std), false),
            edge_type: ps.add("psga.edge_type", crate::nn::normal(rng, 1, d, std), false),
            heads,
            max_k,
        }
    }

    /// Node features `e_o` for a packed batch: category embedding plus a
    /// projected box descriptor, with the prompt embedding added on the
    /// prompt node.
    pub fn node_features<'t, F: Real>(&self, ctx: &Ctx<'t, F>, graphs: &[GraphInput]) -> Var<'t, F> {
        let cats: Vec<usize> = graphs.iter().flat_map(|g| g.nodes.iter().map(|n| n.0)).collect();
        let n = cats.len();
        let mut boxes = Matrix::zeros(n, BOX_FEATURES);
        let mut prompt = Matrix::zeros(n, 1);
        let mut r = 0;
        for g in graphs {
            for (i, (_, b)) in g.nodes.iter().enumerate() {
                for (j, v) in box_features(b).iter().enumerate() {
                    boxes.set(r, j, F::c(*v));
                }
                if i == g.center {
                    prompt.set(r, 0, F::one());
                }
                r += 1;
            }
        }
        let e = self.category.forward(ctx, &cats).add(self.box_proj.forward(ctx, ctx.constant(boxes)));
        e.add(ctx.constant(prompt).matmul(ctx.p(self.prompt)))
    }

    /// Self-attention blocks and the two scoring heads.
    ///
    /// `valid` marks real rows when the input carries padding; padded rows
    /// neither attend nor are attended to.
    pub fn adapt<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        x: Var<'t, F>,
        lens: &[usize],
        valid: Option<Vec<bool>>,
    ) -> Result<AdaptorOutput<'t, F>> {
        let mut off = 0;
        for &l in lens {
            let live = valid.as_ref().map_or(l, |v| v[off..off + l].iter().filter(|&&b| b).count());
            if live == 0 {
                return input("adaptor input has a graph with no valid nodes");
            }
            off += l;
        }
        if off != x.rows() {
            return input(format!("segment lengths sum to {off}, input has {} rows", x.rows()));
        }
        let mut spec = AttnSpec::packed(self.heads, lens);
        spec.key_mask = valid.clone();
        spec.query_mask = valid;
        let spec = Rc::new(spec);
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(ctx, h, spec.clone());
        }
        let logits = self.relevance.forward(ctx, h);
        Ok(AdaptorOutput {
            f_o: h,
            logits,
            relevance: logits.sigmoid(),
            perm_logits: self.permutation.forward(ctx, h),
            lens: lens.to_vec(),
        })
    }

    /// Builds `f_g` from refine plans. With `filter`, node rows are scaled by
    /// their relevance; with `rank`, a slot-position embedding is added.
    pub fn graph_tokens<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        out: &AdaptorOutput<'t, F>,
        plans: &[RefinePlan],
        filter: bool,
        rank: bool,
    ) -> GraphTokens<'t, F> {
        assert_eq!(plans.len(), out.lens.len(), "one plan per graph");
        let f = if filter { out.f_o.mul_col(out.relevance) } else { out.f_o };
        let mut rows = Vec::new();
        let mut slot_ids = Vec::new();
        let mut off = 0;
        for (p, &l) in plans.iter().zip(&out.lens) {
            for (j, &n) in p.order.iter().enumerate() {
                assert!(n < l, "plan node out of range");
                rows.push(off + n);
                slot_ids.push(j.min(self.max_k - 1));
            }
            off += l;
        }
        let mut nodes = f.gather_rows(Rc::new(rows)).add_row(ctx.p(self.node_type));
        if rank {
            nodes = nodes.add(self.rank.forward(ctx, &slot_ids));
        }
        let n_nodes = nodes.rows();
        let (mut subj, mut obj, mut preds) = (Vec::new(), Vec::new(), Vec::new());
        let mut base = 0;
        for p in plans {
            for &(s, pr, o) in &p.edges {
                subj.push(base + s);
                obj.push(base + o);
                preds.push(pr.index());
            }
            base += p.order.len();
        }
        let all = if preds.is_empty() {
            nodes
        } else {
            let cat = ctx.tape.concat_cols(&[
                self.predicate.forward(ctx, &preds),
                nodes.gather_rows(Rc::new(subj)),
                nodes.gather_rows(Rc::new(obj)),
            ]);
            let edges = self.edge.forward(ctx, cat).add_row(ctx.p(self.edge_type));
            ctx.tape.concat_rows(&[nodes, edges])
        };
        let mut interleave = Vec::new();
        let mut lens = Vec::new();
        let (mut node_off, mut edge_off) = (0, n_nodes);
        for p in plans {
            interleave.extend(node_off..node_off + p.order.len());
            interleave.extend(edge_off..edge_off + p.edges.len());
            node_off += p.order.len();
            edge_off += p.edges.len();
            lens.push(p.order.len() + p.edges.len());
        }
        let tokens = all.gather_rows(Rc::new(interleave));
        GraphTokens { tokens, lens, slots: plans.iter().map(|p| p.order.len()).collect() }
    }
}

/// Mean binary cross-entropy of relevance logits against 0/1 targets.
pub fn adaptor_loss<'t, F: Real>(logits: Var<'t, F>, targets: &[u8]) -> Var<'t, F> {
    assert_eq!(logits.rows(), targets.len(), "one target per node");
    let y = Matrix::from_vec(targets.len(), 1, targets.iter().map(|&t| F::c(f64::from(t))).collect());
    let y = logits.tape().constant(y);
    logits.softplus().sub(logits.mul(y)).mean()
}

/// One supervised row of the permutation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankRow {
    pub row: usize,
    /// Target caption position.
    pub col: usize,
    /// Number of columns in play for this row's graph.
    pub cols: usize,
}

/// Mean cross-entropy between row-softmaxed permutation logits (restricted
/// to each row's live columns) and one-hot targets. Zero when there are no
/// rows.
pub fn ranking_loss<'t, F: Real>(perm_logits: Var<'t, F>, rows: &[RankRow]) -> Var<'t, F> {
    let tape = perm_logits.tape();
    if rows.is_empty() {
        log::debug!("ranking loss: no score-1 rows");
        return tape.scalar(F::zero());
    }
    let k = perm_logits.cols();
    let idx: Vec<usize> = rows.iter().map(|r| r.row).collect();
    let mut mask = Matrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        assert!(r.col < r.cols && r.cols <= k, "rank target out of range");
        for c in r.cols..k {
            mask.set(i, c, F::c(-1e9));
        }
    }
    let lp = perm_logits.gather_rows(Rc::new(idx)).add_const(&mask).log_softmax_rows();
    let picks: Vec<(usize, usize)> = rows.iter().enumerate().map(|(i, r)| (i, r.col)).collect();
    lp.pick(Rc::new(picks)).mean().neg()
}

/// Training-time plan: the target's caption-ordered nodes (with `filter`)
/// or every node (without), ordered by caption position (with `rank`) or
/// by node index (without). Unmatched nodes follow matched ones.
pub fn teacher_plan(graph: &GraphInput, target: &RelevanceTarget, filter: bool, rank: bool) -> RefinePlan {
    let ordered = target.ordered_rows();
    let mut order: Vec<usize> = if filter {
        ordered.clone()
    } else if rank {
        let mut o = ordered.clone();
        o.extend((0..graph.nodes.len()).filter(|n| !ordered.contains(n)));
        o
    } else {
        (0..graph.nodes.len()).collect()
    };
    if filter && !rank {
        order.sort_unstable();
    }
    if order.is_empty() {
        order.push(graph.center);
    }
    RefinePlan::new(order, graph)
}

/// Ranking targets for a packed batch under a set of plans: one row per
/// node that has a caption position.
pub fn rank_rows(targets: &[&RelevanceTarget], lens: &[usize]) -> Vec<RankRow> {
    let mut out = Vec::new();
    let mut off = 0;
    for (t, &l) in targets.iter().zip(lens) {
        for (n, a) in t.assignment.iter().enumerate() {
            if let Some(k) = a {
                out.push(RankRow { row: off + n, col: *k, cols: t.k });
            }
        }
        off += l;
    }
    out
}

/// Nodes kept by the threshold filter (`r >= theta`), falling back to the
/// prompt node alone when nothing survives.
pub fn survivors(relevance: &[f64], theta: f64, center: usize) -> Vec<usize> {
    let kept: Vec<usize> = (0..relevance.len()).filter(|&i| relevance[i] >= theta).collect();
    if kept.is_empty() {
        log::debug!("no node reached threshold {theta}; keeping the prompt node");
        vec![center]
    } else {
        kept
    }
}

/// Orders `members` by the minimum-cost assignment of rows to caption
/// positions under cost `-log softmax(R)`, using as many columns as there
/// are members (capped at the logit width). Members left without a column
/// follow in index order.
pub fn rank_order(members: &[usize], perm_logits: &Matrix<f64>) -> Vec<usize> {
    let cols = members.len().min(perm_logits.cols()).max(1);
    let cost: Vec<Vec<f64>> = members
        .iter()
        .map(|&m| {
            let row = &perm_logits.row(m)[..cols];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter().map(|v| lse - v).collect()
        })
        .collect();
    let a = hungarian::assign(&cost);
    let mut slotted: Vec<(usize, usize)> =
        members.iter().zip(&a).map(|(&m, c)| (c.unwrap_or(usize::MAX), m)).collect();
    slotted.sort_unstable();
    slotted.into_iter().map(|(_, m)| m).collect()
}

/// Inference plan for one member set.
pub fn inference_plan(
    graph: &GraphInput,
    members: &[usize],
    perm_logits: &Matrix<f64>,
    rank: bool,
) -> RefinePlan {
    let order = if rank {
        rank_order(members, perm_logits)
    } else {
        let mut m = members.to_vec();
        m.sort_unstable();
        m
    };
    RefinePlan::new(order, graph)
}

/// Up to `k` distinct member sets. The first is the threshold filter; each
/// further one flips a single node of it, taking nodes by ascending margin
/// `|r - theta|` (ties: lower relevance, then lower index). Nodes farther
/// than [`TOGGLE_MARGIN`] from the threshold are never flipped and the
/// prompt node is always present.
pub fn propose_members(relevance: &[f64], theta: f64, center: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k < 1 {
        return input("proposal count must be at least 1");
    }
    if center >= relevance.len() {
        return input(format!("prompt node {center} out of range"));
    }
    let mut base = survivors(relevance, theta, center);
    if !base.contains(&center) {
        base.push(center);
        base.sort_unstable();
    }
    let mut flips: Vec<usize> = (0..relevance.len())
        .filter(|&i| i != center && (relevance[i] - theta).abs() <= TOGGLE_MARGIN)
        .collect();
    flips.sort_by(|&a, &b| {
        let (ma, mb) = ((relevance[a] - theta).abs(), (relevance[b] - theta).abs());
        if (ma - mb).abs() > 1e-9 {
            ma.total_cmp(&mb)
        } else {
            relevance[a].total_cmp(&relevance[b]).then(a.cmp(&b))
        }
    });
    let mut out = vec![base.clone()];
    for f in flips {
        if out.len() >= k {
            break;
        }
        let mut c: Vec<usize> = base.iter().copied().filter(|&n| n != f).collect();
        if c.len() == base.len() {
            c.push(f);
            c.sort_unstable();
        }
        if !out.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}
