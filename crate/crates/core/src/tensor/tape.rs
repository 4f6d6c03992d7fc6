use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::conv::{self, ConvSpec};
use super::{gemm_into, Matrix, Real};

/// Segment table for packed multi-head attention.
///
/// Query segment `i` attends only to key segment `i`. Rows outside every
/// segment are left at zero.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub heads: usize,
    /// `(start_row, len)` per segment in the query matrix.
    pub q_segments: Vec<(usize, usize)>,
    /// `(start_row, len)` per segment in the key/value matrices.
    pub k_segments: Vec<(usize, usize)>,
    /// Optional per-row validity of keys; invalid keys receive zero weight.
    pub key_mask: Option<Vec<bool>>,
    /// Optional per-row validity of queries; invalid queries output zeros.
    pub query_mask: Option<Vec<bool>>,
}

impl AttnSpec {
    /// One segment covering all rows of both inputs.
    pub fn single(heads: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            heads,
            q_segments: vec![(0, q_len)],
            k_segments: vec![(0, k_len)],
            key_mask: None,
            query_mask: None,
        }
    }

    /// Self-attention over packed sequences of the given lengths.
    pub fn packed(heads: usize, lens: &[usize]) -> Self {
        let segs = segments(lens);
        Self { heads, q_segments: segs.clone(), k_segments: segs, key_mask: None, query_mask: None }
    }

    /// Cross-attention: queries packed by `q_lens`, keys packed by `k_lens`.
    pub fn cross(heads: usize, q_lens: &[usize], k_lens: &[usize]) -> Self {
        assert_eq!(q_lens.len(), k_lens.len(), "segment count mismatch");
        Self {
            heads,
            q_segments: segments(q_lens),
            k_segments: segments(k_lens),
            key_mask: None,
            query_mask: None,
        }
    }

    fn key_ok(&self, row: usize) -> bool {
        self.key_mask.as_ref().is_none_or(|m| m[row])
    }

    fn query_ok(&self, row: usize) -> bool {
        self.query_mask.as_ref().is_none_or(|m| m[row])
    }
}

fn segments(lens: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let s = (start, l);
            start += l;
            s
        })
        .collect()
}

enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, row: usize },
    MulCol { a: usize, col: usize },
    Scale { a: usize, s: F },
    Shift { a: usize },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Softplus(usize),
    Square(usize),
    Recip(usize),
    Clamp { a: usize, lo: F, hi: F },
    Sum(usize),
    SumCols(usize),
    SumRows(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Vec<F>, rstd: Vec<F> },
    L2NormRows { a: usize, norms: Vec<F> },
    Attention { q: usize, k: usize, v: usize, spec: Rc<AttnSpec>, probs: Vec<F> },
    Conv2d { x: usize, w: usize, spec: ConvSpec },
    Upsample { a: usize, spec: conv::UpsampleSpec },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Pick { a: usize, idx: Rc<Vec<(usize, usize)>> },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn wrt(&self, v: Var<'_, F>) -> Option<&Matrix<F>> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<Matrix<F>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf that gradients are tracked for.
    pub fn param(&self, value: Matrix<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, value: Matrix<F>) -> Var<'_, F> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(Matrix::scalar(value))
    }

    pub fn concat_cols(&self, parts: &[Var<'_, F>]) -> Var<'_, F> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[ids[0]].value.rows();
            let cols: usize = ids.iter().map(|&i| nodes[i].value.cols()).sum();
            let mut out = Matrix::zeros(rows, cols);
            let mut off = 0;
            for &i in &ids {
                let m = &nodes[i].value;
                assert_eq!(m.rows(), rows, "concat_cols row mismatch");
                for r in 0..rows {
                    out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
                }
                off += m.cols();
            }
            out
        };
        let rg = self.rg(&ids);
        self.push(value, Op::ConcatCols(ids), rg)
    }

    pub fn concat_rows(&self, parts: &[Var<'_, F>]) -> Var<'_, F> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[ids[0]].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &ids {
                let m = &nodes[i].value;
                assert_eq!(m.cols(), cols, "concat_rows col mismatch");
                data.extend_from_slice(m.data());
                rows += m.rows();
            }
            Matrix::from_vec(rows, cols, data)
        };
        let rg = self.rg(&ids);
        self.push(value, Op::ConcatRows(ids), rg)
    }

    /// Packed multi-head scaled dot-product attention.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, F>,
        k: Var<'t, F>,
        v: Var<'t, F>,
        spec: Rc<AttnSpec>,
    ) -> Var<'t, F> {
        let (out, probs) = {
            let nodes = self.nodes.borrow();
            attention_forward(&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value, &spec)
        };
        let rg = self.rg(&[q.id, k.id, v.id]);
        self.push(out, Op::Attention { q: q.id, k: k.id, v: v.id, spec, probs }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, F>) -> Grads<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Matrix::scalar(F::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { grads }
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Matrix<F>>], nodes: &[Node<F>], id: usize, g: Matrix<F>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<F: Real>(a: &Matrix<F>, b: &Matrix<F>, f: impl Fn(F, F) -> F) -> Matrix<F> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    // tanh approximation
    let c = F::c((2.0 / std::f64::consts::PI).sqrt());
    let k = F::c(0.044715);
    let half = F::c(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * c * (F::one() + F::c(3.0) * k * x * x);
    (y, dy)
}

fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn backprop_node<F: Real>(nodes: &[Node<F>], id: usize, g: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            if needs(a) {
                let (ar, ac) = val(a).shape();
                let mut da = Matrix::zeros(ar, ac);
                if ta {
                    gemm_into(val(b), tb, g, true, &mut da, F::one(), F::zero());
                } else {
                    gemm_into(g, false, val(b), !tb, &mut da, F::one(), F::zero());
                }
                accumulate(grads, nodes, a, da);
            }
            if needs(b) {
                let (br, bc) = val(b).shape();
                let mut db = Matrix::zeros(br, bc);
                if tb {
                    gemm_into(g, true, val(a), ta, &mut db, F::one(), F::zero());
                } else {
                    gemm_into(val(a), !ta, g, false, &mut db, F::one(), F::zero());
                }
                accumulate(grads, nodes, b, db);
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.map(|x| -x));
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                accumulate(grads, nodes, a, zip_map(g, val(b), |x, y| x * y));
            }
            if needs(b) {
                accumulate(grads, nodes, b, zip_map(g, val(a), |x, y| x * y));
            }
        }
        &Op::AddRow { a, row } => {
            accumulate(grads, nodes, a, g.clone());
            if needs(row) {
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, &x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, nodes, row, dr);
            }
        }
        &Op::MulCol { a, col } => {
            let cv = val(col);
            if needs(a) {
                let mut da = g.clone();
                for r in 0..da.rows() {
                    let s = cv.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                accumulate(grads, nodes, a, da);
            }
            if needs(col) {
                let av = val(a);
                let mut dc = Matrix::zeros(cv.rows(), 1);
                for r in 0..g.rows() {
                    dc.data_mut()[r] = g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum();
                }
                accumulate(grads, nodes, col, dc);
            }
        }
        &Op::Scale { a, s } => accumulate(grads, nodes, a, g.map(|x| x * s)),
        &Op::Shift { a } => accumulate(grads, nodes, a, g.clone()),
        &Op::Relu(a) => {
            accumulate(grads, nodes, a, zip_map(g, val(a), |x, y| if y > F::zero() { x } else { F::zero() }))
        }
        &Op::Gelu(a) => accumulate(grads, nodes, a, zip_map(g, val(a), |x, y| x * gelu_parts(y).1)),
        &Op::Sigmoid(a) => {
            accumulate(grads, nodes, a, zip_map(g, &node.value, |x, y| x * y * (F::one() - y)))
        }
        &Op::Tanh(a) => {
            accumulate(grads, nodes, a, zip_map(g, &node.value, |x, y| x * (F::one() - y * y)))
        }
        &Op::Exp(a) => accumulate(grads, nodes, a, zip_map(g, &node.value, |x, y| x * y)),
        &Op::Ln(a) => accumulate(grads, nodes, a, zip_map(g, val(a), |x, y| x / y)),
        &Op::Softplus(a) => accumulate(grads, nodes, a, zip_map(g, val(a), |x, y| x * sigmoid(y))),
        &Op::Square(a) => {
            accumulate(grads, nodes, a, zip_map(g, val(a), |x, y| x * F::c(2.0) * y))
        }
        &Op::Recip(a) => {
            accumulate(grads, nodes, a, zip_map(g, &node.value, |x, y| -x * y * y))
        }
        &Op::Clamp { a, lo, hi } => accumulate(
            grads,
            nodes,
            a,
            zip_map(g, val(a), |x, y| if y >= lo && y <= hi { x } else { F::zero() }),
        ),
        &Op::Sum(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, nodes, a, Matrix::filled(r, c, g.item()));
        }
        &Op::SumCols(a) => {
            let (r, c) = val(a).shape();
            let mut da = Matrix::zeros(r, c);
            for i in 0..r {
                let s = g.data()[i];
                da.row_mut(i).iter_mut().for_each(|x| *x = s);
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::SumRows(a) => {
            let (r, c) = val(a).shape();
            let mut da = Matrix::zeros(r, c);
            for i in 0..r {
                da.row_mut(i).copy_from_slice(g.data());
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut da = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: F = g.row(r).iter().zip(y.row(r)).map(|(&x, &p)| x * p).sum();
                for ((d, &x), &p) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *d = p * (x - dot);
                }
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let mut da = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let gs: F = g.row(r).iter().copied().sum();
                for ((d, &x), &ly) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *d = x - ly.exp() * gs;
                }
            }
            accumulate(grads, nodes, a, da);
        }
        Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
            let (rows, cols) = g.shape();
            let gam = val(*gamma).data();
            if needs(*gamma) {
                let mut dg = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dg.data_mut()[c] += g.get(r, c) * xhat[r * cols + c];
                    }
                }
                accumulate(grads, nodes, *gamma, dg);
            }
            if needs(*beta) {
                let mut db = Matrix::zeros(1, cols);
                for r in 0..rows {
                    for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, nodes, *beta, db);
            }
            if needs(*a) {
                let n = F::c(cols as f64);
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let xh = &xhat[r * cols..(r + 1) * cols];
                    let gr = g.row(r);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for c in 0..cols {
                        let dxh = gr[c] * gam[c];
                        m1 += dxh;
                        m2 += dxh * xh[c];
                    }
                    m1 /= n;
                    m2 /= n;
                    let rs = rstd[r];
                    for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                        *d = rs * (gr[c] * gam[c] - m1 - xh[c] * m2);
                    }
                }
                accumulate(grads, nodes, *a, da);
            }
        }
        Op::L2NormRows { a, norms } => {
            let y = &node.value;
            let mut da = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let dot: F = g.row(r).iter().zip(y.row(r)).map(|(&x, &p)| x * p).sum();
                let n = norms[r];
                for ((d, &x), &p) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *d = (x - p * dot) / n;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::Attention { q, k, v, spec, probs } => {
            let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), spec, probs, g);
            accumulate(grads, nodes, *q, dq);
            accumulate(grads, nodes, *k, dk);
            accumulate(grads, nodes, *v, dv);
        }
        Op::Conv2d { x, w, spec } => {
            let (dx, dw) = conv::conv2d_backward(val(*x), val(*w), spec, g, needs(*x));
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, dx);
            }
            accumulate(grads, nodes, *w, dw);
        }
        Op::Upsample { a, spec } => accumulate(grads, nodes, *a, conv::upsample_backward(g, spec)),
        Op::GatherRows { a, idx } => {
            let (r, c) = val(*a).shape();
            let mut da = Matrix::zeros(r, c);
            for (i, &src) in idx.iter().enumerate() {
                for (d, &x) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                    *d += x;
                }
            }
            accumulate(grads, nodes, *a, da);
        }
        Op::ConcatCols(ids) => {
            let mut off = 0;
            for &i in ids {
                let (r, c) = val(i).shape();
                if needs(i) {
                    let mut d = Matrix::zeros(r, c);
                    for row in 0..r {
                        d.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                    }
                    accumulate(grads, nodes, i, d);
                }
                off += c;
            }
        }
        Op::ConcatRows(ids) => {
            let mut off = 0;
            for &i in ids {
                let (r, c) = val(i).shape();
                if needs(i) {
                    let d = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                    accumulate(grads, nodes, i, d);
                }
                off += r;
            }
        }
        &Op::SliceCols { a, start } => {
            let (r, c) = val(a).shape();
            let w = g.cols();
            let mut da = Matrix::zeros(r, c);
            for row in 0..r {
                da.row_mut(row)[start..start + w].copy_from_slice(g.row(row));
            }
            accumulate(grads, nodes, a, da);
        }
        &Op::SliceRows { a, start } => {
            let (r, c) = val(a).shape();
            let mut da = Matrix::zeros(r, c);
            da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, a, da);
        }
        &Op::Reshape(a) => {
            let (r, c) = val(a).shape();
            accumulate(grads, nodes, a, g.clone().reshape(r, c));
        }
        &Op::Transpose(a) => accumulate(grads, nodes, a, g.transpose()),
        Op::Pick { a, idx } => {
            let (r, c) = val(*a).shape();
            let mut da = Matrix::zeros(r, c);
            for (i, &(row, col)) in idx.iter().enumerate() {
                da.data_mut()[row * c + col] += g.data()[i];
            }
            accumulate(grads, nodes, *a, da);
        }
    }
}

fn attention_forward<F: Real>(
    q: &Matrix<F>,
    k: &Matrix<F>,
    v: &Matrix<F>,
    spec: &AttnSpec,
) -> (Matrix<F>, Vec<F>) {
    let d = q.cols();
    assert_eq!(k.cols(), d, "attention key width");
    assert_eq!(v.cols(), d, "attention value width");
    assert_eq!(k.rows(), v.rows(), "attention key/value rows");
    assert!(spec.heads > 0 && d % spec.heads == 0, "heads must divide width");
    let dh = d / spec.heads;
    let scale = F::one() / F::c(dh as f64).sqrt();
    let mut out: Matrix<F> = Matrix::zeros(q.rows(), d);
    let total: usize = spec
        .q_segments
        .iter()
        .zip(&spec.k_segments)
        .map(|(&(_, ql), &(_, kl))| ql * kl * spec.heads)
        .sum();
    let mut probs = vec![F::zero(); total];
    let mut off = 0;
    for (&(qs, ql), &(ks, kl)) in spec.q_segments.iter().zip(&spec.k_segments) {
        if ql == 0 || kl == 0 {
            continue;
        }
        for h in 0..spec.heads {
            let p = &mut probs[off..off + ql * kl];
            // SAFETY: head slices lie inside q/k; p is ql x kl.
            unsafe {
                F::gemm(
                    ql,
                    dh,
                    kl,
                    scale,
                    q.data().as_ptr().add(qs * d + h * dh),
                    d as isize,
                    1,
                    k.data().as_ptr().add(ks * d + h * dh),
                    1,
                    d as isize,
                    F::zero(),
                    p.as_mut_ptr(),
                    kl as isize,
                    1,
                );
            }
            for i in 0..ql {
                let row = &mut p[i * kl..(i + 1) * kl];
                if !spec.query_ok(qs + i) {
                    row.iter_mut().for_each(|x| *x = F::zero());
                    continue;
                }
                let mut mx = F::neg_infinity();
                for (j, x) in row.iter().enumerate() {
                    if spec.key_ok(ks + j) && *x > mx {
                        mx = *x;
                    }
                }
                if mx == F::neg_infinity() {
                    row.iter_mut().for_each(|x| *x = F::zero());
                    continue;
                }
                let mut z = F::zero();
                for (j, x) in row.iter_mut().enumerate() {
                    if spec.key_ok(ks + j) {
                        *x = (*x - mx).exp();
                        z += *x;
                    } else {
                        *x = F::zero();
                    }
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            // SAFETY: output head slice lies inside out.
            unsafe {
                F::gemm(
                    ql,
                    kl,
                    dh,
                    F::one(),
                    p.as_ptr(),
                    kl as isize,
                    1,
                    v.data().as_ptr().add(ks * d + h * dh),
                    d as isize,
                    1,
                    F::zero(),
                    out.data_mut().as_mut_ptr().add(qs * d + h * dh),
                    d as isize,
                    1,
                );
            }
            off += ql * kl;
        }
    }
    (out, probs)
}

fn attention_backward<F: Real>(
    q: &Matrix<F>,
    k: &Matrix<F>,
    v: &Matrix<F>,
    spec: &AttnSpec,
    probs: &[F],
    g: &Matrix<F>,
) -> (Matrix<F>, Matrix<F>, Matrix<F>) {
    let d = q.cols();
    let dh = d / spec.heads;
    let scale = F::one() / F::c(dh as f64).sqrt();
    let mut dq: Matrix<F> = Matrix::zeros(q.rows(), d);
    let mut dk: Matrix<F> = Matrix::zeros(k.rows(), d);
    let mut dv: Matrix<F> = Matrix::zeros(v.rows(), d);
    let mut off = 0;
    let mut dp = Vec::new();
    for (&(qs, ql), &(ks, kl)) in spec.q_segments.iter().zip(&spec.k_segments) {
        if ql == 0 || kl == 0 {
            continue;
        }
        for h in 0..spec.heads {
            let p = &probs[off..off + ql * kl];
            dp.clear();
            dp.resize(ql * kl, F::zero());
            // SAFETY (all gemm calls below): every view is a head slice inside
            // its matrix with the stated extents; outputs do not alias inputs.
            unsafe {
                // dP = dO V^T
                F::gemm(
                    ql,
                    dh,
                    kl,
                    F::one(),
                    g.data().as_ptr().add(qs * d + h * dh),
                    d as isize,
                    1,
                    v.data().as_ptr().add(ks * d + h * dh),
                    1,
                    d as isize,
                    F::zero(),
                    dp.as_mut_ptr(),
                    kl as isize,
                    1,
                );
                // dV += P^T dO
                F::gemm(
                    kl,
                    ql,
                    dh,
                    F::one(),
                    p.as_ptr(),
                    1,
                    kl as isize,
                    g.data().as_ptr().add(qs * d + h * dh),
                    d as isize,
                    1,
                    F::one(),
                    dv.data_mut().as_mut_ptr().add(ks * d + h * dh),
                    d as isize,
                    1,
                );
            }
            // dS = P * (dP - rowsum(dP * P)) * scale
            for i in 0..ql {
                let pr = &p[i * kl..(i + 1) * kl];
                let dr = &mut dp[i * kl..(i + 1) * kl];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in dr.iter_mut().zip(pr) {
                    *x = pp * (*x - dot) * scale;
                }
            }
            unsafe {
                // dQ += dS K
                F::gemm(
                    ql,
                    kl,
                    dh,
                    F::one(),
                    dp.as_ptr(),
                    kl as isize,
                    1,
                    k.data().as_ptr().add(ks * d + h * dh),
                    d as isize,
                    1,
                    F::one(),
                    dq.data_mut().as_mut_ptr().add(qs * d + h * dh),
                    d as isize,
                    1,
                );
                // dK += dS^T Q
                F::gemm(
                    kl,
                    ql,
                    dh,
                    F::one(),
                    dp.as_ptr(),
                    1,
                    kl as isize,
                    q.data().as_ptr().add(qs * d + h * dh),
                    d as isize,
                    1,
                    F::one(),
                    dk.data_mut().as_mut_ptr().add(ks * d + h * dh),
                    d as isize,
                    1,
                );
            }
            off += ql * kl;
        }
    }
    (dq, dk, dv)
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Matrix<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn item(&self) -> F {
        self.value().item()
    }

    pub fn to_matrix(&self) -> Matrix<F> {
        self.value().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op<F>, f: impl FnOnce(&Matrix<F>) -> Matrix<F>) -> Self {
        let value = f(&self.value());
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Self, op: Op<F>, f: impl FnOnce(&Matrix<F>, &Matrix<F>) -> Matrix<F>) -> Self {
        let value = f(&self.value(), &other.value());
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    fn mm(self, other: Self, ta: bool, tb: bool) -> Self {
        self.binary(other, Op::MatMul { a: self.id, b: other.id, ta, tb }, |a, b| {
            let m = if ta { a.cols() } else { a.rows() };
            let n = if tb { b.rows() } else { b.cols() };
            let mut out = Matrix::zeros(m, n);
            gemm_into(a, ta, b, tb, &mut out, F::one(), F::zero());
            out
        })
    }

    /// `self @ other`
    pub fn matmul(self, other: Self) -> Self {
        self.mm(other, false, false)
    }

    /// `self @ other^T`
    pub fn matmul_t(self, other: Self) -> Self {
        self.mm(other, false, true)
    }

    /// `self^T @ other`
    pub fn t_matmul(self, other: Self) -> Self {
        self.mm(other, true, false)
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, Op::Add(self.id, other.id), |a, b| zip_map(a, b, |x, y| x + y))
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| zip_map(a, b, |x, y| x - y))
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| zip_map(a, b, |x, y| x * y))
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(self, row: Self) -> Self {
        self.binary(row, Op::AddRow { a: self.id, row: row.id }, |a, r| {
            assert_eq!(r.shape(), (1, a.cols()), "add_row expects 1 x cols");
            let mut out = a.clone();
            for i in 0..out.rows() {
                for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                    *o += b;
                }
            }
            out
        })
    }

    /// Scales row `i` by `col[i]` (`col` is `rows x 1`).
    pub fn mul_col(self, col: Self) -> Self {
        self.binary(col, Op::MulCol { a: self.id, col: col.id }, |a, c| {
            assert_eq!(c.shape(), (a.rows(), 1), "mul_col expects rows x 1");
            let mut out = a.clone();
            for i in 0..out.rows() {
                let s = c.data()[i];
                out.row_mut(i).iter_mut().for_each(|x| *x *= s);
            }
            out
        })
    }

    pub fn scale(self, s: F) -> Self {
        self.unary(Op::Scale { a: self.id, s }, |a| a.map(|x| x * s))
    }

    pub fn neg(self) -> Self {
        self.scale(-F::one())
    }

    pub fn add_scalar(self, s: F) -> Self {
        self.unary(Op::Shift { a: self.id }, |a| a.map(|x| x + s))
    }

    /// Adds a constant matrix (no gradient to the constant).
    pub fn add_const(self, c: &Matrix<F>) -> Self {
        self.unary(Op::Shift { a: self.id }, |a| zip_map(a, c, |x, y| x + y))
    }

    pub fn relu(self) -> Self {
        self.unary(Op::Relu(self.id), |a| a.map(|x| if x > F::zero() { x } else { F::zero() }))
    }

    pub fn gelu(self) -> Self {
        self.unary(Op::Gelu(self.id), |a| a.map(|x| gelu_parts(x).0))
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |a| a.map(|x| x.tanh()))
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |a| a.map(|x| x.exp()))
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Ln(self.id), |a| a.map(|x| x.ln()))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(self) -> Self {
        self.unary(Op::Softplus(self.id), |a| a.map(softplus))
    }

    pub fn square(self) -> Self {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn recip(self) -> Self {
        self.unary(Op::Recip(self.id), |a| a.map(|x| F::one() / x))
    }

    pub fn clamp(self, lo: F, hi: F) -> Self {
        self.unary(Op::Clamp { a: self.id, lo, hi }, |a| a.map(|x| x.max(lo).min(hi)))
    }

    /// Sum of all elements as a 1x1 value.
    pub fn sum(self) -> Self {
        self.unary(Op::Sum(self.id), |a| Matrix::scalar(a.sum()))
    }

    pub fn mean(self) -> Self {
        let n = self.value().len().max(1);
        self.sum().scale(F::one() / F::c(n as f64))
    }

    /// Per-row sums, `rows x 1`.
    pub fn sum_cols(self) -> Self {
        self.unary(Op::SumCols(self.id), |a| {
            Matrix::from_vec(a.rows(), 1, (0..a.rows()).map(|r| a.row(r).iter().copied().sum()).collect())
        })
    }

    /// Per-column sums, `1 x cols`.
    pub fn sum_rows(self) -> Self {
        self.unary(Op::SumRows(self.id), |a| {
            let mut out = Matrix::zeros(1, a.cols());
            for r in 0..a.rows() {
                for (o, &x) in out.data_mut().iter_mut().zip(a.row(r)) {
                    *o += x;
                }
            }
            out
        })
    }

    pub fn softmax_rows(self) -> Self {
        self.unary(Op::SoftmaxRows(self.id), |a| {
            let mut out = a.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            out
        })
    }

    pub fn log_softmax_rows(self) -> Self {
        self.unary(Op::LogSoftmaxRows(self.id), |a| {
            let mut out = a.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        })
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(self, gamma: Self, beta: Self, eps: F) -> Self {
        let (value, xhat, rstd) = {
            let a = self.value();
            let (rows, cols) = a.shape();
            let gam = gamma.value();
            let bet = beta.value();
            let n = F::c(cols as f64);
            let mut out = Matrix::zeros(rows, cols);
            let mut xhat = vec![F::zero(); rows * cols];
            let mut rstd = vec![F::zero(); rows];
            for r in 0..rows {
                let row = a.row(r);
                let mean = row.iter().copied().sum::<F>() / n;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let xh = (row[c] - mean) * rs;
                    xhat[r * cols + c] = xh;
                    out.set(r, c, xh * gam.data()[c] + bet.data()[c]);
                }
            }
            (out, xhat, rstd)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        self.tape.push(value, Op::LayerNorm { a: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd }, rg)
    }

    /// Divides every row by its Euclidean norm.
    pub fn l2_normalize_rows(self) -> Self {
        let (value, norms) = {
            let a = self.value();
            let mut out = a.clone();
            let mut norms = Vec::with_capacity(a.rows());
            for r in 0..a.rows() {
                let n = a.row(r).iter().map(|&x| x * x).sum::<F>().sqrt().max(F::c(1e-12));
                norms.push(n);
                out.row_mut(r).iter_mut().for_each(|x| *x /= n);
            }
            (out, norms)
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::L2NormRows { a: self.id, norms }, rg)
    }

    /// 2-D convolution of an NHWC-flattened input with `w` of shape
    /// `[k*k*cin, cout]`.
    pub fn conv2d(self, w: Self, spec: ConvSpec) -> Self {
        let value = conv::conv2d_forward(&self.value(), &w.value(), &spec);
        let rg = self.tape.rg(&[self.id, w.id]);
        self.tape.push(value, Op::Conv2d { x: self.id, w: w.id, spec }, rg)
    }

    /// Nearest-neighbour upsampling of an NHWC-flattened input.
    pub fn upsample_nearest(self, batch: usize, h: usize, w: usize, factor: usize) -> Self {
        let spec = conv::UpsampleSpec { batch, h, w, c: self.cols(), factor };
        self.unary(Op::Upsample { a: self.id, spec }, |a| conv::upsample_forward(a, &spec))
    }

    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Self {
        let value = self.value().select_rows(&idx);
        let rg = self.requires_grad();
        self.tape.push(value, Op::GatherRows { a: self.id, idx }, rg)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        self.unary(Op::SliceCols { a: self.id, start }, |a| {
            let mut out = Matrix::zeros(a.rows(), len);
            for r in 0..a.rows() {
                out.row_mut(r).copy_from_slice(&a.row(r)[start..start + len]);
            }
            out
        })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Self {
        self.unary(Op::SliceRows { a: self.id, start }, |a| {
            let c = a.cols();
            Matrix::from_vec(len, c, a.data()[start * c..(start + len) * c].to_vec())
        })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Self {
        self.unary(Op::Reshape(self.id), |a| a.clone().reshape(rows, cols))
    }

    pub fn transpose(self) -> Self {
        self.unary(Op::Transpose(self.id), Matrix::transpose)
    }

    /// Picks `(row, col)` elements into an `n x 1` column.
    pub fn pick(self, idx: Rc<Vec<(usize, usize)>>) -> Self {
        let value = {
            let a = self.value();
            Matrix::from_vec(idx.len(), 1, idx.iter().map(|&(r, c)| a.get(r, c)).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(value, Op::Pick { a: self.id, idx }, rg)
    }

    /// Attention probabilities saved by an attention node, one
    /// `q_len x k_len` matrix per (segment, head) in segment-major order.
    pub fn attention_probs(&self) -> Option<Vec<Matrix<F>>> {
        let nodes = self.tape.nodes.borrow();
        match &nodes[self.id].op {
            Op::Attention { spec, probs, .. } => {
                let mut out = Vec::new();
                let mut off = 0;
                for (&(_, ql), &(_, kl)) in spec.q_segments.iter().zip(&spec.k_segments) {
                    if ql == 0 || kl == 0 {
                        continue;
                    }
                    for _ in 0..spec.heads {
                        out.push(Matrix::from_vec(ql, kl, probs[off..off + ql * kl].to_vec()));
                        off += ql * kl;
                    }
                }
                Some(out)
            }
            _ => None,
        }
    }
}
