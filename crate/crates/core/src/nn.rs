//! Parameter storage and the small set of layers the model is built from.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{AttnSpec, Grads, Matrix, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub value: Matrix<F>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Flat, ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    entries: Vec<Param<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<F>, decay: bool) -> ParamId {
        self.entries.push(Param { name: name.into(), value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<F> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[Param<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Param<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), decay: p.decay })
                .collect(),
        }
    }
}

/// Binds a parameter set to a tape for one forward/backward pass.
///
/// Each parameter becomes a single leaf the first time it is used, so
/// gradients from every use accumulate on that leaf.
pub struct Ctx<'t, F: Real> {
    pub tape: &'t Tape<F>,
    params: &'t ParamSet<F>,
    vars: RefCell<Vec<Option<Var<'t, F>>>>,
    train: bool,
}

impl<'t, F: Real> Ctx<'t, F> {
    pub fn new(tape: &'t Tape<F>, params: &'t ParamSet<F>, train: bool) -> Self {
        Self { tape, params, vars: RefCell::new(vec![None; params.len()]), train }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'t ParamSet<F> {
        self.params
    }

    pub fn p(&self, id: ParamId) -> Var<'t, F> {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.train { self.tape.param(value) } else { self.tape.constant(value) };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    pub fn constant(&self, m: Matrix<F>) -> Var<'t, F> {
        self.tape.constant(m)
    }

    /// Gradient per parameter; `None` for parameters that were not used or
    /// received no gradient.
    pub fn param_grads(&self, grads: &Grads<F>) -> Vec<Option<Matrix<F>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.wrt(v).cloned()))
            .collect()
    }
}

pub fn xavier<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<F> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| F::c(rng.random_range(-a..a))).collect())
}

pub fn normal<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix<F> {
    let n = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| F::c(n.sample(rng))).collect())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, din, dout), true);
        let b = ps.add(format!("{name}.b"), Matrix::zeros(1, dout), false);
        Self { w, b }
    }

    /// Square layer initialised to the identity map.
    pub fn identity<F: Real>(ps: &mut ParamSet<F>, name: &str, d: usize) -> Self {
        let w = ps.add(format!("{name}.w"), Matrix::identity(d), true);
        let b = ps.add(format!("{name}.b"), Matrix::zeros(1, d), false);
        Self { w, b }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.matmul(ctx.p(self.w)).add_row(ctx.p(self.b))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, name: &str, d: usize) -> Self {
        let g = ps.add(format!("{name}.g"), Matrix::filled(1, d, F::one()), false);
        let b = ps.add(format!("{name}.b"), Matrix::zeros(1, d), false);
        Self { g, b }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        x.layer_norm(ctx.p(self.g), ctx.p(self.b), F::c(1e-5))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, n: usize, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self { table: ps.add(format!("{name}.table"), normal(rng, n, d, std), false) }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, idx: &[usize]) -> Var<'t, F> {
        ctx.p(self.table).gather_rows(Rc::new(idx.to_vec()))
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(
        ps: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        din: usize,
        hidden: usize,
        dout: usize,
    ) -> Self {
        Self {
            l1: Linear::new(ps, rng, &format!("{name}.l1"), din, hidden),
            l2: Linear::new(ps, rng, &format!("{name}.l2"), hidden, dout),
        }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Var<'t, F> {
        self.l2.forward(ctx, self.l1.forward(ctx, x).gelu())
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), d, d),
            k: Linear::new(ps, rng, &format!("{name}.k"), d, d),
            v: Linear::new(ps, rng, &format!("{name}.v"), d, d),
            o: Linear::new(ps, rng, &format!("{name}.o"), d, d),
            heads,
        }
    }

    pub fn forward<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        xq: Var<'t, F>,
        xkv: Var<'t, F>,
        spec: Rc<AttnSpec>,
    ) -> Var<'t, F> {
        let a = self.attend(ctx, xq, xkv, spec);
        self.o.forward(ctx, a)
    }

    /// Attention output before the output projection.
    pub fn attend<'t, F: Real>(
        &self,
        ctx: &Ctx<'t, F>,
        xq: Var<'t, F>,
        xkv: Var<'t, F>,
        spec: Rc<AttnSpec>,
    ) -> Var<'t, F> {
        debug_assert_eq!(spec.heads, self.heads);
        let q = self.q.forward(ctx, xq);
        let k = self.k.forward(ctx, xkv);
        let v = self.v.forward(ctx, xkv);
        ctx.tape.attention(q, k, v, spec)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

impl Block {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, name: &str, d: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            ffn: Mlp::new(ps, rng, &format!("{name}.ffn"), d, 4 * d, d),
        }
    }

    pub fn forward<'t, F: Real>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>, spec: Rc<AttnSpec>) -> Var<'t, F> {
        let h = self.ln1.forward(ctx, x);
        let x = x.add(self.attn.forward(ctx, h, h, spec));
        x.add(self.ffn.forward(ctx, self.ln2.forward(ctx, x)))
    }
}

/// Sets a linear layer's weight and bias to zero.
pub fn zero_linear<F: Real>(ps: &mut ParamSet<F>, l: Linear) {
    ps.get_mut(l.w).data_mut().iter_mut().for_each(|v| *v = F::zero());
    ps.get_mut(l.b).data_mut().iter_mut().for_each(|v| *v = F::zero());
}

/// Sinusoidal features of a scalar, `1 x d`.
pub fn sinusoidal<F: Real>(value: f64, d: usize) -> Matrix<F> {
    let half = d / 2;
    let mut out = Matrix::zeros(1, d);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out.set(0, i, F::c((value * freq).sin()));
        out.set(0, half + i, F::c((value * freq).cos()));
    }
    out
}
