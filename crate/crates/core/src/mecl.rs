//! Contrastive alignment between mask embeddings and word embeddings, both
//! within a sample and across a minibatch.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::heads::PIXEL_DIM;
use crate::nn::{Ctx, Linear, ParamId, ParamSet};
use crate::tensor::{Matrix, Real, Var};

pub const D_JOINT: usize = 128;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;

const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Mecl {
    pub mask_query: Linear,
    pub mask_pool: Linear,
    pub word: Linear,
    pub tau: ParamId,
}

impl Mecl {
    pub fn new<F: Real>(ps: &mut ParamSet<F>, rng: &mut impl Rng, d: usize) -> Self {
        Self {
            mask_query: Linear::new(ps, rng, "mecl.mask_query", PIXEL_DIM, D_JOINT),
            mask_pool: Linear::new(ps, rng, "mecl.mask_pool", PIXEL_DIM, D_JOINT),
            word: Linear::new(ps, rng, "mecl.word", d, D_JOINT),
            tau: ps.add("mecl.tau", Matrix::scalar(F::c(TAU_INIT)), false),
        }
    }

    /// Temperature clamped to `[TAU_MIN, TAU_MAX]`, `1 x 1`.
    pub fn tau<'t, F: Real>(&self, ctx: &Ctx<'t, F>) -> Var<'t, F> {
        ctx.p(self.tau).clamp(F::c(TAU_MIN), F::c(TAU_MAX))
    }

    /// `normalize(W_q query + W_p pooled)`, one row per mask.
    pub fn mask_embeddings<'t, F: Real>(&self, ctx: &Ctx<'t, F>, queries: Var<'t, F>, pooled: Var<'t, F>) -> Var<'t, F> {
        self.mask_query.forward(ctx, queries).add(self.mask_pool.forward(ctx, pooled)).l2_normalize_rows()
    }

    pub fn word_embeddings<'t, F: Real>(&self, ctx: &Ctx<'t, F>, h_c: Var<'t, F>, rows: &[usize]) -> Var<'t, F> {
        self.word.forward(ctx, h_c.gather_rows(Rc::new(rows.to_vec()))).l2_normalize_rows()
    }
}

/// Weighted average of pixel embeddings. `weights` has one row of `P`
/// pixel weights per mask, grouped per sample by `slots`; `pixels` holds
/// `P` rows per sample.
pub fn pool<'t, F: Real>(pixels: Var<'t, F>, weights: Var<'t, F>, slots: &[usize]) -> Var<'t, F> {
    let p = weights.cols();
    let tape = pixels.tape();
    let mut parts = Vec::new();
    let mut off = 0;
    for (b, &s) in slots.iter().enumerate() {
        if s > 0 {
            let w = weights.slice_rows(off, s);
            let norm = w.sum_cols().add_scalar(F::c(1e-6)).recip();
            parts.push(w.matmul(pixels.slice_rows(b * p, p)).mul_col(norm));
        }
        off += s;
    }
    if parts.is_empty() {
        tape.constant(Matrix::zeros(0, pixels.cols()))
    } else {
        tape.concat_rows(&parts)
    }
}

/// `x / tau` for a `1 x 1` temperature.
fn over_tau<'t, F: Real>(x: Var<'t, F>, tau: Var<'t, F>) -> Var<'t, F> {
    let ones = x.tape().constant(Matrix::filled(x.rows(), 1, F::one()));
    x.mul_col(ones.matmul(tau.recip()))
}

/// One direction of the intra-sample loss: for every row with positives,
/// the mean over its positives of `-log(exp(z_pos) / sum exp(z))`.
fn directional<'t, F: Real>(z: Var<'t, F>, positives: &[Vec<usize>], strict: bool) -> Result<Option<Var<'t, F>>> {
    let (n, m) = z.shape();
    let mut picks = Vec::new();
    let mut weights = Vec::new();
    let mut lse_picks = Vec::new();
    let mut mask = Matrix::zeros(n, m);
    let zv = z.to_matrix();
    for (i, pos) in positives.iter().enumerate() {
        if pos.is_empty() {
            log::debug!("row {i} has no positives; skipped");
            continue;
        }
        let mut reference = None;
        if strict {
            let neg = (0..m).filter(|j| !pos.contains(j));
            let Some(k) = neg.max_by(|&a, &b| zv.get(i, a).f64().total_cmp(&zv.get(i, b).f64())) else {
                return input(format!("entity {i} has no negatives"));
            };
            for &j in pos {
                mask.set(i, j, F::c(MASKED));
            }
            reference = Some(k);
        }
        for &j in pos {
            picks.push((i, j));
            weights.push(F::one() / F::c(pos.len() as f64));
            if let Some(k) = reference {
                lse_picks.push((i, k));
            }
        }
    }
    if picks.is_empty() {
        return Ok(None);
    }
    let tape = z.tape();
    let w = tape.constant(Matrix::from_vec(weights.len(), 1, weights));
    let term = if strict {
        // -z_pos + logsumexp over negatives; logsumexp(x) = x_k - log_softmax(x)_k
        let masked = z.add_const(&mask);
        let lse = masked.pick(Rc::new(lse_picks.clone())).sub(masked.log_softmax_rows().pick(Rc::new(lse_picks)));
        lse.sub(z.pick(Rc::new(picks)))
    } else {
        z.log_softmax_rows().pick(Rc::new(picks)).neg()
    };
    Ok(Some(term.mul(w).sum()))
}

/// Intra-sample loss. `mask_pos[i]` lists the words aligned with mask `i`;
/// the word-to-mask positives are its inverse. Denominators include the
/// positive unless `strict`, in which case they hold only negatives and a
/// row without negatives is an error.
pub fn intra_loss<'t, F: Real>(
    m: Var<'t, F>,
    s: Var<'t, F>,
    mask_pos: &[Vec<usize>],
    tau: Var<'t, F>,
    strict: bool,
) -> Result<Var<'t, F>> {
    if m.rows() == 0 || s.rows() == 0 {
        return input("intra loss needs at least one mask and one word");
    }
    assert_eq!(mask_pos.len(), m.rows(), "one positive list per mask");
    let mut word_pos = vec![Vec::new(); s.rows()];
    for (i, ws) in mask_pos.iter().enumerate() {
        for &j in ws {
            word_pos[j].push(i);
        }
    }
    let z = over_tau(m.matmul_t(s), tau);
    let a = directional(z, mask_pos, strict)?;
    let b = directional(z.transpose(), &word_pos, strict)?;
    Ok(match (a, b) {
        (Some(a), Some(b)) => a.add(b),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => m.tape().scalar(F::zero()),
    })
}

/// `g(m, s) = (1 / L_w) sum_j sum_i rho_ij <m_i, s_j>` with `rho` a softmax
/// over masks.
pub fn global_match<'t, F: Real>(m: Var<'t, F>, s: Var<'t, F>) -> Var<'t, F> {
    let a = s.matmul_t(m);
    let rho = a.softmax_rows();
    rho.mul(a).sum().scale(F::one() / F::c(s.rows() as f64))
}

/// Symmetric InfoNCE over a `B x B` score matrix with positives on the
/// diagonal; zero for `B < 2`.
pub fn inter_loss<'t, F: Real>(g: Var<'t, F>, tau: Var<'t, F>) -> Var<'t, F> {
    let b = g.rows();
    assert_eq!(g.cols(), b, "square score matrix");
    if b < 2 {
        log::debug!("inter-sample loss needs two samples; returning 0");
        return g.tape().scalar(F::zero());
    }
    let diag = Rc::new((0..b).map(|i| (i, i)).collect::<Vec<_>>());
    let z = over_tau(g, tau);
    let rows = z.log_softmax_rows().pick(diag.clone()).mean().neg();
    let cols = z.transpose().log_softmax_rows().pick(diag).mean().neg();
    rows.add(cols)
}

/// Score matrix `G[a][b] = g(m_a, s_b)`.
pub fn score_matrix<'t, F: Real>(ms: &[Var<'t, F>], ss: &[Var<'t, F>]) -> Var<'t, F> {
    let tape = ms[0].tape();
    let entries: Vec<Var<'t, F>> = ms.iter().flat_map(|&m| ss.iter().map(move |&s| global_match(m, s))).collect();
    tape.concat_cols(&entries).reshape(ms.len(), ss.len())
}

/// `(L_MEC, L_intra, L_inter)`.
pub fn mecl_loss<'t, F: Real>(intra: Var<'t, F>, inter: Var<'t, F>) -> (Var<'t, F>, Var<'t, F>, Var<'t, F>) {
    (intra.add(inter), intra, inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, LossFn};
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Matrix<f64> {
        let mut m = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        for r in 0..n {
            let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            m.row_mut(r).iter_mut().for_each(|v| *v /= norm);
        }
        m
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Pair-enumeration form of the intra loss.
    pub(crate) fn intra_oracle(m: &Matrix<f64>, s: &Matrix<f64>, pos: &[Vec<usize>], tau: f64, strict: bool) -> f64 {
        let mut total = 0.0;
        for (i, ps) in pos.iter().enumerate() {
            for &j in ps {
                let num = (dot(m.row(i), s.row(j)) / tau).exp();
                let den: f64 = (0..s.rows())
                    .filter(|k| !strict || !ps.contains(k))
                    .map(|k| (dot(m.row(i), s.row(k)) / tau).exp())
                    .sum();
                total -= (num / den).ln() / ps.len() as f64;
            }
        }
        for j in 0..s.rows() {
            let qs: Vec<usize> = (0..m.rows()).filter(|&i| pos[i].contains(&j)).collect();
            for &i in &qs {
                let num = (dot(s.row(j), m.row(i)) / tau).exp();
                let den: f64 = (0..m.rows())
                    .filter(|k| !strict || !qs.contains(k))
                    .map(|k| (dot(s.row(j), m.row(k)) / tau).exp())
                    .sum();
                total -= (num / den).ln() / qs.len() as f64;
            }
        }
        total
    }

    fn run_intra(m: &Matrix<f64>, s: &Matrix<f64>, pos: &[Vec<usize>], tau: f64, strict: bool) -> Result<f64> {
        let tape = Tape::new();
        let v = intra_loss(tape.constant(m.clone()), tape.constant(s.clone()), pos, tape.scalar(tau), strict)?;
        Ok(v.item())
    }

    #[test]
    fn single_identical_pair_is_zero() {
        let m = Matrix::from_f64(1, 2, &[0.6, 0.8]);
        assert_eq!(run_intra(&m, &m, &[vec![0]], TAU_INIT, false).unwrap(), 0.0);
        assert!(run_intra(&m, &m, &[vec![0]], TAU_INIT, true).is_err());
    }

    #[test]
    fn intra_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Matrix::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = Matrix::from_f64(2, 2, &[0.8, 0.6, -0.6, 0.8]);
        let pos = [vec![0], vec![1]];
        for strict in [false, true] {
            let v = run_intra(&m, &s, &pos, 0.5, strict).unwrap();
            assert!((v - intra_oracle(&m, &s, &pos, 0.5, strict)).abs() < 1e-9);
        }
        for _ in 0..20 {
            let m = unit_rows(&mut rng, 3, 5);
            let s = unit_rows(&mut rng, 6, 5);
            let pos = [vec![0, 1], vec![2, 3], vec![4, 5]];
            for strict in [false, true] {
                let v = run_intra(&m, &s, &pos, 0.1, strict).unwrap();
                let o = intra_oracle(&m, &s, &pos, 0.1, strict);
                assert!((v - o).abs() < 1e-9 * o.abs().max(1.0), "{v} vs {o}");
            }
        }
    }

    #[test]
    fn lower_tau_lowers_separated_loss() {
        let m = Matrix::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let s = Matrix::from_f64(2, 2, &[0.9, 0.435_889_894_354_067_4, 0.2, 0.979_795_897_113_271_2]);
        let pos = [vec![0], vec![1]];
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let tau = 1.0 - i as f64 * 0.049;
            let v = run_intra(&m, &s, &pos, tau, false).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn skips_entities_without_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = unit_rows(&mut rng, 2, 4);
        let s = unit_rows(&mut rng, 3, 4);
        let pos = [vec![0, 1], vec![]];
        let v = run_intra(&m, &s, &pos, 0.2, false).unwrap();
        assert!((v - intra_oracle(&m, &s, &pos, 0.2, false)).abs() < 1e-9);
        assert!(v >= 0.0);
    }

    fn g_value(m: &Matrix<f64>, s: &Matrix<f64>) -> f64 {
        let tape = Tape::new();
        global_match(tape.constant(m.clone()), tape.constant(s.clone())).item()
    }

    #[test]
    fn global_match_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = unit_rows(&mut rng, 1, 4);
        let s = unit_rows(&mut rng, 1, 4);
        assert!((g_value(&m, &s) - dot(m.row(0), s.row(0))).abs() < 1e-15);
        let same = Matrix::from_f64(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let w = Matrix::from_f64(2, 2, &[0.3, 0.7, 0.3, -0.2]);
        assert!((g_value(&same, &w) - 0.3).abs() < 1e-15);
        let m = unit_rows(&mut rng, 3, 5);
        let s = unit_rows(&mut rng, 4, 5);
        let mut oracle = 0.0;
        for j in 0..4 {
            let den: f64 = (0..3).map(|k| dot(m.row(k), s.row(j)).exp()).sum();
            for i in 0..3 {
                let a = dot(m.row(i), s.row(j));
                oracle += a.exp() / den * a;
            }
        }
        oracle /= 4.0;
        assert!((g_value(&m, &s) - oracle).abs() < 1e-9);
    }

    fn inter_value(g: &Matrix<f64>, tau: f64) -> f64 {
        let tape = Tape::new();
        inter_loss(tape.constant(g.clone()), tape.scalar(tau)).item()
    }

    #[test]
    fn inter_cases() {
        let g = Matrix::from_f64(2, 2, &[10.0, -10.0, -10.0, 10.0]);
        let direct = -2.0 * (10f64.exp() / (10f64.exp() + (-10f64).exp())).ln();
        assert!((inter_value(&g, 1.0) - direct).abs() < 1e-6 * direct);
        assert!((direct - 4.1e-9).abs() < 1e-10);
        for b in 2..5 {
            let c = Matrix::filled(b, b, 0.37);
            assert!((inter_value(&c, 0.3) - 2.0 * (b as f64).ln()).abs() < 1e-12);
        }
        assert_eq!(inter_value(&Matrix::filled(1, 1, 3.0), 1.0), 0.0);
    }

    #[test]
    fn duplicated_batch_equals_constant_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = unit_rows(&mut rng, 2, 4);
        let s = unit_rows(&mut rng, 4, 4);
        let tape = Tape::new();
        let (mv, sv) = (tape.constant(m), tape.constant(s));
        let g = score_matrix(&[mv, mv, mv], &[sv, sv, sv]);
        let v = inter_loss(g, tape.scalar(0.07)).item();
        assert!((v - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lowering_a_negative_never_raises_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = unit_rows(&mut rng, 2, 3);
        let s = unit_rows(&mut rng, 2, 3);
        let pos = [vec![0], vec![1]];
        let base = intra_oracle(&m, &s, &pos, 0.2, false);
        let tape = Tape::new();
        let z = m.matmul(&s.transpose());
        let mut zl = z.clone();
        zl.set(0, 1, z.get(0, 1) - 0.3);
        // evaluate through the tape with the similarity fixed directly
        let id = Matrix::<f64>::identity(2);
        let lowered = intra_loss(tape.constant(zl), tape.constant(id.clone()), &pos, tape.scalar(0.2), false).unwrap().item();
        let same = intra_loss(tape.constant(z), tape.constant(id), &pos, tape.scalar(0.2), false).unwrap().item();
        assert!((same - base).abs() < 1e-12);
        assert!(lowered <= same);
        let g = Matrix::from_f64(2, 2, &[0.5, 0.2, 0.1, 0.4]);
        let mut gl = g.clone();
        gl.set(1, 0, -0.5);
        assert!(inter_value(&gl, 0.1) <= inter_value(&g, 0.1));
    }

    struct MeclObjective {
        ms: Vec<ParamId>,
        ss: Vec<ParamId>,
        tau: ParamId,
    }

    impl LossFn for MeclObjective {
        fn eval<'t, F: Real>(&self, ctx: &Ctx<'t, F>) -> Var<'t, F> {
            let tau = ctx.p(self.tau).clamp(F::c(TAU_MIN), F::c(TAU_MAX));
            let ms: Vec<_> = self.ms.iter().map(|&m| ctx.p(m).l2_normalize_rows()).collect();
            let ss: Vec<_> = self.ss.iter().map(|&s| ctx.p(s).l2_normalize_rows()).collect();
            let pos = [vec![0, 1], vec![2, 3]];
            let mut intra = ctx.tape.scalar(F::zero());
            for (&m, &s) in ms.iter().zip(&ss) {
                intra = intra.add(intra_loss(m, s, &pos, tau, false).unwrap());
            }
            let inter = inter_loss(score_matrix(&ms, &ss), tau);
            mecl_loss(intra, inter).0
        }
    }

    #[test]
    fn mecl_gradient_double_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::<f64>::new();
        let ms = (0..3).map(|i| ps.add(format!("m{i}"), unit_rows(&mut rng, 2, 6), false)).collect();
        let ss = (0..3).map(|i| ps.add(format!("s{i}"), unit_rows(&mut rng, 4, 6), false)).collect();
        let tau = ps.add("tau", Matrix::scalar(0.2), false);
        let obj = MeclObjective { ms, ss, tau };
        let r = gradcheck::check(&ps, &gradcheck::all_ids(&ps), 1000, 0, 1e-6, &obj);
        assert!(r.rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mecl_sums_components() {
        let tape = Tape::<f64>::new();
        let (t, a, b) = mecl_loss(tape.scalar(0.0), tape.scalar(0.0));
        assert_eq!((t.item(), a.item(), b.item()), (0.0, 0.0, 0.0));
        assert_eq!(mecl_loss(tape.scalar(1.5), tape.scalar(2.25)).0.item(), 3.75);
    }
}
