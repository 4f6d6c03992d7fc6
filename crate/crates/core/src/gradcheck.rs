//! Central-difference gradient checking against parameter sets.
//!
//! Analytic gradients are taken in the working precision `F`; the numeric
//! reference is always evaluated in `f64` on a cast copy of the parameters,
//! so single-precision checks measure the f32 backward pass rather than f32
//! cancellation noise in the difference quotient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Ctx, ParamId, ParamSet};
use crate::tensor::{Real, Tape, Var};

/// A scalar function of a parameter set, evaluable in any precision.
pub trait LossFn {
    fn eval<'t, F: Real>(&self, ctx: &Ctx<'t, F>) -> Var<'t, F>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `|g_a - g_n| / max(|g_a|, |g_n|)` over all checked coordinates.
    pub rel_error: f64,
    /// Largest coordinate-wise absolute difference.
    pub max_abs: f64,
    pub checked: usize,
    /// Euclidean norm of the numeric gradient over checked coordinates.
    pub norm: f64,
}

/// Checks up to `per_tensor` randomly chosen coordinates of each parameter in
/// `ids` (every coordinate when the tensor is smaller).
pub fn check<F: Real, L: LossFn>(
    params: &ParamSet<F>,
    ids: &[ParamId],
    per_tensor: usize,
    seed: u64,
    h: f64,
    loss: &L,
) -> GradReport {
    let tape = Tape::<F>::new();
    let ctx = Ctx::new(&tape, params, true);
    let out = loss.eval(&ctx);
    let grads = ctx.param_grads(&tape.backward(out));

    let base = params.cast::<f64>();
    let eval = |ps: &ParamSet<f64>| -> f64 {
        let tape = Tape::<f64>::new();
        let ctx = Ctx::new(&tape, ps, false);
        loss.eval(&ctx).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut diff2, mut a2, mut n2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
    let mut work = base.clone();
    for &id in ids {
        let len = base.get(id).len();
        let coords: Vec<usize> =
            if len <= per_tensor { (0..len).collect() } else { sample(&mut rng, len, per_tensor).into_vec() };
        for j in coords {
            let orig = base.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let plus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - h;
            let minus = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * h);
            let ana = grads[id.0].as_ref().map_or(0.0, |g| g.data()[j].f64());
            diff2 += (ana - num).powi(2);
            a2 += ana * ana;
            n2 += num * num;
            max_abs = max_abs.max((ana - num).abs());
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    GradReport { rel_error, max_abs, checked, norm: n2.sqrt() }
}

/// Every parameter id of a set.
pub fn all_ids<F: Real>(ps: &ParamSet<F>) -> Vec<ParamId> {
    (0..ps.len()).map(ParamId).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::tensor::Matrix;

    struct Quad(Linear);

    impl LossFn for Quad {
        fn eval<'t, F: Real>(&self, ctx: &Ctx<'t, F>) -> Var<'t, F> {
            let x = ctx.constant(Matrix::from_f64(2, 3, &[0.1, -0.4, 0.3, 0.7, 0.2, -0.5]));
            self.0.forward(ctx, x).tanh().square().sum()
        }
    }

    #[test]
    fn linear_gradients_match_in_both_precisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::<f64>::new();
        let lin = Linear::new(&mut ps, &mut rng, "l", 3, 2);
        let ids = all_ids(&ps);
        let r = check(&ps, &ids, 100, 0, 1e-6, &Quad(lin));
        assert_eq!(r.checked, 8);
        assert!(r.rel_error < 1e-8, "{r:?}");
        let r = check(&ps.cast::<f32>(), &ids, 100, 0, 1e-6, &Quad(lin));
        assert!(r.rel_error < 1e-5, "{r:?}");
    }
}
