//! Analog-bit diffusion over caption tokens.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{input, Error, Result};
use crate::synthdata::vocab::{MAX_LEN, VOCAB_SIZE};
use crate::tensor::{Matrix, Real, Var};

/// Bits per token: `ceil(log2(VOCAB_SIZE))`.
pub const BITS: usize = 6;

/// Default number of reverse steps.
pub const STEPS: usize = 50;

const _: () = assert!(1 << BITS == VOCAB_SIZE);

/// Encodes ids MSB-first as `-1`/`+1` rows, one row per token.
pub fn encode_bits<F: Real>(tokens: &[u32]) -> Result<Matrix<F>> {
    let mut m = Matrix::zeros(tokens.len(), BITS);
    for (r, &t) in tokens.iter().enumerate() {
        if t as usize >= 1 << BITS {
            return input(format!("token id {t} needs more than {BITS} bits"));
        }
        for b in 0..BITS {
            let on = (t >> (BITS - 1 - b)) & 1 == 1;
            m.set(r, b, if on { F::one() } else { -F::one() });
        }
    }
    Ok(m)
}

/// Thresholds each entry at zero and reads the row back as an id.
pub fn decode_bits<F: Real>(x: &Matrix<F>) -> Vec<u32> {
    assert_eq!(x.cols(), BITS, "bit width");
    (0..x.rows())
        .map(|r| x.row(r).iter().fold(0u32, |acc, &v| (acc << 1) | u32::from(v > F::zero())))
        .collect()
}

/// `VOCAB_SIZE x BITS` table of every id's analog bits.
pub fn bit_table<F: Real>() -> Matrix<F> {
    encode_bits(&(0..VOCAB_SIZE as u32).collect::<Vec<_>>()).expect("vocabulary fits")
}

/// Cosine signal level with offset `s = 0.008`, normalized so `gamma(0) = 1`.
pub fn gamma(t: f64) -> f64 {
    const S: f64 = 0.008;
    let f = |t: f64| ((t + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    (f(t) / f(0.0)).clamp(0.0, 1.0)
}

/// `x_t = sqrt(gamma(t)) x_0 + sqrt(1 - gamma(t)) eps`.
pub fn q_sample<F: Real>(x0: &Matrix<F>, t: f64, eps: &Matrix<F>) -> Result<Matrix<F>> {
    if !(0.0..=1.0).contains(&t) {
        return input(format!("diffusion time {t} outside [0, 1]"));
    }
    if x0.shape() != eps.shape() {
        return input("noise shape differs from x_0");
    }
    let g = gamma(t);
    let (a, b) = (F::c(g.sqrt()), F::c((1.0 - g).sqrt()));
    Ok(Matrix::from_vec(
        x0.rows(),
        x0.cols(),
        x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + b * e).collect(),
    ))
}

pub fn gaussian<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<F> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| F::c(rng.sample::<f64, _>(StandardNormal))).collect())
}

/// Mean squared error over the rows flagged in `valid`.
pub fn bit_loss<'t, F: Real>(pred: Var<'t, F>, x0: &Matrix<F>, valid: &[bool]) -> Var<'t, F> {
    assert_eq!(pred.shape(), x0.shape(), "bit loss shapes");
    assert_eq!(valid.len(), x0.rows(), "one flag per row");
    let rows = valid.iter().filter(|&&v| v).count();
    let mut w = Matrix::zeros(x0.rows(), 1);
    for (r, &v) in valid.iter().enumerate() {
        if v {
            w.set(r, 0, F::one());
        }
    }
    let tape = pred.tape();
    let diff = pred.sub(tape.constant(x0.clone())).square().mul_col(tape.constant(w)).sum();
    diff.scale(F::one() / F::c((rows.max(1) * x0.cols()) as f64))
}

/// Deterministic x0-parametrized reverse process from `x` at `t = 1` to
/// `t = 0` in `steps` uniform steps. `denoise(x_t, t)` returns `x_hat_0`.
pub fn ddim_sample<F: Real>(
    mut x: Matrix<F>,
    steps: usize,
    mut denoise: impl FnMut(&Matrix<F>, f64) -> Result<Matrix<F>>,
) -> Result<Matrix<F>> {
    if steps == 0 {
        return input("sampler needs at least one step");
    }
    for step in 0..steps {
        let t = (steps - step) as f64 / steps as f64;
        let s = (steps - step - 1) as f64 / steps as f64;
        let x0 = denoise(&x, t)?;
        if !x0.all_finite() || x0.shape() != x.shape() {
            return Err(Error::Sampling { step });
        }
        let (gt, gs) = (gamma(t), gamma(s));
        let (at, bt) = (gt.sqrt(), (1.0 - gt).sqrt().max(1e-12));
        let (as_, bs) = (F::c(gs.sqrt()), F::c((1.0 - gs).sqrt()));
        let data = x
            .data()
            .iter()
            .zip(x0.data())
            .map(|(&xt, &p)| {
                let eps = (xt - F::c(at) * p) / F::c(bt);
                as_ * p + bs * eps
            })
            .collect();
        x = Matrix::from_vec(x.rows(), x.cols(), data);
        if !x.all_finite() {
            return Err(Error::Sampling { step });
        }
    }
    Ok(x)
}

/// Samples one caption of [`MAX_LEN`] tokens from fresh noise.
pub fn sample_caption<F: Real>(
    rng: &mut impl Rng,
    steps: usize,
    denoise: impl FnMut(&Matrix<F>, f64) -> Result<Matrix<F>>,
) -> Result<Vec<u32>> {
    let x = ddim_sample(gaussian(rng, MAX_LEN, BITS), steps, denoise)?;
    Ok(decode_bits(&x))
}
