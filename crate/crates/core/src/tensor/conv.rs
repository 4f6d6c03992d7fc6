//! im2col convolution and nearest upsampling on NHWC-flattened tensors.

use serde::{Deserialize, Serialize};

use super::{gemm_into, Matrix, Real};

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn weight_rows(&self) -> usize {
        self.k * self.k * self.cin
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct UpsampleSpec {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub factor: usize,
}

/// Visits every (output row, column block, input row) triple of the im2col
/// expansion. Padding positions are skipped.
fn for_each_patch(spec: &ConvSpec, mut f: impl FnMut(usize, usize, usize)) {
    let (ho, wo) = spec.out_hw();
    for b in 0..spec.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let out_row = (b * ho + oy) * wo + ox;
                for ky in 0..spec.k {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy >= spec.h as isize {
                        continue;
                    }
                    for kx in 0..spec.k {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix >= spec.w as isize {
                            continue;
                        }
                        let in_row = (b * spec.h + iy as usize) * spec.w + ix as usize;
                        f(out_row, (ky * spec.k + kx) * spec.cin, in_row);
                    }
                }
            }
        }
    }
}

fn im2col<F: Real>(x: &Matrix<F>, spec: &ConvSpec) -> Matrix<F> {
    let (ho, wo) = spec.out_hw();
    let kc = spec.weight_rows();
    let mut cols = Matrix::zeros(spec.batch * ho * wo, kc);
    let cin = spec.cin;
    let xd = x.data();
    let cd = cols.data_mut();
    for_each_patch(spec, |o, off, i| {
        cd[o * kc + off..o * kc + off + cin].copy_from_slice(&xd[i * cin..(i + 1) * cin]);
    });
    cols
}

pub(crate) fn conv2d_forward<F: Real>(x: &Matrix<F>, w: &Matrix<F>, spec: &ConvSpec) -> Matrix<F> {
    assert_eq!(x.shape(), (spec.batch * spec.h * spec.w, spec.cin), "conv input shape");
    assert_eq!(w.shape(), (spec.weight_rows(), spec.cout), "conv weight shape");
    let cols = im2col(x, spec);
    let mut out = Matrix::zeros(cols.rows(), spec.cout);
    gemm_into(&cols, false, w, false, &mut out, F::one(), F::zero());
    out
}

pub(crate) fn conv2d_backward<F: Real>(
    x: &Matrix<F>,
    w: &Matrix<F>,
    spec: &ConvSpec,
    g: &Matrix<F>,
    need_dx: bool,
) -> (Option<Matrix<F>>, Matrix<F>) {
    let cols = im2col(x, spec);
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    gemm_into(&cols, true, g, false, &mut dw, F::one(), F::zero());
    drop(cols);
    if !need_dx {
        return (None, dw);
    }
    let kc = spec.weight_rows();
    let mut dcols = Matrix::zeros(g.rows(), kc);
    gemm_into(g, false, w, true, &mut dcols, F::one(), F::zero());
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let cin = spec.cin;
    let dd = dcols.data();
    let xd = dx.data_mut();
    for_each_patch(spec, |o, off, i| {
        for c in 0..cin {
            xd[i * cin + c] += dd[o * kc + off + c];
        }
    });
    (Some(dx), dw)
}

pub(crate) fn upsample_forward<F: Real>(x: &Matrix<F>, s: &UpsampleSpec) -> Matrix<F> {
    assert_eq!(x.shape(), (s.batch * s.h * s.w, s.c), "upsample input shape");
    let (ho, wo) = (s.h * s.factor, s.w * s.factor);
    let mut out = Matrix::zeros(s.batch * ho * wo, s.c);
    for b in 0..s.batch {
        for y in 0..ho {
            for xx in 0..wo {
                let src = (b * s.h + y / s.factor) * s.w + xx / s.factor;
                let dst = (b * ho + y) * wo + xx;
                out.row_mut(dst).copy_from_slice(x.row(src));
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<F: Real>(g: &Matrix<F>, s: &UpsampleSpec) -> Matrix<F> {
    let (ho, wo) = (s.h * s.factor, s.w * s.factor);
    let mut dx = Matrix::zeros(s.batch * s.h * s.w, s.c);
    for b in 0..s.batch {
        for y in 0..ho {
            for xx in 0..wo {
                let src = (b * s.h + y / s.factor) * s.w + xx / s.factor;
                let dst = (b * ho + y) * wo + xx;
                for (d, &v) in dx.row_mut(src).iter_mut().zip(g.row(dst)) {
                    *d += v;
                }
            }
        }
    }
    dx
}
