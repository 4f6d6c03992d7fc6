use super::{Color, Scene};
use crate::tensor::{Matrix, Real};

/// RGB value of each [`Color`], indexed by [`Color::index`].
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 200, 60],
    [50, 80, 230],
    [230, 220, 50],
    [150, 60, 200],
    [240, 140, 30],
    [40, 210, 210],
    [235, 235, 235],
];

pub fn palette(c: Color) -> [u8; 3] {
    PALETTE[c.index()]
}

/// Row-major interleaved RGB bytes on a black background.
pub fn render_rgb(scene: &Scene) -> Vec<u8> {
    let n = scene.canvas * scene.canvas;
    let mut out = vec![0u8; n * 3];
    for o in &scene.objects {
        let rgb = palette(o.color);
        for (i, &b) in o.mask.bits.iter().enumerate() {
            if b != 0 {
                out[i * 3..i * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    out
}

/// Image as a `[h * w, 3]` matrix scaled to `[0, 1]`.
pub fn render<F: Real>(scene: &Scene) -> Matrix<F> {
    rgb_to_matrix(&render_rgb(scene), scene.canvas * scene.canvas)
}

pub fn rgb_to_matrix<F: Real>(rgb: &[u8], pixels: usize) -> Matrix<F> {
    assert_eq!(rgb.len(), pixels * 3, "rgb buffer size");
    Matrix::from_vec(pixels, 3, rgb.iter().map(|&v| F::c(f64::from(v) / 255.0)).collect())
}
