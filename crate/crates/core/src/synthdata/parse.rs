//! Deterministic shape-world image parser.
//!
//! Stands in for a learned scene-graph generator when a request carries only
//! pixels: connected components of palette colors become objects, and each
//! component's shape and generating box are recovered by matching it against
//! rasterized templates.

use super::render::PALETTE;
use super::{shape_contains, Color, Mask, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedObject {
    pub shape: Shape,
    pub color: Color,
    /// Normalized `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    pub mask: Mask,
}

fn nearest_color(px: &[u8]) -> Option<Color> {
    if px.iter().map(|&v| u32::from(v)).sum::<u32>() < 60 {
        return None;
    }
    let dist = |c: &[u8; 3]| -> i32 { (0..3).map(|i| (i32::from(px[i]) - i32::from(c[i])).pow(2)).sum() };
    let best = (0..PALETTE.len()).min_by_key(|&i| dist(&PALETTE[i]))?;
    Some(Color::ALL[best])
}

/// Best `(shape, box)` explaining `pixels`, a component with tight box `t`.
fn fit(pixels: &[(usize, usize)], t: [usize; 4], size: usize) -> (Shape, [usize; 4], f64) {
    let tw = t[2] - t[0];
    let th = t[3] - t[1];
    let set: std::collections::HashSet<(usize, usize)> = pixels.iter().copied().collect();
    let mut best = (Shape::Square, t, -1.0);
    for shape in Shape::ALL {
        for side in tw.max(th)..=tw.max(th) + 2 {
            if side > size {
                continue;
            }
            for x0 in t[2].saturating_sub(side)..=t[0] {
                for y0 in t[3].saturating_sub(side)..=t[1] {
                    if x0 + side > size || y0 + side > size {
                        continue;
                    }
                    let mut inter = 0usize;
                    let mut count = 0usize;
                    for y in y0..y0 + side {
                        for x in x0..x0 + side {
                            let fx = (x - x0) as f64 + 0.5;
                            let fy = (y - y0) as f64 + 0.5;
                            if shape_contains(shape, side as f64, side as f64, fx, fy) {
                                count += 1;
                                inter += usize::from(set.contains(&(y, x)));
                            }
                        }
                    }
                    let iou = inter as f64 / (count + pixels.len() - inter) as f64;
                    if iou > best.2 + 1e-12 {
                        best = (shape, [x0, y0, x0 + side, y0 + side], iou);
                    }
                }
            }
        }
    }
    best
}

/// Parses a square `size x size` RGB image into objects, ordered by the
/// row-major position of each component's first pixel. Components smaller
/// than 4 pixels are ignored.
pub fn parse_image(rgb: &[u8], size: usize) -> Vec<ParsedObject> {
    assert_eq!(rgb.len(), size * size * 3, "rgb buffer size");
    let colors: Vec<Option<Color>> = (0..size * size).map(|i| nearest_color(&rgb[i * 3..i * 3 + 3])).collect();
    let mut seen = vec![false; size * size];
    let mut out = Vec::new();
    for start in 0..size * size {
        let Some(color) = colors[start] else { continue };
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut pixels = Vec::new();
        while let Some(i) = stack.pop() {
            let (y, x) = (i / size, i % size);
            pixels.push((y, x));
            let mut push = |j: usize| {
                if !seen[j] && colors[j] == Some(color) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < size {
                push(i + 1);
            }
            if y > 0 {
                push(i - size);
            }
            if y + 1 < size {
                push(i + size);
            }
        }
        if pixels.len() < 4 {
            continue;
        }
        let t = [
            pixels.iter().map(|p| p.1).min().expect("non-empty"),
            pixels.iter().map(|p| p.0).min().expect("non-empty"),
            pixels.iter().map(|p| p.1).max().expect("non-empty") + 1,
            pixels.iter().map(|p| p.0).max().expect("non-empty") + 1,
        ];
        let (shape, b, _) = fit(&pixels, t, size);
        let mut mask = Mask::new(size, size);
        for &(y, x) in &pixels {
            mask.set(y, x, true);
        }
        let s = size as f64;
        out.push(ParsedObject {
            shape,
            color,
            bbox: [b[0] as f64 / s, b[1] as f64 / s, b[2] as f64 / s, b[3] as f64 / s],
            mask,
        });
    }
    out
}
