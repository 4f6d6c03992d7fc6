//! Synthetic shape world: scenes with ground-truth scene graphs, templated
//! captions and exact mask-word alignment.

mod io;
mod parse;
pub mod render;
mod rle;
pub mod vocab;

pub use io::{read_dataset, write_dataset, Sample};
pub use parse::{parse_image, ParsedObject};
pub use render::{render, render_rgb, PALETTE};
pub use rle::Rle;
pub use vocab::{caption_from_graph, parse_caption, CaptionSample, ParsedCaption};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::White,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::White => "white",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Predicate {
    #[serde(rename = "left of")]
    LeftOf,
    #[serde(rename = "right of")]
    RightOf,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
    #[serde(rename = "near")]
    Near,
}

impl Predicate {
    pub const ALL: [Predicate; 5] =
        [Predicate::LeftOf, Predicate::RightOf, Predicate::Above, Predicate::Below, Predicate::Near];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn inverse(self) -> Self {
        match self {
            Predicate::LeftOf => Predicate::RightOf,
            Predicate::RightOf => Predicate::LeftOf,
            Predicate::Above => Predicate::Below,
            Predicate::Below => Predicate::Above,
            Predicate::Near => Predicate::Near,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::LeftOf => "left of",
            Predicate::RightOf => "right of",
            Predicate::Above => "above",
            Predicate::Below => "below",
            Predicate::Near => "near",
        }
    }

    /// Whether the predicate holds for subject box `s` and object box `o`
    /// (normalized `[x0, y0, x1, y1]`), with `near` measured in normalized
    /// center distance.
    pub fn holds(self, s: &[f64; 4], o: &[f64; 4], near: f64) -> bool {
        let (sx, sy) = box_center(s);
        let (ox, oy) = box_center(o);
        match self {
            Predicate::LeftOf => sx < ox,
            Predicate::RightOf => sx > ox,
            Predicate::Above => sy < oy,
            Predicate::Below => sy > oy,
            Predicate::Near => ((sx - ox).powi(2) + (sy - oy).powi(2)).sqrt() < near,
        }
    }
}

/// Object category id in `0..24`: `shape * 8 + color`.
pub fn category(shape: Shape, color: Color) -> usize {
    shape.index() * Color::ALL.len() + color.index()
}

pub fn category_parts(cat: usize) -> (Shape, Color) {
    (Shape::ALL[cat / Color::ALL.len()], Color::ALL[cat % Color::ALL.len()])
}

pub const NUM_CATEGORIES: usize = 24;

pub fn box_center(b: &[f64; 4]) -> (f64, f64) {
    ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)
}

pub fn box_area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union of two `[x0, y0, x1, y1]` boxes; 0 when the union
/// is empty.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Binary bitmap, row-major, values 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![0; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = u8::from(v);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!((self.height, self.width), (other.height, other.width), "mask size mismatch");
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a != 0 && b != 0);
            union += usize::from(a != 0 || b != 0);
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_rle(&self) -> Rle {
        Rle::encode(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// Normalized `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    /// Canvas-sized bitmap.
    pub mask: Mask,
}

impl Object {
    pub fn category(&self) -> usize {
        category(self.shape, self.color)
    }

    /// Box in pixels for a canvas of side `canvas`.
    pub fn pixel_box(&self, canvas: usize) -> [usize; 4] {
        let c = canvas as f64;
        [
            (self.bbox[0] * c).round() as usize,
            (self.bbox[1] * c).round() as usize,
            (self.bbox[2] * c).round() as usize,
            (self.bbox[3] * c).round() as usize,
        ]
    }

    pub fn pixel_area(&self, canvas: usize) -> usize {
        let b = self.pixel_box(canvas);
        (b[2] - b[0]) * (b[3] - b[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub canvas: usize,
    pub objects: Vec<Object>,
    pub relations: Vec<Relation>,
}

/// Knobs of the scene generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneParams {
    pub canvas: usize,
    pub main_side: (usize, usize),
    pub distractor_side: (usize, usize),
    /// Probability that a scene (with room for one) has small distractors
    /// attached to the center object.
    pub distractor_prob: f64,
    /// Normalized center distance below which `near` holds.
    pub near: f64,
    /// Probability of an extra edge between two non-center objects.
    pub extra_edge_prob: f64,
    /// Maximum number of objects a caption mentions besides the center.
    pub max_mentions: usize,
    /// Minimum pixel area of a mentioned object.
    pub min_mention_area: usize,
    pub min_gap: usize,
    pub max_attempts: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            canvas: 64,
            main_side: (10, 20),
            distractor_side: (4, 6),
            distractor_prob: 0.5,
            near: 24.0 / 64.0,
            extra_edge_prob: 0.25,
            max_mentions: 3,
            min_mention_area: 64,
            min_gap: 2,
            max_attempts: 1000,
        }
    }
}

/// Whether the pixel center `(fx, fy)`, relative to a `w x h` box, lies
/// inside `shape`.
pub fn shape_contains(shape: Shape, w: f64, h: f64, fx: f64, fy: f64) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (dx, dy) = ((fx - w / 2.0) / (w / 2.0), (fy - h / 2.0) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        // apex at the top center, base along the bottom edge
        Shape::Triangle => (fx - w / 2.0).abs() <= fy * w / (2.0 * h),
    }
}

pub fn rasterize(shape: Shape, canvas: usize, px: [usize; 4]) -> Mask {
    let mut m = Mask::new(canvas, canvas);
    let w = (px[2] - px[0]) as f64;
    let h = (px[3] - px[1]) as f64;
    for y in px[1]..px[3] {
        for x in px[0]..px[2] {
            let fx = (x - px[0]) as f64 + 0.5;
            let fy = (y - px[1]) as f64 + 0.5;
            if shape_contains(shape, w, h, fx, fy) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn boxes_clear(a: [usize; 4], b: [usize; 4], gap: usize) -> bool {
    a[2] + gap <= b[0] || b[2] + gap <= a[0] || a[3] + gap <= b[1] || b[3] + gap <= a[1]
}

fn place(
    rng: &mut ChaCha8Rng,
    p: &SceneParams,
    side: usize,
    placed: &[[usize; 4]],
) -> Result<[usize; 4]> {
    for _ in 0..p.max_attempts {
        if side > p.canvas {
            break;
        }
        let x = rng.random_range(0..=p.canvas - side);
        let y = rng.random_range(0..=p.canvas - side);
        let b = [x, y, x + side, y + side];
        if placed.iter().all(|&q| boxes_clear(b, q, p.min_gap)) {
            return Ok(b);
        }
    }
    Err(Error::Generation { attempts: p.max_attempts })
}

fn random_relation(rng: &mut ChaCha8Rng, objects: &[Object], a: usize, b: usize, near: f64) -> Relation {
    let (s, o) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
    let options: Vec<Predicate> =
        Predicate::ALL.into_iter().filter(|p| p.holds(&objects[s].bbox, &objects[o].bbox, near)).collect();
    let predicate = *options.choose(rng).expect("distinct boxes satisfy some predicate");
    Relation { subject: s, predicate, object: o }
}

/// A scene with its center object index.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene: Scene,
    pub center: usize,
}

pub fn generate_scene(seed: u64, n_objects: usize) -> Result<GeneratedScene> {
    generate_scene_with(&SceneParams::default(), seed, n_objects)
}

/// Deterministic scene generation.
///
/// Object 0 (before shuffling) is the center. It gets between one and
/// `max_mentions` large neighbours; with probability `distractor_prob` one
/// or two small distractors are also attached to it. Remaining objects are
/// unrelated to the center and only receive occasional edges among
/// themselves.
pub fn generate_scene_with(p: &SceneParams, seed: u64, n_objects: usize) -> Result<GeneratedScene> {
    if n_objects < 2 {
        return crate::error::input("a scene needs at least two objects");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_distractors = if n_objects >= 3 && rng.random_bool(p.distractor_prob) {
        rng.random_range(1..=(n_objects - 2).min(2))
    } else {
        0
    };
    let n_main = n_objects - n_distractors;
    let n_neighbors = rng.random_range(1..=(n_main - 1).min(p.max_mentions));

    let mut placed = Vec::with_capacity(n_objects);
    let mut objects = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let (lo, hi) = if i < n_main { p.main_side } else { p.distractor_side };
        let side = rng.random_range(lo..=hi);
        let b = place(&mut rng, p, side, &placed)?;
        placed.push(b);
        let shape = *Shape::ALL.choose(&mut rng).expect("non-empty");
        let color = *Color::ALL.choose(&mut rng).expect("non-empty");
        let c = p.canvas as f64;
        objects.push(Object {
            shape,
            color,
            bbox: [b[0] as f64 / c, b[1] as f64 / c, b[2] as f64 / c, b[3] as f64 / c],
            mask: rasterize(shape, p.canvas, b),
        });
    }

    let mut relations = Vec::new();
    let attached: Vec<usize> = (1..=n_neighbors).chain(n_main..n_objects).collect();
    for &j in &attached {
        relations.push(random_relation(&mut rng, &objects, 0, j, p.near));
    }
    for a in 1..n_objects {
        for b in a + 1..n_objects {
            if rng.random_bool(p.extra_edge_prob) {
                relations.push(random_relation(&mut rng, &objects, a, b, p.near));
            }
        }
    }

    // shuffle object order so the center is not always first
    let mut perm: Vec<usize> = (0..n_objects).collect();
    perm.shuffle(&mut rng);
    let mut inv = vec![0; n_objects];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let objects = perm.iter().map(|&old| objects[old].clone()).collect();
    let mut relations: Vec<Relation> = relations
        .into_iter()
        .map(|r| Relation { subject: inv[r.subject], predicate: r.predicate, object: inv[r.object] })
        .collect();
    relations.shuffle(&mut rng);
    Ok(GeneratedScene { scene: Scene { canvas: p.canvas, objects, relations }, center: inv[0] })
}

/// Relations a reference caption mentions: every relation between the center
/// and a neighbour of at least `min_mention_area` pixels, at most
/// `max_mentions`, ordered left to right by the neighbour's center.
pub fn caption_relations(scene: &Scene, center: usize, p: &SceneParams) -> Vec<usize> {
    let mut picks: Vec<(usize, usize)> = scene
        .relations
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            let other = if r.subject == center {
                r.object
            } else if r.object == center {
                r.subject
            } else {
                return None;
            };
            (scene.objects[other].pixel_area(scene.canvas) >= p.min_mention_area).then_some((i, other))
        })
        .collect();
    picks.sort_by(|a, b| order_key(scene, a.1).partial_cmp(&order_key(scene, b.1)).expect("finite"));
    picks.truncate(p.max_mentions);
    picks.into_iter().map(|(i, _)| i).collect()
}

fn order_key(scene: &Scene, i: usize) -> (f64, f64, usize) {
    let (x, y) = box_center(&scene.objects[i].bbox);
    (x, y, i)
}

/// Scene plus its reference caption.
pub fn generate_sample(p: &SceneParams, seed: u64, n_objects: usize) -> Result<Sample> {
    let g = generate_scene_with(p, seed, n_objects)?;
    let rels = caption_relations(&g.scene, g.center, p);
    let caption = caption_from_graph(&g.scene, g.center, &rels)?;
    Ok(Sample { scene: g.scene, caption })
}

/// Dataset of `n` samples; object counts are drawn uniformly from `2..=6`.
/// A scene that fails placement is retried with a derived seed.
pub fn generate_dataset(p: &SceneParams, seed: u64, n: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let n_obj = rng.random_range(2..=6);
        let mut last = None;
        for _ in 0..16 {
            match generate_sample(p, rng.random(), n_obj) {
                Ok(s) => {
                    last = Some(s);
                    break;
                }
                Err(Error::Generation { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        out.push(last.ok_or(Error::Generation { attempts: p.max_attempts })?);
    }
    Ok(out)
}

/// Deterministic train/val/test split sizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Split {
    pub val: usize,
    pub test: usize,
}

pub fn split<T: Clone>(all: &[T], s: Split) -> (Vec<T>, Vec<T>, Vec<T>) {
    assert!(s.val + s.test < all.len(), "split leaves no training data");
    let n_train = all.len() - s.val - s.test;
    (
        all[..n_train].to_vec(),
        all[n_train..n_train + s.val].to_vec(),
        all[n_train + s.val..].to_vec(),
    )
}
