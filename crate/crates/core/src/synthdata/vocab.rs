//! Caption vocabulary, the caption template and its parser.
//!
//! Grammar (one token per word, predicates are single tokens):
//!
//! ```text
//! caption := entity "is" pred entity clause* "<eos>"?
//! clause  := ("and" | "which") "is" pred entity
//! entity  := "a" color shape
//! ```
//!
//! `and` attaches the clause to the first (center) entity, `which` to the
//! entity mentioned immediately before it.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{box_center, Color, Predicate, Scene, Shape};
use crate::error::{input, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const A: u32 = 2;
pub const IS: u32 = 3;
pub const AND: u32 = 4;
pub const WHICH: u32 = 5;
pub const COLOR_BASE: u32 = 6;
pub const SHAPE_BASE: u32 = 14;
pub const PRED_BASE: u32 = 17;
/// Number of ids in use.
pub const USED: usize = 22;
/// Declared vocabulary size; fixes the analog-bit width at 6.
pub const VOCAB_SIZE: usize = 64;
pub const MAX_LEN: usize = 20;

pub fn color_token(c: Color) -> u32 {
    COLOR_BASE + c.index() as u32
}

pub fn shape_token(s: Shape) -> u32 {
    SHAPE_BASE + s.index() as u32
}

pub fn pred_token(p: Predicate) -> u32 {
    PRED_BASE + p.index() as u32
}

pub fn is_color(t: u32) -> bool {
    (COLOR_BASE..SHAPE_BASE).contains(&t)
}

pub fn is_shape(t: u32) -> bool {
    (SHAPE_BASE..PRED_BASE).contains(&t)
}

pub fn token_color(t: u32) -> Option<Color> {
    is_color(t).then(|| Color::ALL[(t - COLOR_BASE) as usize])
}

pub fn token_shape(t: u32) -> Option<Shape> {
    is_shape(t).then(|| Shape::ALL[(t - SHAPE_BASE) as usize])
}

pub fn token_pred(t: u32) -> Option<Predicate> {
    (PRED_BASE..PRED_BASE + 5).contains(&t).then(|| Predicate::ALL[(t - PRED_BASE) as usize])
}

pub fn token_text(t: u32) -> &'static str {
    match t {
        PAD => "<pad>",
        EOS => "<eos>",
        A => "a",
        IS => "is",
        AND => "and",
        WHICH => "which",
        _ => {
            if let Some(c) = token_color(t) {
                c.name()
            } else if let Some(s) = token_shape(t) {
                s.name()
            } else if let Some(p) = token_pred(t) {
                p.name()
            } else {
                "<unk>"
            }
        }
    }
}

/// Tokens up to (excluding) the first `<eos>` or `<pad>`.
pub fn content(tokens: &[u32]) -> &[u32] {
    let end = tokens.iter().position(|&t| t == EOS || t == PAD).unwrap_or(tokens.len());
    &tokens[..end]
}

pub fn detokenize(tokens: &[u32]) -> String {
    content(tokens).iter().map(|&t| token_text(t)).collect::<Vec<_>>().join(" ")
}

/// Reference caption with its grounding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionSample {
    /// Caption tokens followed by `<eos>` when shorter than [`MAX_LEN`].
    pub tokens: Vec<u32>,
    /// `(shape token position, object index)` in caption order.
    pub entity_links: Vec<(usize, usize)>,
    pub center: usize,
}

impl CaptionSample {
    /// Token positions of entity `k`'s color and shape words.
    pub fn entity_words(&self, k: usize) -> [usize; 2] {
        let pos = self.entity_links[k].0;
        [pos - 1, pos]
    }

    pub fn num_entities(&self) -> usize {
        self.entity_links.len()
    }

    /// Tokens padded to [`MAX_LEN`].
    pub fn padded(&self) -> Vec<u32> {
        let mut t = self.tokens.clone();
        t.resize(MAX_LEN, PAD);
        t
    }
}

/// Builds the templated caption for `relations` (indices into
/// `scene.relations`), which must form a tree reachable from `center`.
///
/// Children are visited depth first, left to right by box center. A clause
/// whose parent is neither the center nor the previously mentioned entity
/// cannot be expressed and is rejected.
pub fn caption_from_graph(scene: &Scene, center: usize, relations: &[usize]) -> Result<CaptionSample> {
    if relations.is_empty() {
        return input("relation subset is empty");
    }
    if center >= scene.objects.len() {
        return input(format!("center {center} out of range"));
    }
    let mut adj: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    let mut seen_rel = BTreeSet::new();
    for &ri in relations {
        let Some(r) = scene.relations.get(ri) else {
            return input(format!("relation {ri} out of range"));
        };
        if !seen_rel.insert(ri) {
            return input(format!("relation {ri} listed twice"));
        }
        adj.entry(r.subject).or_default().push((ri, r.object));
        adj.entry(r.object).or_default().push((ri, r.subject));
    }
    let key = |i: usize| {
        let (x, y) = box_center(&scene.objects[i].bbox);
        (x, y, i)
    };
    for list in adj.values_mut() {
        list.sort_by(|a, b| key(a.1).partial_cmp(&key(b.1)).expect("finite"));
    }

    // depth-first clause order
    let mut visited = vec![false; scene.objects.len()];
    let mut used = BTreeSet::new();
    let mut clauses = Vec::new();
    visited[center] = true;
    let mut stack = vec![(center, 0usize)];
    while let Some(&mut (node, ref mut next)) = stack.last_mut() {
        let list = adj.get(&node).map(Vec::as_slice).unwrap_or(&[]);
        if *next >= list.len() {
            stack.pop();
            continue;
        }
        let (ri, other) = list[*next];
        *next += 1;
        if used.contains(&ri) {
            continue;
        }
        used.insert(ri);
        if visited[other] {
            return input("relation subset contains a cycle");
        }
        visited[other] = true;
        clauses.push((node, ri, other));
        stack.push((other, 0));
    }
    if used.len() != relations.len() {
        return input("relation subset is not connected to the center");
    }

    let mut tokens = Vec::with_capacity(MAX_LEN);
    let mut links = Vec::new();
    let mut push_entity = |tokens: &mut Vec<u32>, obj: usize| {
        let o = &scene.objects[obj];
        tokens.extend([A, color_token(o.color), shape_token(o.shape)]);
        links.push((tokens.len() - 1, obj));
    };
    push_entity(&mut tokens, center);
    let mut previous = center;
    for (i, &(parent, ri, child)) in clauses.iter().enumerate() {
        if i > 0 {
            if parent == center {
                tokens.push(AND);
            } else if parent == previous {
                tokens.push(WHICH);
            } else {
                return input("relation subset has a branch the template cannot express");
            }
        }
        let r = scene.relations[ri];
        let pred = if r.subject == parent { r.predicate } else { r.predicate.inverse() };
        tokens.extend([IS, pred_token(pred)]);
        push_entity(&mut tokens, child);
        previous = child;
    }
    if tokens.len() > MAX_LEN {
        return input(format!("caption of {} tokens exceeds {MAX_LEN}", tokens.len()));
    }
    if tokens.len() < MAX_LEN {
        tokens.push(EOS);
    }
    Ok(CaptionSample { tokens, entity_links: links, center })
}

/// Structure recovered from a caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCaption {
    /// `(color, shape, shape token position)` in order of mention.
    pub entities: Vec<(Color, Shape, usize)>,
    /// `(parent entity, predicate as seen from the parent, child entity)`.
    pub clauses: Vec<(usize, Predicate, usize)>,
}

pub fn parse_caption(tokens: &[u32]) -> Result<ParsedCaption> {
    let toks = content(tokens);
    let mut pos = 0;
    let mut entities = Vec::new();
    let mut clauses = Vec::new();
    let entity = |pos: &mut usize, entities: &mut Vec<(Color, Shape, usize)>| -> Result<usize> {
        if toks.get(*pos) != Some(&A) {
            return input(format!("expected 'a' at {pos}"));
        }
        let color = toks.get(*pos + 1).and_then(|&t| token_color(t));
        let shape = toks.get(*pos + 2).and_then(|&t| token_shape(t));
        match (color, shape) {
            (Some(c), Some(s)) => {
                entities.push((c, s, *pos + 2));
                *pos += 3;
                Ok(entities.len() - 1)
            }
            _ => input(format!("expected color and shape after {pos}")),
        }
    };
    let center = entity(&mut pos, &mut entities)?;
    let mut previous = center;
    let mut first = true;
    while pos < toks.len() {
        let parent = if first {
            center
        } else {
            match toks[pos] {
                AND => center,
                WHICH => previous,
                t => return input(format!("unexpected token {t} at {pos}")),
            }
        };
        if !first {
            pos += 1;
        }
        if toks.get(pos) != Some(&IS) {
            return input(format!("expected 'is' at {pos}"));
        }
        let Some(pred) = toks.get(pos + 1).and_then(|&t| token_pred(t)) else {
            return input(format!("expected predicate at {}", pos + 1));
        };
        pos += 2;
        let child = entity(&mut pos, &mut entities)?;
        clauses.push((parent, pred, child));
        previous = child;
        first = false;
    }
    if clauses.is_empty() {
        return input("caption has no relation");
    }
    Ok(ParsedCaption { entities, clauses })
}
