//! Scene-graph data model, prompt-centered coarse subgraphs and PSGA targets.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::synthdata::{box_iou, Mask, Predicate, Scene};
use crate::tensor::{Matrix, Real};

pub const MAX_NODES: usize = 36;
pub const MAX_EDGES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    /// Object category (`shape * 8 + color`).
    pub category: usize,
    /// Normalized `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    #[serde(skip)]
    pub mask: Option<Mask>,
    #[serde(default = "yes")]
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
    #[serde(default = "yes")]
    pub valid: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl SceneGraph {
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            nodes: scene
                .objects
                .iter()
                .map(|o| GraphNode { category: o.category(), bbox: o.bbox, mask: Some(o.mask.clone()), valid: true })
                .collect(),
            edges: scene
                .relations
                .iter()
                .map(|r| GraphEdge { subject: r.subject, predicate: r.predicate, object: r.object, valid: true })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.len() > MAX_NODES {
            return input(format!("{} nodes exceed {MAX_NODES}", self.nodes.len()));
        }
        if self.edges.len() > MAX_EDGES {
            return input(format!("{} edges exceed {MAX_EDGES}", self.edges.len()));
        }
        for e in self.edges.iter().filter(|e| e.valid) {
            let ok = |i: usize| self.nodes.get(i).is_some_and(|n| n.valid);
            if !ok(e.subject) || !ok(e.object) || e.subject == e.object {
                return input(format!("edge {}-{} has an invalid endpoint", e.subject, e.object));
            }
        }
        for n in &self.nodes {
            if n.category >= crate::synthdata::NUM_CATEGORIES {
                return input(format!("category {} out of range", n.category));
            }
        }
        Ok(())
    }

    /// Pads to the fixed capacity with entries flagged invalid.
    pub fn padded(&self) -> Self {
        let mut g = self.clone();
        while g.nodes.len() < MAX_NODES {
            g.nodes.push(GraphNode { category: 0, bbox: [0.0; 4], mask: None, valid: false });
        }
        while g.edges.len() < MAX_EDGES {
            g.edges.push(GraphEdge { subject: 0, predicate: Predicate::Near, object: 0, valid: false });
        }
        g
    }

    pub fn num_valid_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.valid).count()
    }
}

/// Coarse subgraph plus its mapping back to the parent graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgraph {
    pub graph: SceneGraph,
    /// Parent node index of every subgraph node.
    pub source: Vec<usize>,
    /// Index of the prompt node inside `graph`.
    pub center: usize,
}

/// Closed 1-hop neighbourhood of `o` and every valid edge among it, in
/// parent order.
pub fn coarse_subgraph(g: &SceneGraph, o: usize) -> Result<Subgraph> {
    if o >= g.nodes.len() || !g.nodes[o].valid {
        return input(format!("prompt node {o} out of range"));
    }
    let mut keep = vec![false; g.nodes.len()];
    keep[o] = true;
    for e in g.edges.iter().filter(|e| e.valid) {
        if e.subject == o {
            keep[e.object] = true;
        }
        if e.object == o {
            keep[e.subject] = true;
        }
    }
    let source: Vec<usize> = (0..g.nodes.len()).filter(|&i| keep[i] && g.nodes[i].valid).collect();
    let mut index = vec![usize::MAX; g.nodes.len()];
    for (new, &old) in source.iter().enumerate() {
        index[old] = new;
    }
    let nodes = source.iter().map(|&i| g.nodes[i].clone()).collect();
    let edges = g
        .edges
        .iter()
        .filter(|e| e.valid && keep[e.subject] && keep[e.object])
        .map(|e| GraphEdge { subject: index[e.subject], object: index[e.object], ..*e })
        .collect();
    Ok(Subgraph { graph: SceneGraph { nodes, edges }, source, center: index[o] })
}

/// Node whose box best overlaps a prompt box (ties: lowest index).
pub fn prompt_node(g: &SceneGraph, prompt: &[f64; 4]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, n) in g.nodes.iter().enumerate().filter(|(_, n)| n.valid) {
        let iou = box_iou(&n.bbox, prompt);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((i, iou));
        }
    }
    best.filter(|&(_, iou)| iou > 0.0).map(|(i, _)| i)
}

/// Ground truth for the adaptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceTarget {
    /// `1` for nodes that appear in the caption.
    pub scores: Vec<u8>,
    /// Caption entity position of each score-1 node.
    pub assignment: Vec<Option<usize>>,
    /// Number of caption entities.
    pub k: usize,
}

impl RelevanceTarget {
    /// Dense `L x cols` 0/1 permutation matrix.
    pub fn permutation<F: Real>(&self, cols: usize) -> Matrix<F> {
        let mut m = Matrix::zeros(self.scores.len(), cols);
        for (l, a) in self.assignment.iter().enumerate() {
            if let Some(k) = a {
                m.set(l, *k, F::one());
            }
        }
        m
    }

    /// Score-1 rows ordered by caption position.
    pub fn ordered_rows(&self) -> Vec<usize> {
        let mut rows: Vec<(usize, usize)> =
            self.assignment.iter().enumerate().filter_map(|(l, a)| a.map(|k| (k, l))).collect();
        rows.sort_unstable();
        rows.into_iter().map(|(_, l)| l).collect()
    }
}

/// Node `l` scores 1 iff its best IoU with a caption entity box strictly
/// exceeds `iou_threshold`. When two nodes claim the same entity the higher
/// IoU wins (lower index on ties) and the other is demoted.
pub fn relevance_target(sub: &SceneGraph, entity_boxes: &[[f64; 4]], iou_threshold: f64) -> RelevanceTarget {
    let l = sub.nodes.len();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; l];
    for (i, n) in sub.nodes.iter().enumerate().filter(|(_, n)| n.valid) {
        for (k, b) in entity_boxes.iter().enumerate() {
            let iou = box_iou(&n.bbox, b);
            if iou > iou_threshold && best[i].is_none_or(|(_, x)| iou > x) {
                best[i] = Some((k, iou));
            }
        }
    }
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; entity_boxes.len()];
    for (i, b) in best.iter().enumerate() {
        if let Some((k, iou)) = *b {
            match owner[k] {
                Some((j, other)) if other >= iou => {
                    log::debug!("node {i} demoted: entity {k} already claimed by node {j}");
                }
                Some((j, _)) => {
                    log::debug!("node {j} demoted: entity {k} claimed by node {i}");
                    owner[k] = Some((i, iou));
                }
                None => owner[k] = Some((i, iou)),
            }
        }
    }
    let mut scores = vec![0u8; l];
    let mut assignment = vec![None; l];
    for (k, o) in owner.iter().enumerate() {
        if let Some((i, _)) = *o {
            scores[i] = 1;
            assignment[i] = Some(k);
        }
    }
    RelevanceTarget { scores, assignment, k: entity_boxes.len() }
}
