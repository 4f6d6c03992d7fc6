//! Line-delimited JSON dataset files.
//!
//! One record per line:
//!
//! ```text
//! {"canvas": 64,
//!  "objects": [{"shape": "circle", "color": "red", "box": [x0, y0, x1, y1],
//!               "mask": {"height": 64, "width": 64, "first": 0, "counts": [...]}}],
//!  "relations": [{"subject": 0, "predicate": "left of", "object": 1}],
//!  "tokens": [2, 6, 14, ...],
//!  "entity_links": [[2, 0], [7, 1]],
//!  "center": 0}
//! ```
//!
//! Boxes are normalized to `[0, 1]`; masks are canvas-sized [`Rle`]s.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{self, CaptionSample};
use super::{Color, Object, Relation, Rle, Scene, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    pub caption: CaptionSample,
}

#[derive(Serialize, Deserialize)]
struct ObjectRecord {
    shape: Shape,
    color: Color,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    mask: Rle,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    canvas: usize,
    objects: Vec<ObjectRecord>,
    relations: Vec<Relation>,
    tokens: Vec<u32>,
    entity_links: Vec<(usize, usize)>,
    center: usize,
}

impl Sample {
    fn to_record(&self) -> Record {
        Record {
            canvas: self.scene.canvas,
            objects: self
                .scene
                .objects
                .iter()
                .map(|o| ObjectRecord { shape: o.shape, color: o.color, bbox: o.bbox, mask: o.mask.to_rle() })
                .collect(),
            relations: self.scene.relations.clone(),
            tokens: self.caption.tokens.clone(),
            entity_links: self.caption.entity_links.clone(),
            center: self.caption.center,
        }
    }

    fn from_record(r: Record) -> std::result::Result<Self, String> {
        let mut objects = Vec::with_capacity(r.objects.len());
        for (i, o) in r.objects.into_iter().enumerate() {
            let mask = o.mask.decode().map_err(|e| format!("object {i}: {e}"))?;
            if (mask.height, mask.width) != (r.canvas, r.canvas) {
                return Err(format!("object {i}: mask is not canvas-sized"));
            }
            objects.push(Object { shape: o.shape, color: o.color, bbox: o.bbox, mask });
        }
        let n = objects.len();
        if r.relations.iter().any(|rel| rel.subject >= n || rel.object >= n) {
            return Err("relation endpoint out of range".into());
        }
        if r.center >= n || r.entity_links.iter().any(|&(_, o)| o >= n) {
            return Err("object index out of range".into());
        }
        if r.tokens.len() > vocab::MAX_LEN || r.tokens.iter().any(|&t| t as usize >= vocab::VOCAB_SIZE) {
            return Err("tokens exceed length or vocabulary".into());
        }
        if r.entity_links.iter().any(|&(p, _)| p >= r.tokens.len()) {
            return Err("entity link position out of range".into());
        }
        Ok(Sample {
            scene: Scene { canvas: r.canvas, objects, relations: r.relations },
            caption: CaptionSample { tokens: r.tokens, entity_links: r.entity_links, center: r.center },
        })
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_record())?)
    }

    pub fn from_json_line(line: &str, line_no: usize) -> Result<Self> {
        let rec: Record =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        Sample::from_record(rec).map_err(|msg| Error::Parse { line: line_no, msg })
    }
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        w.write_all(s.to_json_line()?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file; blank lines are skipped and errors carry the
/// 1-based line number.
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Sample::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}
