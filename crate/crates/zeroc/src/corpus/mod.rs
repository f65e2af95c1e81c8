//! Procedural grid-world corpus: shape constructors with ground-truth
//! graphs, exact relation predicates, scene generators, renderers for the
//! two image domains, and the on-disk archive format.

mod archive;
mod generate;
mod relations;
mod render;
mod shapes;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Result, ZcError};

pub use archive::{read_archive, write_archive, DatasetManifest};
pub use generate::{
    candidate_labels, generate_concept_dataset, generate_inference_tasks,
    generate_relation_dataset, template_graph, ConceptDatasetConfig, InferenceTask,
    RelationDatasetConfig, TaskConfig, TaskKind,
};
pub use relations::{relations_between, verify_relation, RELATION_VOCABULARY};
pub use render::{
    domain_channels, grid_from_image, grid_from_onehot, mask_to_tensor, render_domain,
    upscale_factor,
};
pub use shapes::{
    eshape_at, line_at, parse_shape_to_lines, rectangle_at, sample_object, sample_shape,
    ShapeInstance,
    SHAPE_KINDS,
};

/// Color-id grid; 0 is background, 1..=9 are object colors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Grid> {
        if height < 8 || width < 8 {
            return Err(ZcError::Contract(format!(
                "grid must be at least 8x8, got {height}x{width}"
            )));
        }
        Ok(Grid {
            height,
            width,
            cells: vec![0; height * width],
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, color: u8) -> Result<()> {
        if color > 9 {
            return Err(ZcError::Contract(format!("color id {color} out of range")));
        }
        if row >= self.height || col >= self.width {
            return Err(ZcError::Contract(format!(
                "cell ({row},{col}) outside {}x{} grid",
                self.height, self.width
            )));
        }
        self.cells[row * self.width + col] = color;
        Ok(())
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Paint an object's pixels in its color; fails on out-of-range cells.
    pub fn paint(&mut self, obj: &ObjectSpec) -> Result<()> {
        for &(r, c) in &obj.pixels {
            self.set(r, c, obj.color)?;
        }
        Ok(())
    }

    /// Rows of digit characters; the diffable text form used in task files.
    pub fn to_rows(&self) -> Vec<String> {
        (0..self.height)
            .map(|r| {
                (0..self.width)
                    .map(|c| char::from(b'0' + self.get(r, c)))
                    .collect()
            })
            .collect()
    }

    pub fn from_rows(rows: &[String]) -> Result<Grid> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut g = Grid::new(height, width)?;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(ZcError::Codec("ragged grid rows".into()));
            }
            for (c, ch) in row.bytes().enumerate() {
                if !ch.is_ascii_digit() {
                    return Err(ZcError::Codec(format!("bad grid cell `{}`", ch as char)));
                }
                g.set(r, c, ch - b'0')?;
            }
        }
        Ok(g)
    }
}

/// One placed object: shape kind, color, bounding box, and exact pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub kind: String,
    pub color: u8,
    /// 0 = horizontal/upright, 1 = vertical; shapes other than `line`
    /// are generated upright only.
    pub orientation: u8,
    /// (row, col, height, width)
    pub bbox: (usize, usize, usize, usize),
    pub pixels: BTreeSet<(usize, usize)>,
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pixels.is_empty() {
            return Err(ZcError::Contract("object has no pixels".into()));
        }
        if self.color == 0 || self.color > 9 {
            return Err(ZcError::Contract(format!("bad color {}", self.color)));
        }
        let (r0, c0, h, w) = self.bbox;
        for &(r, c) in &self.pixels {
            if r < r0 || r >= r0 + h || c < c0 || c >= c0 + w {
                return Err(ZcError::Contract(format!(
                    "pixel ({r},{c}) outside bbox {:?}",
                    self.bbox
                )));
            }
        }
        Ok(())
    }

    /// Tight bounding box recomputed from pixels.
    pub fn tight_bbox(pixels: &BTreeSet<(usize, usize)>) -> (usize, usize, usize, usize) {
        let r0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
        let r1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
        let c0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
        let c1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
        (r0, c0, r1 - r0 + 1, c1 - c0 + 1)
    }

    pub fn overlaps(&self, other: &ObjectSpec) -> bool {
        self.pixels.intersection(&other.pixels).next().is_some()
    }

    /// True if any pixel of `self` is 4-adjacent to a pixel of `other`.
    pub fn touches(&self, other: &ObjectSpec) -> bool {
        self.pixels.iter().any(|&(r, c)| {
            let mut near = Vec::with_capacity(4);
            if r > 0 {
                near.push((r - 1, c));
            }
            if c > 0 {
                near.push((r, c - 1));
            }
            near.push((r + 1, c));
            near.push((r, c + 1));
            near.iter().any(|p| other.pixels.contains(p))
        })
    }
}

/// One supervised tuple: grid scene, object masks, and a label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub grid: Grid,
    /// One pixel set per mask: 1 for concept examples, 2 for relations.
    pub masks: Vec<BTreeSet<(usize, usize)>>,
    pub label: String,
    pub domain: u8,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
}

impl ExampleRecord {
    /// Oracle re-check: masks equal their objects' pixels exactly, the
    /// scene's non-background pixels equal the union of object pixels, and
    /// no two touching objects share a color.
    pub fn check_soundness(&self) -> Result<()> {
        for (m, o) in self.masks.iter().zip(&self.objects) {
            if m != &o.pixels {
                return Err(ZcError::Contract("mask differs from object pixels".into()));
            }
        }
        let mut union = BTreeSet::new();
        for o in &self.objects {
            o.validate()?;
            for &p in &o.pixels {
                if !union.insert(p) {
                    return Err(ZcError::Contract("objects overlap".into()));
                }
                if self.grid.get(p.0, p.1) != o.color {
                    return Err(ZcError::Contract("grid color differs from object".into()));
                }
            }
        }
        let painted: usize = self.grid.cells().iter().filter(|&&c| c != 0).count();
        if painted != union.len() {
            return Err(ZcError::Contract(
                "non-background pixels not covered by object masks".into(),
            ));
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.color == b.color && a.touches(b) {
                    return Err(ZcError::Contract(
                        "touching objects share a color".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
