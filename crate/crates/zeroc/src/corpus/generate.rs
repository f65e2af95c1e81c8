//! Scene generators: concept and relation training datasets, and the
//! zero-shot inference / transfer task sets. Every emitted label is
//! re-checked against the geometric oracles before a record is accepted.
//!
//! Each record is a pure function of (config, seed, record index): the
//! per-record generator is seeded independently, so generation order and
//! parallelism cannot change the output.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::composer::{ConceptGraph, Edge};
use crate::{Result, ZcError};

use super::archive::DatasetManifest;
use super::relations::verify_relation;
use super::shapes::{self, sample_shape};
use super::{ExampleRecord, Grid, ObjectSpec};

const MAX_ATTEMPTS: usize = 500;

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // Distinct, decorrelated stream per record.
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn pick_colors(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut colors: Vec<u8> = (1..=9).collect();
    colors.shuffle(rng);
    colors.truncate(n);
    colors
}

fn translate(spec: &ObjectSpec, dr: usize, dc: usize) -> ObjectSpec {
    let pixels: BTreeSet<_> = spec.pixels.iter().map(|&(r, c)| (r + dr, c + dc)).collect();
    ObjectSpec {
        kind: spec.kind.clone(),
        color: spec.color,
        orientation: spec.orientation,
        bbox: (spec.bbox.0 + dr, spec.bbox.1 + dc, spec.bbox.2, spec.bbox.3),
        pixels,
    }
}

fn scene_record(
    canvas: (usize, usize),
    objects: Vec<ObjectSpec>,
    masked: usize,
    label: &str,
    domain: u8,
    seed: u64,
) -> Result<ExampleRecord> {
    let mut grid = Grid::new(canvas.0, canvas.1)?;
    for o in &objects {
        grid.paint(o)?;
    }
    let masks = objects[..masked].iter().map(|o| o.pixels.clone()).collect();
    let rec = ExampleRecord {
        grid,
        masks,
        label: label.into(),
        domain,
        seed,
        objects,
    };
    rec.check_soundness()?;
    Ok(rec)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConceptDatasetConfig {
    pub name: String,
    pub canvas: (usize, usize),
    pub count: usize,
    pub kinds: Vec<String>,
    pub domain: u8,
}

impl ConceptDatasetConfig {
    pub fn hd_letter(count: usize, domain: u8) -> Self {
        ConceptDatasetConfig {
            name: "hd-letter-concept".into(),
            canvas: (16, 16),
            count,
            kinds: vec!["line".into()],
            domain,
        }
    }

    pub fn hd_concept(count: usize, domain: u8) -> Self {
        ConceptDatasetConfig {
            name: "hd-concept-concept".into(),
            canvas: (16, 16),
            count,
            kinds: vec!["Eshape".into(), "rectangle".into()],
            domain,
        }
    }
}

pub fn generate_concept_dataset(
    config: &ConceptDatasetConfig,
    seed: u64,
) -> Result<(DatasetManifest, Vec<ExampleRecord>)> {
    if config.count == 0 {
        return Err(ZcError::Generation("record count must be >= 1".into()));
    }
    if config.kinds.is_empty() {
        return Err(ZcError::Generation("no shape kinds configured".into()));
    }
    let mut records = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = record_rng(seed, i as u64);
        let kind = &config.kinds[rng.gen_range(0..config.kinds.len())];
        let color = pick_colors(1, &mut rng)[0];
        let inst = sample_shape(kind, config.canvas, color, &mut rng)?;
        records.push(scene_record(
            config.canvas,
            vec![inst.spec],
            1,
            kind,
            config.domain,
            seed ^ i as u64,
        )?);
    }
    let manifest = DatasetManifest::new(
        &config.name,
        config.domain,
        config.canvas,
        records.len(),
        config.kinds.clone(),
        seed,
    );
    Ok((manifest, records))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationDatasetConfig {
    pub name: String,
    pub canvas: (usize, usize),
    pub count: usize,
    pub relations: Vec<String>,
    pub domain: u8,
}

impl RelationDatasetConfig {
    pub fn hd_letter(count: usize, domain: u8) -> Self {
        RelationDatasetConfig {
            name: "hd-letter-relation".into(),
            canvas: (16, 16),
            count,
            relations: vec!["parallel".into(), "perp-mid".into(), "perp-edge".into()],
            domain,
        }
    }

    pub fn hd_concept(count: usize, domain: u8) -> Self {
        RelationDatasetConfig {
            name: "hd-concept-relation".into(),
            canvas: (16, 16),
            count,
            relations: vec!["inside".into(), "enclose".into(), "non-overlap".into()],
            domain,
        }
    }
}

/// Construct an ordered object pair satisfying `rel` on the canvas.
fn sample_relation_pair(
    rel: &str,
    canvas: (usize, usize),
    colors: (u8, u8),
    rng: &mut ChaCha8Rng,
) -> Result<(ObjectSpec, ObjectSpec)> {
    let (ch, cw) = canvas;
    for _ in 0..MAX_ATTEMPTS {
        let pair: Option<(ObjectSpec, ObjectSpec)> = match rel {
            "parallel" => {
                let a = sample_shape("line", canvas, colors.0, rng)?.spec;
                let b = sample_shape("line", canvas, colors.1, rng)?.spec;
                Some((a, b))
            }
            "perp-mid" | "perp-edge" => {
                // Build the touched horizontal line b, then attach a
                // vertical line a ending just above or below it.
                let lb = rng.gen_range(3..=cw.min(9));
                let la = rng.gen_range(3..=(ch - 1).min(9));
                let above = rng.gen_bool(0.5);
                let br = if above {
                    rng.gen_range(la..ch)
                } else {
                    rng.gen_range(0..ch - la)
                };
                let bc = rng.gen_range(0..=cw - lb);
                let ct = if rel == "perp-edge" {
                    *[bc, bc + lb - 1].choose(rng).unwrap()
                } else {
                    rng.gen_range(bc + 1..bc + lb - 1)
                };
                let b = shapes::line_at(br, bc, lb, true, colors.1)?;
                let a = if above {
                    shapes::line_at(br - la, ct, la, false, colors.0)?
                } else {
                    shapes::line_at(br + 1, ct, la, false, colors.0)?
                };
                Some((a, b))
            }
            "inside" | "enclose" => {
                let bh = rng.gen_range(5..=ch.min(12));
                let bw = rng.gen_range(5..=cw.min(12));
                let outer = shapes::rectangle_at(
                    rng.gen_range(0..=ch - bh),
                    rng.gen_range(0..=cw - bw),
                    bh,
                    bw,
                    colors.1,
                )?;
                // Sample the inner object inside the hollow interior.
                let interior = (bh - 2, bw - 2);
                let kind = *["rectangleSolid", "line", "randShape"].choose(rng).unwrap();
                let raw = sample_shape(kind, interior, colors.0, rng)?.spec;
                let inner = translate(&raw, outer.bbox.0 + 1, outer.bbox.1 + 1);
                if rel == "inside" {
                    Some((inner, outer))
                } else {
                    Some((outer, inner))
                }
            }
            "non-overlap" => {
                // Split the canvas at a random point and place one object
                // per diagonal quadrant.
                let rs = rng.gen_range(4..ch - 3);
                let cs = rng.gen_range(4..cw - 3);
                let kinds = ["line", "rectangleSolid", "randShape", "rectangle"];
                let ka = *kinds.choose(rng).unwrap();
                let kb = *kinds.choose(rng).unwrap();
                let a_raw = sample_shape(ka, (rs, cs), colors.0, rng);
                let b_raw = sample_shape(kb, (ch - rs - 1, cw - cs - 1), colors.1, rng);
                match (a_raw, b_raw) {
                    (Ok(a), Ok(b)) => {
                        let b = translate(&b.spec, rs + 1, cs + 1);
                        let mut a = a.spec;
                        if rng.gen_bool(0.5) {
                            // Mirror horizontally: a top-right, b bottom-left.
                            let flip = |o: &ObjectSpec, rng_w: usize| {
                                let px: BTreeSet<_> = o
                                    .pixels
                                    .iter()
                                    .map(|&(r, c)| (r, rng_w - 1 - c))
                                    .collect();
                                let bbox = ObjectSpec::tight_bbox(&px);
                                ObjectSpec { pixels: px, bbox, ..o.clone() }
                            };
                            a = flip(&a, cw);
                            let b2 = flip(&b, cw);
                            Some((a, b2))
                        } else {
                            Some((a, b))
                        }
                    }
                    _ => None,
                }
            }
            other => {
                return Err(ZcError::Vocabulary(format!("unknown relation `{other}`")))
            }
        };
        if let Some((a, b)) = pair {
            let in_bounds = a
                .pixels
                .iter()
                .chain(b.pixels.iter())
                .all(|&(r, c)| r < ch && c < cw);
            if in_bounds
                && !a.overlaps(&b)
                && verify_relation(&a, &b, rel)?
                && only_intended_relation(&a, &b, rel)?
            {
                return Ok((a, b));
            }
        }
    }
    Err(ZcError::Generation(format!(
        "could not realize relation `{rel}` on {ch}x{cw} canvas"
    )))
}

/// Reject pairs where a different vocabulary relation also holds in the
/// same ordered direction, so labels are unambiguous.
fn only_intended_relation(a: &ObjectSpec, b: &ObjectSpec, rel: &str) -> Result<bool> {
    for other in super::relations::RELATION_VOCABULARY {
        if *other != rel && verify_relation(a, b, other)? {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn generate_relation_dataset(
    config: &RelationDatasetConfig,
    seed: u64,
) -> Result<(DatasetManifest, Vec<ExampleRecord>)> {
    if config.count == 0 {
        return Err(ZcError::Generation("record count must be >= 1".into()));
    }
    if config.relations.is_empty() {
        return Err(ZcError::Generation("no relations configured".into()));
    }
    let mut records = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = record_rng(seed, i as u64);
        let rel = &config.relations[i % config.relations.len()];
        let colors = pick_colors(2, &mut rng);
        let (a, b) = sample_relation_pair(rel, config.canvas, (colors[0], colors[1]), &mut rng)?;
        records.push(scene_record(
            config.canvas,
            vec![a, b],
            2,
            rel,
            config.domain,
            seed ^ i as u64,
        )?);
    }
    let manifest = DatasetManifest::new(
        &config.name,
        config.domain,
        config.canvas,
        records.len(),
        config.relations.clone(),
        seed,
    );
    Ok((manifest, records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Detection,
    Transfer,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskConfig {
    /// "hd-letter" or "hd-concept".
    pub dataset: String,
    pub canvas: (usize, usize),
    pub count: usize,
    /// Distractor objects added to detection scenes.
    pub num_distractors: usize,
    pub domain: u8,
}

impl TaskConfig {
    pub fn hd_letter(count: usize) -> Self {
        TaskConfig {
            dataset: "hd-letter".into(),
            canvas: (16, 16),
            count,
            num_distractors: 2,
            domain: 1,
        }
    }

    pub fn hd_concept(count: usize) -> Self {
        TaskConfig {
            dataset: "hd-concept".into(),
            canvas: (16, 16),
            count,
            num_distractors: 1,
            domain: 1,
        }
    }
}

/// One zero-shot task: a scene, the ground-truth concept with its graph
/// and per-node masks, and the candidate labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferenceTask {
    pub id: usize,
    pub kind: TaskKind,
    pub label: String,
    pub candidates: Vec<String>,
    pub graph: ConceptGraph,
    pub grid: Grid,
    pub domain: u8,
    /// One mask per graph node, aligned with node order.
    pub node_masks: Vec<BTreeSet<(usize, usize)>>,
    pub distractors: Vec<ObjectSpec>,
    /// Transfer only: two further domain-1 scenes of the same concept.
    pub extra_grids: Vec<Grid>,
    /// Transfer only: one domain-2 scene per candidate, with its union mask.
    pub candidate_scenes: Vec<(String, Grid, BTreeSet<(usize, usize)>)>,
}

impl InferenceTask {
    pub fn union_mask(&self) -> BTreeSet<(usize, usize)> {
        self.node_masks.iter().flatten().copied().collect()
    }

    /// Oracle re-check of the stored graph against the stored masks.
    pub fn check_graph_consistency(&self, objects: &[ObjectSpec]) -> Result<()> {
        if objects.len() != self.graph.nodes.len() {
            return Err(ZcError::Contract("node/object count mismatch".into()));
        }
        for e in &self.graph.edges {
            if !verify_relation(&objects[e.src], &objects[e.dst], &e.label)? {
                return Err(ZcError::Contract(format!(
                    "stored edge {} -> {} `{}` fails its predicate",
                    e.src, e.dst, e.label
                )));
            }
        }
        Ok(())
    }
}

/// The candidate concepts of a dataset.
pub fn candidate_labels(dataset: &str) -> Result<Vec<String>> {
    match dataset {
        "hd-letter" => Ok(vec!["Eshape".into(), "Fshape".into(), "Ashape".into()]),
        "hd-concept" => Ok(vec!["Concept1".into(), "Concept2".into(), "Concept3".into()]),
        other => Err(ZcError::Vocabulary(format!("unknown dataset `{other}`"))),
    }
}

/// Instance-independent ground-truth graph for a hierarchical concept.
pub fn template_graph(label: &str) -> Result<ConceptGraph> {
    match label {
        "Eshape" => Ok(shapes::eshape_at(0, 0, 5, 4, 1)?.graph),
        "Fshape" => Ok(shapes::fshape_at(0, 0, 5, 4, 1)?.graph),
        "Ashape" => Ok(shapes::ashape_at(0, 0, 5, 5, 1)?.graph),
        "Concept1" | "Concept2" | "Concept3" => {
            // Nodes: Eshape, inner rectangle, outer rectangle.
            let nodes = vec!["Eshape".into(), "rectangle".into(), "rectangle".into()];
            let edges = match label {
                "Concept1" => vec![
                    Edge::new(1, 2, "inside"),
                    Edge::new(0, 1, "non-overlap"),
                    Edge::new(0, 2, "non-overlap"),
                ],
                "Concept2" => vec![
                    Edge::new(0, 2, "inside"),
                    Edge::new(1, 2, "inside"),
                    Edge::new(0, 1, "non-overlap"),
                ],
                _ => vec![
                    Edge::new(0, 1, "inside"),
                    Edge::new(1, 2, "inside"),
                    Edge::new(0, 2, "inside"),
                ],
            };
            ConceptGraph::new(nodes, edges)
        }
        other => Err(ZcError::Vocabulary(format!("unknown concept `{other}`"))),
    }
}

/// Build a placed instance of a hierarchical concept: the objects (aligned
/// with template_graph node order), their per-node masks, and the graph.
fn place_concept(
    label: &str,
    canvas: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ObjectSpec>, ConceptGraph)> {
    let (ch, cw) = canvas;
    match label {
        "Eshape" | "Fshape" | "Ashape" => {
            let color = pick_colors(1, rng)[0];
            let inst = sample_shape(label, canvas, color, rng)?;
            Ok((inst.parts, inst.graph))
        }
        "Concept1" | "Concept2" | "Concept3" => {
            for _ in 0..MAX_ATTEMPTS {
                let colors = pick_colors(3, rng);
                let got = place_hd_concept(label, (ch, cw), &colors, rng)?;
                if let Some(objects) = got {
                    let graph = template_graph(label)?;
                    // Verify every stored edge before accepting.
                    let ok = graph.edges.iter().try_fold(true, |acc, e| {
                        verify_relation(&objects[e.src], &objects[e.dst], &e.label)
                            .map(|v| acc && v)
                    })?;
                    if ok {
                        return Ok((objects, graph));
                    }
                }
            }
            Err(ZcError::Generation(format!(
                "could not place {label} on {ch}x{cw} canvas"
            )))
        }
        other => Err(ZcError::Vocabulary(format!("unknown concept `{other}`"))),
    }
}

/// One placement attempt for Concept1/2/3; returns None when the sampled
/// sizes do not fit.
fn place_hd_concept(
    label: &str,
    canvas: (usize, usize),
    colors: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<ObjectSpec>>> {
    let (ch, cw) = canvas;
    let eh = 5;
    let ew = 4;
    match label {
        "Concept3" => {
            // E inside rect1 inside rect2.
            let h1 = eh + 2 + rng.gen_range(0..=1);
            let w1 = ew + 2 + rng.gen_range(0..=1);
            let h2 = h1 + 2 + rng.gen_range(0..=1);
            let w2 = w1 + 2 + rng.gen_range(0..=1);
            if h2 > ch || w2 > cw {
                return Ok(None);
            }
            let r2 = rng.gen_range(0..=ch - h2);
            let c2 = rng.gen_range(0..=cw - w2);
            let r1 = r2 + 1 + rng.gen_range(0..=h2 - h1 - 2);
            let c1 = c2 + 1 + rng.gen_range(0..=w2 - w1 - 2);
            let re = r1 + 1 + rng.gen_range(0..=h1 - eh - 2);
            let ce = c1 + 1 + rng.gen_range(0..=w1 - ew - 2);
            let e = shapes::eshape_at(re, ce, eh, ew, colors[0])?;
            let rect1 = shapes::rectangle_at(r1, c1, h1, w1, colors[1])?;
            let rect2 = shapes::rectangle_at(r2, c2, h2, w2, colors[2])?;
            Ok(Some(vec![e.spec, rect1, rect2]))
        }
        "Concept2" => {
            // E and rect1 diagonally inside rect2's hollow.
            let h1 = rng.gen_range(3..=4);
            let w1 = rng.gen_range(3..=4);
            let h2 = eh + h1 + 2 + rng.gen_range(0..=1);
            let w2 = ew + w1 + 2 + rng.gen_range(0..=1);
            if h2 > ch || w2 > cw {
                return Ok(None);
            }
            let r2 = rng.gen_range(0..=ch - h2);
            let c2 = rng.gen_range(0..=cw - w2);
            // E top-left of the interior, rect1 bottom-right (or mirrored).
            let mirror = rng.gen_bool(0.5);
            let (re, ce) = (r2 + 1, if mirror { c2 + w2 - 1 - ew } else { c2 + 1 });
            let (r1, c1) = (
                r2 + h2 - 1 - h1,
                if mirror { c2 + 1 } else { c2 + w2 - 1 - w1 },
            );
            let e = shapes::eshape_at(re, ce, eh, ew, colors[0])?;
            let rect1 = shapes::rectangle_at(r1, c1, h1, w1, colors[1])?;
            let rect2 = shapes::rectangle_at(r2, c2, h2, w2, colors[2])?;
            Ok(Some(vec![e.spec, rect1, rect2]))
        }
        "Concept1" => {
            // rect1 inside rect2; E diagonally clear of rect2.
            let h1 = rng.gen_range(3..=4);
            let w1 = rng.gen_range(3..=4);
            let h2 = h1 + 2 + rng.gen_range(0..=1);
            let w2 = w1 + 2 + rng.gen_range(0..=1);
            if h2 + eh > ch || w2 + ew > cw {
                return Ok(None);
            }
            let mirror = rng.gen_bool(0.5);
            let r2 = rng.gen_range(0..=ch - h2 - eh);
            let c2 = if mirror {
                rng.gen_range(ew..=cw - w2)
            } else {
                rng.gen_range(0..=cw - w2 - ew)
            };
            let r1 = r2 + 1 + rng.gen_range(0..=h2 - h1 - 2);
            let c1 = c2 + 1 + rng.gen_range(0..=w2 - w1 - 2);
            let re = rng.gen_range(r2 + h2..=ch - eh);
            let ce = if mirror {
                rng.gen_range(0..=c2 - ew)
            } else {
                rng.gen_range(c2 + w2..=cw - ew)
            };
            let e = shapes::eshape_at(re, ce, eh, ew, colors[0])?;
            let rect1 = shapes::rectangle_at(r1, c1, h1, w1, colors[1])?;
            let rect2 = shapes::rectangle_at(r2, c2, h2, w2, colors[2])?;
            Ok(Some(vec![e.spec, rect1, rect2]))
        }
        _ => unreachable!(),
    }
}

fn place_distractors(
    n: usize,
    canvas: (usize, usize),
    occupied: &[ObjectSpec],
    used_colors: &[u8],
    dataset: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ObjectSpec>> {
    let kinds: &[&str] = if dataset == "hd-letter" {
        &["Tshape", "rectangle"]
    } else {
        &["Tshape", "line", "rectangleSolid"]
    };
    let mut placed: Vec<ObjectSpec> = Vec::new();
    let mut palette: Vec<u8> = (1..=9).filter(|c| !used_colors.contains(c)).collect();
    palette.shuffle(rng);
    for i in 0..n {
        let color = palette[i % palette.len()];
        let mut ok = false;
        for _ in 0..MAX_ATTEMPTS {
            let kind = *kinds.choose(rng).unwrap();
            let cand = sample_shape(kind, canvas, color, rng)?.spec;
            let clear = occupied
                .iter()
                .chain(placed.iter())
                .all(|o| !cand.overlaps(o) && !cand.touches(o));
            if clear {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(ZcError::Generation(
                "could not place distractor without contact".into(),
            ));
        }
    }
    Ok(placed)
}

pub fn generate_inference_tasks(
    kind: TaskKind,
    config: &TaskConfig,
    seed: u64,
) -> Result<Vec<InferenceTask>> {
    if config.count == 0 {
        return Err(ZcError::Generation("task count must be >= 1".into()));
    }
    let candidates = candidate_labels(&config.dataset)?;
    let mut tasks = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = record_rng(seed.wrapping_add(kind as u64), i as u64);
        let label = candidates[i % candidates.len()].clone();
        let (objects, graph) = place_concept(&label, config.canvas, &mut rng)?;
        let used: Vec<u8> = objects.iter().map(|o| o.color).collect();
        let distractors = if kind == TaskKind::Detection {
            place_distractors(
                config.num_distractors,
                config.canvas,
                &objects,
                &used,
                &config.dataset,
                &mut rng,
            )?
        } else {
            Vec::new()
        };
        let mut grid = Grid::new(config.canvas.0, config.canvas.1)?;
        for o in objects.iter().chain(distractors.iter()) {
            grid.paint(o)?;
        }
        let node_masks: Vec<_> = objects.iter().map(|o| o.pixels.clone()).collect();

        let mut task = InferenceTask {
            id: i,
            kind,
            label: label.clone(),
            candidates: candidates.clone(),
            graph,
            grid,
            domain: config.domain,
            node_masks,
            distractors,
            extra_grids: Vec::new(),
            candidate_scenes: Vec::new(),
        };
        task.check_graph_consistency(&objects)?;

        if kind == TaskKind::Transfer {
            for _ in 0..2 {
                let (objs, _) = place_concept(&label, config.canvas, &mut rng)?;
                let mut g = Grid::new(config.canvas.0, config.canvas.1)?;
                for o in &objs {
                    g.paint(o)?;
                }
                task.extra_grids.push(g);
            }
            for cand in &candidates {
                let (objs, _) = place_concept(cand, config.canvas, &mut rng)?;
                let mut g = Grid::new(config.canvas.0, config.canvas.1)?;
                let mut mask = BTreeSet::new();
                for o in &objs {
                    g.paint(o)?;
                    mask.extend(o.pixels.iter().copied());
                }
                task.candidate_scenes.push((cand.clone(), g, mask));
            }
        }
        tasks.push(task);
    }
    Ok(tasks)
}
