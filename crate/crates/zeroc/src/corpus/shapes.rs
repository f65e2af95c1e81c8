//! Shape constructors. Hierarchical shapes (Eshape, Fshape, Ashape,
//! Tshape, ...) are built from line parts with the lines kept adjacent but
//! pixel-disjoint, so every instance carries an exact line decomposition
//! and a ground-truth concept graph.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::composer::{ConceptGraph, Edge};
use crate::{Result, ZcError};

use super::ObjectSpec;

pub const SHAPE_KINDS: &[&str] = &[
    "line",
    "rectangle",
    "rectangleSolid",
    "Lshape",
    "Cshape",
    "Ashape",
    "Eshape",
    "Fshape",
    "Tshape",
    "randShape",
];

/// A constructed shape: the union object, its line decomposition (empty
/// for primitives), and its ground-truth concept graph.
#[derive(Clone, Debug)]
pub struct ShapeInstance {
    pub spec: ObjectSpec,
    pub parts: Vec<ObjectSpec>,
    pub graph: ConceptGraph,
}

fn object(kind: &str, color: u8, orientation: u8, pixels: BTreeSet<(usize, usize)>) -> ObjectSpec {
    let bbox = ObjectSpec::tight_bbox(&pixels);
    ObjectSpec {
        kind: kind.into(),
        color,
        orientation,
        bbox,
        pixels,
    }
}

/// Straight thickness-1 run of `len` cells starting at (row, col).
pub fn line_at(row: usize, col: usize, len: usize, horizontal: bool, color: u8) -> Result<ObjectSpec> {
    if len < 2 {
        return Err(ZcError::Generation(format!("line length {len} < 2")));
    }
    let pixels: BTreeSet<_> = (0..len)
        .map(|i| if horizontal { (row, col + i) } else { (row + i, col) })
        .collect();
    Ok(object("line", color, if horizontal { 0 } else { 1 }, pixels))
}

/// Hollow rectangle perimeter of h x w cells.
pub fn rectangle_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ObjectSpec> {
    if h < 3 || w < 3 {
        return Err(ZcError::Generation(format!(
            "hollow rectangle needs h,w >= 3, got {h}x{w}"
        )));
    }
    let mut pixels = BTreeSet::new();
    for c in 0..w {
        pixels.insert((row, col + c));
        pixels.insert((row + h - 1, col + c));
    }
    for r in 0..h {
        pixels.insert((row + r, col));
        pixels.insert((row + r, col + w - 1));
    }
    Ok(object("rectangle", color, 0, pixels))
}

/// Filled rectangle of h x w cells.
pub fn rectangle_solid_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ObjectSpec> {
    if h < 1 || w < 1 {
        return Err(ZcError::Generation("empty solid rectangle".into()));
    }
    let pixels: BTreeSet<_> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (row + r, col + c)))
        .collect();
    Ok(object("rectangleSolid", color, 0, pixels))
}

fn union_instance(
    kind: &str,
    color: u8,
    parts: Vec<ObjectSpec>,
    graph: ConceptGraph,
) -> Result<ShapeInstance> {
    let mut pixels = BTreeSet::new();
    for p in &parts {
        for &px in &p.pixels {
            if !pixels.insert(px) {
                return Err(ZcError::Generation(format!(
                    "{kind}: parts overlap at {px:?}"
                )));
            }
        }
    }
    Ok(ShapeInstance {
        spec: object(kind, color, 0, pixels),
        parts,
        graph,
    })
}

/// E: a vertical spine with three horizontal arms (top, middle at the
/// spine's center row, bottom), arms adjacent to the spine but disjoint
/// from it. Graph: 4 line nodes, 6 edges.
pub fn eshape_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ShapeInstance> {
    if h < 5 || h % 2 == 0 || w < 4 {
        return Err(ZcError::Generation(format!(
            "Eshape needs odd h >= 5 and w >= 4, got {h}x{w}"
        )));
    }
    let spine = line_at(row, col, h, false, color)?;
    let mid = row + (h - 1) / 2;
    let arms = [row, mid, row + h - 1]
        .iter()
        .map(|&r| line_at(r, col + 1, w - 1, true, color))
        .collect::<Result<Vec<_>>>()?;
    // Node order: spine, top arm, middle arm, bottom arm.
    let graph = ConceptGraph::new(
        vec!["line".into(); 4],
        vec![
            Edge::new(1, 2, "parallel"),
            Edge::new(1, 3, "parallel"),
            Edge::new(2, 3, "parallel"),
            Edge::new(1, 0, "perp-edge"),
            Edge::new(3, 0, "perp-edge"),
            Edge::new(2, 0, "perp-mid"),
        ],
    )?;
    let mut parts = vec![spine];
    parts.extend(arms);
    union_instance("Eshape", color, parts, graph)
}

/// F: spine plus top and middle arms. Graph: 3 line nodes, 3 edges.
pub fn fshape_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ShapeInstance> {
    if h < 5 || h % 2 == 0 || w < 4 {
        return Err(ZcError::Generation(format!(
            "Fshape needs odd h >= 5 and w >= 4, got {h}x{w}"
        )));
    }
    let spine = line_at(row, col, h, false, color)?;
    let top = line_at(row, col + 1, w - 1, true, color)?;
    let mid = line_at(row + (h - 1) / 2, col + 1, w - 1, true, color)?;
    let graph = ConceptGraph::new(
        vec!["line".into(); 3],
        vec![
            Edge::new(1, 2, "parallel"),
            Edge::new(1, 0, "perp-edge"),
            Edge::new(2, 0, "perp-mid"),
        ],
    )?;
    union_instance("Fshape", color, vec![spine, top, mid], graph)
}

/// A: two vertical legs joined by a top bar at their upper endpoints and a
/// crossbar touching their interiors. Graph: 4 line nodes, 6 edges.
pub fn ashape_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ShapeInstance> {
    if h < 5 || h % 2 == 0 || w < 5 {
        return Err(ZcError::Generation(format!(
            "Ashape needs odd h >= 5 and w >= 5, got {h}x{w}"
        )));
    }
    let left = line_at(row, col, h, false, color)?;
    let right = line_at(row, col + w - 1, h, false, color)?;
    let top = line_at(row, col + 1, w - 2, true, color)?;
    let cross = line_at(row + (h - 1) / 2, col + 1, w - 2, true, color)?;
    // Node order: left leg, right leg, top bar, crossbar.
    let graph = ConceptGraph::new(
        vec!["line".into(); 4],
        vec![
            Edge::new(0, 1, "parallel"),
            Edge::new(2, 3, "parallel"),
            Edge::new(2, 0, "perp-edge"),
            Edge::new(2, 1, "perp-edge"),
            Edge::new(3, 0, "perp-mid"),
            Edge::new(3, 1, "perp-mid"),
        ],
    )?;
    union_instance("Ashape", color, vec![left, right, top, cross], graph)
}

/// L: vertical stroke with a horizontal foot at its bottom endpoint.
pub fn lshape_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ShapeInstance> {
    if h < 3 || w < 3 {
        return Err(ZcError::Generation(format!("Lshape needs h,w >= 3, got {h}x{w}")));
    }
    let stroke = line_at(row, col, h, false, color)?;
    let foot = line_at(row + h - 1, col + 1, w - 1, true, color)?;
    let graph = ConceptGraph::new(
        vec!["line".into(); 2],
        vec![Edge::new(1, 0, "perp-edge")],
    )?;
    union_instance("Lshape", color, vec![stroke, foot], graph)
}

/// C: vertical stroke with horizontal arms at both endpoints.
pub fn cshape_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ShapeInstance> {
    if h < 4 || w < 3 {
        return Err(ZcError::Generation(format!("Cshape needs h >= 4, w >= 3, got {h}x{w}")));
    }
    let stroke = line_at(row, col, h, false, color)?;
    let top = line_at(row, col + 1, w - 1, true, color)?;
    let bottom = line_at(row + h - 1, col + 1, w - 1, true, color)?;
    let graph = ConceptGraph::new(
        vec!["line".into(); 3],
        vec![
            Edge::new(1, 2, "parallel"),
            Edge::new(1, 0, "perp-edge"),
            Edge::new(2, 0, "perp-edge"),
        ],
    )?;
    union_instance("Cshape", color, vec![stroke, top, bottom], graph)
}

/// T: horizontal bar with a vertical stem hanging from its interior.
pub fn tshape_at(row: usize, col: usize, h: usize, w: usize, color: u8) -> Result<ShapeInstance> {
    if h < 3 || w < 3 || w % 2 == 0 {
        return Err(ZcError::Generation(format!(
            "Tshape needs h >= 3 and odd w >= 3, got {h}x{w}"
        )));
    }
    let bar = line_at(row, col, w, true, color)?;
    let stem = line_at(row + 1, col + (w - 1) / 2, h - 1, false, color)?;
    let graph = ConceptGraph::new(
        vec!["line".into(); 2],
        vec![Edge::new(1, 0, "perp-mid")],
    )?;
    union_instance("Tshape", color, vec![bar, stem], graph)
}

/// Random 4-connected blob grown by a seeded random walk.
pub fn rand_shape(
    row: usize,
    col: usize,
    size: usize,
    bound: (usize, usize),
    color: u8,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectSpec> {
    if size < 1 {
        return Err(ZcError::Generation("randShape size must be >= 1".into()));
    }
    let mut pixels = BTreeSet::new();
    pixels.insert((row, col));
    let mut frontier = vec![(row, col)];
    while pixels.len() < size && !frontier.is_empty() {
        let (r, c) = frontier[rng.gen_range(0..frontier.len())];
        let mut opts = Vec::new();
        if r > 0 {
            opts.push((r - 1, c));
        }
        if c > 0 {
            opts.push((r, c - 1));
        }
        if r + 1 < bound.0 {
            opts.push((r + 1, c));
        }
        if c + 1 < bound.1 {
            opts.push((r, c + 1));
        }
        opts.retain(|p| !pixels.contains(p));
        if opts.is_empty() {
            frontier.retain(|&p| p != (r, c));
            continue;
        }
        let p = opts[rng.gen_range(0..opts.len())];
        pixels.insert(p);
        frontier.push(p);
    }
    if pixels.len() < size {
        return Err(ZcError::Generation("randShape walk got stuck".into()));
    }
    Ok(object("randShape", color, 0, pixels))
}

/// Sample a placed instance of `kind` fitting a canvas of the given size.
pub fn sample_shape(
    kind: &str,
    canvas: (usize, usize),
    color: u8,
    rng: &mut ChaCha8Rng,
) -> Result<ShapeInstance> {
    let (ch, cw) = canvas;
    let singleton = |spec: ObjectSpec| ShapeInstance {
        graph: ConceptGraph::singleton(&spec.kind),
        parts: Vec::new(),
        spec,
    };
    let fit = |extent: usize, cap: usize| -> Result<(usize, usize)> {
        // (placement origin bound helper) choose size in [min..max] that fits
        let lo = extent;
        if lo > cap {
            return Err(ZcError::Generation(format!(
                "canvas {ch}x{cw} too small for {kind}"
            )));
        }
        Ok((lo, cap))
    };
    let odd = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
        let k = rng.gen_range(0..=(hi - lo) / 2);
        lo + 2 * k
    };
    match kind {
        "line" => {
            let horizontal = rng.gen_bool(0.5);
            let cap = if horizontal { cw } else { ch };
            let (lo, hi) = fit(3, cap.min(9))?;
            let len = rng.gen_range(lo..=hi);
            let (rmax, cmax) = if horizontal {
                (ch - 1, cw - len)
            } else {
                (ch - len, cw - 1)
            };
            let spec = line_at(
                rng.gen_range(0..=rmax),
                rng.gen_range(0..=cmax),
                len,
                horizontal,
                color,
            )?;
            Ok(singleton(spec))
        }
        "rectangle" => {
            let (hlo, hhi) = fit(3, ch.min(9))?;
            let (wlo, whi) = fit(3, cw.min(9))?;
            let h = rng.gen_range(hlo..=hhi);
            let w = rng.gen_range(wlo..=whi);
            let spec = rectangle_at(
                rng.gen_range(0..=ch - h),
                rng.gen_range(0..=cw - w),
                h,
                w,
                color,
            )?;
            Ok(singleton(spec))
        }
        "rectangleSolid" => {
            let (hlo, hhi) = fit(2, ch.min(4))?;
            let (wlo, whi) = fit(2, cw.min(4))?;
            let h = rng.gen_range(hlo..=hhi);
            let w = rng.gen_range(wlo..=whi);
            let spec = rectangle_solid_at(
                rng.gen_range(0..=ch - h),
                rng.gen_range(0..=cw - w),
                h,
                w,
                color,
            )?;
            Ok(singleton(spec))
        }
        "randShape" => {
            let size = rng.gen_range(4..=8);
            let spec = rand_shape(
                rng.gen_range(0..ch),
                rng.gen_range(0..cw),
                size,
                canvas,
                color,
                rng,
            )?;
            Ok(singleton(spec))
        }
        "Eshape" | "Fshape" | "Ashape" => {
            let wmin = if kind == "Ashape" { 5 } else { 4 };
            let (hlo, hhi) = fit(5, ch.min(9))?;
            let (wlo, whi) = fit(wmin, cw.min(7))?;
            let h = odd(rng, hlo, hhi);
            let w = rng.gen_range(wlo..=whi);
            let r = rng.gen_range(0..=ch - h);
            let c = rng.gen_range(0..=cw - w);
            match kind {
                "Eshape" => eshape_at(r, c, h, w, color),
                "Fshape" => fshape_at(r, c, h, w, color),
                _ => ashape_at(r, c, h, w, color),
            }
        }
        "Lshape" | "Cshape" => {
            let (hlo, hhi) = fit(4, ch.min(8))?;
            let (wlo, whi) = fit(3, cw.min(7))?;
            let h = rng.gen_range(hlo..=hhi);
            let w = rng.gen_range(wlo..=whi);
            let r = rng.gen_range(0..=ch - h);
            let c = rng.gen_range(0..=cw - w);
            if kind == "Lshape" {
                lshape_at(r, c, h, w, color)
            } else {
                cshape_at(r, c, h, w, color)
            }
        }
        "Tshape" => {
            let (hlo, hhi) = fit(3, ch.min(8))?;
            let (wlo, whi) = fit(3, cw.min(7))?;
            let h = rng.gen_range(hlo..=hhi);
            let w = odd(rng, wlo, whi);
            let spec = tshape_at(
                rng.gen_range(0..=ch - h),
                rng.gen_range(0..=cw - w),
                h,
                w,
                color,
            )?;
            Ok(spec)
        }
        other => Err(ZcError::Vocabulary(format!("unknown shape kind `{other}`"))),
    }
}

/// Convenience wrapper returning only the placed object.
pub fn sample_object(
    kind: &str,
    canvas: (usize, usize),
    color: u8,
    rng: &mut ChaCha8Rng,
) -> Result<ObjectSpec> {
    Ok(sample_shape(kind, canvas, color, rng)?.spec)
}

/// Decompose a shape's pixel set into straight thickness-1 lines by
/// repeatedly extracting the longest remaining straight run (length >= 2).
pub fn parse_shape_to_lines(spec: &ObjectSpec) -> Result<Vec<ObjectSpec>> {
    let mut remaining = spec.pixels.clone();
    let mut lines = Vec::new();
    while !remaining.is_empty() {
        let mut best: Option<(usize, usize, usize, bool)> = None; // (row,col,len,horizontal)
        for &(r, c) in &remaining {
            // Only consider run starts (no predecessor along the axis).
            if c == 0 || !remaining.contains(&(r, c - 1)) {
                let mut len = 1;
                while remaining.contains(&(r, c + len)) {
                    len += 1;
                }
                if best.map_or(true, |b| len > b.2) {
                    best = Some((r, c, len, true));
                }
            }
            if r == 0 || !remaining.contains(&(r - 1, c)) {
                let mut len = 1;
                while remaining.contains(&(r + len, c)) {
                    len += 1;
                }
                if best.map_or(true, |b| len > b.2) {
                    best = Some((r, c, len, false));
                }
            }
        }
        let (r, c, len, horizontal) = best.unwrap();
        if len < 2 {
            return Err(ZcError::Parse(format!(
                "pixel ({r},{c}) is not part of any straight run"
            )));
        }
        let line = line_at(r, c, len, horizontal, spec.color)?;
        for p in &line.pixels {
            remaining.remove(p);
        }
        lines.push(line);
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn line_pixels_match_definition() {
        let l = line_at(3, 2, 5, true, 4).unwrap();
        let want: BTreeSet<_> = (2..7).map(|c| (3usize, c)).collect();
        assert_eq!(l.pixels, want);
        assert_eq!(l.bbox, (3, 2, 1, 5));
    }

    #[test]
    fn hollow_rectangle_perimeter_count() {
        let r = rectangle_at(0, 0, 4, 6, 2).unwrap();
        assert_eq!(r.pixels.len(), 2 * 4 + 2 * 6 - 4);
    }

    #[test]
    fn eshape_round_trips_through_line_parser() {
        let e = eshape_at(1, 1, 7, 5, 3).unwrap();
        assert_eq!(e.parts.len(), 4);
        assert_eq!(e.graph.nodes.len(), 4);
        assert_eq!(e.graph.edges.len(), 6);
        let lines = parse_shape_to_lines(&e.spec).unwrap();
        assert_eq!(lines.len(), 4);
        let got: BTreeSet<_> = lines.iter().flat_map(|l| l.pixels.iter().copied()).collect();
        assert_eq!(got, e.spec.pixels);
        // The parsed lines are exactly the constructor's parts.
        let mut want: Vec<_> = e.parts.iter().map(|p| p.pixels.clone()).collect();
        let mut have: Vec<_> = lines.iter().map(|l| l.pixels.clone()).collect();
        want.sort();
        have.sort();
        assert_eq!(want, have);
    }

    #[test]
    fn hierarchical_graphs_are_mutually_non_isomorphic() {
        use crate::composer::is_isomorphic;
        let e = eshape_at(0, 0, 7, 5, 1).unwrap().graph;
        let f = fshape_at(0, 0, 7, 5, 1).unwrap().graph;
        let a = ashape_at(0, 0, 7, 5, 1).unwrap().graph;
        assert!(!is_isomorphic(&e, &f).unwrap());
        assert!(!is_isomorphic(&e, &a).unwrap());
        assert!(!is_isomorphic(&f, &a).unwrap());
    }

    #[test]
    fn parts_are_disjoint_and_cover_the_union() {
        for inst in [
            eshape_at(0, 0, 5, 4, 2).unwrap(),
            fshape_at(2, 3, 7, 6, 5).unwrap(),
            ashape_at(1, 0, 9, 7, 9).unwrap(),
            tshape_at(0, 0, 4, 5, 1).unwrap(),
            lshape_at(0, 0, 4, 4, 1).unwrap(),
            cshape_at(0, 0, 5, 4, 1).unwrap(),
        ] {
            let total: usize = inst.parts.iter().map(|p| p.pixels.len()).sum();
            assert_eq!(total, inst.spec.pixels.len(), "{}", inst.spec.kind);
            inst.spec.validate().unwrap();
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        for kind in SHAPE_KINDS {
            let mut r1 = ChaCha8Rng::seed_from_u64(11);
            let mut r2 = ChaCha8Rng::seed_from_u64(11);
            let a = sample_shape(kind, (16, 16), 3, &mut r1).unwrap();
            let b = sample_shape(kind, (16, 16), 3, &mut r2).unwrap();
            assert_eq!(a.spec, b.spec, "{kind}");
            for &(r, c) in &a.spec.pixels {
                assert!(r < 16 && c < 16, "{kind} out of bounds");
            }
        }
    }

    #[test]
    fn unknown_kind_is_a_vocabulary_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_shape("blob9", (16, 16), 1, &mut rng),
            Err(ZcError::Vocabulary(_))
        ));
    }

    #[test]
    fn too_small_canvas_is_a_generation_error() {
        assert!(matches!(
            eshape_at(0, 0, 4, 4, 1),
            Err(ZcError::Generation(_))
        ));
        assert!(matches!(
            rectangle_at(0, 0, 2, 5, 1),
            Err(ZcError::Generation(_))
        ));
    }
}
