//! Exact geometric predicates for the relation vocabulary. These are the
//! oracles that every generated label is verified against.

use crate::{Result, ZcError};

use super::ObjectSpec;

pub const RELATION_VOCABULARY: &[&str] = &[
    "parallel",
    "perp-mid",
    "perp-edge",
    "inside",
    "enclose",
    "non-overlap",
];

fn is_line(o: &ObjectSpec) -> bool {
    o.kind == "line"
}

fn horizontal(o: &ObjectSpec) -> bool {
    o.orientation == 0
}

/// The two extreme pixels of a line.
fn endpoints(o: &ObjectSpec) -> ((usize, usize), (usize, usize)) {
    let first = *o.pixels.iter().next().unwrap();
    let last = *o.pixels.iter().next_back().unwrap();
    (first, last)
}

/// Pairs (p in a, q in b) with p and q 4-adjacent.
fn contacts(a: &ObjectSpec, b: &ObjectSpec) -> Vec<((usize, usize), (usize, usize))> {
    let mut out = Vec::new();
    for &(r, c) in &a.pixels {
        let mut near = Vec::with_capacity(4);
        if r > 0 {
            near.push((r - 1, c));
        }
        if c > 0 {
            near.push((r, c - 1));
        }
        near.push((r + 1, c));
        near.push((r, c + 1));
        for q in near {
            if b.pixels.contains(&q) {
                out.push(((r, c), q));
            }
        }
    }
    out
}

/// Perpendicular lines with a single contact where a's endpoint touches b.
/// Returns whether the touched pixel of b is one of b's endpoints.
fn perp_contact(a: &ObjectSpec, b: &ObjectSpec) -> Option<bool> {
    if !is_line(a) || !is_line(b) || horizontal(a) == horizontal(b) {
        return None;
    }
    let cs = contacts(a, b);
    if cs.len() != 1 {
        return None;
    }
    let (p, q) = cs[0];
    let (a0, a1) = endpoints(a);
    if p != a0 && p != a1 {
        return None;
    }
    let (b0, b1) = endpoints(b);
    Some(q == b0 || q == b1)
}

fn bbox_range(o: &ObjectSpec) -> (usize, usize, usize, usize) {
    let (r, c, h, w) = o.bbox;
    (r, r + h, c, c + w) // half-open row and col ranges
}

/// True iff the geometric predicate for `rel` holds of the ordered pair.
pub fn verify_relation(a: &ObjectSpec, b: &ObjectSpec, rel: &str) -> Result<bool> {
    match rel {
        // Both lines on the same axis, occupying different rows (cols).
        "parallel" => Ok(is_line(a)
            && is_line(b)
            && horizontal(a) == horizontal(b)
            && if horizontal(a) {
                a.bbox.0 != b.bbox.0
            } else {
                a.bbox.1 != b.bbox.1
            }),
        // a's endpoint touches the interior of b, perpendicular.
        "perp-mid" => Ok(perp_contact(a, b) == Some(false)),
        // endpoint-to-endpoint perpendicular contact (symmetric).
        "perp-edge" => Ok(perp_contact(a, b) == Some(true) && perp_contact(b, a) == Some(true)),
        // a's bounding box strictly interior to the hollow of rectangle b.
        "inside" => {
            if b.kind != "rectangle" {
                return Ok(false);
            }
            let (ar0, ar1, ac0, ac1) = bbox_range(a);
            let (br0, br1, bc0, bc1) = bbox_range(b);
            Ok(ar0 > br0 && ar1 < br1 && ac0 > bc0 && ac1 < bc1)
        }
        "enclose" => verify_relation(b, a, "inside"),
        // Bounding-box projections disjoint on both axes.
        "non-overlap" => {
            let (ar0, ar1, ac0, ac1) = bbox_range(a);
            let (br0, br1, bc0, bc1) = bbox_range(b);
            Ok((ar1 <= br0 || br1 <= ar0) && (ac1 <= bc0 || bc1 <= ac0))
        }
        other => Err(ZcError::Vocabulary(format!("unknown relation `{other}`"))),
    }
}

/// All vocabulary relations holding of the ordered pair (a, b).
pub fn relations_between(a: &ObjectSpec, b: &ObjectSpec) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for rel in RELATION_VOCABULARY {
        if verify_relation(a, b, rel)? {
            out.push(rel.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::shapes::{line_at, rectangle_at, rectangle_solid_at};
    use super::*;

    #[test]
    fn parallel_requires_distinct_rows() {
        let a = line_at(2, 1, 5, true, 1).unwrap();
        let b = line_at(5, 3, 4, true, 2).unwrap();
        let c = line_at(2, 8, 3, true, 3).unwrap();
        assert!(verify_relation(&a, &b, "parallel").unwrap());
        assert!(!verify_relation(&a, &c, "parallel").unwrap()); // same row
        let v = line_at(0, 0, 4, false, 4).unwrap();
        assert!(!verify_relation(&a, &v, "parallel").unwrap()); // crossed axes
    }

    #[test]
    fn endpoint_contact_is_perp_edge_not_perp_mid() {
        // Vertical line whose top endpoint sits just under the left
        // endpoint of a horizontal line.
        let h = line_at(2, 3, 5, true, 1).unwrap();
        let v = line_at(3, 3, 4, false, 2).unwrap();
        assert!(verify_relation(&v, &h, "perp-edge").unwrap());
        assert!(!verify_relation(&v, &h, "perp-mid").unwrap());
        // Shift the vertical line into the horizontal line's interior.
        let v_mid = line_at(3, 5, 4, false, 2).unwrap();
        assert!(verify_relation(&v_mid, &h, "perp-mid").unwrap());
        assert!(!verify_relation(&v_mid, &h, "perp-edge").unwrap());
        // perp-mid is directed: the horizontal line's endpoint does not
        // touch the vertical line at all from the other side.
        assert!(!verify_relation(&h, &v_mid, "perp-mid").unwrap());
    }

    #[test]
    fn perp_edge_is_symmetric() {
        let h = line_at(2, 3, 5, true, 1).unwrap();
        let v = line_at(3, 3, 4, false, 2).unwrap();
        assert_eq!(
            verify_relation(&v, &h, "perp-edge").unwrap(),
            verify_relation(&h, &v, "perp-edge").unwrap()
        );
    }

    #[test]
    fn inside_and_enclose_are_inverse() {
        let outer = rectangle_at(1, 1, 7, 7, 1).unwrap();
        let inner = rectangle_solid_at(3, 3, 3, 3, 2).unwrap();
        assert!(verify_relation(&inner, &outer, "inside").unwrap());
        assert!(verify_relation(&outer, &inner, "enclose").unwrap());
        assert!(!verify_relation(&outer, &inner, "inside").unwrap());
        // The hollow container must actually be a hollow rectangle.
        let solid = rectangle_solid_at(1, 1, 7, 7, 3).unwrap();
        assert!(!verify_relation(&inner, &solid, "inside").unwrap());
    }

    #[test]
    fn inside_requires_strict_interior() {
        let outer = rectangle_at(1, 1, 6, 6, 1).unwrap();
        let flush = rectangle_solid_at(2, 2, 4, 4, 2).unwrap();
        assert!(verify_relation(&flush, &outer, "inside").unwrap());
        let overflowing = rectangle_solid_at(2, 2, 5, 4, 2).unwrap();
        assert!(!verify_relation(&overflowing, &outer, "inside").unwrap());
    }

    #[test]
    fn non_overlap_needs_disjoint_projections_on_both_axes() {
        let a = rectangle_solid_at(0, 0, 3, 3, 1).unwrap();
        let b = rectangle_solid_at(5, 5, 3, 3, 2).unwrap();
        assert!(verify_relation(&a, &b, "non-overlap").unwrap());
        assert!(verify_relation(&b, &a, "non-overlap").unwrap());
        let c = rectangle_solid_at(0, 5, 3, 3, 3).unwrap(); // shares rows with a
        assert!(!verify_relation(&a, &c, "non-overlap").unwrap());
    }

    #[test]
    fn unknown_relation_is_a_vocabulary_error() {
        let a = line_at(0, 0, 3, true, 1).unwrap();
        assert!(matches!(
            verify_relation(&a, &a, "orbits"),
            Err(ZcError::Vocabulary(_))
        ));
    }

    #[test]
    fn relations_between_lists_exactly_the_holding_predicates() {
        let outer = rectangle_at(0, 0, 8, 8, 1).unwrap();
        let inner = rectangle_solid_at(3, 3, 2, 2, 2).unwrap();
        assert_eq!(relations_between(&inner, &outer).unwrap(), vec!["inside"]);
        assert_eq!(relations_between(&outer, &inner).unwrap(), vec!["enclose"]);
    }
}
