use serde::{Deserialize, Serialize};

use crate::{Result, ZcError};

/// Relations whose two arguments are interchangeable. `perp-edge` is the
/// endpoint-to-endpoint contact case, which has no preferred direction.
const SYMMETRIC_RELATIONS: &[&str] = &["parallel", "non-overlap", "perp-edge"];

pub fn is_symmetric_relation(label: &str) -> bool {
    SYMMETRIC_RELATIONS.contains(&label)
}

/// `enclose(a,b)` is `inside(b,a)`; canonical forms keep only `inside`.
pub fn inverse_relation(label: &str) -> Option<&'static str> {
    match label {
        "enclose" => Some("inside"),
        _ => None,
    }
}

/// A directed labeled edge `(src, dst, relation)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub label: String,
}

impl Edge {
    pub fn new(src: usize, dst: usize, label: &str) -> Self {
        Edge { src, dst, label: label.into() }
    }
}

/// Labeled nodes (concepts) plus labeled directed edges (relations); the
/// symbolic currency of zero-shot recognition and acquisition. A node may
/// carry a nested child graph for recursive concepts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<Option<ConceptGraph>>,
}

impl ConceptGraph {
    pub fn singleton(label: impl Into<String>) -> Self {
        ConceptGraph {
            nodes: vec![label.into()],
            edges: Vec::new(),
            children: Vec::new(),
        }
    }

    pub fn new(nodes: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        let g = ConceptGraph {
            nodes,
            edges,
            children: Vec::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return Err(ZcError::Contract(format!(
                    "edge ({},{}) out of range for {n} nodes",
                    e.src, e.dst
                )));
            }
            if e.src == e.dst {
                return Err(ZcError::Contract("self-loop edge".into()));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(ZcError::Contract(format!(
                    "duplicate edge for ordered pair ({},{})",
                    e.src, e.dst
                )));
            }
        }
        if !self.children.is_empty() && self.children.len() != n {
            return Err(ZcError::Contract(
                "children list length must match node count".into(),
            ));
        }
        Ok(())
    }

    pub fn child(&self, i: usize) -> Option<&ConceptGraph> {
        self.children.get(i).and_then(|c| c.as_ref())
    }

    /// Attach a child graph to node `i`, turning it into a composite.
    pub fn with_child(mut self, i: usize, child: ConceptGraph) -> Result<ConceptGraph> {
        if i >= self.nodes.len() {
            return Err(ZcError::Contract(format!(
                "child index {i} out of range for {} nodes",
                self.nodes.len()
            )));
        }
        child.validate()?;
        if self.children.is_empty() {
            self.children = vec![None; self.nodes.len()];
        }
        self.children[i] = Some(child);
        Ok(self)
    }

    /// Canonical form: `enclose` edges flipped to `inside`, symmetric
    /// relations oriented low-index to high-index, nodes sorted by label
    /// (stable), edges remapped and sorted.
    pub fn canonicalize(&self) -> ConceptGraph {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| self.nodes[a].cmp(&self.nodes[b]).then(a.cmp(&b)));
        let mut rank = vec![0usize; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        let nodes: Vec<String> = order.iter().map(|&i| self.nodes[i].clone()).collect();
        let children: Vec<Option<ConceptGraph>> = if self.children.is_empty() {
            Vec::new()
        } else {
            order
                .iter()
                .map(|&i| self.children[i].as_ref().map(|c| c.canonicalize()))
                .collect()
        };
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| {
                let (mut src, mut dst, mut label) =
                    (rank[e.src], rank[e.dst], e.label.clone());
                if let Some(inv) = inverse_relation(&label) {
                    std::mem::swap(&mut src, &mut dst);
                    label = inv.to_string();
                }
                if is_symmetric_relation(&label) && src > dst {
                    std::mem::swap(&mut src, &mut dst);
                }
                Edge { src, dst, label }
            })
            .collect();
        edges.sort();
        edges.dedup();
        ConceptGraph {
            nodes,
            edges,
            children,
        }
    }

    /// Canonical text form — the "few bits" message of the cross-domain
    /// channel. Round-trips exactly on canonical graphs.
    pub fn to_canonical_text(&self) -> String {
        fn write(g: &ConceptGraph, indent: usize, out: &mut String) {
            let pad = "  ".repeat(indent);
            for (i, label) in g.nodes.iter().enumerate() {
                out.push_str(&format!("{pad}node {i} {label}\n"));
                if let Some(child) = g.child(i) {
                    out.push_str(&format!("{pad}begin-child {i}\n"));
                    write(child, indent + 1, out);
                    out.push_str(&format!("{pad}end-child {i}\n"));
                }
            }
            for e in &g.edges {
                out.push_str(&format!("{pad}edge {} {} {}\n", e.src, e.dst, e.label));
            }
        }
        let g = self.canonicalize();
        let mut out = String::from("concept-graph v1\n");
        write(&g, 0, &mut out);
        out
    }

    pub fn from_canonical_text(text: &str) -> Result<ConceptGraph> {
        let mut lines = text.lines().map(str::trim);
        match lines.next() {
            Some("concept-graph v1") => {}
            other => {
                return Err(ZcError::Codec(format!(
                    "bad header: {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut stack: Vec<ConceptGraph> = vec![ConceptGraph::default()];
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let top = stack.last_mut().unwrap();
            match kind {
                "node" => {
                    let idx: usize = rest
                        .first()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| ZcError::Codec(format!("bad node line: {line}")))?;
                    if idx != top.nodes.len() {
                        return Err(ZcError::Codec(format!("out-of-order node index {idx}")));
                    }
                    let label = rest
                        .get(1)
                        .ok_or_else(|| ZcError::Codec(format!("bad node line: {line}")))?;
                    top.nodes.push(label.to_string());
                }
                "edge" => {
                    let (src, dst) = match (rest.first(), rest.get(1)) {
                        (Some(a), Some(b)) => (
                            a.parse()
                                .map_err(|_| ZcError::Codec(format!("bad edge line: {line}")))?,
                            b.parse()
                                .map_err(|_| ZcError::Codec(format!("bad edge line: {line}")))?,
                        ),
                        _ => return Err(ZcError::Codec(format!("bad edge line: {line}"))),
                    };
                    let label = rest
                        .get(2)
                        .ok_or_else(|| ZcError::Codec(format!("bad edge line: {line}")))?;
                    top.edges.push(Edge {
                        src,
                        dst,
                        label: label.to_string(),
                    });
                }
                "begin-child" => stack.push(ConceptGraph::default()),
                "end-child" => {
                    let child = stack.pop().unwrap();
                    let idx: usize = rest
                        .first()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| ZcError::Codec(format!("bad end-child line: {line}")))?;
                    let top = stack.last_mut().unwrap();
                    if top.children.is_empty() {
                        top.children = vec![None; top.nodes.len()];
                    }
                    if top.children.len() < top.nodes.len() {
                        top.children.resize(top.nodes.len(), None);
                    }
                    let slot = top
                        .children
                        .get_mut(idx)
                        .ok_or_else(|| ZcError::Codec(format!("child index {idx} out of range")))?;
                    *slot = Some(child);
                }
                other => return Err(ZcError::Codec(format!("unknown line kind: {other}"))),
            }
        }
        if stack.len() != 1 {
            return Err(ZcError::Codec("unbalanced child blocks".into()));
        }
        let mut g = stack.pop().unwrap();
        if !g.children.is_empty() {
            g.children.resize(g.nodes.len(), None);
        }
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eshape_like() -> ConceptGraph {
        ConceptGraph::new(
            vec!["line".into(); 4],
            vec![
                Edge { src: 1, dst: 0, label: "perp-edge".into() },
                Edge { src: 0, dst: 2, label: "parallel".into() },
                Edge { src: 3, dst: 1, label: "perp-mid".into() },
                Edge { src: 2, dst: 3, label: "enclose".into() },
            ],
        )
        .unwrap()
    }

    #[test]
    fn codec_round_trips_canonical_form() {
        let g = eshape_like();
        let text = g.to_canonical_text();
        let back = ConceptGraph::from_canonical_text(&text).unwrap();
        assert_eq!(back.to_canonical_text(), text);
    }

    #[test]
    fn canonicalize_orients_symmetric_and_inverse_edges() {
        let g = eshape_like();
        let c = g.canonicalize();
        for e in &c.edges {
            assert_ne!(e.label, "enclose");
            if is_symmetric_relation(&e.label) {
                assert!(e.src < e.dst);
            }
        }
    }

    #[test]
    fn nested_children_round_trip() {
        let mut g = ConceptGraph::singleton("rectangle");
        g.children = vec![Some(ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![Edge { src: 0, dst: 1, label: "parallel".into() }],
        )
        .unwrap())];
        let text = g.to_canonical_text();
        let back = ConceptGraph::from_canonical_text(&text).unwrap();
        assert_eq!(back.to_canonical_text(), text);
        assert!(back.child(0).is_some());
    }

    #[test]
    fn validate_rejects_bad_edges() {
        assert!(ConceptGraph::new(
            vec!["line".into()],
            vec![Edge { src: 0, dst: 1, label: "parallel".into() }],
        )
        .is_err());
        assert!(ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![
                Edge { src: 0, dst: 1, label: "parallel".into() },
                Edge { src: 0, dst: 1, label: "perp-mid".into() },
            ],
        )
        .is_err());
    }
}
