//! Exact graph metrics for small labeled graphs: edit distance by
//! branch-and-bound over node matchings, isomorphism by permutation
//! enumeration with signature pruning, and recursive structural equivalence.

use std::collections::HashMap;

use crate::{Result, ZcError};

use super::graph::ConceptGraph;

/// Hard size guard; all graphs in this domain have at most 4 nodes, the
/// exact algorithms stay tractable well past that.
pub const MAX_METRIC_NODES: usize = 8;

fn guard(g: &ConceptGraph) -> Result<()> {
    if g.nodes.len() > MAX_METRIC_NODES {
        return Err(ZcError::Capacity(format!(
            "graph has {} nodes, metrics support at most {MAX_METRIC_NODES}",
            g.nodes.len()
        )));
    }
    Ok(())
}

/// At most one edge per unordered node pair, described by its label and an
/// orientation relative to the (min, max) writing of the pair: 0 for
/// symmetric relations, ±1 for directed ones. Symmetric edges are stored
/// with src < dst after canonicalization, but that orientation is an
/// artifact of node numbering — folding it away here is what makes the
/// metrics invariant under node permutation.
type EdgeMap = HashMap<(usize, usize), (String, i8)>;

fn edge_map(g: &ConceptGraph) -> EdgeMap {
    let mut m = HashMap::new();
    for e in &g.edges {
        let key = (e.src.min(e.dst), e.src.max(e.dst));
        let orient = if super::is_symmetric_relation(&e.label) {
            0
        } else if e.src < e.dst {
            1
        } else {
            -1
        };
        m.insert(key, (e.label.clone(), orient));
    }
    m
}

/// The edge between `a` and `b`, oriented as if the pair were written
/// `(a, b)`.
fn oriented<'a>(m: &'a EdgeMap, a: usize, b: usize) -> Option<(&'a str, i8)> {
    m.get(&(a.min(b), a.max(b)))
        .map(|(l, o)| (l.as_str(), if a < b { *o } else { -*o }))
}

/// Cost of aligning the (possibly absent) edges of corresponding pairs.
/// Same label and orientation is free, a relabel is one operation, and
/// reversing a directed edge is a deletion plus an insertion.
fn pair_cost(e1: Option<(&str, i8)>, e2: Option<(&str, i8)>) -> usize {
    match (e1, e2) {
        (None, None) => 0,
        (Some(a), Some(b)) => {
            if a == b {
                0
            } else if a.1 != 0 && b.1 != 0 && a.1 != b.1 {
                2
            } else {
                1
            }
        }
        _ => 1,
    }
}

struct GedSearch {
    n1: usize,
    n2: usize,
    labels1: Vec<String>,
    labels2: Vec<String>,
    edges1: EdgeMap,
    edges2: EdgeMap,
    best: usize,
}

impl GedSearch {
    /// DFS over assignments of g1 node `i` to a free g2 node or deletion.
    fn dfs(&mut self, i: usize, mapping: &mut Vec<Option<usize>>, used: &mut Vec<bool>, cost: usize) {
        // Forced future node insertions/deletions give a cheap lower bound.
        let rem1 = self.n1 - i;
        let avail2 = used.iter().filter(|u| !**u).count();
        let lb = cost + rem1.abs_diff(avail2);
        if lb >= self.best {
            return;
        }
        if i == self.n1 {
            let mut total = cost;
            // Unmatched g2 nodes are insertions, along with every g2 edge
            // touching at least one of them.
            for q in 0..self.n2 {
                if !used[q] {
                    total += 1;
                }
            }
            for (&(p, q), _) in self.edges2.iter() {
                if !used[p] || !used[q] {
                    total += 1;
                }
            }
            self.best = self.best.min(total);
            return;
        }
        // Try mapping i to each free g2 node.
        for p in 0..self.n2 {
            if used[p] {
                continue;
            }
            let mut c = cost + usize::from(self.labels1[i] != self.labels2[p]);
            for (j, m) in mapping.iter().enumerate().take(i) {
                match m {
                    Some(q) => {
                        c += pair_cost(oriented(&self.edges1, i, j), oriented(&self.edges2, p, *q));
                    }
                    None => {
                        c += usize::from(oriented(&self.edges1, i, j).is_some());
                    }
                }
            }
            used[p] = true;
            mapping.push(Some(p));
            self.dfs(i + 1, mapping, used, c);
            mapping.pop();
            used[p] = false;
        }
        // Or delete node i together with its edges to already-placed nodes.
        let mut c = cost + 1;
        for j in 0..i {
            c += usize::from(oriented(&self.edges1, i, j).is_some());
        }
        mapping.push(None);
        self.dfs(i + 1, mapping, used, c);
        mapping.pop();
    }
}

/// Minimum number of unit-cost node/edge insertions, deletions, and
/// relabelings mapping `g1` to `g2`. Exact; symmetric.
pub fn graph_edit_distance(g1: &ConceptGraph, g2: &ConceptGraph) -> Result<usize> {
    guard(g1)?;
    guard(g2)?;
    let g1 = g1.canonicalize();
    let g2 = g2.canonicalize();
    let mut search = GedSearch {
        n1: g1.nodes.len(),
        n2: g2.nodes.len(),
        labels1: g1.nodes.clone(),
        labels2: g2.nodes.clone(),
        edges1: edge_map(&g1),
        edges2: edge_map(&g2),
        best: usize::MAX,
    };
    let mut used = vec![false; search.n2];
    search.dfs(0, &mut Vec::new(), &mut used, 0);
    Ok(search.best)
}

/// Node signature used to prune the permutation search: the node label plus
/// the multiset of (orientation, edge label, neighbor label) triples.
fn signature(g: &ConceptGraph, edges: &EdgeMap, i: usize) -> (String, Vec<(i8, String, String)>) {
    let mut sig = Vec::new();
    for j in 0..g.nodes.len() {
        if j == i {
            continue;
        }
        if let Some((l, o)) = oriented(edges, i, j) {
            sig.push((o, l.to_string(), g.nodes[j].clone()));
        }
    }
    sig.sort();
    (g.nodes[i].clone(), sig)
}

fn iso_dfs(
    i: usize,
    g1: &ConceptGraph,
    g2: &ConceptGraph,
    edges1: &EdgeMap,
    edges2: &EdgeMap,
    compatible: &[Vec<bool>],
    mapping: &mut Vec<usize>,
    used: &mut Vec<bool>,
) -> bool {
    if i == g1.nodes.len() {
        return true;
    }
    for p in 0..g2.nodes.len() {
        if used[p] || !compatible[i][p] {
            continue;
        }
        let ok = (0..i).all(|j| {
            let q = mapping[j];
            oriented(edges1, i, j) == oriented(edges2, p, q)
        });
        if !ok {
            continue;
        }
        used[p] = true;
        mapping.push(p);
        if iso_dfs(i + 1, g1, g2, edges1, edges2, compatible, mapping, used) {
            return true;
        }
        mapping.pop();
        used[p] = false;
    }
    false
}

fn isomorphic_with<F>(g1: &ConceptGraph, g2: &ConceptGraph, node_compat: F) -> Result<bool>
where
    F: Fn(usize, usize) -> Result<bool>,
{
    guard(g1)?;
    guard(g2)?;
    if g1.nodes.len() != g2.nodes.len() || g1.edges.len() != g2.edges.len() {
        return Ok(false);
    }
    let edges1 = edge_map(g1);
    let edges2 = edge_map(g2);
    let mut sigs1: Vec<_> = (0..g1.nodes.len()).map(|i| signature(g1, &edges1, i)).collect();
    let mut sigs2: Vec<_> = (0..g2.nodes.len()).map(|i| signature(g2, &edges2, i)).collect();
    sigs1.sort();
    sigs2.sort();
    if sigs1 != sigs2 {
        return Ok(false);
    }
    let n = g1.nodes.len();
    let mut compatible = vec![vec![false; n]; n];
    for (i, row) in compatible.iter_mut().enumerate() {
        for (p, slot) in row.iter_mut().enumerate() {
            *slot =
                signature(g1, &edges1, i) == signature(g2, &edges2, p) && node_compat(i, p)?;
        }
    }
    let mut used = vec![false; n];
    Ok(iso_dfs(0, g1, g2, &edges1, &edges2, &compatible, &mut Vec::new(), &mut used))
}

/// True iff some node bijection preserves node labels and labeled directed
/// edges (after canonicalization of symmetric/inverse relations).
pub fn is_isomorphic(g1: &ConceptGraph, g2: &ConceptGraph) -> Result<bool> {
    let c1 = g1.canonicalize();
    let c2 = g2.canonicalize();
    isomorphic_with(&c1, &c2, |_, _| Ok(true))
}

/// True iff the top-level graphs are isomorphic and matched children are
/// recursively structurally equivalent.
pub fn structurally_equivalent(g1: &ConceptGraph, g2: &ConceptGraph) -> Result<bool> {
    let c1 = g1.canonicalize();
    let c2 = g2.canonicalize();
    isomorphic_with(&c1, &c2, |i, p| match (c1.child(i), c2.child(p)) {
        (None, None) => Ok(true),
        (Some(a), Some(b)) => structurally_equivalent(a, b),
        _ => Ok(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::graph::Edge;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn edge(src: usize, dst: usize, label: &str) -> Edge {
        Edge { src, dst, label: label.into() }
    }

    /// Independent oracle: enumerate every mapping of g1 nodes into g2 nodes
    /// or deletion, scoring each complete mapping from scratch.
    fn ged_oracle(g1: &ConceptGraph, g2: &ConceptGraph) -> usize {
        let g1 = g1.canonicalize();
        let g2 = g2.canonicalize();
        let e1 = edge_map(&g1);
        let e2 = edge_map(&g2);
        let n1 = g1.nodes.len();
        let n2 = g2.nodes.len();
        let mut best = usize::MAX;
        let mut mapping: Vec<Option<usize>> = vec![None; n1];
        fn rec(
            i: usize,
            n1: usize,
            n2: usize,
            g1: &ConceptGraph,
            g2: &ConceptGraph,
            e1: &EdgeMap,
            e2: &EdgeMap,
            mapping: &mut Vec<Option<usize>>,
            best: &mut usize,
        ) {
            if i == n1 {
                let mut cost = 0usize;
                let matched: Vec<Option<usize>> = mapping.clone();
                let mut image = vec![None; n2];
                for (a, m) in matched.iter().enumerate() {
                    match m {
                        Some(p) => {
                            image[*p] = Some(a);
                            cost += usize::from(g1.nodes[a] != g2.nodes[*p]);
                        }
                        None => cost += 1,
                    }
                }
                cost += image.iter().filter(|x| x.is_none()).count();
                for a in 0..n1 {
                    for b in (a + 1)..n1 {
                        match (matched[a], matched[b]) {
                            (Some(p), Some(q)) => {
                                cost += pair_cost(oriented(e1, a, b), oriented(e2, p, q));
                            }
                            _ => cost += usize::from(oriented(e1, a, b).is_some()),
                        }
                    }
                }
                for (&(p, q), _) in e2.iter() {
                    if image[p].is_none() || image[q].is_none() {
                        cost += 1;
                    }
                }
                *best = (*best).min(cost);
                return;
            }
            for p in 0..n2 {
                if matches!(mapping[..i].iter().find(|m| **m == Some(p)), None) {
                    mapping[i] = Some(p);
                    rec(i + 1, n1, n2, g1, g2, e1, e2, mapping, best);
                }
            }
            mapping[i] = None;
            rec(i + 1, n1, n2, g1, g2, e1, e2, mapping, best);
        }
        rec(0, n1, n2, &g1, &g2, &e1, &e2, &mut mapping, &mut best);
        best
    }

    fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> ConceptGraph {
        let labels = ["line", "rectangle", "Eshape"];
        let rels = ["parallel", "perp-mid", "perp-edge"];
        let n = rng.gen_range(1..=max_nodes);
        let nodes: Vec<String> = (0..n)
            .map(|_| labels[rng.gen_range(0..labels.len())].to_string())
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.4) {
                    let label = rels[rng.gen_range(0..rels.len())];
                    // At most one edge per unordered pair, so canonical
                    // orientation of symmetric labels cannot collide.
                    if rng.gen_bool(0.5) {
                        edges.push(edge(i, j, label));
                    } else {
                        edges.push(edge(j, i, label));
                    }
                }
            }
        }
        let mut g = ConceptGraph { nodes, edges, children: Vec::new() };
        g = g.canonicalize();
        g.validate().unwrap();
        g
    }

    #[test]
    fn identical_graphs_have_zero_distance() {
        let g = ConceptGraph::new(
            vec!["line".into(); 3],
            vec![edge(0, 1, "parallel"), edge(1, 2, "perp-mid")],
        )
        .unwrap();
        assert_eq!(graph_edit_distance(&g, &g).unwrap(), 0);
    }

    #[test]
    fn single_edge_relabel_costs_one() {
        let base = vec![
            edge(0, 1, "parallel"),
            edge(0, 2, "parallel"),
            edge(2, 3, "perp-mid"),
        ];
        let mut relabeled = base.clone();
        relabeled[0].label = "perp-mid".into();
        let g1 = ConceptGraph::new(vec!["line".into(); 4], base).unwrap();
        let g2 = ConceptGraph::new(vec!["line".into(); 4], relabeled).unwrap();
        assert_eq!(graph_edit_distance(&g1, &g2).unwrap(), 1);
        assert_eq!(ged_oracle(&g1, &g2), 1);
    }

    #[test]
    fn ged_matches_exhaustive_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let g1 = random_graph(&mut rng, 4);
            let g2 = random_graph(&mut rng, 4);
            assert_eq!(
                graph_edit_distance(&g1, &g2).unwrap(),
                ged_oracle(&g1, &g2),
                "g1={g1:?} g2={g2:?}"
            );
        }
    }

    #[test]
    fn ged_is_symmetric_and_satisfies_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_graph(&mut rng, 4);
            let b = random_graph(&mut rng, 4);
            let c = random_graph(&mut rng, 4);
            let dab = graph_edit_distance(&a, &b).unwrap();
            let dba = graph_edit_distance(&b, &a).unwrap();
            let dbc = graph_edit_distance(&b, &c).unwrap();
            let dac = graph_edit_distance(&a, &c).unwrap();
            assert_eq!(dab, dba);
            assert!(dac <= dab + dbc);
        }
    }

    #[test]
    fn isomorphism_invariant_under_node_permutation() {
        let g1 = ConceptGraph::new(
            vec!["line".into(), "rectangle".into(), "line".into()],
            vec![edge(0, 1, "inside"), edge(0, 2, "parallel")],
        )
        .unwrap();
        let g2 = ConceptGraph::new(
            vec!["rectangle".into(), "line".into(), "line".into()],
            vec![edge(1, 0, "inside"), edge(1, 2, "parallel")],
        )
        .unwrap();
        assert!(is_isomorphic(&g1, &g2).unwrap());
    }

    #[test]
    fn zero_distance_iff_isomorphic_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..80 {
            let g1 = random_graph(&mut rng, 4);
            let g2 = random_graph(&mut rng, 4);
            let d = graph_edit_distance(&g1, &g2).unwrap();
            let iso = is_isomorphic(&g1, &g2).unwrap();
            assert_eq!(d == 0, iso, "d={d} iso={iso} g1={g1:?} g2={g2:?}");
        }
    }

    #[test]
    fn size_guard_is_enforced() {
        let g = ConceptGraph::new(vec!["line".into(); 9], vec![]).unwrap();
        assert!(matches!(
            graph_edit_distance(&g, &g),
            Err(crate::ZcError::Capacity(_))
        ));
    }

    #[test]
    fn structural_equivalence_recurses_into_children() {
        let child_a = ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![edge(0, 1, "parallel")],
        )
        .unwrap();
        let child_b = ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![edge(0, 1, "perp-mid")],
        )
        .unwrap();
        let mut g1 = ConceptGraph::singleton("rectangle");
        g1.children = vec![Some(child_a.clone())];
        let mut g2 = ConceptGraph::singleton("rectangle");
        g2.children = vec![Some(child_a)];
        let mut g3 = ConceptGraph::singleton("rectangle");
        g3.children = vec![Some(child_b)];
        assert!(structurally_equivalent(&g1, &g2).unwrap());
        assert!(!structurally_equivalent(&g1, &g3).unwrap());
        // Isomorphism alone ignores children.
        assert!(is_isomorphic(&g1, &g3).unwrap());
    }

    #[test]
    fn elementary_concepts_with_equal_labels_are_equivalent() {
        let a = ConceptGraph::singleton("line");
        let b = ConceptGraph::singleton("line");
        let c = ConceptGraph::singleton("rectangle");
        assert!(structurally_equivalent(&a, &b).unwrap());
        assert!(!structurally_equivalent(&a, &c).unwrap());
    }
}
