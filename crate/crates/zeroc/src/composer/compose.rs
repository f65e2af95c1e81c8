//! Composition of trained concept and relation energies into a single
//! mask energy for a whole concept graph.
//!
//! Each leaf node of the graph owns one mask slot. A node with a child
//! graph owns the child's slots instead, and any edge incident to it is
//! evaluated on the pixelwise union of the child's masks.

use candle_core::Tensor;

use crate::model::{ConceptScorer, MaskEnergy, RelationScorer};
use crate::{Result, ZcError};

use super::graph::ConceptGraph;

/// Pixelwise maximum of the given masks; the mask of a composite object.
pub fn combine_masks(masks: &[Tensor]) -> Result<Tensor> {
    let mut iter = masks.iter();
    let first = iter
        .next()
        .ok_or_else(|| ZcError::Contract("combine_masks on empty slice".into()))?;
    let mut acc = first.clone();
    for m in iter {
        acc = acc.maximum(m)?;
    }
    Ok(acc)
}

enum NodeTerm {
    /// Leaf: concept energy of the node's own slot.
    Leaf { label: String, slot: usize },
    /// Composite: the child's composed energy over its slot range.
    Child { energy: ComposedEnergy },
}

struct EdgeTerm {
    label: String,
    from: usize,
    to: usize,
}

/// Sum of concept energies (one per node, recursively) and relation
/// energies (one per edge, at every level), sharing one flat slot list.
pub struct ComposedEnergy {
    nodes: Vec<NodeTerm>,
    edges: Vec<EdgeTerm>,
    /// Flat slot range covered by each top-level node.
    spans: Vec<(usize, usize)>,
    num_slots: usize,
}

/// Build the composed energy E(x, m_1..m_S) = sum of per-node concept
/// energies and per-edge relation energies over the graph, where edges on
/// composite nodes see the union of the child's masks.
pub fn compose<'a>(
    graph: &ConceptGraph,
    concepts: &'a dyn ConceptScorer,
    relations: &'a dyn RelationScorer,
) -> Result<ComposedEnergyBound<'a>> {
    graph.validate()?;
    let plan = build_plan(graph, concepts, relations, 0)?;
    Ok(ComposedEnergyBound {
        plan,
        concepts,
        relations,
    })
}

fn build_plan(
    graph: &ConceptGraph,
    concepts: &dyn ConceptScorer,
    relations: &dyn RelationScorer,
    offset: usize,
) -> Result<ComposedEnergy> {
    let concept_vocab = concepts.vocabulary();
    let relation_vocab = relations.vocabulary();

    let mut nodes = Vec::with_capacity(graph.nodes.len());
    let mut spans = Vec::with_capacity(graph.nodes.len());
    let mut cursor = offset;
    for (i, label) in graph.nodes.iter().enumerate() {
        match graph.child(i) {
            None => {
                if !concept_vocab.iter().any(|v| v == label) {
                    return Err(ZcError::Vocabulary(format!(
                        "concept label `{label}` not in model vocabulary"
                    )));
                }
                spans.push((cursor, 1));
                nodes.push(NodeTerm::Leaf {
                    label: label.clone(),
                    slot: cursor,
                });
                cursor += 1;
            }
            Some(child) => {
                let sub = build_plan(child, concepts, relations, cursor)?;
                let len = sub.num_slots;
                spans.push((cursor, len));
                nodes.push(NodeTerm::Child { energy: sub });
                cursor += len;
            }
        }
    }

    let mut edges = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        if !relation_vocab.iter().any(|v| v == &e.label) {
            return Err(ZcError::Vocabulary(format!(
                "relation label `{}` not in model vocabulary",
                e.label
            )));
        }
        edges.push(EdgeTerm {
            label: e.label.clone(),
            from: e.src,
            to: e.dst,
        });
    }

    Ok(ComposedEnergy {
        nodes,
        edges,
        spans,
        num_slots: cursor - offset,
    })
}

impl ComposedEnergy {
    /// Union mask for top-level node `i` given the full flat slot list.
    fn node_mask(&self, i: usize, masks: &[Tensor]) -> Result<Tensor> {
        let (start, len) = self.spans[i];
        combine_masks(&masks[start..start + len])
    }

    fn energy(
        &self,
        x: &Tensor,
        masks: &[Tensor],
        concepts: &dyn ConceptScorer,
        relations: &dyn RelationScorer,
    ) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        let add = |t: Tensor, total: &mut Option<Tensor>| -> Result<()> {
            *total = Some(match total.take() {
                Some(acc) => (acc + t)?,
                None => t,
            });
            Ok(())
        };
        for node in &self.nodes {
            let term = match node {
                NodeTerm::Leaf { label, slot } => {
                    concepts.concept_energy_for(x, &masks[*slot], label)?
                }
                NodeTerm::Child { energy } => energy.energy(x, masks, concepts, relations)?,
            };
            add(term, &mut total)?;
        }
        for edge in &self.edges {
            let m1 = self.node_mask(edge.from, masks)?;
            let m2 = self.node_mask(edge.to, masks)?;
            add(
                relations.relation_energy_for(x, &m1, &m2, &edge.label)?,
                &mut total,
            )?;
        }
        total.ok_or_else(|| ZcError::Contract("empty concept graph".into()))
    }

    fn term_count(&self) -> usize {
        let node_terms: usize = self
            .nodes
            .iter()
            .map(|n| match n {
                NodeTerm::Leaf { .. } => 1,
                NodeTerm::Child { energy } => energy.term_count(),
            })
            .sum();
        node_terms + self.edges.len()
    }
}

/// A composed energy bound to its concept and relation scorers.
pub struct ComposedEnergyBound<'a> {
    plan: ComposedEnergy,
    concepts: &'a dyn ConceptScorer,
    relations: &'a dyn RelationScorer,
}

impl ComposedEnergyBound<'_> {
    /// Number of concept + relation energy terms summed per evaluation.
    pub fn term_count(&self) -> usize {
        self.plan.term_count()
    }

    /// Union of all slot masks: the detection mask of the whole concept.
    pub fn union_mask(&self, masks: &[Tensor]) -> Result<Tensor> {
        combine_masks(masks)
    }
}

impl MaskEnergy for ComposedEnergyBound<'_> {
    fn num_slots(&self) -> usize {
        self.plan.num_slots
    }

    fn energy(&self, x: &Tensor, masks: &[Tensor]) -> Result<Tensor> {
        if masks.len() != self.plan.num_slots {
            return Err(ZcError::Contract(format!(
                "composed energy expects {} masks, got {}",
                self.plan.num_slots,
                masks.len()
            )));
        }
        self.plan.energy(x, masks, self.concepts, self.relations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::Edge;
    use candle_core::{DType, Device};

    /// Analytic scorers: concept energy = sum(mask) * weight(label),
    /// relation energy = sum(m1) + 2*sum(m2) + weight(label).
    struct FakeConcepts;
    struct FakeRelations;

    fn weight(label: &str) -> f64 {
        (label.len() as f64) * 0.5
    }

    impl ConceptScorer for FakeConcepts {
        fn vocabulary(&self) -> Vec<String> {
            vec!["line".into(), "rectangle".into()]
        }
        fn concept_energy_for(&self, _x: &Tensor, m: &Tensor, label: &str) -> Result<Tensor> {
            let s = m.sum_all()?.to_dtype(DType::F64)?;
            Ok((s * weight(label))?.unsqueeze(0)?)
        }
    }

    impl RelationScorer for FakeRelations {
        fn vocabulary(&self) -> Vec<String> {
            vec!["parallel".into(), "inside".into()]
        }
        fn relation_energy_for(
            &self,
            _x: &Tensor,
            m1: &Tensor,
            m2: &Tensor,
            label: &str,
        ) -> Result<Tensor> {
            let a = m1.sum_all()?.to_dtype(DType::F64)?;
            let b = m2.sum_all()?.to_dtype(DType::F64)?;
            Ok(((a + (b * 2.0)?)? + weight(label))?.unsqueeze(0)?)
        }
    }

    fn mask(fill: f64) -> Tensor {
        Tensor::full(fill, (1, 1, 4, 4), &Device::Cpu)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
    }

    fn x() -> Tensor {
        Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap()
    }

    fn energy_of(graph: &ConceptGraph, masks: &[Tensor]) -> f64 {
        let bound = compose(graph, &FakeConcepts, &FakeRelations).unwrap();
        assert_eq!(bound.num_slots(), masks.len());
        bound.energy(&x(), masks).unwrap().to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn flat_graph_sums_node_and_edge_terms() {
        let g = ConceptGraph::new(
            vec!["line".into(), "rectangle".into()],
            vec![Edge::new(0, 1, "inside")],
        )
        .unwrap();
        let m0 = mask(0.25);
        let m1 = mask(0.5);
        // nodes: 16*0.25*2.0 + 16*0.5*4.5; edge: 4 + 2*8 + 3.0
        let expected = 8.0 + 36.0 + (4.0 + 16.0 + 3.0);
        let got = energy_of(&g, &[m0, m1]);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn nested_graph_uses_union_mask_for_incident_edges() {
        let inner = ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![Edge::new(0, 1, "parallel")],
        )
        .unwrap();
        let g = ConceptGraph::new(
            vec!["rectangle".into(), "rectangle".into()],
            vec![Edge::new(0, 1, "inside")],
        )
        .unwrap()
        .with_child(1, inner)
        .unwrap();

        let m0 = mask(1.0); // outer rectangle
        let m1 = mask(0.25); // inner line 1
        let m2 = mask(0.5); // inner line 2
        // Leaf terms: rect on m0 = 16*4.5; lines = 16*0.25*2 + 16*0.5*2.
        // Inner edge parallel(m1, m2) = 4 + 2*8 + 4.0.
        // Outer edge inside(m0, max(m1,m2)) = 16 + 2*8 + 3.0 (union fill 0.5).
        let expected = 72.0 + 8.0 + 16.0 + (4.0 + 16.0 + 4.0) + (16.0 + 16.0 + 3.0);
        let got = energy_of(&g, &[m0, m1, m2]);
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn term_count_is_nodes_plus_edges_per_level() {
        let inner = ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![Edge::new(0, 1, "parallel")],
        )
        .unwrap();
        let g = ConceptGraph::new(
            vec!["rectangle".into(), "rectangle".into()],
            vec![Edge::new(0, 1, "inside")],
        )
        .unwrap()
        .with_child(1, inner)
        .unwrap();
        let bound = compose(&g, &FakeConcepts, &FakeRelations).unwrap();
        // 3 leaves + 2 edges.
        assert_eq!(bound.term_count(), 5);
        assert_eq!(bound.num_slots(), 3);
    }

    #[test]
    fn unknown_labels_are_vocabulary_errors() {
        let g = ConceptGraph::singleton("zigzag");
        assert!(matches!(
            compose(&g, &FakeConcepts, &FakeRelations).err(),
            Some(ZcError::Vocabulary(_))
        ));
        let g = ConceptGraph::new(
            vec!["line".into(), "line".into()],
            vec![Edge::new(0, 1, "orbits")],
        )
        .unwrap();
        assert!(matches!(
            compose(&g, &FakeConcepts, &FakeRelations).err(),
            Some(ZcError::Vocabulary(_))
        ));
    }

    #[test]
    fn combine_masks_is_pixelwise_maximum() {
        let a = Tensor::from_vec(vec![0.1f64, 0.9, 0.4, 0.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let b = Tensor::from_vec(vec![0.5f64, 0.2, 0.4, 1.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let u = combine_masks(&[a, b]).unwrap();
        let v = u.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v, vec![0.5, 0.9, 0.4, 1.0]);
        assert!(combine_masks(&[]).is_err());
    }

    #[test]
    fn wrong_mask_count_is_a_contract_error() {
        let g = ConceptGraph::singleton("line");
        let bound = compose(&g, &FakeConcepts, &FakeRelations).unwrap();
        assert!(matches!(
            bound.energy(&x(), &[mask(0.1), mask(0.2)]).err(),
            Some(ZcError::Contract(_))
        ));
    }
}
