//! Scene-graph traversal: chain the attention and shift modules along a
//! path, localizing every node on the way.
//!
//! This module is composition only — it reuses `attend`, `shift_forward`,
//! and `broadcast_mul` in exactly the order the rollout applies them, so a
//! single forward edge reproduces the rollout's object branch bit for bit
//! with the same parameters.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::model::{attend, shift_forward, AttentionMap, SsasModel};
use crate::ops;
use crate::scalar::Scalar;
use crate::scene::predicate_id;
use crate::tensor::Tensor;

/// Which shift stack an edge applies: `Fwd` transports a subject's map
/// toward its object, `Inv` the other way around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeDir {
    #[serde(rename = "fwd")]
    Fwd,
    #[serde(rename = "inv")]
    Inv,
}

/// One step of the walk: from node `src`, through predicate `p`, to node
/// `dst`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub p: String,
    pub dst: usize,
    pub dir: EdgeDir,
}

/// A scene graph given as a walk: `nodes` are entity category names,
/// `path` the edge sequence starting at node `start`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<String>,
    pub path: Vec<GraphEdge>,
    pub start: usize,
}

impl SceneGraph {
    /// Check node indices, predicate names, vocabulary membership, and
    /// walk continuity (each edge leaves the node the previous one
    /// reached) before any compute happens.
    pub fn validate(&self, vocab: &[String]) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Invalid("scene graph has no nodes".into()));
        }
        if self.start >= self.nodes.len() {
            return Err(Error::Invalid(format!(
                "start node {} outside 0..{}",
                self.start,
                self.nodes.len()
            )));
        }
        for (i, cat) in self.nodes.iter().enumerate() {
            if !vocab.contains(cat) {
                return Err(Error::Invalid(format!(
                    "node {i} category {cat:?} is not in the vocabulary"
                )));
            }
        }
        let mut at = self.start;
        for (i, e) in self.path.iter().enumerate() {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::Invalid(format!(
                    "edge {i} touches node outside 0..{}",
                    self.nodes.len()
                )));
            }
            if predicate_id(&e.p).is_none() {
                return Err(Error::Invalid(format!("edge {i}: unknown predicate {:?}", e.p)));
            }
            if e.src != at {
                return Err(Error::Invalid(format!(
                    "edge {i} starts at node {} but the walk is at node {at}",
                    e.src
                )));
            }
            at = e.dst;
        }
        Ok(())
    }
}

/// One localized node: its index, category, and latest attention map.
#[derive(Debug, Clone)]
pub struct NodeMap<S: Scalar> {
    pub node: usize,
    pub category: String,
    pub map: AttentionMap<S>,
}

/// Walk the graph over the feature grid: the start node gets plain
/// attention, every edge shifts the current node's activated map through
/// the predicate's forward or inverse stack, modulates the features, and
/// attends with the destination's embedding. Nodes are emitted in
/// first-visit order; revisiting overwrites a node's map with the latest
/// estimate.
pub fn traverse<S: Scalar>(
    model: &SsasModel<S>,
    mu: &Tensor<S>,
    graph: &SceneGraph,
) -> Result<Vec<NodeMap<S>>> {
    graph.validate(&model.vocab)?;
    let cat_id = |node: usize| -> usize {
        let name = &graph.nodes[node];
        model
            .vocab
            .iter()
            .position(|v| v == name)
            .expect("validate checked vocabulary membership")
    };

    let mut order: Vec<usize> = Vec::new();
    let mut latest: HashMap<usize, AttentionMap<S>> = HashMap::new();
    let visit = |node: usize,
                     map: AttentionMap<S>,
                     order: &mut Vec<usize>,
                     latest: &mut HashMap<usize, AttentionMap<S>>| {
        if !latest.contains_key(&node) {
            order.push(node);
        }
        latest.insert(node, map);
    };

    let start_map = attend(mu, model.embedding(Some(cat_id(graph.start))))?;
    let mut current = start_map.clone();
    visit(graph.start, start_map, &mut order, &mut latest);

    for e in &graph.path {
        let pid = predicate_id(&e.p).expect("validate checked predicates");
        let stack = match e.dir {
            EdgeDir::Fwd => &model.fwd[pid],
            EdgeDir::Inv => &model.inv[pid],
        };
        let (gate, _tape) = shift_forward(&current.activated, stack)?;
        let modulated = ops::broadcast_mul(&gate.activated, mu)?;
        let map = attend(&modulated, model.embedding(Some(cat_id(e.dst))))?;
        current = map.clone();
        visit(e.dst, map, &mut order, &mut latest);
    }

    Ok(order
        .into_iter()
        .map(|node| NodeMap {
            node,
            category: graph.nodes[node].clone(),
            map: latest.remove(&node).expect("order only holds visited nodes"),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Query, SsasConfig, SsasModel};
    use crate::rng::rng_from;
    use rand::Rng;

    fn toy_model(seed: u64) -> SsasModel<f64> {
        let cfg = SsasConfig {
            grid: 4,
            channels: 4,
            stages: 2,
            kernel: 3,
            hidden: 4,
            iterations: 2,
            supervise_intermediate: false,
        };
        let vocab = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        SsasModel::new(cfg, vocab, &mut rng_from(seed)).unwrap()
    }

    fn toy_mu(seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        Tensor::from_vec(&[4, 4, 4], (0..4 * 4 * 4).map(|_| rng.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn single_node_graph_equals_plain_attention() {
        let m = toy_model(3);
        let mu = toy_mu(4);
        let g = SceneGraph { nodes: vec!["b".into()], path: vec![], start: 0 };
        let out = traverse(&m, &mu, &g).unwrap();
        assert_eq!(out.len(), 1);
        let want = attend(&mu, m.embedding(Some(1))).unwrap();
        assert_eq!(out[0].map.logits, want.logits);
        assert_eq!(out[0].map.activated, want.activated);
    }

    #[test]
    fn forward_edge_matches_the_rollout_object_branch_bit_for_bit() {
        let m = toy_model(5);
        let mu = toy_mu(6);
        // Graph a --left--> c, traversed forward.
        let g = SceneGraph {
            nodes: vec!["a".into(), "c".into()],
            path: vec![GraphEdge { src: 0, p: "left".into(), dst: 1, dir: EdgeDir::Fwd }],
            start: 0,
        };
        let out = traverse(&m, &mu, &g).unwrap();
        let q = Query { subject: Some(0), predicate: 0, object: Some(2) };
        let ro = m.rollout(&mu, &q).unwrap();
        // Start node = step-0 subject map; edge result = step-1 object map.
        assert_eq!(out[0].map.logits, ro.steps[0].subject.logits);
        assert_eq!(out[1].map.logits, ro.steps[1].object.logits);
        assert_eq!(out[1].map.activated, ro.steps[1].object.activated);
    }

    #[test]
    fn inverse_edge_matches_the_rollout_subject_branch_bit_for_bit() {
        let m = toy_model(7);
        let mu = toy_mu(8);
        // Walking from the object back to the subject uses the inverse
        // stack: graph c --left(inv)--> a.
        let g = SceneGraph {
            nodes: vec!["c".into(), "a".into()],
            path: vec![GraphEdge { src: 0, p: "left".into(), dst: 1, dir: EdgeDir::Inv }],
            start: 0,
        };
        let out = traverse(&m, &mu, &g).unwrap();
        let q = Query { subject: Some(0), predicate: 0, object: Some(2) };
        let ro = m.rollout(&mu, &q).unwrap();
        assert_eq!(out[0].map.logits, ro.steps[0].object.logits);
        assert_eq!(out[1].map.logits, ro.steps[1].subject.logits);
    }

    #[test]
    fn revisiting_a_node_overwrites_and_keeps_first_visit_order() {
        let m = toy_model(9);
        let mu = toy_mu(10);
        // a -> b -> a: node a's map must be the refreshed one, order [a, b].
        let g = SceneGraph {
            nodes: vec!["a".into(), "b".into()],
            path: vec![
                GraphEdge { src: 0, p: "above".into(), dst: 1, dir: EdgeDir::Fwd },
                GraphEdge { src: 1, p: "above".into(), dst: 0, dir: EdgeDir::Inv },
            ],
            start: 0,
        };
        let out = traverse(&m, &mu, &g).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].node, out[1].node), (0, 1));
        let first = attend(&mu, m.embedding(Some(0))).unwrap();
        assert_ne!(out[0].map.logits, first.logits, "map was not refreshed");
    }

    #[test]
    fn discontinuous_walks_and_bad_names_are_rejected() {
        let m = toy_model(11);
        let mu = toy_mu(12);
        let base = SceneGraph {
            nodes: vec!["a".into(), "b".into(), "c".into()],
            path: vec![
                GraphEdge { src: 0, p: "left".into(), dst: 1, dir: EdgeDir::Fwd },
                GraphEdge { src: 2, p: "left".into(), dst: 0, dir: EdgeDir::Fwd },
            ],
            start: 0,
        };
        assert!(traverse(&m, &mu, &base).is_err(), "edge 1 does not continue the walk");
        let bad_pred = SceneGraph {
            nodes: vec!["a".into()],
            path: vec![GraphEdge { src: 0, p: "inside".into(), dst: 0, dir: EdgeDir::Fwd }],
            start: 0,
        };
        assert!(traverse(&m, &mu, &bad_pred).is_err());
        let bad_cat = SceneGraph { nodes: vec!["zebra".into()], path: vec![], start: 0 };
        assert!(traverse(&m, &mu, &bad_cat).is_err());
        let bad_start = SceneGraph { nodes: vec!["a".into()], path: vec![], start: 3 };
        assert!(traverse(&m, &mu, &bad_start).is_err());
    }

    #[test]
    fn graph_json_round_trips() {
        let text = r#"{"nodes":["a","b"],"path":[{"src":0,"p":"left","dst":1,"dir":"fwd"}],"start":0}"#;
        let g: SceneGraph = serde_json::from_str(text).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.path[0].dir, EdgeDir::Fwd);
        let back = serde_json::to_string(&g).unwrap();
        let again: SceneGraph = serde_json::from_str(&back).unwrap();
        assert_eq!(g, again);
    }
}
