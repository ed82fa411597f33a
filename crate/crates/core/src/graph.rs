//! Collaboration graphs: role-labelled agents joined by directed links.
//!
//! Node ids are 1-based and follow generation order. Generated graphs only
//! ever contain edges `(j, i)` with `j < i`; graphs read from files may be
//! arbitrary and are checked with [`CollabGraph::validate_dag`].

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph contains a cycle: {}", fmt_cycle(.0))]
    Cycle(Vec<usize>),
    #[error("edge ({0}, {1}) references a node outside 1..={2}")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("invalid node order: {0}")]
    InvalidOrder(String),
    #[error("malformed graph: {0}")]
    Malformed(String),
}

fn fmt_cycle(c: &[usize]) -> String {
    c.iter().map(usize::to_string).collect::<Vec<_>>().join(" -> ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollabGraph {
    nodes: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
    pub meta: GraphMeta,
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: usize,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    nodes: Vec<NodeJson>,
    edges: Vec<[usize; 2]>,
    #[serde(default)]
    meta: GraphMeta,
}

impl Serialize for CollabGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        GraphJson {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(k, r)| NodeJson {
                    id: k + 1,
                    role: r.clone(),
                })
                .collect(),
            edges: self.edges.iter().map(|&(j, i)| [j, i]).collect(),
            meta: self.meta.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CollabGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = GraphJson::deserialize(d)?;
        let mut nodes = raw.nodes;
        nodes.sort_by_key(|n| n.id);
        for (k, n) in nodes.iter().enumerate() {
            if n.id != k + 1 {
                return Err(serde::de::Error::custom(format!(
                    "node ids must be 1..=N without gaps, found id {}",
                    n.id
                )));
            }
        }
        Ok(CollabGraph {
            nodes: nodes.into_iter().map(|n| n.role).collect(),
            edges: raw.edges.into_iter().map(|[j, i]| (j, i)).collect(),
            meta: raw.meta,
        })
    }
}

impl CollabGraph {
    pub fn new(roles: Vec<String>) -> Self {
        Self {
            nodes: roles,
            edges: BTreeSet::new(),
            meta: GraphMeta::default(),
        }
    }

    /// Builds a graph without range checks; see [`Self::validate_dag`].
    pub fn from_parts(roles: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self {
            nodes: roles,
            edges: edges.into_iter().collect(),
            meta: GraphMeta::default(),
        }
    }

    pub fn with_meta(mut self, query: Option<String>, source: Option<String>) -> Self {
        self.meta = GraphMeta { query, source };
        self
    }

    pub fn roles(&self) -> &[String] {
        &self.nodes
    }

    /// Role of 1-based node `id`.
    pub fn role(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|k| self.nodes.get(k)).map(String::as_str)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_set(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn push_node(&mut self, role: impl Into<String>) -> usize {
        self.nodes.push(role.into());
        self.nodes.len()
    }

    pub fn add_edge(&mut self, from: usize, to: usize) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if from == 0 || to == 0 || from > n || to > n {
            return Err(GraphError::EdgeOutOfRange(from, to, n));
        }
        self.edges.insert((from, to));
        Ok(())
    }

    pub fn remove_edge(&mut self, from: usize, to: usize) -> bool {
        self.edges.remove(&(from, to))
    }

    /// Removes node `id` and its incident edges; later nodes shift down by
    /// one so relative order is preserved.
    pub fn remove_node(&mut self, id: usize) -> Result<(), GraphError> {
        if id == 0 || id > self.nodes.len() {
            return Err(GraphError::Malformed(format!("no node {id}")));
        }
        self.nodes.remove(id - 1);
        let shift = |k: usize| if k > id { k - 1 } else { k };
        self.edges = self
            .edges
            .iter()
            .filter(|&&(j, i)| j != id && i != id)
            .map(|&(j, i)| (shift(j), shift(i)))
            .collect();
        Ok(())
    }

    /// Sources of edges into `id`, ascending.
    pub fn predecessors(&self, id: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect()
    }

    pub fn successors(&self, id: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.0 == id).map(|e| e.1).collect()
    }

    /// True when a directed path (possibly empty) leads from `from` to `to`.
    pub fn has_path(&self, from: usize, to: usize) -> bool {
        let n = self.nodes.len();
        if from == 0 || to == 0 || from > n || to > n {
            return false;
        }
        let mut seen = vec![false; n + 1];
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            if v == to {
                return true;
            }
            if std::mem::replace(&mut seen[v], true) {
                continue;
            }
            stack.extend(self.successors(v));
        }
        false
    }

    /// Accepts iff every edge endpoint is in range and there is no directed cycle.
    pub fn validate_dag(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        for &(j, i) in &self.edges {
            if j == 0 || i == 0 || j > n || i > n {
                return Err(GraphError::EdgeOutOfRange(j, i, n));
            }
        }
        if let Some(cycle) = self.find_cycle() {
            return Err(GraphError::Cycle(cycle));
        }
        Ok(())
    }

    fn find_cycle(&self) -> Option<Vec<usize>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let n = self.nodes.len();
        let mut color = vec![0u8; n + 1];
        for start in 1..=n {
            if color[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(start, self.successors(start), 0)];
            color[start] = 1;
            while let Some((v, succ, pos)) = stack.last_mut() {
                if *pos < succ.len() {
                    let w = succ[*pos];
                    *pos += 1;
                    match color[w] {
                        0 => {
                            color[w] = 1;
                            let s = self.successors(w);
                            stack.push((w, s, 0));
                        }
                        1 => {
                            // the DFS stack from w to the top is the cycle
                            let from = stack.iter().position(|e| e.0 == w).expect("w is on the stack");
                            let mut cycle: Vec<usize> = stack[from..].iter().map(|e| e.0).collect();
                            cycle.push(w);
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    color[*v] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    /// Kahn's procedure, always taking the smallest available node id.
    pub fn canonical_order(&self) -> Result<Vec<usize>, GraphError> {
        self.validate_dag()?;
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n + 1];
        for &(_, i) in &self.edges {
            indegree[i] += 1;
        }
        let mut ready: BinaryHeap<Reverse<usize>> =
            (1..=n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(v)) = ready.pop() {
            order.push(v);
            for w in self.successors(v) {
                indegree[w] -= 1;
                if indegree[w] == 0 {
                    ready.push(Reverse(w));
                }
            }
        }
        debug_assert_eq!(order.len(), n);
        Ok(order)
    }

    /// Renumbers nodes so that `order[k]` becomes node `k + 1`. `order` must
    /// be a topological order, so every edge of the result points forward.
    pub fn relabel(&self, order: &[usize]) -> Result<CollabGraph, GraphError> {
        let n = self.nodes.len();
        if order.len() != n {
            return Err(GraphError::InvalidOrder(format!("expected {n} entries, got {}", order.len())));
        }
        let mut position = vec![0usize; n + 1];
        for (k, &v) in order.iter().enumerate() {
            if v == 0 || v > n || position[v] != 0 {
                return Err(GraphError::InvalidOrder(format!("{order:?} is not a permutation of 1..={n}")));
            }
            position[v] = k + 1;
        }
        let mut edges = BTreeSet::new();
        for &(j, i) in &self.edges {
            if j == 0 || i == 0 || j > n || i > n {
                return Err(GraphError::EdgeOutOfRange(j, i, n));
            }
            let (pj, pi) = (position[j], position[i]);
            if pj >= pi {
                return Err(GraphError::InvalidOrder(format!(
                    "edge ({j}, {i}) runs against the order"
                )));
            }
            edges.insert((pj, pi));
        }
        Ok(CollabGraph {
            nodes: order.iter().map(|&v| self.nodes[v - 1].clone()).collect(),
            edges,
            meta: self.meta.clone(),
        })
    }

    /// True when every edge goes from a lower to a higher id.
    pub fn is_forward(&self) -> bool {
        self.edges.iter().all(|&(j, i)| j < i && i <= self.nodes.len())
    }

    /// Same nodes and edges, ignoring metadata.
    pub fn same_structure(&self, other: &CollabGraph) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Malformed(e.to_string()))
    }

    /// Graphviz rendering with nodes ascending and edges in lexicographic order.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph collab {\n");
        for (k, role) in self.nodes.iter().enumerate() {
            let label = format!("{}: {}", k + 1, role).replace('\\', "\\\\").replace('"', "\\\"");
            let _ = writeln!(out, "  {} [label=\"{}\"];", k + 1, label);
        }
        for &(j, i) in &self.edges {
            let _ = writeln!(out, "  {j} -> {i};");
        }
        out.push_str("}\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(n: usize, edges: &[(usize, usize)]) -> CollabGraph {
        CollabGraph::from_parts((1..=n).map(|k| format!("r{k}")).collect(), edges.iter().copied())
    }

    #[test]
    fn chain_is_valid_and_two_cycle_is_reported() {
        assert!(g(3, &[(1, 2), (2, 3)]).validate_dag().is_ok());
        match g(2, &[(1, 2), (2, 1)]).validate_dag() {
            Err(GraphError::Cycle(c)) => {
                assert_eq!(c.first(), c.last());
                assert!(c.contains(&1) && c.contains(&2));
            }
            other => panic!("expected cycle, got {other:?}"),
        }
        assert!(matches!(g(2, &[(1, 3)]).validate_dag(), Err(GraphError::EdgeOutOfRange(1, 3, 2))));
        assert!(matches!(g(1, &[(1, 1)]).validate_dag(), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn canonical_orders() {
        assert_eq!(g(3, &[(1, 2), (2, 3)]).canonical_order().unwrap(), vec![1, 2, 3]);
        assert_eq!(g(4, &[(1, 2), (1, 3), (1, 4)]).canonical_order().unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(g(2, &[]).canonical_order().unwrap(), vec![1, 2]);
        assert_eq!(
            g(4, &[(1, 2), (1, 3), (2, 4), (3, 4)]).canonical_order().unwrap(),
            vec![1, 2, 3, 4]
        );
        assert_eq!(g(3, &[(3, 1), (2, 1)]).canonical_order().unwrap(), vec![2, 3, 1]);
        assert!(g(2, &[(1, 2), (2, 1)]).canonical_order().is_err());
    }

    #[test]
    fn node_removal_reindexes_in_order() {
        let mut x = g(4, &[(1, 2), (2, 3), (3, 4), (1, 4)]);
        x.remove_node(2).unwrap();
        assert_eq!(x.roles(), &["r1", "r3", "r4"]);
        assert_eq!(x.edge_set().iter().copied().collect::<Vec<_>>(), vec![(1, 3), (2, 3)]);
    }

    #[test]
    fn relabel_rejects_backward_orders() {
        let x = g(3, &[(1, 2), (2, 3)]);
        assert!(x.relabel(&[2, 1, 3]).is_err());
        let y = g(3, &[(3, 1)]);
        let r = y.relabel(&[2, 3, 1]).unwrap();
        assert_eq!(r.roles(), &["r2", "r3", "r1"]);
        assert!(r.has_edge(2, 3));
    }

    #[test]
    fn json_round_trip_and_schema() {
        let x = g(3, &[(1, 2), (1, 3)]).with_meta(Some("q".into()), Some("exp".into()));
        let text = x.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["nodes"][0]["id"], 1);
        assert_eq!(v["nodes"][0]["role"], "r1");
        assert_eq!(v["edges"][1], serde_json::json!([1, 3]));
        assert_eq!(v["meta"]["source"], "exp");
        assert_eq!(CollabGraph::from_json(&text).unwrap(), x);
        assert!(CollabGraph::from_json(r#"{"nodes":[{"id":2,"role":"a"}],"edges":[]}"#).is_err());
    }

    #[test]
    fn dot_export_is_sorted() {
        let x = CollabGraph::from_parts(vec!["Planner".into(), "Coder \"x\"".into(), "Checker".into()], [(2, 3), (1, 3), (1, 2)]);
        assert_eq!(
            x.to_dot(),
            "digraph collab {\n  1 [label=\"1: Planner\"];\n  2 [label=\"2: Coder \\\"x\\\"\"];\n  3 [label=\"3: Checker\"];\n  1 -> 2;\n  1 -> 3;\n  2 -> 3;\n}\n"
        );
    }

    proptest! {
        #[test]
        fn canonical_order_is_topological(n in 1usize..9, bits in proptest::collection::vec(any::<bool>(), 36), perm_seed in 0u64..1000) {
            // forward DAG, then shuffled ids
            let mut edges = vec![];
            let mut b = bits.iter();
            for i in 1..=n { for j in 1..i { if *b.next().unwrap_or(&false) { edges.push((j, i)); } } }
            let mut perm: Vec<usize> = (1..=n).collect();
            let mut s = perm_seed;
            for k in (1..n).rev() { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); perm.swap(k, (s >> 33) as usize % (k + 1)); }
            let shuffled = CollabGraph::from_parts(vec!["x".into(); n], edges.iter().map(|&(j, i)| (perm[j - 1], perm[i - 1])));
            let order = shuffled.canonical_order().unwrap();
            let mut pos = vec![0; n + 1];
            for (k, &v) in order.iter().enumerate() { pos[v] = k; }
            let mut sorted = order.clone(); sorted.sort();
            prop_assert_eq!(sorted, (1..=n).collect::<Vec<_>>());
            for (j, i) in shuffled.edges() { prop_assert!(pos[j] < pos[i]); }
            prop_assert!(shuffled.relabel(&order).unwrap().is_forward());
        }
    }
}
