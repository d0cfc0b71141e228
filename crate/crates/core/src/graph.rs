//! Undirected artist graphs, truth/prediction diffs, edge edit distance and
//! DOT export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data_io::pair_key;
use crate::error::{Error, Result};

pub type Edge = (String, String);

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtistGraph {
    pub nodes: BTreeSet<String>,
    /// Stored with the smaller id first.
    pub edges: BTreeSet<Edge>,
}

impl ArtistGraph {
    pub fn new(nodes: impl IntoIterator<Item = String>, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut g = ArtistGraph {
            nodes: nodes.into_iter().collect(),
            edges: BTreeSet::new(),
        };
        for (a, b) in edges {
            if a == b {
                return Err(Error::Graph(format!("self-loop on {a}")));
            }
            if !g.nodes.contains(&a) || !g.nodes.contains(&b) {
                return Err(Error::Graph(format!("edge ({a}, {b}) has an endpoint outside the node set")));
            }
            g.edges.insert(pair_key(&a, &b));
        }
        Ok(g)
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        self.edges.contains(&pair_key(a, b))
    }
}

/// Graph over every mentioned artist with an edge per pair labeled 1.
pub fn build_graph<'a, I>(pairs: I) -> Result<ArtistGraph>
where
    I: IntoIterator<Item = (&'a str, &'a str, u8)>,
{
    let mut labels: BTreeMap<Edge, u8> = BTreeMap::new();
    let mut nodes = BTreeSet::new();
    for (a, b, label) in pairs {
        if a == b {
            return Err(Error::Graph(format!("artist {a} paired with itself")));
        }
        if label > 1 {
            return Err(Error::Graph(format!("label {label} for ({a}, {b}) is not 0 or 1")));
        }
        nodes.insert(a.to_string());
        nodes.insert(b.to_string());
        let key = pair_key(a, b);
        if let Some(&prev) = labels.get(&key) {
            if prev != label {
                return Err(Error::Graph(format!("conflicting labels for ({}, {})", key.0, key.1)));
            }
        }
        labels.insert(key, label);
    }
    Ok(ArtistGraph {
        nodes,
        edges: labels.into_iter().filter(|(_, l)| *l == 1).map(|(e, _)| e).collect(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDiff {
    pub nodes: BTreeSet<String>,
    pub correct: BTreeSet<Edge>,
    pub missed: BTreeSet<Edge>,
    pub spurious: BTreeSet<Edge>,
}

fn same_nodes(a: &ArtistGraph, b: &ArtistGraph) -> Result<()> {
    if a.nodes != b.nodes {
        let only_a = a.nodes.difference(&b.nodes).count();
        let only_b = b.nodes.difference(&a.nodes).count();
        return Err(Error::Graph(format!(
            "node sets differ ({only_a} only in the first graph, {only_b} only in the second)"
        )));
    }
    Ok(())
}

pub fn diff_graphs(truth: &ArtistGraph, prediction: &ArtistGraph) -> Result<GraphDiff> {
    same_nodes(truth, prediction)?;
    Ok(GraphDiff {
        nodes: truth.nodes.clone(),
        correct: truth.edges.intersection(&prediction.edges).cloned().collect(),
        missed: truth.edges.difference(&prediction.edges).cloned().collect(),
        spurious: prediction.edges.difference(&truth.edges).cloned().collect(),
    })
}

/// Unit-cost edge insertions and deletions between graphs on one node set.
pub fn graph_edit_distance(g1: &ArtistGraph, g2: &ArtistGraph) -> Result<usize> {
    same_nodes(g1, g2)?;
    Ok(g1.edges.symmetric_difference(&g2.edges).count())
}

fn quote(id: &str) -> String {
    let mut s = String::with_capacity(id.len() + 2);
    s.push('"');
    for c in id.chars() {
        match c {
            '"' => s.push_str("\\\""),
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            c => s.push(c),
        }
    }
    s.push('"');
    s
}

fn dot_document(nodes: &BTreeSet<String>, edges: &[(&Edge, Option<&str>)]) -> String {
    let mut out = String::from("graph artists {\n");
    for n in nodes {
        let _ = writeln!(out, "  {};", quote(n));
    }
    for ((a, b), color) in edges {
        match color {
            Some(c) => {
                let _ = writeln!(out, "  {} -- {} [color={c}];", quote(a), quote(b));
            }
            None => {
                let _ = writeln!(out, "  {} -- {};", quote(a), quote(b));
            }
        }
    }
    out.push_str("}\n");
    out
}

pub fn export_dot(graph: &ArtistGraph) -> String {
    let edges: Vec<_> = graph.edges.iter().map(|e| (e, None)).collect();
    dot_document(&graph.nodes, &edges)
}

/// Correct edges black, missed red, spurious blue.
pub fn export_diff_dot(diff: &GraphDiff) -> String {
    let edges: Vec<_> = diff
        .correct
        .iter()
        .map(|e| (e, Some("black")))
        .chain(diff.missed.iter().map(|e| (e, Some("red"))))
        .chain(diff.spurious.iter().map(|e| (e, Some("blue"))))
        .collect();
    dot_document(&diff.nodes, &edges)
}

/// JSON record with explicit node and edge lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub nodes: Vec<String>,
    pub edges: Vec<[String; 2]>,
}

impl From<&ArtistGraph> for GraphRecord {
    fn from(g: &ArtistGraph) -> Self {
        GraphRecord {
            nodes: g.nodes.iter().cloned().collect(),
            edges: g.edges.iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
        }
    }
}

impl TryFrom<GraphRecord> for ArtistGraph {
    type Error = Error;

    fn try_from(r: GraphRecord) -> Result<Self> {
        ArtistGraph::new(r.nodes, r.edges.into_iter().map(|[a, b]| (a, b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    fn e(a: &str, b: &str) -> Edge {
        pair_key(a, b)
    }

    #[test]
    fn build_examples() {
        let g = build_graph([("a", "b", 1), ("b", "c", 0)]).unwrap();
        assert_eq!(g.nodes, ids(&["a", "b", "c"]));
        assert_eq!(g.edges, BTreeSet::from([e("a", "b")]));
        assert!(build_graph([("a", "b", 0), ("b", "c", 0)]).unwrap().edges.is_empty());
        let g = build_graph([("a", "b", 1), ("b", "a", 1)]).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert!(g.has_edge("b", "a"));
        assert!(build_graph([("a", "b", 1), ("b", "a", 0)]).is_err());
        assert!(build_graph([("a", "a", 1)]).is_err());
    }

    #[test]
    fn diff_and_ged_examples() {
        let truth = build_graph([("a", "b", 1), ("b", "c", 1), ("a", "c", 0)]).unwrap();
        let d = diff_graphs(&truth, &truth).unwrap();
        assert_eq!(d.correct, truth.edges);
        assert!(d.missed.is_empty() && d.spurious.is_empty());
        assert_eq!(graph_edit_distance(&truth, &truth).unwrap(), 0);

        let empty = build_graph([("a", "b", 0), ("b", "c", 0), ("a", "c", 0)]).unwrap();
        assert_eq!(diff_graphs(&truth, &empty).unwrap().missed, truth.edges);

        let minus_one = build_graph([("a", "b", 1), ("b", "c", 0), ("a", "c", 0)]).unwrap();
        assert_eq!(graph_edit_distance(&truth, &minus_one).unwrap(), 1);

        let other = build_graph([("a", "d", 1)]).unwrap();
        assert!(diff_graphs(&truth, &other).is_err());
        assert!(graph_edit_distance(&truth, &other).is_err());
    }

    #[test]
    fn dot_output() {
        let empty = export_dot(&ArtistGraph::default());
        assert_eq!(empty, "graph artists {\n}\n");
        let d = GraphDiff {
            nodes: ids(&["a", "b", "c", "d"]),
            correct: BTreeSet::from([e("a", "b")]),
            missed: BTreeSet::from([e("b", "c")]),
            spurious: BTreeSet::from([e("c", "d")]),
        };
        let text = export_diff_dot(&d);
        assert!(text.contains("\"a\" -- \"b\" [color=black];"));
        assert!(text.contains("\"b\" -- \"c\" [color=red];"));
        assert!(text.contains("\"c\" -- \"d\" [color=blue];"));
        let plain = export_dot(&build_graph([("x\"y", "z", 1)]).unwrap());
        assert!(plain.contains("\"x\\\"y\" -- \"z\";") || plain.contains("\"z\" -- \"x\\\"y\";"));
        assert!(!plain.contains("color"));
    }

    #[test]
    fn record_round_trip() {
        let g = build_graph([("a", "b", 1), ("c", "b", 1), ("c", "d", 0)]).unwrap();
        let text = serde_json::to_string(&GraphRecord::from(&g)).unwrap();
        let back = ArtistGraph::try_from(serde_json::from_str::<GraphRecord>(&text).unwrap()).unwrap();
        assert_eq!(back, g);
        let bad = GraphRecord {
            nodes: vec!["a".into()],
            edges: vec![["a".into(), "b".into()]],
        };
        assert!(ArtistGraph::try_from(bad).is_err());
    }

    fn graph_from_mask(n: usize, mask: u64) -> ArtistGraph {
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut edges = Vec::new();
        let mut bit = 0;
        for i in 0..n {
            for j in i + 1..n {
                if mask >> bit & 1 == 1 {
                    edges.push((nodes[i].clone(), nodes[j].clone()));
                }
                bit += 1;
            }
        }
        ArtistGraph::new(nodes, edges).unwrap()
    }

    proptest! {
        #[test]
        fn ged_is_a_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let (x, y, z) = (graph_from_mask(6, a), graph_from_mask(6, b), graph_from_mask(6, c));
            let d = |p: &ArtistGraph, q: &ArtistGraph| graph_edit_distance(p, q).unwrap();
            prop_assert_eq!(d(&x, &y) == 0, x == y);
            prop_assert_eq!(d(&x, &y), d(&y, &x));
            prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z));
            let diff = diff_graphs(&x, &y).unwrap();
            prop_assert_eq!(diff.missed.len() + diff.spurious.len(), d(&x, &y));
            prop_assert!(diff.correct.is_disjoint(&diff.missed) && diff.missed.is_disjoint(&diff.spurious));
        }

        #[test]
        fn build_idempotent_under_relisting(labels in prop::collection::vec(0u8..2, 1..10)) {
            let names: Vec<String> = (0..=labels.len()).map(|i| format!("a{i}")).collect();
            let pairs: Vec<(&str, &str, u8)> = labels.iter().enumerate().map(|(i, &l)| (names[i].as_str(), names[i + 1].as_str(), l)).collect();
            let once = build_graph(pairs.iter().copied()).unwrap();
            let twice = build_graph(pairs.iter().copied().chain(pairs.iter().map(|&(a, b, l)| (b, a, l)))).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
