use std::collections::VecDeque;

use super::{EdgeType, LabeledGraph, Vocabulary};

/// Per-type `(source, target)` index pairs. Messages flow source → target.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TypedEdges {
    lists: [Vec<(usize, usize)>; 6],
}

impl TypedEdges {
    pub fn get(&self, t: EdgeType) -> &[(usize, usize)] {
        &self.lists[t.index()]
    }

    pub fn get_mut(&mut self, t: EdgeType) -> &mut Vec<(usize, usize)> {
        &mut self.lists[t.index()]
    }

    pub fn push(&mut self, t: EdgeType, source: usize, target: usize) {
        self.lists[t.index()].push((source, target));
    }

    pub fn total(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    /// Edge types that occur at least once.
    pub fn present_types(&self) -> impl Iterator<Item = EdgeType> + '_ {
        EdgeType::ALL.into_iter().filter(|t| !self.get(*t).is_empty())
    }

    /// Applies `f` to every endpoint.
    pub fn map_nodes(&self, f: impl Fn(usize) -> usize) -> TypedEdges {
        let mut out = TypedEdges::default();
        for t in EdgeType::ALL {
            out.lists[t.index()] = self.get(t).iter().map(|&(s, d)| (f(s), f(d))).collect();
        }
        out
    }
}

/// Extended Levi graph before token ids are assigned.
///
/// Node order: original nodes, then one node per edge, then the global node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LeviLayout {
    pub labels: Vec<String>,
    pub edges: TypedEdges,
    pub positions: Vec<i64>,
    pub global_index: usize,
    /// Nodes the root cannot reach along default edges; they carry the sentinel position.
    pub unreachable: Vec<usize>,
}

/// The model-facing graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedLeviGraph {
    pub tokens: Vec<usize>,
    pub edges: TypedEdges,
    pub positions: Vec<i64>,
    /// `None` only for graphs stripped of the global node.
    pub global_index: Option<usize>,
}

pub const GLOBAL_TOKEN: &str = "<gnode>";

fn edge_label(rel: &str) -> String {
    if rel.starts_with(':') {
        rel.to_string()
    } else {
        format!(":{rel}")
    }
}

/// Builds the extended Levi graph of `g`.
///
/// Each edge `(u, l, v)` becomes a node labeled `l` with default edges
/// `u → e`, `e → v` and reverse edges `e → u`, `v → e`. Every node gets a
/// self edge and the global node sends a global edge to every other node.
/// With `sequential`, forward edges join consecutive original nodes and
/// backward edges run the other way.
///
/// Positions come from a breadth-first search over default edges starting at
/// the root. Original nodes store half the Levi distance (their depth in the
/// source graph); edge nodes store half rounded up, so an edge node shares the
/// position of the child it leads to. The global node is `-1`.
pub fn to_extended_levi(g: &LabeledGraph, sequential: bool) -> LeviLayout {
    let nv = g.nodes.len();
    let ne = g.edges.len();
    let total = nv + ne + 1;
    let global = nv + ne;

    let mut labels: Vec<String> = g.nodes.iter().map(|(_, t)| t.clone()).collect();
    labels.extend(g.edges.iter().map(|(_, l, _)| edge_label(l)));
    labels.push(GLOBAL_TOKEN.to_string());

    let mut edges = TypedEdges::default();
    for (k, &(u, _, v)) in g.edges.iter().enumerate() {
        let e = nv + k;
        edges.push(EdgeType::Default, u, e);
        edges.push(EdgeType::Default, e, v);
        edges.push(EdgeType::Reverse, e, u);
        edges.push(EdgeType::Reverse, v, e);
    }
    for i in 0..total {
        edges.push(EdgeType::SelfLoop, i, i);
    }
    for i in 0..global {
        edges.push(EdgeType::Global, global, i);
    }
    if sequential {
        for i in 1..nv {
            edges.push(EdgeType::Forward, i - 1, i);
            edges.push(EdgeType::Backward, i, i - 1);
        }
    }

    let mut out_adj = vec![Vec::new(); total];
    for &(s, t) in edges.get(EdgeType::Default) {
        out_adj[s].push(t);
    }
    let mut dist = vec![usize::MAX; total];
    let mut queue = VecDeque::from([g.root]);
    dist[g.root] = 0;
    while let Some(u) = queue.pop_front() {
        for &v in &out_adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut positions: Vec<i64> = (0..total)
        .map(|i| match dist[i] {
            usize::MAX => -2,
            d if i < nv => (d / 2) as i64,
            d => d.div_ceil(2) as i64,
        })
        .collect();
    positions[global] = -1;
    let unreachable: Vec<usize> = (0..global).filter(|&i| dist[i] == usize::MAX).collect();
    let sentinel = positions.iter().copied().max().unwrap_or(0).max(0) + 1;
    for &i in &unreachable {
        positions[i] = sentinel;
    }

    LeviLayout {
        labels,
        edges,
        positions,
        global_index: global,
        unreachable,
    }
}

impl LeviLayout {
    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn to_ids(&self, vocab: &Vocabulary) -> ExtendedLeviGraph {
        ExtendedLeviGraph {
            tokens: self.labels.iter().map(|l| vocab.id(l)).collect(),
            edges: self.edges.clone(),
            positions: self.positions.clone(),
            global_index: Some(self.global_index),
        }
    }
}

impl ExtendedLeviGraph {
    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    /// Removes the global node and its edges; the remaining indices are unchanged
    /// when the global node is last.
    pub fn without_global(&self) -> ExtendedLeviGraph {
        let Some(g) = self.global_index else {
            return self.clone();
        };
        let remap = |i: usize| if i > g { i - 1 } else { i };
        let mut edges = TypedEdges::default();
        for t in EdgeType::ALL {
            if t == EdgeType::Global {
                continue;
            }
            for &(s, d) in self.edges.get(t) {
                if s != g && d != g {
                    edges.push(t, remap(s), remap(d));
                }
            }
        }
        let mut tokens = self.tokens.clone();
        tokens.remove(g);
        let mut positions = self.positions.clone();
        positions.remove(g);
        ExtendedLeviGraph {
            tokens,
            edges,
            positions,
            global_index: None,
        }
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> ExtendedLeviGraph {
        assert_eq!(perm.len(), self.node_count());
        let mut tokens = vec![0; perm.len()];
        let mut positions = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            tokens[p] = self.tokens[i];
            positions[p] = self.positions[i];
        }
        ExtendedLeviGraph {
            tokens,
            edges: self.edges.map_nodes(|i| perm[i]),
            positions,
            global_index: self.global_index.map(|g| perm[g]),
        }
    }

    /// Structural checks used when loading external data.
    pub fn validate(&self, edge_types: usize) -> Result<(), String> {
        let n = self.node_count();
        if n == 0 {
            return Err("graph has no nodes".into());
        }
        if self.positions.len() != n {
            return Err(format!("{} positions for {n} nodes", self.positions.len()));
        }
        if let Some(g) = self.global_index {
            if g >= n {
                return Err(format!("global index {g} out of range"));
            }
        }
        for t in EdgeType::ALL {
            let edges = self.edges.get(t);
            if t.index() >= edge_types && !edges.is_empty() {
                return Err(format!("edge type `{t}` not allowed with {edge_types} edge types"));
            }
            if let Some((s, d)) = edges.iter().find(|(s, d)| *s >= n || *d >= n) {
                return Err(format!("{t} edge ({s}, {d}) out of range"));
            }
        }
        let mut has_self = vec![false; n];
        for &(s, d) in self.edges.get(EdgeType::SelfLoop) {
            if s == d {
                has_self[s] = true;
            }
        }
        if let Some(i) = has_self.iter().position(|h| !h) {
            return Err(format!("node {i} has no self edge"));
        }
        Ok(())
    }
}
