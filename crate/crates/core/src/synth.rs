//! Random graphs and toy graph-to-text corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{build_vocab, to_extended_levi, Example, GraphEntry, LabeledGraph, Vocabulary};
use crate::error::Result;

/// Arbitrary labeled digraph: any edge multiset, possibly with cycles and self loops.
pub fn random_labeled_graph<R: Rng>(rng: &mut R, max_nodes: usize, max_edges: usize) -> LabeledGraph {
    let n = rng.gen_range(1..=max_nodes.max(1));
    let e = rng.gen_range(0..=max_edges);
    LabeledGraph {
        nodes: (0..n).map(|i| (format!("v{i}"), format!("c{}", rng.gen_range(0..8)))).collect(),
        edges: (0..e)
            .map(|_| (rng.gen_range(0..n), format!(":r{}", rng.gen_range(0..4)), rng.gen_range(0..n)))
            .collect(),
        root: rng.gen_range(0..n),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeCorpus {
    pub concepts: usize,
    pub relations: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    /// Chance of one extra re-entrant edge per graph.
    pub reentrancy: f64,
}

impl Default for TreeCorpus {
    fn default() -> Self {
        TreeCorpus {
            concepts: 12,
            relations: 3,
            min_nodes: 3,
            max_nodes: 7,
            reentrancy: 0.0,
        }
    }
}

impl TreeCorpus {
    /// Rooted tree; node `i > 0` hangs off a random earlier node.
    pub fn graph<R: Rng>(&self, rng: &mut R) -> LabeledGraph {
        let n = rng.gen_range(self.min_nodes..=self.max_nodes);
        let nodes = (0..n)
            .map(|i| (format!("x{i}"), format!("c{}", rng.gen_range(0..self.concepts))))
            .collect();
        let mut edges: Vec<(usize, String, usize)> = (1..n)
            .map(|i| (rng.gen_range(0..i), format!(":r{}", rng.gen_range(0..self.relations)), i))
            .collect();
        if n > 2 && rng.gen_bool(self.reentrancy) {
            let a = rng.gen_range(0..n - 1);
            let b = rng.gen_range(a + 1..n);
            edges.push((a, format!(":r{}", rng.gen_range(0..self.relations)), b));
        }
        LabeledGraph { nodes, edges, root: 0 }
    }

    /// Depth-first walk from the root, children in relation order, each child
    /// preceded by its relation word. Re-entrant nodes are emitted once.
    pub fn linearize(g: &LabeledGraph) -> Vec<String> {
        let mut out = Vec::new();
        let mut seen = vec![false; g.nodes.len()];
        fn visit(g: &LabeledGraph, v: usize, seen: &mut [bool], out: &mut Vec<String>) {
            seen[v] = true;
            out.push(g.nodes[v].1.replace('c', "w"));
            let mut kids: Vec<&(usize, String, usize)> = g.edges.iter().filter(|e| e.0 == v).collect();
            kids.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.cmp(&b.2)));
            for (_, rel, child) in kids {
                if !seen[*child] {
                    out.push(rel.trim_start_matches(':').to_string());
                    visit(g, *child, seen, out);
                }
            }
        }
        visit(g, g.root, &mut seen, &mut out);
        out
    }

    pub fn entries(&self, count: usize, seed: u64) -> Vec<GraphEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let graph = self.graph(&mut rng);
                let target = Some(TreeCorpus::linearize(&graph));
                GraphEntry { graph, target }
            })
            .collect()
    }
}

/// Builds a vocabulary over `entries` and converts them to examples.
pub fn to_examples(entries: &[GraphEntry], vocab: Option<&Vocabulary>) -> Result<(Vocabulary, Vec<Example>)> {
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(entries, 1)?,
    };
    let examples = entries
        .iter()
        .map(|e| Example {
            graph: to_extended_levi(&e.graph, false).to_ids(&vocab),
            target: e.target.iter().flatten().map(|w| vocab.id(w)).collect(),
        })
        .collect();
    Ok((vocab, examples))
}

/// Shuffles indices with a seeded generator.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}
