//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use dcgcn::encoder::EncoderConfig;
use dcgcn::graph::{ExtendedLeviGraph, GraphEntry};
use dcgcn::synth::{random_labeled_graph, to_examples};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Extended Levi graphs of arbitrary random digraphs, plus the vocabulary size.
pub fn random_levi_graphs(count: usize, max_nodes: usize, max_edges: usize, seed: u64) -> (Vec<ExtendedLeviGraph>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<GraphEntry> = (0..count)
        .map(|_| GraphEntry {
            graph: random_labeled_graph(&mut rng, max_nodes, max_edges),
            target: None,
        })
        .collect();
    let (vocab, examples) = to_examples(&entries, None).unwrap();
    (examples.into_iter().map(|e| e.graph).collect(), vocab.len())
}

pub fn small_encoder(blocks: usize, n: usize, m: usize, d: usize) -> EncoderConfig {
    EncoderConfig {
        blocks,
        n,
        m,
        d,
        pos_dim: 4,
        ..EncoderConfig::default()
    }
}

/// Extended Levi graph rebuilt straight from its definition, edges per type in
/// [`dcgcn::graph::EdgeType::ALL`] order, each list sorted.
pub struct BruteLevi {
    pub labels: Vec<String>,
    pub edges: [Vec<(usize, usize)>; 6],
    pub positions: Vec<i64>,
}

pub fn brute_levi(g: &dcgcn::graph::LabeledGraph, sequential: bool) -> BruteLevi {
    let nv = g.nodes.len();
    let ne = g.edges.len();
    let hub = nv + ne;
    let mut labels: Vec<String> = g.nodes.iter().map(|n| n.1.clone()).collect();
    for (_, l, _) in &g.edges {
        labels.push(if l.starts_with(':') { l.clone() } else { format!(":{l}") });
    }
    labels.push("<gnode>".into());
    let mut edges: [Vec<(usize, usize)>; 6] = Default::default();
    for (k, (u, _, v)) in g.edges.iter().enumerate() {
        let e = nv + k;
        edges[0].extend([(*u, e), (e, *v)]);
        edges[1].extend([(e, *u), (*v, e)]);
    }
    edges[2] = (0..=hub).map(|i| (i, i)).collect();
    edges[3] = (0..hub).map(|i| (hub, i)).collect();
    if sequential {
        edges[4] = (1..nv).map(|i| (i - 1, i)).collect();
        edges[5] = (1..nv).map(|i| (i, i - 1)).collect();
    }
    for list in &mut edges {
        list.sort_unstable();
    }

    // depth in the source graph by repeated relaxation
    let mut depth = vec![None::<i64>; nv];
    depth[g.root] = Some(0);
    let mut changed = true;
    while changed {
        changed = false;
        for (u, _, v) in &g.edges {
            if let Some(du) = depth[*u] {
                if depth[*v].map_or(true, |dv| du + 1 < dv) {
                    depth[*v] = Some(du + 1);
                    changed = true;
                }
            }
        }
    }
    // an edge node sits one step past its source
    let mut positions: Vec<Option<i64>> = depth.clone();
    positions.extend(g.edges.iter().map(|(u, _, _)| depth[*u].map(|d| d + 1)));
    let sentinel = positions.iter().flatten().copied().max().unwrap_or(0).max(0) + 1;
    let mut positions: Vec<i64> = positions.into_iter().map(|p| p.unwrap_or(sentinel)).collect();
    positions.push(-1);
    BruteLevi { labels, edges, positions }
}

/// Next-token distributions drawn at random for every prefix. Ids below
/// `first_word` other than `<eos>` are impossible.
pub struct SyntheticSteps {
    pub vocab: usize,
    pub first_word: usize,
    pub seed: u64,
}

impl SyntheticSteps {
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        use rand::Rng;
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let raw: Vec<f64> = (0..self.vocab)
            .map(|t| {
                if t >= self.first_word || t == dcgcn::graph::EOS {
                    rng.gen_range(-3.0..3.0)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let lse = raw.iter().map(|x| x.exp()).sum::<f64>().ln();
        raw.iter().map(|x| x - lse).collect()
    }

    /// Best length-normalised complete sequence of at most `max_len` tokens, by enumeration.
    pub fn enumerate_best(&self, max_len: usize) -> (Vec<usize>, f64) {
        let eos = dcgcn::graph::EOS;
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut frontier = vec![(Vec::<usize>::new(), 0.0)];
        for len in 1..=max_len {
            let mut next = Vec::new();
            for (prefix, lp) in &frontier {
                let row = self.log_probs(prefix);
                let done = lp + row[eos];
                if done.is_finite() && done / len as f64 > best.1 {
                    let mut seq = prefix.clone();
                    seq.push(eos);
                    best = (seq, done / len as f64);
                }
                for (t, &l) in row.iter().enumerate() {
                    if t != eos && l.is_finite() && len < max_len {
                        let mut seq = prefix.clone();
                        seq.push(t);
                        next.push((seq, lp + l));
                    }
                }
            }
            frontier = next;
        }
        best
    }
}

impl dcgcn::inference::StepModel for SyntheticSteps {
    /// Tokens so far; `None` before the first step.
    type State = Option<Vec<usize>>;

    fn start(&self) -> Self::State {
        None
    }

    fn step(&self, states: &[Self::State], prev: &[usize]) -> dcgcn::Result<(Vec<Vec<f64>>, Vec<Self::State>)> {
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (s, &p) in states.iter().zip(prev) {
            let prefix = match s {
                None => Vec::new(),
                Some(s) => [s.as_slice(), &[p]].concat(),
            };
            rows.push(self.log_probs(&prefix));
            next.push(Some(prefix));
        }
        Ok((rows, next))
    }
}
