//! Graph convolution building blocks on the tape.
//!
//! Weights are passed as tape nodes so the same code runs on trainable
//! parameters and on hand-built constants in tests.

use crate::diff::{DiffError, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{EdgeType, ExtendedLeviGraph};

/// Typed incoming edges of one (possibly merged) graph.
///
/// Edges are stored type-major; `alpha` tensors produced by the attention
/// functions follow the same order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    nodes: usize,
    sources: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    in_degree: Vec<usize>,
}

impl Adjacency {
    /// `per_type[t]` lists `(source, target)` pairs; messages flow source to target.
    pub fn new(nodes: usize, per_type: Vec<Vec<(usize, usize)>>) -> Result<Adjacency> {
        if per_type.is_empty() {
            return Err(Error::Input("adjacency needs at least one edge type".into()));
        }
        let mut in_degree = vec![0; nodes];
        let mut sources = Vec::with_capacity(per_type.len());
        let mut targets = Vec::with_capacity(per_type.len());
        for edges in per_type {
            for &(s, t) in &edges {
                if s >= nodes || t >= nodes {
                    return Err(Error::Input(format!("edge ({s}, {t}) outside {nodes} nodes")));
                }
                in_degree[t] += 1;
            }
            sources.push(edges.iter().map(|e| e.0).collect());
            targets.push(edges.iter().map(|e| e.1).collect());
        }
        if let Some(v) = in_degree.iter().position(|&d| d == 0) {
            return Err(Error::Input(format!("node {v} has an empty neighbourhood (no self edge)")));
        }
        Ok(Adjacency {
            nodes,
            sources,
            targets,
            in_degree,
        })
    }

    /// Message structure of an extended Levi graph with `edge_types` classes.
    ///
    /// Global edges are used in both directions: the hub sends to every node
    /// and gathers from every node, otherwise its own state would never
    /// depend on the input.
    pub fn from_graph(g: &ExtendedLeviGraph, edge_types: usize) -> Result<Adjacency> {
        let mut per_type = vec![Vec::new(); edge_types];
        for t in EdgeType::ALL {
            let edges = g.edges.get(t);
            if edges.is_empty() {
                continue;
            }
            if t.index() >= edge_types {
                return Err(Error::Input(format!("edge type `{t}` unknown with {edge_types} edge types")));
            }
            let slot = &mut per_type[t.index()];
            slot.extend_from_slice(edges);
            if t == EdgeType::Global {
                slot.extend(edges.iter().map(|&(s, d)| (d, s)));
            }
        }
        Adjacency::new(g.node_count(), per_type)
    }

    /// Block-diagonal union; node indices of part `k` are shifted by the sizes before it.
    pub fn block_diagonal(parts: &[Adjacency]) -> Result<Adjacency> {
        let types = parts.first().map_or(1, Adjacency::type_count);
        let mut per_type = vec![Vec::new(); types];
        let mut offset = 0;
        for p in parts {
            if p.type_count() != types {
                return Err(Error::Input("edge type counts differ inside a batch".into()));
            }
            for (t, slot) in per_type.iter_mut().enumerate() {
                slot.extend(p.edges(t).map(|(s, d)| (s + offset, d + offset)));
            }
            offset += p.nodes;
        }
        Adjacency::new(offset, per_type)
    }

    /// All types collapsed into one.
    pub fn merged(&self) -> Adjacency {
        Adjacency {
            nodes: self.nodes,
            sources: vec![self.sources.concat()],
            targets: vec![self.targets.concat()],
            in_degree: self.in_degree.clone(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn type_count(&self) -> usize {
        self.sources.len()
    }

    pub fn edge_count(&self) -> usize {
        self.sources.iter().map(Vec::len).sum()
    }

    pub fn in_degree(&self) -> &[usize] {
        &self.in_degree
    }

    pub fn edges(&self, t: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sources[t].iter().copied().zip(self.targets[t].iter().copied())
    }

    /// Target of every edge in type-major order.
    pub fn all_targets(&self) -> Vec<usize> {
        self.targets.concat()
    }

    /// Every `(source, target)` pair in type-major order.
    pub fn all_edges(&self) -> Vec<(usize, usize)> {
        (0..self.type_count()).flat_map(|t| self.edges(t)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x)?,
        })
    }
}

/// How neighbour messages are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    /// Sum divided by the in-degree.
    Mean,
}

fn width_error(op: &'static str, shapes: &[(usize, usize)]) -> Error {
    Error::Diff(DiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|&(r, c)| vec![r, c]).collect(),
    })
}

fn inverse_degree(tape: &mut Tape, adj: &Adjacency) -> Result<Var> {
    let inv = adj.in_degree().iter().map(|&d| 1.0 / d as f64).collect();
    Ok(tape.constant(Tensor::column(inv))?)
}

/// Plain convolution over all edges regardless of type:
/// `h_v = act(Σ_{u→v} W h_u + b)`, optionally degree-normalised.
pub fn gcn_layer(
    tape: &mut Tape,
    h: Var,
    adj: &Adjacency,
    w: Var,
    b: Var,
    aggregation: Aggregation,
    act: Activation,
) -> Result<Var> {
    if tape.shape(h).0 != adj.nodes() {
        return Err(width_error("gcn_layer", &[tape.shape(h), (adj.nodes(), 0)]));
    }
    let z = tape.matmul_nt(h, w)?;
    let all = adj.all_edges();
    let src: Vec<usize> = all.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = all.iter().map(|e| e.1).collect();
    let msgs = tape.gather_rows(z, &src)?;
    let mut summed = tape.scatter_add_rows(msgs, &dst, adj.nodes())?;
    if aggregation == Aggregation::Mean {
        let inv = inverse_degree(tape, adj)?;
        summed = tape.mul_col(summed, inv)?;
    }
    let pre = tape.add_row(summed, b)?;
    act.apply(tape, pre)
}

/// `gcn_layer(h) + h`.
pub fn gcn_residual(
    tape: &mut Tape,
    h: Var,
    adj: &Adjacency,
    w: Var,
    b: Var,
    aggregation: Aggregation,
    act: Activation,
) -> Result<Var> {
    let (wo, wi) = tape.shape(w);
    if wo != wi || tape.shape(h).1 != wi {
        return Err(width_error("gcn_residual", &[tape.shape(h), (wo, wi)]));
    }
    let out = gcn_layer(tape, h, adj, w, b, aggregation, act)?;
    Ok(tape.add(out, h)?)
}

/// Concatenates layer outputs and maps them back with `w` (and `b`).
pub fn layer_aggregate(tape: &mut Tape, outputs: &[Var], w: Var, b: Option<Var>) -> Result<Var> {
    if outputs.is_empty() {
        return Err(Error::Diff(DiffError::Empty { op: "layer_aggregate" }));
    }
    let cat = tape.concat(outputs)?;
    let out = tape.matmul_nt(cat, w)?;
    match b {
        Some(b) => Ok(tape.add_row(out, b)?),
        None => Ok(out),
    }
}

/// Input of a dense layer: `[x; h1; ...; h_{l-1}]`.
pub fn dense_gather(tape: &mut Tape, x: Var, prior: &[Var], d_hidden: usize) -> Result<Var> {
    let (n, _) = tape.shape(x);
    for &p in prior {
        if tape.shape(p) != (n, d_hidden) {
            return Err(width_error("dense_gather", &[tape.shape(x), tape.shape(p)]));
        }
    }
    if prior.is_empty() {
        return Ok(x);
    }
    let mut parts = vec![x];
    parts.extend_from_slice(prior);
    Ok(tape.concat(&parts)?)
}

/// Attention weight of every edge, normalised over each target's incoming edges.
///
/// `z[t]` holds the transformed node features used for type `t` (the same
/// var may repeat). The score of edge `j → i` is
/// `leaky(a · [W_a z_i ; W_a z_j])`.
pub fn attention_coefficients(
    tape: &mut Tape,
    z: &[Var],
    adj: &Adjacency,
    w_a: Var,
    a: Var,
    slope: f64,
) -> Result<Var> {
    if z.len() != adj.type_count() {
        return Err(Error::Input(format!(
            "{} feature sets for {} edge types",
            z.len(),
            adj.type_count()
        )));
    }
    let (_, dh) = tape.shape(w_a);
    if tape.shape(a) != (1, 2 * dh) {
        return Err(width_error("attention_coefficients", &[tape.shape(w_a), tape.shape(a)]));
    }
    let a_dst = tape.slice_cols(a, 0, dh)?;
    let a_src = tape.slice_cols(a, dh, 2 * dh)?;
    let mut cache: Vec<(Var, Var, Var)> = Vec::new();
    let mut parts = Vec::new();
    for (t, &zt) in z.iter().enumerate() {
        if adj.sources[t].is_empty() {
            continue;
        }
        let (s_dst, s_src) = match cache.iter().find(|c| c.0 == zt) {
            Some(&(_, d, s)) => (d, s),
            None => {
                let p = tape.matmul_nt(zt, w_a)?;
                let d = tape.matmul_nt(p, a_dst)?;
                let s = tape.matmul_nt(p, a_src)?;
                cache.push((zt, d, s));
                (d, s)
            }
        };
        let ed = tape.gather_rows(s_dst, &adj.targets[t])?;
        let es = tape.gather_rows(s_src, &adj.sources[t])?;
        parts.push(tape.add(ed, es)?);
    }
    let scores = tape.concat_rows(&parts)?;
    let scores = tape.leaky_relu(scores, slope)?;
    Ok(tape.segment_softmax(scores, &adj.all_targets(), adj.nodes())?)
}

/// `1 / |N(v)|` for every edge into `v`.
pub fn uniform_coefficients(tape: &mut Tape, adj: &Adjacency) -> Result<Var> {
    let alpha = adj
        .all_targets()
        .iter()
        .map(|&t| 1.0 / adj.in_degree()[t] as f64)
        .collect();
    Ok(tape.constant(Tensor::column(alpha))?)
}

/// Per-type convolutions `v_t = act(Σ_{u→v of type t} α_vu z_t[u] + b_t)`.
///
/// A type with no edge into `v` leaves only `act(b_t)` in row `v`.
pub fn directional_conv(
    tape: &mut Tape,
    z: &[Var],
    adj: &Adjacency,
    alpha: Var,
    biases: &[Var],
    act: Activation,
) -> Result<Vec<Var>> {
    let types = adj.type_count();
    if z.len() != types || biases.len() != types {
        return Err(Error::Input(format!(
            "{} feature sets and {} biases for {types} edge types",
            z.len(),
            biases.len()
        )));
    }
    if tape.shape(alpha) != (adj.edge_count(), 1) {
        return Err(width_error("directional_conv", &[tape.shape(alpha), (adj.edge_count(), 1)]));
    }
    let n = adj.nodes();
    let mut out = Vec::with_capacity(types);
    let mut offset = 0;
    for t in 0..types {
        let count = adj.sources[t].len();
        let (_, dh) = tape.shape(z[t]);
        let summed = if count == 0 {
            tape.constant(Tensor::zeros(&[n, dh]))?
        } else {
            let a_t = tape.slice_rows(alpha, offset, offset + count)?;
            let msgs = tape.gather_rows(z[t], &adj.sources[t])?;
            let weighted = tape.mul_col(msgs, a_t)?;
            tape.scatter_add_rows(weighted, &adj.targets[t], n)?
        };
        offset += count;
        let pre = tape.add_row(summed, biases[t])?;
        out.push(act.apply(tape, pre)?);
    }
    Ok(out)
}

/// Fuses per-type outputs: `relu(W_f [v_1; ...; v_T] + b_f)`.
pub fn direction_aggregate(tape: &mut Tape, v: &[Var], w_f: Var, b_f: Var) -> Result<Var> {
    let (dh, cols) = tape.shape(w_f);
    if v.is_empty() || v.len() * dh != cols || v.iter().any(|&x| tape.shape(x).1 != dh) {
        let mut shapes: Vec<(usize, usize)> = v.iter().map(|&x| tape.shape(x)).collect();
        shapes.push((dh, cols));
        return Err(width_error("direction_aggregate", &shapes));
    }
    let cat = tape.concat(v)?;
    let pre = tape.linear_vars(cat, w_f, Some(b_f))?;
    Ok(tape.relu(pre)?)
}

/// `W (h_out + x) + b`.
pub fn linear_combination(tape: &mut Tape, h_out: Var, x: Var, w: Var, b: Var) -> Result<Var> {
    if tape.shape(h_out) != tape.shape(x) {
        return Err(width_error("linear_combination", &[tape.shape(h_out), tape.shape(x)]));
    }
    let s = tape.add(h_out, x)?;
    tape.linear_vars(s, w, Some(b)).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ParamStore;

    fn line_graph() -> Adjacency {
        // 0 -> 1 -> 2 with self loops, two types
        Adjacency::new(3, vec![vec![(0, 1), (1, 2)], vec![(0, 0), (1, 1), (2, 2)]]).unwrap()
    }

    #[test]
    fn isolated_node_rejected() {
        let err = Adjacency::new(2, vec![vec![(0, 0)]]).unwrap_err();
        assert!(err.to_string().contains("node 1"));
    }

    #[test]
    fn single_self_edge_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let adj = Adjacency::new(1, vec![vec![(0, 0)]]).unwrap();
        let h = tape.constant(Tensor::row(vec![1.5, -2.0])).unwrap();
        let w = tape.constant(Tensor::identity(2)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let out = gcn_layer(&mut tape, h, &adj, w, b, Aggregation::Sum, Activation::Identity).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, -2.0]);
    }

    #[test]
    fn fully_connected_pair_sums() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let adj = Adjacency::new(2, vec![vec![(0, 0), (0, 1), (1, 0), (1, 1)]]).unwrap();
        let h = tape.constant(Tensor::identity(2)).unwrap();
        let w = tape.constant(Tensor::identity(2)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let out = gcn_layer(&mut tape, h, &adj, w, b, Aggregation::Sum, Activation::Identity).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn residual_with_zero_weights_is_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let adj = line_graph();
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0], vec![-3.0, 0.0]]);
        let mut h = tape.constant(x.clone()).unwrap();
        let w = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        for _ in 0..2 {
            h = gcn_residual(&mut tape, h, &adj, w, b, Aggregation::Sum, Activation::Relu).unwrap();
        }
        assert_eq!(tape.value(h), &x);
        let w3 = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        assert!(gcn_residual(&mut tape, h, &adj, w3, b, Aggregation::Sum, Activation::Relu).is_err());
    }

    #[test]
    fn dense_gather_widths() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::zeros(&[4, 300])).unwrap();
        assert_eq!(dense_gather(&mut tape, x, &[], 100).unwrap(), x);
        let h1 = tape.constant(Tensor::zeros(&[4, 100])).unwrap();
        let h2 = tape.constant(Tensor::zeros(&[4, 100])).unwrap();
        let g3 = dense_gather(&mut tape, x, &[h1, h2], 100).unwrap();
        assert_eq!(tape.shape(g3), (4, 500));
        let bad = tape.constant(Tensor::zeros(&[4, 90])).unwrap();
        assert!(dense_gather(&mut tape, x, &[h1, bad], 100).is_err());
    }

    #[test]
    fn attention_single_neighbour_and_symmetry() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let adj = Adjacency::new(2, vec![vec![(0, 0), (1, 1), (0, 1)]]).unwrap();
        let z = tape.constant(Tensor::full(&[2, 3], 0.7)).unwrap();
        let w_a = tape.constant(Tensor::identity(3)).unwrap();
        let a = tape.constant(Tensor::row(vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.4])).unwrap();
        let alpha = attention_coefficients(&mut tape, &[z], &adj, w_a, a, 0.2).unwrap();
        // node 0 has one neighbour; node 1 sees identical features twice
        assert_eq!(tape.value(alpha).data(), &[1.0, 0.5, 0.5]);
    }

    #[test]
    fn attention_three_neighbours_hand_computed() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let adj = Adjacency::new(3, vec![vec![(0, 0), (1, 0), (2, 0), (1, 1), (2, 2)]]).unwrap();
        let z = tape.constant(Tensor::column(vec![1.0, 2.0, -1.0])).unwrap();
        let w_a = tape.constant(Tensor::scalar(0.5)).unwrap();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
        let alpha = attention_coefficients(&mut tape, &[z], &adj, w_a, a, 0.2).unwrap();
        // scores into node 0: 0.5 + 2*0.5*z_j -> 1.5, 2.5, leaky(-0.5) = -0.1
        let e = [1.5f64.exp(), 2.5f64.exp(), (-0.1f64).exp()];
        let s: f64 = e.iter().sum();
        let got = tape.value(alpha).data();
        for k in 0..3 {
            assert!((got[k] - e[k] / s).abs() < 1e-15);
        }
        assert_eq!(&got[3..], &[1.0, 1.0]);
    }

    #[test]
    fn missing_type_contributes_bias_only() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let adj = Adjacency::new(1, vec![vec![], vec![(0, 0)]]).unwrap();
        let z = tape.constant(Tensor::row(vec![2.0, -1.0])).unwrap();
        let alpha = uniform_coefficients(&mut tape, &adj).unwrap();
        let b0 = tape.constant(Tensor::row(vec![0.5, -0.5])).unwrap();
        let b1 = tape.constant(Tensor::row(vec![0.0, 0.25])).unwrap();
        let v = directional_conv(&mut tape, &[z, z], &adj, alpha, &[b0, b1], Activation::Relu).unwrap();
        assert_eq!(tape.value(v[0]).data(), &[0.5, 0.0]);
        assert_eq!(tape.value(v[1]).data(), &[2.0, 0.0]);
    }

    #[test]
    fn averaging_fusion() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let v = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0]])).unwrap();
        let mut w = Tensor::zeros(&[2, 8]);
        for t in 0..4 {
            w.set(0, 2 * t, 0.25);
            w.set(1, 2 * t + 1, 0.25);
        }
        let w_f = tape.constant(w).unwrap();
        let b_f = tape.constant(Tensor::zeros(&[2])).unwrap();
        let h = direction_aggregate(&mut tape, &[v, v, v, v], w_f, b_f).unwrap();
        assert_eq!(tape.value(h).data(), &[1.0, 0.0]);
        assert!(direction_aggregate(&mut tape, &[v, v, v], w_f, b_f).is_err());
    }

    #[test]
    fn combination_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let eye = tape.constant(Tensor::identity(2)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let out = linear_combination(&mut tape, zero, x, eye, b).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn aggregate_single_layer_identity() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let h = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let eye = tape.constant(Tensor::identity(2)).unwrap();
        let out = layer_aggregate(&mut tape, &[h], eye, None).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
        assert!(layer_aggregate(&mut tape, &[], eye, None).is_err());
    }

    #[test]
    fn global_edges_run_both_ways() {
        use crate::graph::{parse_penman, to_extended_levi, Vocabulary};
        let g = parse_penman("(c / come-01 :ARG0 (a / and))").unwrap();
        let lg = to_extended_levi(&g, false).to_ids(&Vocabulary::from_tokens([]));
        let adj = Adjacency::from_graph(&lg, 4).unwrap();
        let global: Vec<_> = adj.edges(EdgeType::Global.index()).collect();
        assert_eq!(global.len(), 6);
        assert!(global.contains(&(0, 3)) && global.contains(&(3, 0)));
        assert_eq!(adj.in_degree()[3], 4);
    }
}
