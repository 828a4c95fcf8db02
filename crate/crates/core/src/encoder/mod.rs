//! The densely connected graph encoder and its plain residual baselines.

mod layers;

pub use layers::{
    attention_coefficients, dense_gather, direction_aggregate, directional_conv, gcn_layer, gcn_residual,
    layer_aggregate, linear_combination, uniform_coefficients, Activation, Adjacency, Aggregation,
};

use rand::Rng;

use crate::diff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::ExtendedLeviGraph;

/// Positions are clamped to `[-1, MAX_POSITION]`; `-1` marks the global node.
pub const MAX_POSITION: i64 = 30;
const POSITION_ROWS: usize = MAX_POSITION as usize + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Dcgcn,
    /// Residual GCN stack.
    GcnRc,
    /// Residual GCN stack whose layer outputs are concatenated and projected.
    GcnRcLa,
}

impl EncoderKind {
    pub fn key(self) -> &'static str {
        match self {
            EncoderKind::Dcgcn => "dcgcn",
            EncoderKind::GcnRc => "gcn-rc",
            EncoderKind::GcnRcLa => "gcn-rc-la",
        }
    }

    pub fn parse(s: &str) -> Option<EncoderKind> {
        [EncoderKind::Dcgcn, EncoderKind::GcnRc, EncoderKind::GcnRcLa]
            .into_iter()
            .find(|k| k.key() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub blocks: usize,
    /// Layers in the first sub-block of every block.
    pub n: usize,
    /// Layers in the second sub-block; 0 drops it.
    pub m: usize,
    pub d: usize,
    /// Position embedding width; word embeddings get `d - pos_dim`.
    pub pos_dim: usize,
    pub edge_types: usize,
    pub slope: f64,
    pub attention: bool,
    pub direction_aggregation: bool,
    pub linear_combination: bool,
    /// 1-based blocks whose layers see only the previous layer's output.
    pub undense_blocks: Vec<usize>,
    /// Layer count of the baselines.
    pub baseline_layers: usize,
    /// Hidden width of the baselines; inputs and outputs are projected when it differs from `d`.
    pub baseline_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Dcgcn,
            blocks: 4,
            n: 6,
            m: 3,
            d: 360,
            pos_dim: 60,
            edge_types: 4,
            slope: 0.2,
            attention: true,
            direction_aggregation: true,
            linear_combination: true,
            undense_blocks: Vec::new(),
            baseline_layers: 36,
            baseline_width: 360,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 {
            return bad("d must be positive".into());
        }
        if self.pos_dim >= self.d {
            return bad(format!("pos_dim {} must be smaller than d {}", self.pos_dim, self.d));
        }
        if self.edge_types != 4 && self.edge_types != 6 {
            return bad(format!("edge_types must be 4 or 6, got {}", self.edge_types));
        }
        if !(self.slope > 0.0) {
            return bad("attention slope must be positive".into());
        }
        match self.kind {
            EncoderKind::Dcgcn => {
                if self.blocks == 0 || self.n == 0 {
                    return bad("blocks and n must be positive".into());
                }
                for l in [self.n, self.m] {
                    if l > 0 && self.d % l != 0 {
                        return bad(format!("d={} is not divisible by {l} layers", self.d));
                    }
                }
                if let Some(b) = self.undense_blocks.iter().find(|&&b| b == 0 || b > self.blocks) {
                    return bad(format!("block {b} does not exist (blocks={})", self.blocks));
                }
            }
            EncoderKind::GcnRc | EncoderKind::GcnRcLa => {
                if self.baseline_layers == 0 || self.baseline_width == 0 {
                    return bad("baseline layers and width must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Layer counts of the sub-blocks in one block.
    pub fn sublayers(&self) -> Vec<usize> {
        [self.n, self.m].into_iter().filter(|&l| l > 0).collect()
    }

    /// Total graph convolution layers.
    pub fn layer_count(&self) -> usize {
        match self.kind {
            EncoderKind::Dcgcn => self.blocks * (self.n + self.m),
            _ => self.baseline_layers,
        }
    }

    fn is_dense(&self, block: usize) -> bool {
        !self.undense_blocks.contains(&(block + 1))
    }

    /// Input widths of every dense layer, block by block.
    pub fn layer_input_widths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in 0..self.blocks {
            for l in self.sublayers() {
                let dh = self.d / l;
                for k in 0..l {
                    out.push(match (self.is_dense(b), k) {
                        (_, 0) => self.d,
                        (true, k) => self.d + dh * k,
                        (false, _) => dh,
                    });
                }
            }
        }
        out
    }

    /// Trainable scalars between the embeddings and the decoder.
    pub fn body_param_count(&self) -> usize {
        let d = self.d;
        match self.kind {
            EncoderKind::Dcgcn => {
                let t = self.edge_types;
                let mut total = 0;
                let mut widths = self.layer_input_widths().into_iter();
                for _ in 0..self.blocks {
                    for l in self.sublayers() {
                        let dh = d / l;
                        for _ in 0..l {
                            let din = widths.next().unwrap_or(d);
                            let convs = if self.direction_aggregation { t } else { 1 };
                            total += convs * (dh * din + dh);
                            if self.attention {
                                total += dh * dh + 2 * dh;
                            }
                            if self.direction_aggregation {
                                total += dh * t * dh + dh;
                            }
                        }
                        if self.linear_combination {
                            total += d * d + d;
                        }
                    }
                }
                total + d * self.blocks * d + d
            }
            EncoderKind::GcnRc | EncoderKind::GcnRcLa => {
                let w = self.baseline_width;
                let l = self.baseline_layers;
                let mut total = l * (w * w + w);
                if w != d {
                    total += 2 * d * w;
                }
                if self.kind == EncoderKind::GcnRcLa {
                    total += w * l * w + w;
                }
                total
            }
        }
    }

    /// A residual GCN baseline with the same layer count and the closest body size.
    pub fn parameter_matched_baseline(&self, kind: EncoderKind) -> EncoderConfig {
        let target = self.body_param_count() as i64;
        let mut base = EncoderConfig {
            kind,
            baseline_layers: self.layer_count(),
            ..self.clone()
        };
        let best = (1..=4 * self.d)
            .min_by_key(|&w| {
                base.baseline_width = w;
                (base.body_param_count() as i64 - target).abs()
            })
            .unwrap_or(self.d);
        base.baseline_width = best;
        base
    }
}

/// Graphs merged block-diagonally into one.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub tokens: Vec<usize>,
    pub positions: Vec<i64>,
    pub adjacency: Adjacency,
    /// Example `k` owns nodes `offsets[k]..offsets[k + 1]`.
    pub offsets: Vec<usize>,
    /// Absolute index of each example's global node.
    pub global: Vec<Option<usize>>,
}

impl GraphBatch {
    pub fn new(graphs: &[&ExtendedLeviGraph], edge_types: usize) -> Result<GraphBatch> {
        if graphs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = vec![0];
        let mut global = Vec::new();
        let mut parts = Vec::new();
        for g in graphs {
            let base = tokens.len();
            if g.positions.len() != g.node_count() {
                return Err(Error::Input("positions and tokens differ in length".into()));
            }
            tokens.extend_from_slice(&g.tokens);
            positions.extend_from_slice(&g.positions);
            global.push(g.global_index.map(|i| i + base));
            parts.push(Adjacency::from_graph(g, edge_types)?);
            offsets.push(tokens.len());
        }
        Ok(GraphBatch {
            tokens,
            positions,
            adjacency: Adjacency::block_diagonal(&parts)?,
            offsets,
            global,
        })
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.tokens.len()
    }

    /// Example index of every node.
    pub fn example_of(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.node_count());
        for k in 0..self.len() {
            out.extend(std::iter::repeat(k).take(self.offsets[k + 1] - self.offsets[k]));
        }
        out
    }

    /// Rows usable as attention memory (all but global nodes) and their example.
    pub fn memory_rows(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut segment = Vec::new();
        for k in 0..self.len() {
            for i in self.offsets[k]..self.offsets[k + 1] {
                if self.global[k] != Some(i) {
                    rows.push(i);
                    segment.push(k);
                }
            }
        }
        (rows, segment)
    }

    /// `B × N` matrix picking each global node, or averaging nodes when an example has none.
    fn readout(&self) -> Tensor {
        let n = self.node_count();
        let mut p = Tensor::zeros(&[self.len(), n]);
        for k in 0..self.len() {
            match self.global[k] {
                Some(g) => p.set(k, g, 1.0),
                None => {
                    let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
                    for i in lo..hi {
                        p.set(k, i, 1.0 / (hi - lo) as f64);
                    }
                }
            }
        }
        p
    }
}

fn position_row(p: i64) -> usize {
    (p.clamp(-1, MAX_POSITION) + 1) as usize
}

#[derive(Clone, Debug)]
struct DenseLayer {
    hidden: usize,
    /// One `(W_t, b_t)` per edge type, or a single shared pair.
    convs: Vec<(ParamId, ParamId)>,
    attention: Option<(ParamId, ParamId)>,
    fuse: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct SubBlock {
    layers: Vec<DenseLayer>,
    dense: bool,
    combination: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
enum Body {
    Dcgcn {
        blocks: Vec<Vec<SubBlock>>,
        last: (ParamId, ParamId),
    },
    Gcn {
        input: Option<ParamId>,
        layers: Vec<(ParamId, ParamId)>,
        aggregate: Option<(ParamId, ParamId)>,
        output: Option<ParamId>,
    },
}

/// Values recorded during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct EncodeTrace {
    /// Input width of every graph convolution layer in order.
    pub layer_inputs: Vec<usize>,
    /// Output width of every sub-block.
    pub sublock_outputs: Vec<usize>,
    /// Attention weights of every dense layer, type-major edge order.
    pub attention: Vec<Tensor>,
}

pub struct EncoderOutput {
    /// One row per node of the batch.
    pub nodes: Var,
    /// One row per example.
    pub global: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    vocab_size: usize,
    word: ParamId,
    position: ParamId,
    body: Body,
}

fn weight<R: Rng>(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut R) -> ParamId {
    store.register_init(name, &[rows, cols], Init::Glorot, rng)
}

fn bias<R: Rng>(store: &mut ParamStore, name: String, width: usize, rng: &mut R) -> ParamId {
    store.register_init(name, &[width], Init::Zeros, rng)
}

impl Encoder {
    /// Registers parameters under the `enc.` prefix.
    pub fn new<R: Rng>(store: &mut ParamStore, config: EncoderConfig, vocab_size: usize, rng: &mut R) -> Result<Encoder> {
        config.validate()?;
        let d = config.d;
        let word = store.register_init("enc.embed.word", &[vocab_size, d - config.pos_dim], Init::Uniform(0.1), rng);
        let position = store.register_init("enc.embed.pos", &[POSITION_ROWS, config.pos_dim], Init::Uniform(0.1), rng);
        let body = match config.kind {
            EncoderKind::Dcgcn => {
                let widths = config.layer_input_widths();
                let mut widths = widths.into_iter();
                let mut blocks = Vec::new();
                for b in 0..config.blocks {
                    let mut subs = Vec::new();
                    for (s, l) in config.sublayers().into_iter().enumerate() {
                        let dh = d / l;
                        let p = format!("enc.block{b}.sub{s}");
                        let mut layers = Vec::new();
                        for k in 0..l {
                            let din = widths.next().unwrap_or(d);
                            let lp = format!("{p}.layer{k}");
                            let convs = if config.direction_aggregation {
                                (0..config.edge_types)
                                    .map(|t| {
                                        (weight(store, format!("{lp}.w{t}"), dh, din, rng), bias(store, format!("{lp}.b{t}"), dh, rng))
                                    })
                                    .collect()
                            } else {
                                vec![(weight(store, format!("{lp}.w"), dh, din, rng), bias(store, format!("{lp}.b"), dh, rng))]
                            };
                            let attention = config.attention.then(|| {
                                (
                                    weight(store, format!("{lp}.att_w"), dh, dh, rng),
                                    weight(store, format!("{lp}.att_a"), 1, 2 * dh, rng),
                                )
                            });
                            let fuse = config.direction_aggregation.then(|| {
                                (
                                    weight(store, format!("{lp}.fuse_w"), dh, config.edge_types * dh, rng),
                                    bias(store, format!("{lp}.fuse_b"), dh, rng),
                                )
                            });
                            layers.push(DenseLayer {
                                hidden: dh,
                                convs,
                                attention,
                                fuse,
                            });
                        }
                        let combination = config
                            .linear_combination
                            .then(|| (weight(store, format!("{p}.comb_w"), d, d, rng), bias(store, format!("{p}.comb_b"), d, rng)));
                        subs.push(SubBlock {
                            layers,
                            dense: config.is_dense(b),
                            combination,
                        });
                    }
                    blocks.push(subs);
                }
                let last = (
                    weight(store, "enc.final_w".into(), d, config.blocks * d, rng),
                    bias(store, "enc.final_b".into(), d, rng),
                );
                Body::Dcgcn { blocks, last }
            }
            EncoderKind::GcnRc | EncoderKind::GcnRcLa => {
                let w = config.baseline_width;
                let l = config.baseline_layers;
                let projected = w != d;
                Body::Gcn {
                    input: projected.then(|| weight(store, "enc.gcn.in_w".into(), w, d, rng)),
                    layers: (0..l)
                        .map(|k| {
                            (
                                weight(store, format!("enc.gcn.layer{k}.w"), w, w, rng),
                                bias(store, format!("enc.gcn.layer{k}.b"), w, rng),
                            )
                        })
                        .collect(),
                    aggregate: (config.kind == EncoderKind::GcnRcLa).then(|| {
                        (weight(store, "enc.gcn.la_w".into(), w, l * w, rng), bias(store, "enc.gcn.la_b".into(), w, rng))
                    }),
                    output: projected.then(|| weight(store, "enc.gcn.out_w".into(), d, w, rng)),
                }
            }
        };
        Ok(Encoder {
            config,
            vocab_size,
            word,
            position,
            body,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Node embeddings: word vector followed by position vector.
    pub fn embed(&self, tape: &mut Tape, batch: &GraphBatch) -> Result<Var> {
        if let Some(&t) = batch.tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", self.vocab_size)));
        }
        let word = tape.param(self.word)?;
        let word = tape.gather_rows(word, &batch.tokens)?;
        let rows: Vec<usize> = batch.positions.iter().map(|&p| position_row(p)).collect();
        let pos = tape.param(self.position)?;
        let pos = tape.gather_rows(pos, &rows)?;
        Ok(tape.concat(&[word, pos])?)
    }

    pub fn encode(&self, tape: &mut Tape, batch: &GraphBatch, trace: Option<&mut EncodeTrace>) -> Result<EncoderOutput> {
        let x = self.embed(tape, batch)?;
        let nodes = self.encode_from(tape, x, &batch.adjacency, trace)?;
        let readout = tape.constant(batch.readout())?;
        let global = tape.matmul(readout, nodes)?;
        Ok(EncoderOutput { nodes, global })
    }

    /// Runs the graph layers on given node inputs.
    pub fn encode_from(
        &self,
        tape: &mut Tape,
        x: Var,
        adj: &Adjacency,
        mut trace: Option<&mut EncodeTrace>,
    ) -> Result<Var> {
        if adj.type_count() != self.config.edge_types {
            return Err(Error::Input(format!(
                "graph has {} edge types, encoder expects {}",
                adj.type_count(),
                self.config.edge_types
            )));
        }
        match &self.body {
            Body::Dcgcn { blocks, last } => {
                let mut input = x;
                let mut outs = Vec::new();
                for subs in blocks {
                    for sub in subs {
                        let h_out = self.sublock(tape, sub, input, adj, trace.as_deref_mut())?;
                        if let Some(t) = trace.as_deref_mut() {
                            t.sublock_outputs.push(tape.shape(h_out).1);
                        }
                        input = match sub.combination {
                            Some((w, b)) => {
                                let (w, b) = (tape.param(w)?, tape.param(b)?);
                                linear_combination(tape, h_out, input, w, b)?
                            }
                            None => h_out,
                        };
                    }
                    let with_residual = tape.add(input, x)?;
                    outs.push(with_residual);
                }
                let cat = tape.concat(&outs)?;
                Ok(tape.linear(cat, last.0, Some(last.1))?)
            }
            Body::Gcn {
                input,
                layers,
                aggregate,
                output,
            } => {
                let merged = adj.merged();
                let mut h = match input {
                    Some(w) => tape.linear(x, *w, None)?,
                    None => x,
                };
                let mut outs = Vec::new();
                for &(w, b) in layers {
                    if let Some(t) = trace.as_deref_mut() {
                        t.layer_inputs.push(tape.shape(h).1);
                    }
                    let (w, b) = (tape.param(w)?, tape.param(b)?);
                    h = gcn_residual(tape, h, &merged, w, b, Aggregation::Mean, Activation::Relu)?;
                    outs.push(h);
                }
                if let Some((w, b)) = aggregate {
                    let (w, b) = (tape.param(*w)?, tape.param(*b)?);
                    h = layer_aggregate(tape, &outs, w, Some(b))?;
                }
                match output {
                    Some(w) => Ok(tape.linear(h, *w, None)?),
                    None => Ok(h),
                }
            }
        }
    }

    fn sublock(
        &self,
        tape: &mut Tape,
        sub: &SubBlock,
        x: Var,
        adj: &Adjacency,
        mut trace: Option<&mut EncodeTrace>,
    ) -> Result<Var> {
        let mut outs: Vec<Var> = Vec::new();
        for layer in &sub.layers {
            let g = match (sub.dense, outs.last()) {
                (true, _) => dense_gather(tape, x, &outs, layer.hidden)?,
                (false, Some(&prev)) => prev,
                (false, None) => x,
            };
            if let Some(t) = trace.as_deref_mut() {
                t.layer_inputs.push(tape.shape(g).1);
            }
            outs.push(self.dense_layer(tape, layer, g, adj, trace.as_deref_mut())?);
        }
        Ok(tape.concat(&outs)?)
    }

    fn dense_layer(
        &self,
        tape: &mut Tape,
        layer: &DenseLayer,
        g: Var,
        adj: &Adjacency,
        trace: Option<&mut EncodeTrace>,
    ) -> Result<Var> {
        let types = self.config.edge_types;
        let mut z = Vec::with_capacity(types);
        let mut biases = Vec::with_capacity(types);
        for &(w, b) in &layer.convs {
            let w = tape.param(w)?;
            z.push(tape.matmul_nt(g, w)?);
            biases.push(tape.param(b)?);
        }
        if layer.convs.len() == 1 {
            z = vec![z[0]; types];
            biases = vec![biases[0]; types];
        }
        let alpha = match layer.attention {
            Some((w_a, a)) => {
                let (w_a, a) = (tape.param(w_a)?, tape.param(a)?);
                attention_coefficients(tape, &z, adj, w_a, a, self.config.slope)?
            }
            None => uniform_coefficients(tape, adj)?,
        };
        if let Some(t) = trace {
            t.attention.push(tape.value(alpha).clone());
        }
        let v = directional_conv(tape, &z, adj, alpha, &biases, Activation::Relu)?;
        match layer.fuse {
            Some((w_f, b_f)) => {
                let (w_f, b_f) = (tape.param(w_f)?, tape.param(b_f)?);
                direction_aggregate(tape, &v, w_f, b_f)
            }
            None => {
                let mut sum = v[0];
                for &vt in &v[1..] {
                    sum = tape.add(sum, vt)?;
                }
                Ok(tape.scale(sum, 1.0 / types as f64)?)
            }
        }
    }
}
