//! Encoder and decoder under one parameter store.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::decoder::{Decoder, DecoderConfig, LossOutput, StateValues};
use crate::diff::checkpoint::{load_into, write_checkpoint};
use crate::diff::{gradient_check, GradCheckReport, ParamStore, Sampling, Tape, Tensor};
use crate::encoder::{EncodeTrace, Encoder, EncoderConfig, EncoderKind, GraphBatch};
use crate::error::{Error, Result};
use crate::graph::{Example, ExtendedLeviGraph};
use crate::synth::{to_examples, TreeCorpus};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    /// Without it graphs lose their global node and the decoder starts from the node mean.
    pub global_node: bool,
    pub coverage: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            encoder,
            vocab_size,
            global_node: true,
            coverage: true,
        }
    }

    /// Reads architecture keys, leaving everything else in `kv`.
    pub fn take_from(kv: &mut KeyValues, base: ModelConfig) -> Result<ModelConfig> {
        let mut c = base;
        let e = &mut c.encoder;
        if let Some(k) = kv.take::<String>("encoder")? {
            e.kind = EncoderKind::parse(&k).ok_or_else(|| Error::Config(format!("unknown encoder `{k}`")))?;
        }
        e.blocks = kv.take_or("blocks", e.blocks)?;
        e.n = kv.take_or("n", e.n)?;
        e.m = kv.take_or("m", e.m)?;
        e.d = kv.take_or("d", e.d)?;
        e.pos_dim = kv.take_or("pos_dim", e.pos_dim)?;
        e.edge_types = kv.take_or("edge_types", e.edge_types)?;
        e.slope = kv.take_or("slope", e.slope)?;
        e.attention = kv.take_or("attention", e.attention)?;
        e.direction_aggregation = kv.take_or("direction_aggregation", e.direction_aggregation)?;
        e.linear_combination = kv.take_or("linear_combination", e.linear_combination)?;
        if let Some(list) = kv.take::<String>("undense_blocks")? {
            e.undense_blocks = parse_list(&list)?;
        }
        e.baseline_layers = kv.take_or("baseline_layers", e.baseline_layers)?;
        e.baseline_width = kv.take_or("baseline_width", e.baseline_width)?;
        c.vocab_size = kv.take_or("vocab_size", c.vocab_size)?;
        c.global_node = kv.take_or("global_node", c.global_node)?;
        c.coverage = kv.take_or("coverage", c.coverage)?;
        Ok(c)
    }

    /// Everything needed to rebuild the parameter layout.
    pub fn to_arch(&self) -> String {
        let e = &self.encoder;
        let undense: Vec<String> = e.undense_blocks.iter().map(usize::to_string).collect();
        format!(
            "encoder={}\nblocks={}\nn={}\nm={}\nd={}\npos_dim={}\nedge_types={}\nslope={}\nattention={}\n\
             direction_aggregation={}\nlinear_combination={}\nundense_blocks={}\nbaseline_layers={}\n\
             baseline_width={}\nvocab_size={}\nglobal_node={}\ncoverage={}\n",
            e.kind.key(),
            e.blocks,
            e.n,
            e.m,
            e.d,
            e.pos_dim,
            e.edge_types,
            e.slope,
            e.attention,
            e.direction_aggregation,
            e.linear_combination,
            undense.join(","),
            e.baseline_layers,
            e.baseline_width,
            self.vocab_size,
            self.global_node,
            self.coverage
        )
    }

    pub fn from_arch(text: &str) -> Result<ModelConfig> {
        let mut kv = KeyValues::parse(text)?;
        let c = ModelConfig::take_from(&mut kv, ModelConfig::new(EncoderConfig::default(), 0))?;
        kv.finish()?;
        Ok(c)
    }
}

/// Comma-separated integers; empty means none.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| Error::Config(format!("bad list entry `{p}`"))))
        .collect()
}

/// A graph prepared for decoding, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedGraph {
    pub values: Tensor,
    pub keys: Tensor,
    pub initial: StateValues,
    /// Nodes of the extended Levi graph fed to the encoder.
    pub node_count: usize,
}

#[derive(Clone)]
pub struct Graph2Seq {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl Graph2Seq {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Graph2Seq> {
        if config.vocab_size <= crate::graph::GNODE {
            return Err(Error::Config(format!("vocabulary of {} tokens is too small", config.vocab_size)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, config.encoder.clone(), config.vocab_size, &mut rng)?;
        let decoder = Decoder::new(
            &mut params,
            DecoderConfig {
                hidden: config.encoder.d,
                memory: config.encoder.d,
                vocab_size: config.vocab_size,
                coverage: config.coverage,
            },
            &mut rng,
        )?;
        Ok(Graph2Seq {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// The graph as the encoder sees it.
    pub fn prepare<'a>(&self, g: &'a ExtendedLeviGraph) -> Cow<'a, ExtendedLeviGraph> {
        if self.config.global_node || g.global_index.is_none() {
            Cow::Borrowed(g)
        } else {
            Cow::Owned(g.without_global())
        }
    }

    pub fn batch(&self, graphs: &[&ExtendedLeviGraph]) -> Result<GraphBatch> {
        let prepared: Vec<Cow<ExtendedLeviGraph>> = graphs.iter().map(|g| self.prepare(g)).collect();
        let refs: Vec<&ExtendedLeviGraph> = prepared.iter().map(|g| g.as_ref()).collect();
        GraphBatch::new(&refs, self.config.encoder.edge_types)
    }

    /// Teacher-forced loss of a batch of examples.
    pub fn loss(&self, tape: &mut Tape, examples: &[&Example]) -> Result<LossOutput> {
        let graphs: Vec<&ExtendedLeviGraph> = examples.iter().map(|e| &e.graph).collect();
        let batch = self.batch(&graphs)?;
        self.loss_on(tape, &batch, examples, None)
    }

    /// [`Graph2Seq::loss`] on a prepared batch, optionally tracing the encoder.
    pub fn loss_on(&self, tape: &mut Tape, batch: &GraphBatch, examples: &[&Example], trace: Option<&mut EncodeTrace>) -> Result<LossOutput> {
        batch_loss(&self.encoder, &self.decoder, tape, batch, examples, trace)
    }

    /// Replaces all-zero tensors (biases) with small uniform noise so no
    /// activation sits exactly on a kink.
    pub fn jitter_zero_params(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let t = self.params.get_mut(id);
            if t.data().iter().all(|&x| x == 0.0) {
                for x in t.data_mut() {
                    *x = rng.gen_range(-scale..scale);
                }
            }
        }
    }

    /// Smallest distance of any ReLU input from its kink on this loss.
    pub fn kink_margin(&self, examples: &[Example]) -> Result<f64> {
        let refs: Vec<&Example> = examples.iter().collect();
        let mut tape = Tape::new(&self.params);
        self.loss(&mut tape, &refs)?;
        Ok(tape.kink_margin())
    }

    /// Finite-difference check of the loss gradient on `examples`.
    pub fn gradient_check<R: Rng>(&mut self, examples: &[Example], tolerance: f64, sampling: Sampling, rng: &mut R) -> Result<GradCheckReport> {
        let refs: Vec<&Example> = examples.iter().collect();
        let graphs: Vec<&ExtendedLeviGraph> = refs.iter().map(|e| &e.graph).collect();
        let batch = self.batch(&graphs)?;
        let Graph2Seq {
            params,
            encoder,
            decoder,
            ..
        } = self;
        gradient_check(
            params,
            |tape| Ok::<_, Error>(batch_loss(encoder, decoder, tape, &batch, &refs, None)?.loss),
            tolerance,
            sampling,
            rng,
        )
    }

    /// Encodes one graph and computes the decoder's starting state.
    pub fn encode_graph(&self, g: &ExtendedLeviGraph) -> Result<EncodedGraph> {
        let batch = self.batch(&[g])?;
        let mut tape = Tape::new(&self.params);
        let out = self.encoder.encode(&mut tape, &batch, None)?;
        let (rows, segment) = batch.memory_rows();
        let memory = self.decoder.memory(&mut tape, out.nodes, &rows, &segment, 1)?;
        let s = self.decoder.init_state(&mut tape, out.global, &memory)?;
        let v = |x| tape.value(x).clone();
        Ok(EncodedGraph {
            values: v(memory.values),
            keys: v(memory.keys),
            initial: StateValues {
                h: [v(s.h[0]), v(s.h[1])],
                c: [v(s.c[0]), v(s.c[1])],
                context: v(s.context),
                coverage: v(s.coverage),
            },
            node_count: batch.node_count(),
        })
    }

    /// Next-token log-probabilities for hypotheses over one encoded graph.
    pub fn step(&self, graph: &EncodedGraph, states: &[StateValues], prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<StateValues>)> {
        self.decoder.step_values(&self.params, &graph.values, &graph.keys, states, prev)
    }

    /// Writes the checkpoint and its `.arch` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::io(format!("creating {}", path.display())))?;
        write_checkpoint(&self.params, BufWriter::new(file)).map_err(Error::io(format!("writing {}", path.display())))?;
        let arch = arch_path(path);
        std::fs::write(&arch, self.config.to_arch()).map_err(Error::io(format!("writing {}", arch.display())))
    }

    pub fn load(path: &Path) -> Result<Graph2Seq> {
        let arch = arch_path(path);
        let text = std::fs::read_to_string(&arch).map_err(Error::io(format!("reading {}", arch.display())))?;
        let mut model = Graph2Seq::new(ModelConfig::from_arch(&text)?, 0)?;
        let file = File::open(path).map_err(Error::io(format!("opening {}", path.display())))?;
        load_into(&mut model.params, BufReader::new(file))?;
        Ok(model)
    }
}

fn batch_loss(
    encoder: &Encoder,
    decoder: &Decoder,
    tape: &mut Tape,
    batch: &GraphBatch,
    examples: &[&Example],
    trace: Option<&mut EncodeTrace>,
) -> Result<LossOutput> {
    let out = encoder.encode(tape, batch, trace)?;
    let (rows, segment) = batch.memory_rows();
    let memory = decoder.memory(tape, out.nodes, &rows, &segment, batch.len())?;
    let init = decoder.init_state(tape, out.global, &memory)?;
    let targets: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
    decoder.teacher_forced_loss(tape, init, &memory, &targets)
}

/// Entries probed by [`gradient_fixture_check`].
pub const FIXTURE_ENTRIES: usize = 300;

/// A 5-node tree with a 3-token target and a small two-block model, all
/// derived from `seed`. Biases are jittered away from zero.
pub fn gradient_fixture(seed: u64) -> Result<(Graph2Seq, Vec<Example>)> {
    let corpus = TreeCorpus {
        min_nodes: 5,
        max_nodes: 5,
        ..TreeCorpus::default()
    };
    let mut entries = corpus.entries(1, seed);
    if let Some(t) = entries[0].target.as_mut() {
        t.truncate(3);
    }
    let (vocab, examples) = to_examples(&entries, None)?;
    let encoder = EncoderConfig {
        blocks: 2,
        n: 3,
        m: 2,
        d: 24,
        pos_dim: 6,
        ..EncoderConfig::default()
    };
    let mut model = Graph2Seq::new(ModelConfig::new(encoder, vocab.len()), seed)?;
    model.jitter_zero_params(0.3, seed);
    Ok((model, examples))
}

/// Checks `model` on `examples` at `tolerance`, sampling entries with `seed`.
pub fn gradient_fixture_check(model: &mut Graph2Seq, examples: &[Example], tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    model.gradient_check(examples, tolerance, Sampling::Random(FIXTURE_ENTRIES), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `model.ckpt` → `model.ckpt.arch`.
pub fn arch_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".arch");
    PathBuf::from(s)
}
