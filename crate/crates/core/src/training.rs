//! Epoch loop with early stopping, run configuration and ablation switches.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::KeyValues;
use crate::diff::{AdamState, DiffError, StepOutcome, Tape};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::graph::{Example, GraphKind};
use crate::model::{Graph2Seq, ModelConfig};

/// Modules switched off; the default removes nothing.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub linear_combination: bool,
    pub global_node: bool,
    pub direction_aggregation: bool,
    pub graph_attention: bool,
    pub coverage: bool,
    /// 1-based blocks that lose their dense connections.
    pub dense_blocks: Vec<usize>,
}

impl Ablation {
    /// Comma-separated names: `linear-combination`, `global-node`,
    /// `direction-aggregation`, `graph-attention`, `coverage`, `dense:<block>`.
    pub fn parse(list: &str) -> Result<Ablation> {
        let mut a = Ablation::default();
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let flag = match item {
                "linear-combination" => &mut a.linear_combination,
                "global-node" => &mut a.global_node,
                "direction-aggregation" => &mut a.direction_aggregation,
                "graph-attention" => &mut a.graph_attention,
                "coverage" => &mut a.coverage,
                other => {
                    let block = other
                        .strip_prefix("dense:")
                        .and_then(|b| b.parse::<usize>().ok())
                        .ok_or_else(|| Error::Config(format!("unknown ablation `{other}`")))?;
                    if a.dense_blocks.contains(&block) {
                        return Err(Error::Config(format!("ablation `{other}` given twice")));
                    }
                    a.dense_blocks.push(block);
                    continue;
                }
            };
            if *flag {
                return Err(Error::Config(format!("ablation `{item}` given twice")));
            }
            *flag = true;
        }
        a.dense_blocks.sort_unstable();
        Ok(a)
    }

    pub fn is_empty(&self) -> bool {
        *self == Ablation::default()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = [
            (self.linear_combination, "linear-combination"),
            (self.global_node, "global-node"),
            (self.direction_aggregation, "direction-aggregation"),
            (self.graph_attention, "graph-attention"),
            (self.coverage, "coverage"),
        ]
        .into_iter()
        .filter(|p| p.0)
        .map(|p| p.1.to_string())
        .collect();
        parts.extend(self.dense_blocks.iter().map(|b| format!("dense:{b}")));
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// The architecture variant with the switched-off modules removed.
pub fn ablate(config: &ModelConfig, flags: &Ablation) -> Result<ModelConfig> {
    let mut c = config.clone();
    let e = &mut c.encoder;
    let encoder_flags = flags.linear_combination || flags.direction_aggregation || flags.graph_attention || !flags.dense_blocks.is_empty();
    if encoder_flags && e.kind != EncoderKind::Dcgcn {
        return Err(Error::Config(format!("ablation `{flags}` needs the dcgcn encoder, not {}", e.kind.key())));
    }
    let removed = |on: bool, name: &str| {
        if on {
            Err(Error::Config(format!("`{name}` is already disabled in the base configuration")))
        } else {
            Ok(())
        }
    };
    if flags.linear_combination {
        removed(!e.linear_combination, "linear-combination")?;
        e.linear_combination = false;
    }
    if flags.direction_aggregation {
        removed(!e.direction_aggregation, "direction-aggregation")?;
        e.direction_aggregation = false;
    }
    if flags.graph_attention {
        removed(!e.attention, "graph-attention")?;
        e.attention = false;
    }
    for &b in &flags.dense_blocks {
        if b == 0 || b > e.blocks {
            return Err(Error::Config(format!("dense:{b} names a missing block (blocks={})", e.blocks)));
        }
        if e.undense_blocks.contains(&b) {
            return Err(Error::Config(format!("block {b} already has no dense connections")));
        }
        e.undense_blocks.push(b);
    }
    e.undense_blocks.sort_unstable();
    if flags.global_node {
        removed(!c.global_node, "global-node")?;
        c.global_node = false;
    }
    if flags.coverage {
        removed(!c.coverage, "coverage")?;
        c.coverage = false;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a dev perplexity improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Global gradient norm limit.
    pub clip: f64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 0.0003,
            max_epochs: 50,
            patience: 5,
            seed: 1,
            clip: 5.0,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch, patience and max_epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("lr must be non-negative and clip positive".into()));
        }
        Ok(())
    }
}

/// Model architecture and training settings read from one config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::new(EncoderConfig::default(), 0),
            train: TrainConfig::default(),
            min_count: 1,
        }
    }
}

impl RunConfig {
    /// Reads known keys on top of the defaults; unknown keys are an error.
    pub fn from_kv(mut kv: KeyValues) -> Result<RunConfig> {
        let d = RunConfig::default();
        let mut model = d.model;
        if let Some(kind) = kv.take::<String>("graph_type")? {
            model.encoder.edge_types = parse_graph_kind(&kind)?.edge_type_count();
        }
        let model = ModelConfig::take_from(&mut kv, model)?;
        let t = d.train;
        let ablation = match kv.take::<String>("ablation")? {
            Some(list) => Ablation::parse(&list)?,
            None => t.ablation,
        };
        let train = TrainConfig {
            batch_size: kv.take_or("batch", t.batch_size)?,
            lr: kv.take_or("lr", t.lr)?,
            max_epochs: kv.take_or("max_epochs", t.max_epochs)?,
            patience: kv.take_or("patience", t.patience)?,
            seed: kv.take_or("seed", t.seed)?,
            clip: kv.take_or("clip", t.clip)?,
            ablation,
        };
        let min_count = kv.take_or("min_count", d.min_count)?;
        kv.finish()?;
        train.validate()?;
        Ok(RunConfig { model, train, min_count })
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_kv(KeyValues::parse(text)?)
    }
}

pub fn parse_graph_kind(s: &str) -> Result<GraphKind> {
    match s {
        "amr" => Ok(GraphKind::Amr),
        "dep" => Ok(GraphKind::Dependency),
        other => Err(Error::Config(format!("graph type must be amr or dep, got `{other}`"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged(String),
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxEpochs => f.write_str("max-epochs"),
            StopReason::EarlyStopped => f.write_str("early-stopped"),
            StopReason::Diverged(why) => write!(f, "diverged: {why}"),
        }
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest dev perplexity (the initial ones if none finished).
    pub best: Graph2Seq,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// Mean token loss and perplexity of `examples`.
pub fn evaluate_loss(model: &Graph2Seq, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::Input("no examples to evaluate".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new(model.params());
        let out = model.loss(&mut tape, &refs)?;
        nll += out.per_example.iter().sum::<f64>();
        tokens += out.tokens.iter().sum::<usize>();
    }
    let loss = nll / tokens as f64;
    Ok((loss, loss.exp()))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mix = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    order
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Diff(DiffError::NonFinite { .. }))
}

/// Trains with Adam, keeping the parameters of the best dev epoch.
///
/// `on_epoch` sees every finished epoch.
pub fn train(
    mut model: Graph2Seq,
    train_set: &[Example],
    dev_set: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(Error::Input("training and dev sets must be non-empty".into()));
    }
    let mut adam = AdamState::new(model.params(), config.lr);
    let mut best = model.clone();
    let mut best_ppl = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=config.max_epochs {
        let order = epoch_order(train_set.len(), config.seed, epoch);
        let mut nll = 0.0;
        let mut tokens = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = (|| {
                let mut tape = Tape::new(model.params());
                let out = model.loss(&mut tape, &batch)?;
                let grads = tape.backward(out.loss)?;
                Ok::<_, Error>((out, grads))
            })();
            let (out, mut grads) = match step {
                Ok(v) => v,
                Err(e) if is_numeric(&e) => {
                    stop = StopReason::Diverged(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            nll += out.per_example.iter().sum::<f64>();
            tokens += out.tokens.iter().sum::<usize>();
            if !nll.is_finite() || !grads.is_finite() {
                stop = StopReason::Diverged(format!("non-finite loss or gradient in epoch {epoch}"));
                break 'epochs;
            }
            grads.clip_global_norm(config.clip);
            if adam.step(model.params_mut(), &grads) == StepOutcome::SkippedNonFinite {
                stop = StopReason::Diverged(format!("non-finite update in epoch {epoch}"));
                break 'epochs;
            }
        }
        let (dev_loss, dev_perplexity) = match evaluate_loss(&model, dev_set, config.batch_size) {
            Ok(v) if v.0.is_finite() => v,
            Ok(_) => {
                stop = StopReason::Diverged(format!("non-finite dev loss in epoch {epoch}"));
                break;
            }
            Err(e) if is_numeric(&e) => {
                stop = StopReason::Diverged(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let record = EpochRecord {
            epoch,
            train_loss: nll / tokens as f64,
            dev_loss,
            dev_perplexity,
        };
        on_epoch(&record);
        history.push(record);
        if dev_perplexity < best_ppl {
            best_ppl = dev_perplexity;
            best = model.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        stop,
    })
}
