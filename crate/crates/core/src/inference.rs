//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use crate::decoder::StateValues;
use crate::error::{Error, Result};
use crate::graph::{ExtendedLeviGraph, BOS, EOS};
use crate::model::{EncodedGraph, Graph2Seq};

/// Anything that scores the next token given a decoder state.
pub trait StepModel {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Log-probabilities over the vocabulary for each `(state, previous token)` row.
    fn step(&self, states: &[Self::State], prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<Self::State>)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<S> {
    /// Emitted tokens; a finished hypothesis ends with `<eos>`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Average log-probability per token, or the raw sum.
    pub fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.tokens.is_empty() {
            self.log_prob / self.tokens.len() as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens without the closing `<eos>`.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Tokens including `<eos>`; the last step may only emit `<eos>`.
    pub max_len: usize,
    pub length_normalize: bool,
}

/// Decode length budget for a graph with `nodes` nodes.
pub fn default_max_len(nodes: usize) -> usize {
    2 * nodes + 10
}

struct Candidate {
    parent: usize,
    token: usize,
    log_prob: f64,
}

fn expand<M: StepModel>(model: &M, live: &[Hypothesis<M::State>], last_step: bool) -> Result<(Vec<Candidate>, Vec<M::State>)> {
    let states: Vec<M::State> = live.iter().map(|h| h.state.clone()).collect();
    let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
    let (logp, next) = model.step(&states, &prev)?;
    let mut cands = Vec::new();
    for (p, row) in logp.iter().enumerate() {
        if last_step {
            let lp = row.get(EOS).copied().ok_or_else(|| Error::Input("vocabulary lacks <eos>".into()))?;
            cands.push(Candidate {
                parent: p,
                token: EOS,
                log_prob: live[p].log_prob + lp,
            });
        } else {
            cands.extend(row.iter().enumerate().map(|(t, &lp)| Candidate {
                parent: p,
                token: t,
                log_prob: live[p].log_prob + lp,
            }));
        }
    }
    // best first; ties go to the earlier parent, then the smaller token id
    cands.sort_by(|a, b| {
        b.log_prob
            .partial_cmp(&a.log_prob)
            .unwrap_or(Ordering::Equal)
            .then(a.parent.cmp(&b.parent))
            .then(a.token.cmp(&b.token))
    });
    Ok((cands, next))
}

/// Beam search returning the finished hypothesis with the best score.
///
/// Each step ranks every extension of the live hypotheses and keeps the
/// first `beam`: `<eos>` extensions among them finish, the rest stay live,
/// so the beam narrows as hypotheses finish. Search ends when nothing is
/// live or `max_len` forces `<eos>`.
pub fn beam_search<M: StepModel>(model: &M, config: BeamConfig) -> Result<Hypothesis<M::State>> {
    if config.beam == 0 || config.max_len == 0 {
        return Err(Error::Config("beam and max length must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
        finished: false,
    }];
    let mut pool: Vec<Hypothesis<M::State>> = Vec::new();
    for t in 0..config.max_len {
        let (cands, next) = expand(model, &live, t + 1 == config.max_len)?;
        let mut new_live = Vec::new();
        for c in cands.iter().take(config.beam) {
            let mut tokens = live[c.parent].tokens.clone();
            tokens.push(c.token);
            let h = Hypothesis {
                tokens,
                log_prob: c.log_prob,
                state: next[c.parent].clone(),
                finished: c.token == EOS,
            };
            if h.finished {
                pool.push(h);
            } else {
                new_live.push(h);
            }
        }
        live = new_live;
        if live.is_empty() {
            break;
        }
    }
    // earliest-found wins ties
    let mut best: Option<Hypothesis<M::State>> = None;
    for h in pool {
        if best.as_ref().map_or(true, |b| h.score(config.length_normalize) > b.score(config.length_normalize)) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::Input("beam search produced no hypothesis".into()))
}

/// Most likely token at every step until `<eos>` or `max_len`.
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis<M::State>> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: model.start(),
        finished: false,
    };
    while !h.finished {
        let last = h.tokens.len() + 1 >= max_len;
        let prev = h.tokens.last().copied().unwrap_or(BOS);
        let (logp, mut next) = model.step(std::slice::from_ref(&h.state), &[prev])?;
        let row = &logp[0];
        let token = if last {
            EOS
        } else {
            // first maximum wins
            (0..row.len()).fold(0, |best, t| if row[t] > row[best] { t } else { best })
        };
        h.log_prob += row[token];
        h.tokens.push(token);
        h.state = next.swap_remove(0);
        h.finished = token == EOS;
    }
    Ok(h)
}

/// A trained model bound to one encoded graph.
pub struct GraphDecoder<'a> {
    pub model: &'a Graph2Seq,
    pub graph: EncodedGraph,
}

impl<'a> GraphDecoder<'a> {
    pub fn new(model: &'a Graph2Seq, graph: &ExtendedLeviGraph) -> Result<GraphDecoder<'a>> {
        Ok(GraphDecoder {
            model,
            graph: model.encode_graph(graph)?,
        })
    }
}

impl StepModel for GraphDecoder<'_> {
    type State = StateValues;

    fn start(&self) -> StateValues {
        self.graph.initial.clone()
    }

    fn step(&self, states: &[StateValues], prev: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<StateValues>)> {
        self.model.step(&self.graph, states, prev)
    }
}

/// Decodes one graph; `beam = 1` is greedy. Returns tokens without `<eos>`.
pub fn generate(model: &Graph2Seq, graph: &ExtendedLeviGraph, beam: usize, max_len: Option<usize>, length_normalize: bool) -> Result<Vec<usize>> {
    let dec = GraphDecoder::new(model, graph)?;
    let max_len = max_len.unwrap_or_else(|| default_max_len(dec.graph.node_count));
    let h = if beam == 1 {
        greedy(&dec, max_len)?
    } else {
        beam_search(
            &dec,
            BeamConfig {
                beam,
                max_len,
                length_normalize,
            },
        )?
    };
    Ok(h.words().to_vec())
}
