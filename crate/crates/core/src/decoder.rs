//! Two-layer LSTM decoder with additive attention and coverage.
//!
//! Every function is batched: row `k` of a state belongs to example `k`,
//! and attention memory rows carry the example they came from.

use rand::Rng;

use crate::diff::{Init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Width of encoder node states.
    pub memory: usize,
    pub vocab_size: usize,
    pub coverage: bool,
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    embed: ParamId,
    /// Projections of the global vector to `h1, c1, h2, c2`.
    init: [(ParamId, ParamId); 4],
    lstm: [Lstm; 2],
    att_query: ParamId,
    att_memory: ParamId,
    att_score: ParamId,
    att_coverage: Option<ParamId>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Attention memory of a batch.
#[derive(Clone, Debug)]
pub struct Memory {
    pub values: Var,
    /// `values` mapped into the attention space.
    pub keys: Var,
    /// Example of every memory row.
    pub segment: Vec<usize>,
    pub examples: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: [Var; 2],
    pub c: [Var; 2],
    pub context: Var,
    /// Accumulated attention per memory row.
    pub coverage: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub context: Var,
    pub weights: Var,
    pub coverage: Var,
}

pub struct LossOutput {
    /// Mean negative log-likelihood per target token.
    pub loss: Var,
    /// Summed negative log-likelihood of each example.
    pub per_example: Vec<f64>,
    /// Scored tokens per example, `<eos>` included.
    pub tokens: Vec<usize>,
}

/// Decoder state of one hypothesis, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues {
    pub h: [Tensor; 2],
    pub c: [Tensor; 2],
    pub context: Tensor,
    pub coverage: Tensor,
}

impl Decoder {
    /// Registers parameters under the `dec.` prefix.
    pub fn new<R: Rng>(store: &mut ParamStore, config: DecoderConfig, rng: &mut R) -> Result<Decoder> {
        let (h, d, v) = (config.hidden, config.memory, config.vocab_size);
        if h == 0 || d == 0 || v == 0 {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        let mut w = |name: &str, r: usize, c: usize| store.register_init(format!("dec.{name}"), &[r, c], Init::Glorot, rng);
        let embed = w("embed", v, h);
        let init_w: Vec<ParamId> = ["h1", "c1", "h2", "c2"].iter().map(|k| w(&format!("init_{k}_w"), h, d)).collect();
        let lstm_w = [(w("lstm1_wx", 4 * h, h + d), w("lstm1_wh", 4 * h, h)), (w("lstm2_wx", 4 * h, h), w("lstm2_wh", 4 * h, h))];
        let att_query = w("att_query", h, h);
        let att_memory = w("att_memory", h, d);
        let att_score = w("att_score", 1, h);
        let att_coverage = config.coverage.then(|| w("att_coverage", 1, h));
        let out_w = w("out_w", v, h + d);
        let mut b = |name: &str, n: usize| store.register_init(format!("dec.{name}"), &[n], Init::Zeros, rng);
        let init_b: Vec<ParamId> = ["h1", "c1", "h2", "c2"].iter().map(|k| b(&format!("init_{k}_b"), h)).collect();
        let lstm_b = [b("lstm1_b", 4 * h), b("lstm2_b", 4 * h)];
        let out_b = b("out_b", v);
        Ok(Decoder {
            config,
            embed,
            init: [
                (init_w[0], init_b[0]),
                (init_w[1], init_b[1]),
                (init_w[2], init_b[2]),
                (init_w[3], init_b[3]),
            ],
            lstm: [
                Lstm {
                    w_x: lstm_w[0].0,
                    w_h: lstm_w[0].1,
                    b: lstm_b[0],
                },
                Lstm {
                    w_x: lstm_w[1].0,
                    w_h: lstm_w[1].1,
                    b: lstm_b[1],
                },
            ],
            att_query,
            att_memory,
            att_score,
            att_coverage,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Selects `rows` of the node states (grouped by `segment`) as attention memory.
    pub fn memory(&self, tape: &mut Tape, nodes: Var, rows: &[usize], segment: &[usize], examples: usize) -> Result<Memory> {
        if rows.is_empty() {
            return Err(Error::Input("attention memory is empty".into()));
        }
        let values = tape.gather_rows(nodes, rows)?;
        let keys = tape.linear(values, self.att_memory, None)?;
        Ok(Memory {
            values,
            keys,
            segment: segment.to_vec(),
            examples,
        })
    }

    /// Hidden and cell states from `tanh(W g + b)`; zero context and coverage.
    pub fn init_state(&self, tape: &mut Tape, global: Var, memory: &Memory) -> Result<DecoderState> {
        let (b, d) = tape.shape(global);
        if d != self.config.memory || b != memory.examples {
            return Err(Error::Diff(crate::diff::DiffError::ShapeMismatch {
                op: "init_state",
                shapes: vec![vec![b, d], vec![memory.examples, self.config.memory]],
            }));
        }
        let mut s = [global; 4];
        for (k, &(w, bias)) in self.init.iter().enumerate() {
            let pre = tape.linear(global, w, Some(bias))?;
            s[k] = tape.tanh(pre)?;
        }
        let context = tape.constant(Tensor::zeros(&[b, self.config.memory]))?;
        let coverage = tape.constant(Tensor::zeros(&[memory.segment.len(), 1]))?;
        Ok(DecoderState {
            h: [s[0], s[2]],
            c: [s[1], s[3]],
            context,
            coverage,
        })
    }

    /// `score_v = w · tanh(U q + V m_v + c cov_v)`, softmax per example.
    pub fn attend(&self, tape: &mut Tape, query: Var, memory: &Memory, coverage: Var) -> Result<Attention> {
        let q = tape.linear(query, self.att_query, None)?;
        let q = tape.gather_rows(q, &memory.segment)?;
        let mut pre = tape.add(memory.keys, q)?;
        if let Some(c) = self.att_coverage {
            let c = tape.param(c)?;
            let cov = tape.matmul(coverage, c)?;
            pre = tape.add(pre, cov)?;
        }
        let act = tape.tanh(pre)?;
        let scores = tape.linear(act, self.att_score, None)?;
        let weights = tape.segment_softmax(scores, &memory.segment, memory.examples)?;
        let weighted = tape.mul_col(memory.values, weights)?;
        let context = tape.scatter_add_rows(weighted, &memory.segment, memory.examples)?;
        let coverage = tape.add(coverage, weights)?;
        Ok(Attention {
            context,
            weights,
            coverage,
        })
    }

    fn lstm_cell(&self, tape: &mut Tape, cell: Lstm, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.config.hidden;
        let gx = tape.linear(x, cell.w_x, Some(cell.b))?;
        let gh = tape.linear(h, cell.w_h, None)?;
        let gates = tape.add(gx, gh)?;
        let i = tape.slice_cols(gates, 0, n)?;
        let f = tape.slice_cols(gates, n, 2 * n)?;
        let o = tape.slice_cols(gates, 2 * n, 3 * n)?;
        let g = tape.slice_cols(gates, 3 * n, 4 * n)?;
        let (i, f, o, g) = (tape.sigmoid(i)?, tape.sigmoid(f)?, tape.sigmoid(o)?, tape.tanh(g)?);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// One decoding step for every row of `state`.
    pub fn step(&self, tape: &mut Tape, state: &DecoderState, prev: &[usize], memory: &Memory) -> Result<(Var, DecoderState)> {
        if let Some(&t) = prev.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        let table = tape.param(self.embed)?;
        let emb = tape.gather_rows(table, prev)?;
        let input = tape.concat(&[emb, state.context])?;
        let (h1, c1) = self.lstm_cell(tape, self.lstm[0], input, state.h[0], state.c[0])?;
        let (h2, c2) = self.lstm_cell(tape, self.lstm[1], h1, state.h[1], state.c[1])?;
        let att = self.attend(tape, h2, memory, state.coverage)?;
        let features = tape.concat(&[h2, att.context])?;
        let logits = tape.linear(features, self.out_w, Some(self.out_b))?;
        Ok((
            logits,
            DecoderState {
                h: [h1, h2],
                c: [c1, c2],
                context: att.context,
                coverage: att.coverage,
            },
        ))
    }

    /// Token-mean negative log-likelihood of `targets` (without `<bos>`/`<eos>`).
    pub fn teacher_forced_loss(&self, tape: &mut Tape, initial: DecoderState, memory: &Memory, targets: &[Vec<usize>]) -> Result<LossOutput> {
        if targets.len() != memory.examples {
            return Err(Error::Input(format!("{} targets for {} graphs", targets.len(), memory.examples)));
        }
        if targets.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty target sequence".into()));
        }
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let tokens: Vec<usize> = targets.iter().map(|t| t.len() + 1).collect();
        let total: usize = tokens.iter().sum();
        let mut state = initial;
        let mut picked = Vec::with_capacity(steps);
        let mut per_example = vec![0.0; targets.len()];
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|y| match t {
                    0 => BOS,
                    t if t <= y.len() => y[t - 1],
                    _ => PAD,
                })
                .collect();
            let gold: Vec<usize> = targets
                .iter()
                .map(|y| match t {
                    t if t < y.len() => y[t],
                    t if t == y.len() => EOS,
                    _ => PAD,
                })
                .collect();
            let mask: Vec<f64> = targets.iter().map(|y| if t <= y.len() { 1.0 } else { 0.0 }).collect();
            let (logits, next) = self.step(tape, &state, &prev, memory)?;
            state = next;
            let logp = tape.log_softmax_rows(logits)?;
            let lp = tape.pick(logp, &gold)?;
            for (k, m) in mask.iter().enumerate() {
                per_example[k] -= m * tape.value(lp).data()[k];
            }
            let mask = tape.constant(Tensor::column(mask))?;
            picked.push(tape.mul(lp, mask)?);
        }
        let all = tape.concat_rows(&picked)?;
        let sum = tape.sum(all)?;
        let loss = tape.scale(sum, -1.0 / total as f64)?;
        Ok(LossOutput {
            loss,
            per_example,
            tokens,
        })
    }

    /// Log-probabilities of the next token for several hypotheses over one memory.
    ///
    /// `values` and `keys` are the memory of a single graph.
    pub fn step_values(
        &self,
        params: &ParamStore,
        values: &Tensor,
        keys: &Tensor,
        states: &[StateValues],
        prev: &[usize],
    ) -> Result<(Vec<Vec<f64>>, Vec<StateValues>)> {
        let k = states.len();
        let m = values.rows();
        let mut tape = Tape::new(params);
        let stack = |f: &dyn Fn(&StateValues) -> &Tensor| -> Tensor {
            let cols = f(&states[0]).cols();
            let mut data = Vec::with_capacity(k * cols);
            for s in states {
                data.extend_from_slice(f(s).data());
            }
            Tensor::new(vec![data.len() / cols.max(1), cols], data).expect("consistent state shapes")
        };
        let repeat = |t: &Tensor| -> Tensor {
            let mut data = Vec::with_capacity(k * t.len());
            for _ in 0..k {
                data.extend_from_slice(t.data());
            }
            Tensor::new(vec![k * t.rows(), t.cols()], data).expect("consistent memory shapes")
        };
        let memory = Memory {
            values: tape.constant(repeat(values))?,
            keys: tape.constant(repeat(keys))?,
            segment: (0..k).flat_map(|i| std::iter::repeat(i).take(m)).collect(),
            examples: k,
        };
        let state = DecoderState {
            h: [tape.constant(stack(&|s| &s.h[0]))?, tape.constant(stack(&|s| &s.h[1]))?],
            c: [tape.constant(stack(&|s| &s.c[0]))?, tape.constant(stack(&|s| &s.c[1]))?],
            context: tape.constant(stack(&|s| &s.context))?,
            coverage: tape.constant(stack(&|s| &s.coverage))?,
        };
        let (logits, next) = self.step(&mut tape, &state, prev, &memory)?;
        let logp = tape.log_softmax_rows(logits)?;
        let logp = tape.value(logp);
        let split = |v: Var| -> Vec<Tensor> {
            let t = tape.value(v);
            let c = t.cols();
            (0..t.rows())
                .map(|r| Tensor::new(vec![1, c], t.row_slice(r).to_vec()).expect("row"))
                .collect()
        };
        let rows_of = |v: Var, rows: usize| -> Vec<Tensor> {
            let t = tape.value(v);
            t.data()
                .chunks(rows)
                .map(|ch| Tensor::column(ch.to_vec()))
                .collect()
        };
        let (h1, h2, c1, c2, ctx) = (split(next.h[0]), split(next.h[1]), split(next.c[0]), split(next.c[1]), split(next.context));
        let cov = rows_of(next.coverage, m);
        let out = (0..k)
            .map(|i| StateValues {
                h: [h1[i].clone(), h2[i].clone()],
                c: [c1[i].clone(), c2[i].clone()],
                context: ctx[i].clone(),
                coverage: cov[i].clone(),
            })
            .collect();
        let lp = (0..k).map(|i| logp.row_slice(i).to_vec()).collect();
        Ok((lp, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(coverage: bool) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let dec = Decoder::new(
            &mut store,
            DecoderConfig {
                hidden: 4,
                memory: 3,
                vocab_size: 7,
                coverage,
            },
            &mut rng,
        )
        .unwrap();
        (store, dec)
    }

    fn memory(tape: &mut Tape, dec: &Decoder, rows: Vec<Vec<f64>>, segment: Vec<usize>) -> Memory {
        let n = rows.len();
        let nodes = tape.constant(Tensor::from_rows(&rows)).unwrap();
        let examples = segment.iter().max().unwrap() + 1;
        dec.memory(tape, nodes, &(0..n).collect::<Vec<_>>(), &segment, examples).unwrap()
    }

    #[test]
    fn zero_global_zero_state() {
        let (store, dec) = setup(true);
        let mut tape = Tape::new(&store);
        let mem = memory(&mut tape, &dec, vec![vec![1.0, 2.0, 3.0]; 2], vec![0, 0]);
        let g = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let s = dec.init_state(&mut tape, g, &mem).unwrap();
        for v in s.h.iter().chain(&s.c) {
            assert!(tape.value(*v).data().iter().all(|&x| x == 0.0));
        }
        assert_eq!(tape.value(s.coverage).shape(), &[2, 1]);
        let wide = tape.constant(Tensor::zeros(&[1, 4])).unwrap();
        assert!(dec.init_state(&mut tape, wide, &mem).is_err());
    }

    #[test]
    fn single_row_and_identical_rows() {
        let (store, dec) = setup(true);
        let mut tape = Tape::new(&store);
        let mem = memory(&mut tape, &dec, vec![vec![0.5, -1.0, 2.0], vec![1.0; 3], vec![1.0; 3]], vec![0, 1, 1]);
        let q = tape.constant(Tensor::from_rows(&[vec![0.3, 0.1, -0.2, 0.4], vec![1.0, 0.0, 0.0, 0.0]])).unwrap();
        let cov = tape.constant(Tensor::zeros(&[3, 1])).unwrap();
        let att = dec.attend(&mut tape, q, &mem, cov).unwrap();
        assert_eq!(tape.value(att.weights).data(), &[1.0, 0.5, 0.5]);
        assert_eq!(tape.value(att.context).row_slice(0), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn coverage_accumulates() {
        let (store, dec) = setup(true);
        let mut tape = Tape::new(&store);
        let mem = memory(&mut tape, &dec, vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.0], vec![1.0, -1.0, 0.5]], vec![0; 3]);
        let g = tape.constant(Tensor::row(vec![0.2, -0.3, 0.9])).unwrap();
        let mut s = dec.init_state(&mut tape, g, &mem).unwrap();
        let mut last = vec![0.0; 3];
        for (t, tok) in [BOS, 5, 6].into_iter().enumerate() {
            let (logits, next) = dec.step(&mut tape, &s, &[tok], &mem).unwrap();
            assert_eq!(tape.shape(logits), (1, 7));
            s = next;
            let cov = tape.value(s.coverage).data().to_vec();
            assert!((cov.iter().sum::<f64>() - (t + 1) as f64).abs() < 1e-12);
            assert!(cov.iter().zip(&last).all(|(a, b)| a >= b));
            last = cov;
        }
        assert!(dec.step(&mut tape, &s, &[7], &mem).is_err());
    }

    #[test]
    fn step_is_deterministic() {
        let (store, dec) = setup(false);
        let run = || {
            let mut tape = Tape::new(&store);
            let mem = memory(&mut tape, &dec, vec![vec![0.1, 0.2, 0.3]], vec![0]);
            let g = tape.constant(Tensor::row(vec![0.2, -0.3, 0.9])).unwrap();
            let s = dec.init_state(&mut tape, g, &mem).unwrap();
            let (l, _) = dec.step(&mut tape, &s, &[BOS], &mem).unwrap();
            tape.value(l).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_target_rejected() {
        let (store, dec) = setup(false);
        let mut tape = Tape::new(&store);
        let mem = memory(&mut tape, &dec, vec![vec![0.1, 0.2, 0.3]], vec![0]);
        let g = tape.constant(Tensor::row(vec![0.2, -0.3, 0.9])).unwrap();
        let s = dec.init_state(&mut tape, g, &mem).unwrap();
        assert!(dec.teacher_forced_loss(&mut tape, s, &mem, &[vec![]]).is_err());
    }

    #[test]
    fn loss_matches_stepwise_oracle() {
        let (store, dec) = setup(true);
        let mut tape = Tape::new(&store);
        let mem = memory(&mut tape, &dec, vec![vec![0.1, 0.2, 0.3], vec![0.7, -0.2, 0.0]], vec![0, 0]);
        let g = tape.constant(Tensor::row(vec![0.2, -0.3, 0.9])).unwrap();
        let s0 = dec.init_state(&mut tape, g, &mem).unwrap();
        let target = vec![5, 6];
        let out = dec.teacher_forced_loss(&mut tape, s0, &mem, std::slice::from_ref(&target)).unwrap();
        let mut s = s0;
        let mut nll = 0.0;
        for (prev, gold) in [(BOS, 5), (5, 6), (6, EOS)] {
            let (logits, next) = dec.step(&mut tape, &s, &[prev], &mem).unwrap();
            s = next;
            let row = tape.value(logits).data().to_vec();
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            nll += lse - row[gold];
        }
        assert!((tape.value(out.loss).item() - nll / 3.0).abs() < 1e-12);
        assert!((out.per_example[0] - nll).abs() < 1e-12);
        assert_eq!(out.tokens, vec![3]);
    }
}
