//! Beam search over a hand-written next-token table, next to greedy decoding.
//!
//! Usage: `cargo run --example beam_search`

use dcgcn::graph::EOS;
use dcgcn::inference::{beam_search, greedy, BeamConfig, StepModel};

/// Greedy picks "a" first and is stuck with a poor continuation; "b" leads to a sure ending.
struct Table;

const A: usize = 5;
const B: usize = 6;

impl StepModel for Table {
    type State = Vec<usize>;

    fn start(&self) -> Vec<usize> {
        Vec::new()
    }

    fn step(&self, states: &[Vec<usize>], prev: &[usize]) -> dcgcn::Result<(Vec<Vec<f64>>, Vec<Vec<usize>>)> {
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (s, &p) in states.iter().zip(prev) {
            let mut prefix = s.clone();
            if !s.is_empty() || p != dcgcn::graph::BOS {
                prefix.push(p);
            }
            let mut row = vec![f64::NEG_INFINITY; 7];
            let probs: &[(usize, f64)] = match prefix.as_slice() {
                [] => &[(A, 0.55), (B, 0.45)],
                [A] => &[(EOS, 0.3), (A, 0.35), (B, 0.35)],
                [B] => &[(EOS, 0.95), (A, 0.05)],
                _ => &[(EOS, 1.0)],
            };
            for &(t, q) in probs {
                row[t] = q.ln();
            }
            rows.push(row);
            next.push(prefix);
        }
        Ok((rows, next))
    }
}

fn main() -> dcgcn::Result<()> {
    let g = greedy(&Table, 4)?;
    println!("greedy  {:?} log p {:.4}", g.tokens, g.log_prob);
    for beam in [1, 2, 10] {
        let h = beam_search(&Table, BeamConfig { beam, max_len: 4, length_normalize: false })?;
        println!("beam {beam:>2} {:?} log p {:.4}", h.tokens, h.log_prob);
    }
    Ok(())
}
