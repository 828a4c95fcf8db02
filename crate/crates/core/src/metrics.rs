//! Corpus BLEU, sentence chrF++ and graph-size bins. Tokens are whitespace separated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};

fn ngrams<T: Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n == 0 || items.len() < n {
        return m;
    }
    for w in items.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// `(matched, hypothesis total, reference total)` for n-grams of order `n`.
fn overlap<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, h.values().sum(), r.values().sum())
}

fn tokens(s: &str, case_sensitive: bool) -> Vec<String> {
    s.split_whitespace()
        .map(|w| if case_sensitive { w.to_string() } else { w.to_lowercase() })
        .collect()
}

fn bleu_from_counts(matched: [usize; 4], total: [usize; 4], hyp_len: usize, ref_len: usize, smooth: bool) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if smooth && n > 0 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Unsmoothed 4-gram corpus BLEU (0 to 100), one reference per hypothesis.
pub fn bleu(hypotheses: &[String], references: &[String], case_sensitive: bool) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!("{} hypotheses for {} references", hypotheses.len(), references.len())));
    }
    if hypotheses.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut matched = [0; 4];
    let mut total = [0; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (tokens(h, case_sensitive), tokens(r, case_sensitive));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 0..4 {
            let (m, t, _) = overlap(&h, &r, n + 1);
            matched[n] += m;
            total[n] += t;
        }
    }
    Ok(bleu_from_counts(matched, total, hyp_len, ref_len, false))
}

/// Sentence BLEU with add-one smoothing on the 2- to 4-gram precisions.
pub fn sentence_bleu(hypothesis: &str, reference: &str, case_sensitive: bool) -> f64 {
    let (h, r) = (tokens(hypothesis, case_sensitive), tokens(reference, case_sensitive));
    let mut matched = [0; 4];
    let mut total = [0; 4];
    for n in 0..4 {
        let (m, t, _) = overlap(&h, &r, n + 1);
        matched[n] = m;
        total[n] = t;
    }
    bleu_from_counts(matched, total, h.len(), r.len(), true)
}

pub const CHRF_CHAR_ORDER: usize = 6;
pub const CHRF_WORD_ORDER: usize = 2;
pub const CHRF_BETA: f64 = 2.0;

/// chrF++ (0 to 100): precision and recall averaged over character orders
/// 1..=6 (whitespace removed) and word orders 1..=2, then combined as F_β.
///
/// Orders for which the reference has no n-gram are skipped.
pub fn chrf_pp(hypothesis: &str, reference: &str) -> Result<f64> {
    let ref_chars: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if ref_chars.is_empty() {
        return Err(Error::Input("chrF++ needs a non-empty reference".into()));
    }
    let hyp_chars: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let hyp_words: Vec<&str> = hypothesis.split_whitespace().collect();
    let ref_words: Vec<&str> = reference.split_whitespace().collect();
    let mut stats = Vec::new();
    for n in 1..=CHRF_CHAR_ORDER {
        stats.push(overlap(&hyp_chars, &ref_chars, n));
    }
    for n in 1..=CHRF_WORD_ORDER {
        stats.push(overlap(&hyp_words, &ref_words, n));
    }
    let used: Vec<(usize, usize, usize)> = stats.into_iter().filter(|s| s.2 > 0).collect();
    let k = used.len() as f64;
    let precision = used.iter().map(|&(m, h, _)| if h == 0 { 0.0 } else { m as f64 / h as f64 }).sum::<f64>() / k;
    let recall = used.iter().map(|&(m, _, r)| m as f64 / r as f64).sum::<f64>() / k;
    let b2 = CHRF_BETA * CHRF_BETA;
    if precision == 0.0 && recall == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + b2) * precision * recall / (b2 * precision + recall))
}

pub const BIN_LABELS: [&str; 5] = ["<=30", "31-40", "41-50", "51-60", ">60"];

/// Bin of an extended Levi graph with `nodes` nodes.
pub fn size_bin(nodes: usize) -> usize {
    match nodes {
        0..=30 => 0,
        31..=40 => 1,
        41..=50 => 2,
        51..=60 => 3,
        _ => 4,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinScore {
    pub bin: String,
    pub count: usize,
    pub chrf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub bleu: f64,
    pub chrf: f64,
    /// Populated bins only, smallest graphs first.
    pub bins: Vec<BinScore>,
}

/// Mean score per size bin; empty bins are left out.
pub fn binned_report(scores: &[f64], sizes: &[usize]) -> Result<Vec<BinScore>> {
    if scores.len() != sizes.len() {
        return Err(Error::Input(format!("{} scores for {} graph sizes", scores.len(), sizes.len())));
    }
    let mut sum = [0.0; 5];
    let mut count = [0usize; 5];
    for (&s, &n) in scores.iter().zip(sizes) {
        sum[size_bin(n)] += s;
        count[size_bin(n)] += 1;
    }
    Ok((0..5)
        .filter(|&b| count[b] > 0)
        .map(|b| BinScore {
            bin: BIN_LABELS[b].to_string(),
            count: count[b],
            chrf: sum[b] / count[b] as f64,
        })
        .collect())
}

/// Corpus BLEU, mean chrF++ and, when sizes are given, chrF++ per size bin.
pub fn evaluate(hypotheses: &[String], references: &[String], sizes: Option<&[usize]>, case_sensitive: bool) -> Result<ScoreReport> {
    let bleu = bleu(hypotheses, references, case_sensitive)?;
    let chrf: Vec<f64> = hypotheses.iter().zip(references).map(|(h, r)| chrf_pp(h, r)).collect::<Result<_>>()?;
    let bins = match sizes {
        Some(s) => binned_report(&chrf, s)?,
        None => Vec::new(),
    };
    Ok(ScoreReport {
        bleu,
        chrf: chrf.iter().sum::<f64>() / chrf.len() as f64,
        bins,
    })
}

impl ScoreReport {
    pub fn table(&self) -> String {
        let mut s = format!("BLEU    {:6.2}\nchrF++  {:6.2}\n", self.bleu, self.chrf);
        if !self.bins.is_empty() {
            s.push_str("\nnodes   count  chrF++\n");
            for b in &self.bins {
                let _ = writeln!(s, "{:<7} {:>5}  {:6.2}", b.bin, b.count, b.chrf);
            }
        }
        s
    }
}
