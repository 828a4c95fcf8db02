//! Corpus BLEU, chrF++ and the graph-size breakdown on a few sentence pairs.
//!
//! Usage: `cargo run --example evaluate_metrics`

use dcgcn::metrics::{chrf_pp, evaluate, sentence_bleu};

fn main() -> dcgcn::Result<()> {
    let hyps: Vec<String> = ["the boy wants to go", "a girl sleeps", "the boy goes home now"].map(String::from).to_vec();
    let refs: Vec<String> = ["the boy wants to go", "the girl sleeps", "the boy goes home"].map(String::from).to_vec();
    for (h, r) in hyps.iter().zip(&refs) {
        println!("{h:<24} BLEU {:>6.2} chrF++ {:>6.2}", sentence_bleu(h, r, false), chrf_pp(h, r)?);
    }
    let report = evaluate(&hyps, &refs, Some(&[12, 35, 64]), false)?;
    println!("{}", report.table());
    Ok(())
}
