//! Trains a small model on a synthetic tree-to-text corpus and decodes the dev set.
//!
//! Usage: `cargo run --release --example train_toy [epochs]`

use dcgcn::encoder::EncoderConfig;
use dcgcn::inference::generate;
use dcgcn::metrics::evaluate;
use dcgcn::model::{Graph2Seq, ModelConfig};
use dcgcn::synth::{to_examples, TreeCorpus};
use dcgcn::training::{train, TrainConfig};

fn main() -> dcgcn::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(15);
    let (vocab, examples) = to_examples(&TreeCorpus::default().entries(300, 3), None)?;
    let (train_set, dev) = examples.split_at(250);
    let encoder = EncoderConfig {
        blocks: 1,
        n: 3,
        m: 2,
        d: 24,
        pos_dim: 6,
        ..EncoderConfig::default()
    };
    let model = Graph2Seq::new(ModelConfig::new(encoder, vocab.len()), 1)?;
    let config = TrainConfig {
        lr: 0.003,
        max_epochs: epochs,
        ..TrainConfig::default()
    };
    let out = train(model, train_set, dev, &config, |r| {
        println!("epoch {:>3} train loss {:.4} dev ppl {:.3}", r.epoch, r.train_loss, r.dev_perplexity);
    })?;
    println!("stopped: {}, best epoch {}", out.stop, out.best_epoch);

    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for e in dev {
        hyps.push(vocab.detokenize(&generate(&out.best, &e.graph, 4, None, true)?));
        refs.push(vocab.detokenize(&e.target));
    }
    for (h, r) in hyps.iter().zip(&refs).take(3) {
        println!("  hyp: {h}\n  ref: {r}");
    }
    let report = evaluate(&hyps, &refs, None, false)?;
    println!("dev BLEU {:.2}, chrF++ {:.2}", report.bleu, report.chrf);
    Ok(())
}
