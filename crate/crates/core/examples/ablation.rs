//! Trains the full model and a few ablations on the same toy corpus and compares dev perplexity.
//!
//! Usage: `cargo run --release --example ablation [epochs]`

use dcgcn::encoder::{EncoderConfig, EncoderKind};
use dcgcn::model::{Graph2Seq, ModelConfig};
use dcgcn::synth::{to_examples, TreeCorpus};
use dcgcn::training::{ablate, train, Ablation, TrainConfig};

fn main() -> dcgcn::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let corpus = TreeCorpus {
        min_nodes: 4,
        max_nodes: 9,
        reentrancy: 0.3,
        ..TreeCorpus::default()
    };
    let (vocab, examples) = to_examples(&corpus.entries(500, 2024), None)?;
    let (train_set, dev) = examples.split_at(400);
    let encoder = EncoderConfig {
        blocks: 2,
        n: 6,
        m: 3,
        d: 24,
        pos_dim: 6,
        ..EncoderConfig::default()
    };
    let base = ModelConfig::new(encoder.clone(), vocab.len());
    let mut runs = vec![(
        "gcn+rc".to_string(),
        ModelConfig {
            encoder: encoder.parameter_matched_baseline(EncoderKind::GcnRc),
            ..base.clone()
        },
    )];
    runs.push(("dcgcn".into(), base.clone()));
    for flags in ["dense:2", "dense:1,dense:2", "graph-attention", "global-node", "coverage", "linear-combination", "direction-aggregation"] {
        runs.push((format!("-{flags}"), ablate(&base, &Ablation::parse(flags)?)?));
    }
    let config = TrainConfig {
        lr: 0.003,
        max_epochs: epochs,
        patience: 3,
        ..TrainConfig::default()
    };
    for (name, model) in runs {
        let out = train(Graph2Seq::new(model, 1)?, train_set, dev, &config, |_| {})?;
        let best = out.history[out.best_epoch - 1].dev_perplexity;
        println!("{name:<24} dev ppl {best:.3} (epoch {})", out.best_epoch);
    }
    Ok(())
}
