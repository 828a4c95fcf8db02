//! Runs a freshly initialised encoder over one graph and prints what it traced.
//!
//! Usage: `cargo run --release --example encode_graph`

use dcgcn::diff::{ParamStore, Tape};
use dcgcn::encoder::{EncodeTrace, Encoder, EncoderConfig, GraphBatch};
use dcgcn::graph::{build_vocab, parse_penman_corpus, to_extended_levi};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dcgcn::Result<()> {
    let corpus = parse_penman_corpus("# ::snt the boy wants to go\n(w / want-01 :ARG0 (b / boy) :ARG1 (g / go-02 :ARG0 b))\n")?;
    let vocab = build_vocab(&corpus, 1)?;
    let graph = to_extended_levi(&corpus[0].graph, false).to_ids(&vocab);

    let config = EncoderConfig {
        blocks: 2,
        n: 6,
        m: 3,
        d: 36,
        pos_dim: 6,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, config, vocab.len(), &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("{} encoder parameters", store.num_scalars());

    let batch = GraphBatch::new(&[&graph], 4)?;
    let mut tape = Tape::new(&store);
    let mut trace = EncodeTrace::default();
    let out = encoder.encode(&mut tape, &batch, Some(&mut trace))?;
    println!("layer input widths {:?}", trace.layer_inputs);
    println!("sub-block output widths {:?}", trace.sublock_outputs);
    let nodes = tape.value(out.nodes);
    println!("node states {:?}, global state {:?}", nodes.shape(), tape.value(out.global).shape());
    // attention of the first layer into the root concept
    let alpha = &trace.attention[0];
    let adj = dcgcn::encoder::Adjacency::from_graph(&graph, 4)?;
    for ((s, t), a) in adj.all_edges().into_iter().zip(alpha.data()) {
        if t == 0 {
            println!("  alpha {s} -> 0 = {a:.3}");
        }
    }
    Ok(())
}
