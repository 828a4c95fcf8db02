//! Builds extended Levi graphs from an AMR and from a dependency tree.
//!
//! Usage: `cargo run --example levi_graph`

use dcgcn::graph::{parse_dependency, parse_penman, to_extended_levi, EdgeType, LabeledGraph};

fn show(title: &str, g: &LabeledGraph, sequential: bool) {
    let lv = to_extended_levi(g, sequential);
    println!("{title}: {} nodes", lv.node_count());
    for (i, (label, pos)) in lv.labels.iter().zip(&lv.positions).enumerate() {
        println!("  {i:>2} {label:<10} pos {pos}");
    }
    for t in EdgeType::ALL {
        let edges = lv.edges.get(t);
        if !edges.is_empty() {
            println!("  {t}: {edges:?}");
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let amr = parse_penman("(w / want-01 :ARG0 (b / boy) :ARG1 (g / go-02 :ARG0 b))")?;
    show("amr", &amr, false);
    let dep = parse_dependency("1 the 2 det\n2 boy 3 nsubj\n3 left 0 root\n")?;
    show("dependency", &dep, true);
    Ok(())
}
