//! Extended Levi graph construction and the JSONL format.

mod common;

use common::brute_levi;
use dcgcn::graph::{parse_dependency, parse_penman, read_jsonl, to_extended_levi, write_jsonl, EdgeType, Example, Vocabulary};
use dcgcn::synth::{random_labeled_graph, TreeCorpus};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sorted(list: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut v = list.to_vec();
    v.sort_unstable();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matches_brute_force(seed: u64, sequential: bool) {
        let g = random_labeled_graph(&mut ChaCha8Rng::seed_from_u64(seed), 8, 12);
        let lv = to_extended_levi(&g, sequential);
        let bf = brute_levi(&g, sequential);
        prop_assert_eq!(&lv.labels, &bf.labels);
        prop_assert_eq!(&lv.positions, &bf.positions);
        for t in EdgeType::ALL {
            prop_assert_eq!(sorted(lv.edges.get(t)), bf.edges[t.index()].clone(), "{}", t);
        }
    }

    #[test]
    fn counting_laws(seed: u64, sequential: bool) {
        let g = random_labeled_graph(&mut ChaCha8Rng::seed_from_u64(seed), 8, 12);
        let (v, e) = (g.nodes.len(), g.edges.len());
        let lv = to_extended_levi(&g, sequential);
        prop_assert_eq!(lv.node_count(), v + e + 1);
        prop_assert_eq!(lv.edges.get(EdgeType::Default).len(), 2 * e);
        prop_assert_eq!(lv.edges.get(EdgeType::Reverse).len(), 2 * e);
        prop_assert_eq!(lv.edges.get(EdgeType::SelfLoop).len(), v + e + 1);
        prop_assert_eq!(lv.edges.get(EdgeType::Global).len(), v + e);
        let chain = if sequential { v - 1 } else { 0 };
        prop_assert_eq!(lv.edges.get(EdgeType::Forward).len(), chain);
        prop_assert_eq!(lv.edges.get(EdgeType::Backward).len(), chain);
        let transposed: Vec<(usize, usize)> = lv.edges.get(EdgeType::Default).iter().map(|&(s, d)| (d, s)).collect();
        prop_assert_eq!(sorted(&transposed), sorted(lv.edges.get(EdgeType::Reverse)));
    }

    #[test]
    fn positions_follow_default_predecessors(seed: u64) {
        let g = random_labeled_graph(&mut ChaCha8Rng::seed_from_u64(seed), 8, 12);
        let lv = to_extended_levi(&g, false);
        let nv = g.nodes.len();
        prop_assert_eq!(lv.positions[g.root], 0);
        prop_assert_eq!(lv.positions[lv.global_index], -1);
        for v in 0..nv {
            if v == g.root || lv.unreachable.contains(&v) {
                continue;
            }
            let has_parent = g.edges.iter().any(|&(u, _, w)| w == v && lv.positions[u] == lv.positions[v] - 1 && !lv.unreachable.contains(&u));
            prop_assert!(has_parent, "node {} at {}", v, lv.positions[v]);
        }
    }

    #[test]
    fn jsonl_round_trip(seed: u64, sequential: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<_> = (0..3).map(|_| random_labeled_graph(&mut rng, 6, 8)).collect();
        let vocab = Vocabulary::from_tokens(graphs.iter().flat_map(|g| g.tokens()).collect::<Vec<_>>());
        let examples: Vec<Example> = graphs
            .iter()
            .enumerate()
            .map(|(k, g)| Example { graph: to_extended_levi(g, sequential).to_ids(&vocab), target: (5..5 + k).collect() })
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&examples, &mut buf).unwrap();
        prop_assert_eq!(read_jsonl(buf.as_slice(), 6).unwrap(), examples);
    }
}

#[test]
fn root_and_child_positions() {
    let g = parse_penman("(c / come-01 :ARG1 (a / and :op1 (s / see-01) :op2 (l / learn-01)))").unwrap();
    let lv = to_extended_levi(&g, false);
    let at = |label: &str| lv.positions[lv.labels.iter().position(|l| l == label).unwrap()];
    assert_eq!(at("come-01"), 0);
    assert_eq!(at("and"), 1);
    assert_eq!(at("see-01"), 2);
    assert_eq!(at("<gnode>"), -1);
}

#[test]
fn dependency_chain_positions_are_depths() {
    // 1 <- 2 <- 3 <- 4 <- 5, rooted at token 5
    let text = "1 a 2 dep\n2 b 3 dep\n3 c 4 dep\n4 d 5 dep\n5 e 0 root\n";
    let g = parse_dependency(text).unwrap();
    let lv = to_extended_levi(&g, true);
    assert_eq!(&lv.positions[..5], &[4, 3, 2, 1, 0]);
    assert_eq!(lv.edges.get(EdgeType::Forward), &[(0, 1), (1, 2), (2, 3), (3, 4)]);
    assert_eq!(lv.edges.get(EdgeType::Backward), &[(1, 0), (2, 1), (3, 2), (4, 3)]);
}

#[test]
fn unreachable_nodes_take_the_sentinel() {
    let g = parse_penman("(a / x :r (b / y))").unwrap();
    let mut g = g;
    g.nodes.push(("z".into(), "lonely".into()));
    let lv = to_extended_levi(&g, false);
    assert_eq!(lv.unreachable, vec![2]);
    assert_eq!(lv.positions[2], 2);
}

#[test]
fn trees_never_have_unreachable_nodes() {
    let corpus = TreeCorpus { reentrancy: 0.5, ..TreeCorpus::default() };
    for e in corpus.entries(50, 3) {
        assert!(to_extended_levi(&e.graph, false).unreachable.is_empty());
    }
}
