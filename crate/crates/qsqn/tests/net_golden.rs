//! Golden tests for the compiled net structure of the two-clause
//! transitive-closure program, with and without tail recursion
//! elimination. The DOT renderings are frozen under `tests/golden/`.

use std::collections::HashSet;

use qsqn::lang::KnowledgeBase;
use qsqn::net::{NetConfig, NetStructure, NodeId};

const PROGRAM: &str = "p(X, Y) :- q(X, Y).\np(X, Y) :- q(X, Z), p(Z, Y).";

fn build(tre: bool) -> (KnowledgeBase, NetStructure) {
    let kb = KnowledgeBase::parse(PROGRAM, &["q(a, b)."]).unwrap();
    let tre_preds = if tre {
        HashSet::from([kb.preds.id("p").unwrap()])
    } else {
        HashSet::new()
    };
    let net = NetStructure::build(
        &kb.store,
        &kb.preds,
        &kb.program,
        &NetConfig { memorize_edb: true, tre_preds },
    );
    (kb, net)
}

#[test]
fn transitive_closure_net_matches_the_golden_rendering() {
    let (kb, net) = build(false);
    let dot = net.to_dot(&kb.store, &kb.preds);
    assert_eq!(dot, include_str!("golden/transitive_closure.dot"));
}

#[test]
fn tre_net_matches_the_golden_rendering() {
    let (kb, net) = build(true);
    let dot = net.to_dot(&kb.store, &kb.preds);
    assert_eq!(dot, include_str!("golden/transitive_closure_tre.dot"));
}

/// Eliminating the tail call turns the recursive clause into a loop back
/// to `input_p`: the last filter feeds the input side only, the clause
/// loses its post filter, and the answer node no longer feeds the filter.
#[test]
fn tre_rewires_the_recursive_clause_into_a_loop() {
    let (kb, plain) = build(false);
    let (_, tre) = build(true);
    let p = kb.preds.id("p").unwrap();
    let last_filter = NodeId::Filter(1, 2);

    assert_eq!(
        plain.out_edges(last_filter),
        [NodeId::Input(p), NodeId::Post(1)],
        "without elimination the filter forwards to both input and post"
    );
    assert_eq!(plain.out_edges(NodeId::Ans(p)), [last_filter]);

    assert_eq!(tre.out_edges(last_filter), [NodeId::Input(p)]);
    assert_eq!(tre.out_edges(NodeId::Ans(p)), []);
    assert!(
        !tre.nodes().contains(&NodeId::Post(1)),
        "the recursive clause must not have a post filter"
    );
    assert!(tre.nodes().contains(&NodeId::Post(0)));
}
