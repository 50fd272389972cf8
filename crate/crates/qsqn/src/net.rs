//! Net structure compiled from a program.
//!
//! Every intensional predicate `p` contributes an `input_p` and an `ans_p`
//! node; every clause `i` (1-based in labels) contributes `pre_filter_i`,
//! one `filter_i_j` per body atom, and `post_filter_i`. Edges wire each
//! clause into a pipeline from `input_p` through its filters to `ans_p`,
//! and every filter over an intensional predicate additionally connects to
//! that predicate's `input`/`ans` pair. The structure is uniquely
//! determined by the program; evaluation state lives in the engine, not
//! here.
//!
//! Two compile-time options change the structure or its interpretation:
//!
//! * `memorize_edb`: extensional filters remember the subqueries they have
//!   seen (and join them against facts when fired) instead of processing
//!   each batch immediately;
//! * `tre_preds`: tail recursion elimination. For a predicate `p` in this
//!   set, a clause whose head and *last* body atom both use `p` loses its
//!   `post_filter` (and the edges touching it): instead of producing an
//!   intermediate answer that would be joined back at the call site, the
//!   final filter feeds `input_p` with a pair (current goal, original
//!   goal), and answers are emitted directly for the original goal.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::lang::{PredKind, PredTable, Program};
use crate::term::{Atom, PredId, TermId, TermStore, VarId};

/// Node of the net. The derived order (`Input < Ans < Pre < Filter < Post`,
/// then by indices) is the canonical node order used for all deterministic
/// iteration.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum NodeId {
    Input(PredId),
    Ans(PredId),
    /// `pre_filter_i` (clause index 0-based here, 1-based in labels).
    Pre(usize),
    /// `filter_i_j` (clause index 0-based, `j` 1-based).
    Filter(usize, usize),
    /// `post_filter_i`.
    Post(usize),
}

pub type Edge = (NodeId, NodeId);

/// Static per-clause data.
#[derive(Clone, Debug)]
pub struct ClauseInfo {
    pub head: Atom,
    /// Body length `n_i`.
    pub n: usize,
    /// `postVars(pre_filter_i)`: variables of the whole body in
    /// first-occurrence order.
    pub post_vars: Vec<VarId>,
    /// `succ(pre_filter_i)`: the first filter, or the post filter for a
    /// bodyless clause.
    pub pre_succ: NodeId,
    /// False iff tail recursion elimination removed `post_filter_i`.
    pub has_post: bool,
}

/// Static per-filter data for `filter_i_j`.
#[derive(Clone, Debug)]
pub struct FilterInfo {
    /// The body atom `B_{i,j}`.
    pub atom: Atom,
    pub kind: PredKind,
    /// For extensional filters: whether the node memorizes subqueries.
    /// Intensional filters always accumulate.
    pub memorizing: bool,
    /// Variables of `B_{i,j}, ..., B_{i,n_i}` in first-occurrence order;
    /// subquery substitutions at this node have their domain inside this
    /// list, and the list fixes the canonical comparison order.
    pub pre_vars: Vec<VarId>,
    /// Variables of `B_{i,j+1}, ..., B_{i,n_i}`; equals `pre_vars` of the
    /// successor node.
    pub post_vars: Vec<VarId>,
    /// The in-clause successor; `None` for the terminal filter of a
    /// tail-recursion-eliminated clause.
    pub succ: Option<NodeId>,
    /// `input_p` for an intensional filter.
    pub succ2: Option<NodeId>,
    /// True iff this is `filter_{i,n_i}` of a tail-recursion-eliminated
    /// clause (same intensional predicate in head and last body atom).
    pub tre_terminal: bool,
}

/// Structure-affecting options.
#[derive(Clone, Debug, Default)]
pub struct NetConfig {
    /// Memorizing type for all extensional filters.
    pub memorize_edb: bool,
    /// Predicates with tail recursion elimination enabled. Non-intensional
    /// entries are ignored.
    pub tre_preds: HashSet<PredId>,
}

/// The compiled net: nodes, edges and the static annotations evaluation
/// needs. Indices into `clauses`/`filters` are clause positions in the
/// program.
#[derive(Clone, Debug)]
pub struct NetStructure {
    pub idb_preds: Vec<PredId>,
    pub clauses: Vec<ClauseInfo>,
    /// `filters[i][j-1]` describes `filter_i_j`.
    pub filters: Vec<Vec<FilterInfo>>,
    /// All edges in canonical order.
    pub edges: Vec<Edge>,
    /// Intensional predicates with tail recursion elimination enabled.
    pub tre_preds: BTreeSet<PredId>,
    out: BTreeMap<NodeId, Vec<NodeId>>,
}

impl NetStructure {
    pub fn build(
        store: &TermStore,
        preds: &PredTable,
        program: &Program,
        config: &NetConfig,
    ) -> NetStructure {
        let idb_preds: Vec<PredId> = preds.iter().filter(|&p| preds.is_idb(p)).collect();
        let tre_preds: BTreeSet<PredId> = config
            .tre_preds
            .iter()
            .copied()
            .filter(|&p| preds.is_idb(p))
            .collect();

        let mut clauses = Vec::new();
        let mut filters = Vec::new();
        for (i, c) in program.clauses.iter().enumerate() {
            let n = c.body.len();
            let tre_clause =
                n >= 1 && tre_preds.contains(&c.head.pred) && c.body[n - 1].pred == c.head.pred;
            let suffix_args = |from: usize| -> Vec<TermId> {
                c.body[from..]
                    .iter()
                    .flat_map(|a| a.args.iter().copied())
                    .collect()
            };
            clauses.push(ClauseInfo {
                head: c.head.clone(),
                n,
                post_vars: store.vars_in_order(&suffix_args(0)),
                pre_succ: if n >= 1 {
                    NodeId::Filter(i, 1)
                } else {
                    NodeId::Post(i)
                },
                has_post: !tre_clause,
            });
            let mut clause_filters = Vec::new();
            for j in 1..=n {
                let atom = c.body[j - 1].clone();
                let kind = preds.kind(atom.pred);
                let tre_terminal = tre_clause && j == n;
                clause_filters.push(FilterInfo {
                    kind,
                    memorizing: match kind {
                        PredKind::Edb => config.memorize_edb,
                        PredKind::Idb => true,
                    },
                    pre_vars: store.vars_in_order(&suffix_args(j - 1)),
                    post_vars: store.vars_in_order(&suffix_args(j)),
                    succ: if tre_terminal {
                        None
                    } else if j < n {
                        Some(NodeId::Filter(i, j + 1))
                    } else {
                        Some(NodeId::Post(i))
                    },
                    succ2: match kind {
                        PredKind::Idb => Some(NodeId::Input(atom.pred)),
                        PredKind::Edb => None,
                    },
                    tre_terminal,
                    atom,
                });
            }
            filters.push(clause_filters);
        }

        let mut edges: Vec<Edge> = Vec::new();
        for (i, info) in clauses.iter().enumerate() {
            let n = info.n;
            for j in 1..n {
                edges.push((NodeId::Filter(i, j), NodeId::Filter(i, j + 1)));
            }
            if n >= 1 {
                edges.push((NodeId::Pre(i), NodeId::Filter(i, 1)));
                if info.has_post {
                    edges.push((NodeId::Filter(i, n), NodeId::Post(i)));
                }
            } else {
                edges.push((NodeId::Pre(i), NodeId::Post(i)));
            }
            edges.push((NodeId::Input(info.head.pred), NodeId::Pre(i)));
            if info.has_post {
                edges.push((NodeId::Post(i), NodeId::Ans(info.head.pred)));
            }
            for (f, j) in filters[i].iter().zip(1..) {
                if f.kind == PredKind::Idb {
                    edges.push((NodeId::Filter(i, j), NodeId::Input(f.atom.pred)));
                    if !f.tre_terminal {
                        edges.push((NodeId::Ans(f.atom.pred), NodeId::Filter(i, j)));
                    }
                }
            }
        }
        edges.sort();
        debug_assert!(edges.windows(2).all(|w| w[0] != w[1]));

        let mut out: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &(u, v) in &edges {
            out.entry(u).or_default().push(v);
        }

        NetStructure {
            idb_preds,
            clauses,
            filters,
            edges,
            tre_preds,
            out,
        }
    }

    /// True iff tail recursion elimination is on for `p`.
    pub fn tre(&self, p: PredId) -> bool {
        self.tre_preds.contains(&p)
    }

    pub fn filter(&self, i: usize, j: usize) -> &FilterInfo {
        &self.filters[i][j - 1]
    }

    pub fn out_edges(&self, v: NodeId) -> &[NodeId] {
        self.out.get(&v).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All nodes in canonical order.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for &p in &self.idb_preds {
            out.push(NodeId::Input(p));
            out.push(NodeId::Ans(p));
        }
        for (i, info) in self.clauses.iter().enumerate() {
            out.push(NodeId::Pre(i));
            for j in 1..=info.n {
                out.push(NodeId::Filter(i, j));
            }
            if info.has_post {
                out.push(NodeId::Post(i));
            }
        }
        out.sort();
        out
    }

    /// `pre_filter` nodes of the clauses for `p`, in clause order.
    pub fn pre_filters_of(&self, p: PredId) -> Vec<NodeId> {
        self.out_edges(NodeId::Input(p)).to_vec()
    }

    /// Stable text label of a node (`input_p`, `filter_2_1`, ...); clause
    /// numbers are 1-based.
    pub fn label(&self, preds: &PredTable, v: NodeId) -> String {
        match v {
            NodeId::Input(p) => format!("input_{}", preds.name(p)),
            NodeId::Ans(p) => format!("ans_{}", preds.name(p)),
            NodeId::Pre(i) => format!("pre_filter_{}", i + 1),
            NodeId::Filter(i, j) => format!("filter_{}_{}", i + 1, j),
            NodeId::Post(i) => format!("post_filter_{}", i + 1),
        }
    }

    /// GraphViz rendering of the topological structure. Deterministic:
    /// nodes and edges appear in canonical order.
    pub fn to_dot(&self, store: &TermStore, preds: &PredTable) -> String {
        let mut s = String::new();
        s.push_str("digraph qsq_net {\n");
        s.push_str("  rankdir=LR;\n");
        s.push_str("  node [shape=box fontname=\"monospace\"];\n");
        for v in self.nodes() {
            let id = self.label(preds, v);
            let mut label = id.clone();
            match v {
                NodeId::Input(p) if self.tre(p) => label.push_str("\\n(tre)"),
                NodeId::Filter(i, j) => {
                    let f = self.filter(i, j);
                    label.push_str("\\n");
                    label.push_str(&dot_escape(&preds.atom_to_string(store, &f.atom)));
                    if f.kind == PredKind::Edb && f.memorizing {
                        label.push_str("\\n(memo)");
                    }
                }
                _ => {}
            }
            s.push_str(&format!("  {id} [label=\"{label}\"];\n"));
        }
        for &(u, v) in &self.edges {
            s.push_str(&format!(
                "  {} -> {};\n",
                self.label(preds, u),
                self.label(preds, v)
            ));
        }
        s.push_str("}\n");
        s
    }
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::KnowledgeBase;

    const TRANSITIVE: &str = "p(X, Y) :- q(X, Y).\np(X, Y) :- q(X, Z), p(Z, Y).";

    fn build(program: &str, edb: &str, config: &NetConfig) -> (KnowledgeBase, NetStructure) {
        let kb = KnowledgeBase::parse(program, &[edb]).unwrap();
        let net = NetStructure::build(&kb.store, &kb.preds, &kb.program, config);
        (kb, net)
    }

    #[test]
    fn transitive_closure_net_has_expected_shape() {
        let (kb, net) = build(TRANSITIVE, "q(a, b).", &NetConfig::default());
        let p = kb.preds.id("p").unwrap();
        assert_eq!(net.nodes().len(), 9);
        assert_eq!(net.edges.len(), 11);
        assert_eq!(
            net.pre_filters_of(p),
            vec![NodeId::Pre(0), NodeId::Pre(1)]
        );
        // second clause: q-filter then p-filter
        let f21 = net.filter(1, 1);
        let f22 = net.filter(1, 2);
        assert_eq!(f21.kind, PredKind::Edb);
        assert_eq!(f21.succ, Some(NodeId::Filter(1, 2)));
        assert_eq!(f21.succ2, None);
        assert_eq!(f22.kind, PredKind::Idb);
        assert_eq!(f22.succ, Some(NodeId::Post(1)));
        assert_eq!(f22.succ2, Some(NodeId::Input(p)));
        assert!(net.edges.contains(&(NodeId::Filter(1, 2), NodeId::Input(p))));
        assert!(net.edges.contains(&(NodeId::Ans(p), NodeId::Filter(1, 2))));
    }

    #[test]
    fn pre_and_post_vars_chain_correctly() {
        let (kb, net) = build(TRANSITIVE, "q(a, b).", &NetConfig::default());
        let name = |v: VarId| kb.store.var_name(v).to_string();
        let f21 = net.filter(1, 1);
        let f22 = net.filter(1, 2);
        assert_eq!(f21.pre_vars.iter().map(|&v| name(v)).collect::<Vec<_>>(), ["X", "Z", "Y"]);
        assert_eq!(f21.post_vars, f22.pre_vars);
        assert_eq!(f22.post_vars, Vec::<VarId>::new());
        assert_eq!(
            net.clauses[1].post_vars,
            f21.pre_vars,
            "postVars(pre_filter) is preVars(first filter)"
        );
    }

    #[test]
    fn bodyless_clauses_connect_pre_to_post() {
        let (_, net) = build("p(a).", "", &NetConfig::default());
        assert_eq!(net.clauses[0].n, 0);
        assert_eq!(net.clauses[0].pre_succ, NodeId::Post(0));
        assert!(net.edges.contains(&(NodeId::Pre(0), NodeId::Post(0))));
    }

    #[test]
    fn memorizing_flag_applies_to_edb_filters_only() {
        let config = NetConfig {
            memorize_edb: true,
            ..NetConfig::default()
        };
        let (_, net) = build(TRANSITIVE, "q(a, b).", &config);
        assert!(net.filter(0, 1).memorizing);
        assert!(net.filter(1, 1).memorizing);
        assert!(net.filter(1, 2).memorizing, "idb filters always accumulate");
        let (_, net) = build(TRANSITIVE, "q(a, b).", &NetConfig::default());
        assert!(!net.filter(0, 1).memorizing);
        assert!(net.filter(1, 2).memorizing);
    }

    #[test]
    fn tre_drops_the_post_filter_of_tail_recursive_clauses() {
        let kb = KnowledgeBase::parse(TRANSITIVE, &["q(a, b)."]).unwrap();
        let p = kb.preds.id("p").unwrap();
        let config = NetConfig {
            memorize_edb: false,
            tre_preds: HashSet::from([p]),
        };
        let net = NetStructure::build(&kb.store, &kb.preds, &kb.program, &config);
        assert_eq!(net.nodes().len(), 8);
        assert_eq!(net.edges.len(), 8);
        assert!(!net.clauses[1].has_post);
        assert!(net.clauses[0].has_post, "non-tail clause keeps its post filter");
        let f22 = net.filter(1, 2);
        assert!(f22.tre_terminal);
        assert_eq!(f22.succ, None);
        assert_eq!(f22.succ2, Some(NodeId::Input(p)));
        assert!(!net.edges.contains(&(NodeId::Ans(p), NodeId::Filter(1, 2))));
        assert!(!net.nodes().contains(&NodeId::Post(1)));
    }

    #[test]
    fn tre_only_applies_when_head_and_last_atom_share_the_predicate() {
        // head p, last body atom r: no elimination even with T(p) = true
        let kb = KnowledgeBase::parse("p(X) :- p(X), r(X). r(X) :- s(X).", &["s(a)."]).unwrap();
        let p = kb.preds.id("p").unwrap();
        let config = NetConfig {
            memorize_edb: false,
            tre_preds: HashSet::from([p]),
        };
        let net = NetStructure::build(&kb.store, &kb.preds, &kb.program, &config);
        assert!(net.clauses[0].has_post);
        assert!(!net.filter(0, 1).tre_terminal, "non-terminal self-call is untouched");
    }

    #[test]
    fn declared_intensional_predicates_get_nodes_without_clauses() {
        let kb = KnowledgeBase::parse("#intensional p/1. q(X) :- p(X).", &[]).unwrap();
        let p = kb.preds.id("p").unwrap();
        let net = NetStructure::build(&kb.store, &kb.preds, &kb.program, &NetConfig::default());
        assert!(net.nodes().contains(&NodeId::Input(p)));
        assert!(net.nodes().contains(&NodeId::Ans(p)));
        assert!(net.pre_filters_of(p).is_empty());
    }

    #[test]
    fn labels_are_one_based_and_stable() {
        let (kb, net) = build(TRANSITIVE, "q(a, b).", &NetConfig::default());
        let p = kb.preds.id("p").unwrap();
        assert_eq!(net.label(&kb.preds, NodeId::Input(p)), "input_p");
        assert_eq!(net.label(&kb.preds, NodeId::Filter(1, 2)), "filter_2_2");
        assert_eq!(net.label(&kb.preds, NodeId::Pre(0)), "pre_filter_1");
    }

    #[test]
    fn dot_output_is_deterministic_and_well_formed() {
        let (kb, net) = build(TRANSITIVE, "q(a, b).", &NetConfig::default());
        let dot1 = net.to_dot(&kb.store, &kb.preds);
        let dot2 = net.to_dot(&kb.store, &kb.preds);
        assert_eq!(dot1, dot2);
        assert!(dot1.starts_with("digraph qsq_net {"));
        assert!(dot1.contains("input_p -> pre_filter_1;"));
        assert!(dot1.contains("filter_2_2 [label=\"filter_2_2\\np(Z, Y)\"];"));
        assert_eq!(dot1.matches(" -> ").count(), net.edges.len());
    }
}
