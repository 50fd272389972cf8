//! Shared builders for the integration suites: seeded random function-free
//! knowledge bases, a corpus of programs with function symbols, and the
//! two-path reachability workload used for the strategy comparisons.
#![allow(dead_code)]

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qsqn::lang::KnowledgeBase;
use qsqn::term::Atom;

/// Program/EDB/goal texts for one generated knowledge base.
pub struct GeneratedKb {
    pub program: String,
    pub edb: String,
    /// Name of the predicate to query with an open, proper goal.
    pub goal_pred: String,
    pub seed: u64,
}

impl GeneratedKb {
    pub fn parse(&self) -> KnowledgeBase {
        KnowledgeBase::parse(&self.program, &[self.edb.as_str()])
            .unwrap_or_else(|e| panic!("seed {} produced unparsable text: {e}\n{}", self.seed, self.program))
    }

    /// Open goal `goal_pred(V1, .., Vk)` with pairwise distinct variables.
    pub fn open_goal(&self, kb: &mut KnowledgeBase) -> Atom {
        open_goal_for(kb, &self.goal_pred)
    }
}

pub fn open_goal_for(kb: &mut KnowledgeBase, pred: &str) -> Atom {
    let p = kb
        .preds
        .id(pred)
        .unwrap_or_else(|| panic!("predicate {pred} missing"));
    let args = (0..kb.preds.arity(p))
        .map(|i| kb.store.var_named(&format!("Q{i}")))
        .collect();
    Atom { pred: p, args }
}

/// Random function-free program in the shape the correctness sweeps expect:
/// at most 4 intensional predicates, at most 6 clauses with bodies of up to
/// 3 atoms, recursion allowed, and a ground database of at most 40 facts.
/// Heads may contain constants and repeated or body-free variables, so the
/// sweep also exercises non-range-restricted clauses.
pub fn random_function_free(seed: u64) -> GeneratedKb {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_idb = rng.random_range(1..=4usize);
    let n_edb = rng.random_range(1..=3usize);
    let n_consts = rng.random_range(2..=8usize);
    let idb_arity: Vec<usize> = (0..n_idb).map(|_| rng.random_range(1..=2)).collect();
    let edb_arity: Vec<usize> = (0..n_edb).map(|_| rng.random_range(1..=2)).collect();
    let consts: Vec<String> = (0..n_consts).map(|i| format!("c{i}")).collect();
    let var_pool = ["X", "Y", "Z", "W"];

    let mut program = String::new();
    let n_clauses = rng.random_range(1..=6usize);
    for ci in 0..n_clauses {
        // clause 0 defines the query predicate so the goal always exists
        let head_pred = if ci == 0 { 0 } else { rng.random_range(0..n_idb) };
        let mut used_vars: Vec<&'static str> = Vec::new();
        let term = |rng: &mut ChaCha8Rng, used: &mut Vec<&'static str>| {
            let r: f64 = rng.random();
            if r < 0.2 {
                consts[rng.random_range(0..n_consts)].clone()
            } else if r < 0.55 && !used.is_empty() {
                used[rng.random_range(0..used.len())].to_string()
            } else {
                let v = var_pool[rng.random_range(0..var_pool.len())];
                if !used.contains(&v) {
                    used.push(v);
                }
                v.to_string()
            }
        };
        let head_args: Vec<String> = (0..idb_arity[head_pred])
            .map(|_| term(&mut rng, &mut used_vars))
            .collect();
        let n_body = rng.random_range(0..=3usize);
        let mut body = Vec::new();
        for _ in 0..n_body {
            // slight bias towards extensional atoms keeps most joins grounded
            let (name, arity) = if rng.random_bool(0.55) {
                let e = rng.random_range(0..n_edb);
                (format!("e{e}"), edb_arity[e])
            } else {
                let p = rng.random_range(0..n_idb);
                (format!("p{p}"), idb_arity[p])
            };
            let args: Vec<String> = (0..arity)
                .map(|_| term(&mut rng, &mut used_vars))
                .collect();
            body.push(format!("{name}({})", args.join(", ")));
        }
        let _ = write!(program, "p{head_pred}({})", head_args.join(", "));
        if !body.is_empty() {
            let _ = write!(program, " :- {}", body.join(", "));
        }
        program.push_str(".\n");
    }
    // make sure every intensional predicate is known even when no generated
    // clause mentions it
    for (p, _) in idb_arity.iter().enumerate() {
        let _ = writeln!(program, "#intensional p{p}/{}.", idb_arity[p]);
    }

    let mut edb = String::new();
    let n_facts = rng.random_range(0..=40usize);
    for _ in 0..n_facts {
        let e = rng.random_range(0..n_edb);
        let args: Vec<String> = (0..edb_arity[e])
            .map(|_| consts[rng.random_range(0..n_consts)].clone())
            .collect();
        let _ = writeln!(edb, "e{e}({}).", args.join(", "));
    }
    for (e, _) in edb_arity.iter().enumerate() {
        let _ = writeln!(edb, "#extensional e{e}/{}.", edb_arity[e]);
    }

    GeneratedKb {
        program,
        edb,
        goal_pred: "p0".into(),
        seed,
    }
}

/// One program of the function-symbol corpus, with the depth bounds the
/// cross-checks run it at.
pub struct CorpusEntry {
    pub name: &'static str,
    pub program: &'static str,
    pub edb: &'static str,
    pub goal_pred: &'static str,
}

/// Programs with proper function symbols: successor arithmetic, lists,
/// trees, mutual recursion. All goals are open (distinct fresh variables).
pub fn function_symbol_corpus() -> Vec<CorpusEntry> {
    vec![
        CorpusEntry {
            name: "nat",
            program: "nat(z).\nnat(s(X)) :- nat(X).",
            edb: "",
            goal_pred: "nat",
        },
        CorpusEntry {
            name: "add",
            program: "add(z, Y, Y).\nadd(s(X), Y, s(Z)) :- add(X, Y, Z).",
            edb: "",
            goal_pred: "add",
        },
        CorpusEntry {
            name: "less-or-equal",
            program: "le(z, X).\nle(s(X), s(Y)) :- le(X, Y).",
            edb: "",
            goal_pred: "le",
        },
        CorpusEntry {
            name: "double",
            program: "dbl(z, z).\ndbl(s(X), s(s(Y))) :- dbl(X, Y).",
            edb: "",
            goal_pred: "dbl",
        },
        CorpusEntry {
            name: "even-odd",
            program: "even(z).\neven(s(X)) :- odd(X).\nodd(s(X)) :- even(X).",
            edb: "",
            goal_pred: "even",
        },
        CorpusEntry {
            name: "append",
            program: "app(nil, Y, Y).\napp(c(H, T), Y, c(H, Z)) :- app(T, Y, Z).",
            edb: "",
            goal_pred: "app",
        },
        CorpusEntry {
            name: "list-member",
            program: "mem(X, c(X, T)).\nmem(X, c(H, T)) :- mem(X, T).",
            edb: "",
            goal_pred: "mem",
        },
        CorpusEntry {
            name: "list-length",
            program: "len(nil, z).\nlen(c(H, T), s(N)) :- len(T, N).",
            edb: "",
            goal_pred: "len",
        },
        CorpusEntry {
            name: "tree-member",
            program: "tmem(X, node(L, X, R)).\ntmem(X, node(L, Y, R)) :- tmem(X, L).\ntmem(X, node(L, Y, R)) :- tmem(X, R).",
            edb: "",
            goal_pred: "tmem",
        },
        CorpusEntry {
            name: "tree-mirror",
            program: "mir(leaf, leaf).\nmir(node(L, X, R), node(RM, X, LM)) :- mir(L, LM), mir(R, RM).",
            edb: "",
            goal_pred: "mir",
        },
        CorpusEntry {
            name: "wrap-edb",
            program: "wrap(f(X)) :- item(X).\nwrap(g(X, Y)) :- item(X), item(Y).",
            edb: "item(a). item(b).",
            goal_pred: "wrap",
        },
        CorpusEntry {
            name: "successor-reach",
            program: "reach(X, X).\nreach(X, s(Y)) :- reach(X, Y).",
            edb: "",
            goal_pred: "reach",
        },
    ]
}

/// The two-path reachability workload: one direct chain `r1` from `a0` to
/// `an` and `branches` decoy chains `r2` of the same length that also end
/// in `an`. The goal `p` is provable through either relation; a strategy
/// chasing the first clause depth-first can prove it without ever reading
/// `r2`.
pub struct TwoPath {
    pub program: String,
    pub edb: String,
}

pub fn two_path_workload(chain: usize, branches: usize) -> TwoPath {
    assert!(chain >= 2, "the chain needs at least two edges");
    let mut program = String::new();
    let _ = writeln!(program, "p :- q1(a0, a{chain}).");
    let _ = writeln!(program, "p :- q2(a0, a{chain}).");
    program.push_str("q1(X, Y) :- r1(X, Y).\nq1(X, Y) :- r1(X, Z), q1(Z, Y).\n");
    program.push_str("q2(X, Y) :- r2(X, Y).\nq2(X, Y) :- r2(X, Z), q2(Z, Y).\n");

    let mut edb = String::new();
    for i in 0..chain {
        let _ = writeln!(edb, "r1(a{i}, a{}).", i + 1);
    }
    for j in 1..=branches {
        let _ = writeln!(edb, "r2(a0, b1_{j}).");
        for i in 1..chain - 1 {
            let _ = writeln!(edb, "r2(b{i}_{j}, b{}_{j}).", i + 1);
        }
        let _ = writeln!(edb, "r2(b{}_{j}, a{chain}).", chain - 1);
    }
    TwoPath { program, edb }
}

/// Transitive closure over a single chain of `n` edges.
pub fn chain_closure(n: usize) -> (String, String) {
    let program = "q(X, Y) :- r(X, Y).\nq(X, Y) :- r(X, Z), q(Z, Y).".to_string();
    let mut edb = String::new();
    for i in 0..n {
        let _ = writeln!(edb, "r(a{i}, a{}).", i + 1);
    }
    (program, edb)
}
