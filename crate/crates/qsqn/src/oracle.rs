//! Independent reference evaluators used to cross-check the net engine.
//!
//! Two deliberately naive implementations of the same semantics:
//!
//! * [`sld_answers`] — depth-bounded SLD resolution with leftmost selection
//!   and exhaustive backtracking over clause choices. Branches are pruned
//!   when a goal's term depth exceeds the bound; search is iteratively
//!   deepened on derivation *length* (with a global step budget) because
//!   the depth bound alone does not make the SLD tree finite.
//! * [`tp_fixpoint`] — a bottom-up immediate-consequence fixpoint for the
//!   function-free case, producing the ground least model over the active
//!   constant universe.
//!
//! Neither shares any evaluation machinery with the engine beyond the term
//! store primitives: no nets, no subsumption, no tabling. Oracle-side fresh
//! variables come from their own namespace so they can never collide with
//! engine-generated ones.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use indexmap::IndexSet;

use crate::lang::{EdbInstance, Program};
use crate::term::{Atom, PredId, TermId, TermNode, TermStore, Tuple, VarId, VarSpace};

/// Tuning for the SLD search.
#[derive(Clone, Copy, Debug)]
pub struct SldConfig {
    /// Term-depth bound `l`: goals deeper than this are pruned, answers
    /// deeper than this are dropped. Use `u32::MAX` for unbounded search.
    pub depth_bound: u32,
    /// Total resolution-step budget across all deepening rounds.
    pub max_steps: u64,
    /// First derivation-length cap; doubled until the search saturates.
    pub initial_length_cap: u64,
    /// Hard ceiling on the derivation length (bounds recursion depth);
    /// reaching it counts as truncation.
    pub max_length: u64,
}

impl Default for SldConfig {
    fn default() -> Self {
        SldConfig {
            depth_bound: u32::MAX,
            max_steps: 100_000,
            initial_length_cap: 8,
            max_length: 1024,
        }
    }
}

/// Result of an SLD search.
#[derive(Clone, Debug)]
pub struct SldOutcome {
    /// Instantiations of the goal's argument tuple by computed answers,
    /// deduplicated up to variants.
    pub answers: Vec<Tuple>,
    /// True if the step budget ran out before the search was exhaustive;
    /// the answer set is then a lower approximation.
    pub truncated: bool,
    pub steps: u64,
}

enum ClauseRef {
    Program(usize),
    Fact(PredId, usize),
}

struct SldSearch<'a> {
    store: &'a mut TermStore,
    program: &'a Program,
    edb: &'a EdbInstance,
    by_pred: BTreeMap<PredId, Vec<ClauseRef>>,
    depth_bound: u32,
    max_steps: u64,
    steps: u64,
    length_cap: u64,
    cap_hit: bool,
    budget_hit: bool,
    answers: Vec<Tuple>,
    answer_keys: HashSet<String>,
}

impl<'a> SldSearch<'a> {
    fn candidates(&self, p: PredId) -> &[ClauseRef] {
        self.by_pred.get(&p).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Explores all derivations from `goal`, accumulating the answer tuple
    /// `args` (the original goal arguments under the mgus so far).
    fn dfs(&mut self, goal: &[Atom], args: &Tuple, length: u64) {
        if self.budget_hit {
            return;
        }
        let (selected, rest) = match goal.split_first() {
            None => {
                // refutation: keep the computed answer if it obeys the bound
                if self.store.tuple_depth(args) <= self.depth_bound {
                    let key = self.store.variant_key(args);
                    if self.answer_keys.insert(key) {
                        self.answers.push(args.clone());
                    }
                }
                return;
            }
            Some(split) => split,
        };
        if length == self.length_cap {
            self.cap_hit = true;
            return;
        }
        let n_candidates = self.candidates(selected.pred).len();
        for c in 0..n_candidates {
            if self.steps >= self.max_steps {
                self.budget_hit = true;
                return;
            }
            // fresh variant of the chosen input clause, oracle namespace
            let (head, body) = match self.by_pred[&selected.pred][c] {
                ClauseRef::Program(i) => {
                    let clause = &self.program.clauses[i];
                    let mut exprs: Vec<TermId> = clause.head.args.clone();
                    let mut shape = vec![clause.head.args.len()];
                    for b in &clause.body {
                        exprs.extend(b.args.iter().copied());
                        shape.push(b.args.len());
                    }
                    let (renamed, _) = self.store.fresh_variant_all(&exprs, VarSpace::Oracle);
                    let mut at = 0usize;
                    let mut take = |k: usize| {
                        let slice = renamed[at..at + k].to_vec();
                        at += k;
                        slice
                    };
                    let head = Atom {
                        pred: clause.head.pred,
                        args: take(shape[0]),
                    };
                    let body: Vec<Atom> = clause
                        .body
                        .iter()
                        .zip(shape[1..].iter())
                        .map(|(b, &k)| Atom {
                            pred: b.pred,
                            args: take(k),
                        })
                        .collect();
                    (head, body)
                }
                ClauseRef::Fact(p, k) => {
                    let t = &self.edb.tuples(p)[k];
                    let args = self.store.fresh_variant_tuple(t, VarSpace::Oracle);
                    (Atom { pred: p, args }, Vec::new())
                }
            };
            let theta = match self.store.mgu_atoms(selected, &head) {
                None => continue,
                Some(theta) => theta,
            };
            self.steps += 1;
            // resolvent: (body ++ rest) under theta
            let mut resolvent: Vec<Atom> = Vec::with_capacity(body.len() + rest.len());
            for b in &body {
                resolvent.push(self.store.apply_atom(&theta, b));
            }
            for r in rest {
                resolvent.push(self.store.apply_atom(&theta, r));
            }
            let next_args = self.store.apply_all(&theta, args);
            let goal_depth = resolvent
                .iter()
                .map(|a| self.store.atom_depth(a))
                .max()
                .unwrap_or(0);
            if goal_depth > self.depth_bound {
                continue;
            }
            // instantiation only deepens the computed answer, so a partial
            // answer past the bound can never recover
            if self.store.tuple_depth(&next_args) > self.depth_bound {
                continue;
            }
            self.dfs(&resolvent, &next_args, length + 1);
            if self.budget_hit {
                return;
            }
        }
    }
}

/// Computed answers of `program ∪ edb ∪ {← goal}` under leftmost selection,
/// restricted to derivations whose goals stay within the term-depth bound.
/// Exhaustive up to the step budget.
pub fn sld_answers(
    store: &mut TermStore,
    program: &Program,
    edb: &EdbInstance,
    goal: &Atom,
    config: &SldConfig,
) -> SldOutcome {
    let mut by_pred: BTreeMap<PredId, Vec<ClauseRef>> = BTreeMap::new();
    for (i, c) in program.clauses.iter().enumerate() {
        by_pred
            .entry(c.head.pred)
            .or_default()
            .push(ClauseRef::Program(i));
    }
    let mut edb_preds: Vec<PredId> = edb.preds().collect();
    edb_preds.sort();
    for p in edb_preds {
        let entry = by_pred.entry(p).or_default();
        for k in 0..edb.tuples(p).len() {
            entry.push(ClauseRef::Fact(p, k));
        }
    }
    let mut search = SldSearch {
        store,
        program,
        edb,
        by_pred,
        depth_bound: config.depth_bound,
        max_steps: config.max_steps,
        steps: 0,
        length_cap: config.initial_length_cap,
        cap_hit: false,
        budget_hit: false,
        answers: Vec::new(),
        answer_keys: HashSet::new(),
    };
    let initial_goal = vec![goal.clone()];
    let mut saturated = false;
    loop {
        search.cap_hit = false;
        if search.store.atom_depth(goal) <= config.depth_bound {
            let args = goal.args.clone();
            search.dfs(&initial_goal, &args, 0);
        }
        if !search.cap_hit || search.budget_hit {
            break;
        }
        if search.length_cap >= config.max_length {
            saturated = true;
            break;
        }
        search.length_cap = search.length_cap.saturating_mul(2).min(config.max_length);
    }
    SldOutcome {
        answers: search.answers,
        truncated: search.budget_hit || saturated,
        steps: search.steps,
    }
}

/// Errors from the fixpoint oracle.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("fixpoint oracle requires a function-free program and database")]
    FunctionSymbols,
    #[error("fixpoint oracle requires ground facts")]
    NonGroundFacts,
}

/// The ground least model produced by [`tp_fixpoint`].
#[derive(Clone, Debug, Default)]
pub struct GroundModel {
    by_pred: BTreeMap<PredId, IndexSet<Tuple>>,
}

impl GroundModel {
    pub fn contains(&self, p: PredId, t: &[TermId]) -> bool {
        self.by_pred.get(&p).is_some_and(|s| s.contains(t))
    }

    pub fn facts(&self, p: PredId) -> impl Iterator<Item = &Tuple> {
        self.by_pred.get(&p).into_iter().flat_map(|s| s.iter())
    }

    pub fn total(&self) -> usize {
        self.by_pred.values().map(IndexSet::len).sum()
    }

    fn insert(&mut self, p: PredId, t: Tuple) -> bool {
        self.by_pred.entry(p).or_default().insert(t)
    }

    /// Ground tuples of `goal.pred` matching the (possibly non-ground) goal
    /// arguments.
    pub fn answers_for(&self, store: &TermStore, goal: &Atom) -> Vec<Tuple> {
        self.facts(goal.pred)
            .filter(|t| {
                store
                    .match_list(
                        &goal
                            .args
                            .iter()
                            .copied()
                            .zip(t.iter().copied())
                            .collect::<Vec<_>>(),
                    )
                    .is_some()
            })
            .cloned()
            .collect()
    }
}

/// True iff no proper function symbol occurs in the program or database.
pub fn is_function_free(store: &TermStore, program: &Program, edb: &EdbInstance) -> bool {
    let mut roots: Vec<TermId> = Vec::new();
    for c in &program.clauses {
        roots.extend(c.head.args.iter().copied());
        for b in &c.body {
            roots.extend(b.args.iter().copied());
        }
    }
    let mut edb_preds: Vec<PredId> = edb.preds().collect();
    edb_preds.sort();
    for p in edb_preds {
        for t in edb.tuples(p) {
            roots.extend(t.iter().copied());
        }
    }
    roots.iter().all(|&t| store.term_depth(t) == 0)
}

/// True iff every stored fact is ground.
pub fn edb_is_ground(store: &TermStore, edb: &EdbInstance) -> bool {
    edb.preds()
        .all(|p| edb.tuples(p).iter().all(|t| store.is_ground_tuple(t)))
}

/// All constants occurring in the program and database, in interning order.
pub fn constant_universe(store: &TermStore, program: &Program, edb: &EdbInstance) -> Vec<TermId> {
    let mut roots: Vec<TermId> = Vec::new();
    for c in &program.clauses {
        roots.extend(c.head.args.iter().copied());
        for b in &c.body {
            roots.extend(b.args.iter().copied());
        }
    }
    let mut edb_preds: Vec<PredId> = edb.preds().collect();
    edb_preds.sort();
    for p in edb_preds {
        for t in edb.tuples(p) {
            roots.extend(t.iter().copied());
        }
    }
    collect_constants(store, &roots)
}

fn collect_constants(store: &TermStore, roots: &[TermId]) -> Vec<TermId> {
    let mut seen = HashSet::new();
    let mut found = BTreeSet::new();
    let mut stack: Vec<TermId> = roots.to_vec();
    while let Some(t) = stack.pop() {
        if !seen.insert(t) {
            continue;
        }
        if let TermNode::App(_, args) = store.node(t) {
            if args.is_empty() {
                found.insert(t);
            } else {
                stack.extend(args.iter().copied());
            }
        }
    }
    found.into_iter().collect()
}

/// Least Herbrand model of a function-free program over a ground database,
/// by semi-naive iteration of the immediate-consequence operator. Clause
/// head variables that do not occur in the body range over the active
/// constant universe (extended with `extra_constants`).
pub fn tp_fixpoint_with(
    store: &TermStore,
    program: &Program,
    edb: &EdbInstance,
    extra_constants: &[TermId],
) -> Result<GroundModel, OracleError> {
    if !is_function_free(store, program, edb) {
        return Err(OracleError::FunctionSymbols);
    }
    if !edb_is_ground(store, edb) {
        return Err(OracleError::NonGroundFacts);
    }
    let mut universe = constant_universe(store, program, edb);
    for &c in extra_constants {
        if !universe.contains(&c) {
            universe.push(c);
        }
    }

    let mut model = GroundModel::default();
    let mut delta: Vec<(PredId, Tuple)> = Vec::new();
    let mut edb_preds: Vec<PredId> = edb.preds().collect();
    edb_preds.sort();
    for p in edb_preds {
        for t in edb.tuples(p) {
            if model.insert(p, t.clone()) {
                delta.push((p, t.clone()));
            }
        }
    }
    // bodyless clauses fire exactly once, before the first round
    for c in &program.clauses {
        if c.body.is_empty() {
            let mut out = Vec::new();
            emit_head(store, &c.head, &HashMap::new(), &universe, &mut out);
            for t in out {
                if model.insert(c.head.pred, t.clone()) {
                    delta.push((c.head.pred, t));
                }
            }
        }
    }

    while !delta.is_empty() {
        let delta_set: HashSet<(PredId, Tuple)> = delta.iter().cloned().collect();
        let mut next: Vec<(PredId, Tuple)> = Vec::new();
        for c in &program.clauses {
            if c.body.is_empty() {
                continue;
            }
            // require the designated position to match a delta fact so each
            // new derivation uses at least one fact from the last round
            for delta_pos in 0..c.body.len() {
                let mut bindings: HashMap<VarId, TermId> = HashMap::new();
                let mut out = Vec::new();
                join_body(
                    store,
                    c,
                    0,
                    delta_pos,
                    &model,
                    &delta_set,
                    &universe,
                    &mut bindings,
                    &mut out,
                );
                for t in out {
                    if model.contains(c.head.pred, &t) {
                        continue;
                    }
                    next.push((c.head.pred, t));
                }
            }
        }
        delta = Vec::new();
        for (p, t) in next {
            if model.insert(p, t.clone()) {
                delta.push((p, t));
            }
        }
    }
    Ok(model)
}

/// [`tp_fixpoint_with`] without extra constants.
pub fn tp_fixpoint(
    store: &TermStore,
    program: &Program,
    edb: &EdbInstance,
) -> Result<GroundModel, OracleError> {
    tp_fixpoint_with(store, program, edb, &[])
}

#[allow(clippy::too_many_arguments)]
fn join_body(
    store: &TermStore,
    clause: &crate::lang::Clause,
    pos: usize,
    delta_pos: usize,
    model: &GroundModel,
    delta: &HashSet<(PredId, Tuple)>,
    universe: &[TermId],
    bindings: &mut HashMap<VarId, TermId>,
    out: &mut Vec<Tuple>,
) {
    if pos == clause.body.len() {
        emit_head(store, &clause.head, bindings, universe, out);
        return;
    }
    let atom = &clause.body[pos];
    let candidates: Vec<Tuple> = model
        .facts(atom.pred)
        .filter(|t| pos != delta_pos || delta.contains(&(atom.pred, (*t).clone())))
        .cloned()
        .collect();
    'facts: for fact in candidates {
        let mut bound_here: Vec<VarId> = Vec::new();
        for (&arg, &val) in atom.args.iter().zip(fact.iter()) {
            match store.as_var(arg) {
                Some(v) => match bindings.get(&v) {
                    Some(&have) => {
                        if have != val {
                            for b in bound_here.drain(..) {
                                bindings.remove(&b);
                            }
                            continue 'facts;
                        }
                    }
                    None => {
                        bindings.insert(v, val);
                        bound_here.push(v);
                    }
                },
                None => {
                    // function-free: a non-variable argument is a constant
                    if arg != val {
                        for b in bound_here.drain(..) {
                            bindings.remove(&b);
                        }
                        continue 'facts;
                    }
                }
            }
        }
        join_body(
            store, clause, pos + 1, delta_pos, model, delta, universe, bindings, out,
        );
        for b in bound_here {
            bindings.remove(&b);
        }
    }
}

/// Emits all ground instantiations of the head under `bindings`, ranging
/// unbound head variables over the universe.
fn emit_head(
    store: &TermStore,
    head: &Atom,
    bindings: &HashMap<VarId, TermId>,
    universe: &[TermId],
    out: &mut Vec<Tuple>,
) {
    let mut free: Vec<VarId> = Vec::new();
    for &arg in &head.args {
        if let Some(v) = store.as_var(arg) {
            if !bindings.contains_key(&v) && !free.contains(&v) {
                free.push(v);
            }
        }
    }
    if !free.is_empty() && universe.is_empty() {
        return; // empty universe: no ground instantiations exist
    }
    let mut extra: HashMap<VarId, TermId> = HashMap::new();
    emit_head_rec(store, head, bindings, &free, 0, universe, &mut extra, out);
}

#[allow(clippy::too_many_arguments)]
fn emit_head_rec(
    store: &TermStore,
    head: &Atom,
    bindings: &HashMap<VarId, TermId>,
    free: &[VarId],
    at: usize,
    universe: &[TermId],
    extra: &mut HashMap<VarId, TermId>,
    out: &mut Vec<Tuple>,
) {
    if at == free.len() {
        let tuple: Tuple = head
            .args
            .iter()
            .map(|&arg| match store.as_var(arg) {
                Some(v) => *bindings.get(&v).or_else(|| extra.get(&v)).expect("bound"),
                None => arg,
            })
            .collect();
        out.push(tuple);
        return;
    }
    for &c in universe {
        extra.insert(free[at], c);
        emit_head_rec(store, head, bindings, free, at + 1, universe, extra, out);
    }
    extra.remove(&free[at]);
}

/// Verdict of [`verify_answer`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Verification {
    Verified,
    Refuted,
    /// The SLD search hit its step budget before finding a proof.
    Inconclusive,
}

/// Checks a claimed answer tuple for `goal.pred` as a correct answer: the
/// universal closure is tested by grounding the tuple's variables with
/// brand-new constants and proving the resulting ground atom — by model
/// membership when the inputs are function-free and ground, by unbounded
/// SLD search otherwise.
pub fn verify_answer(
    store: &mut TermStore,
    program: &Program,
    edb: &EdbInstance,
    goal_pred: PredId,
    tuple: &[TermId],
    budget: u64,
) -> Verification {
    let vars = store.vars_in_order(tuple);
    let mut pairs = Vec::new();
    for v in vars {
        let mut n = 0usize;
        let c = loop {
            let name = format!("_sk{n}");
            if !store.symbol_exists(&name) {
                break store.constant(&name);
            }
            n += 1;
        };
        pairs.push((store.var_term(v), c));
    }
    let ground_subst = store.mk_subst(&pairs);
    let grounded = store.apply_all(&ground_subst, tuple);
    let goal = Atom {
        pred: goal_pred,
        args: grounded.clone(),
    };
    if is_function_free(store, program, edb) && edb_is_ground(store, edb) {
        let extra = collect_constants(store, &grounded);
        let model = tp_fixpoint_with(store, program, edb, &extra).expect("checked function-free");
        return if model.contains(goal_pred, &grounded) {
            Verification::Verified
        } else {
            Verification::Refuted
        };
    }
    let outcome = sld_answers(
        store,
        program,
        edb,
        &goal,
        &SldConfig {
            depth_bound: u32::MAX,
            max_steps: budget,
            ..SldConfig::default()
        },
    );
    if !outcome.answers.is_empty() {
        Verification::Verified
    } else if outcome.truncated {
        Verification::Inconclusive
    } else {
        Verification::Refuted
    }
}

/// Tuples of `left` not covered by `right` and vice versa, where a tuple is
/// covered if it is an instance of (a variant of) some tuple on the other
/// side. Empty lists mean the two answer sets agree up to instances.
#[derive(Clone, Debug, Default)]
pub struct AnswerComparison {
    pub only_left: Vec<Tuple>,
    pub only_right: Vec<Tuple>,
}

impl AnswerComparison {
    pub fn agree(&self) -> bool {
        self.only_left.is_empty() && self.only_right.is_empty()
    }
}

pub fn compare_up_to_instances(
    store: &TermStore,
    left: &[Tuple],
    right: &[Tuple],
) -> AnswerComparison {
    let covered = |t: &Tuple, others: &[Tuple]| others.iter().any(|g| store.tuple_is_instance(t, g));
    AnswerComparison {
        only_left: left.iter().filter(|t| !covered(t, right)).cloned().collect(),
        only_right: right.iter().filter(|t| !covered(t, left)).cloned().collect(),
    }
}

/// All ground instances of `tuples` with variables ranging over `universe`,
/// as a set (deduplicated, deterministic order).
pub fn ground_instances(
    store: &mut TermStore,
    tuples: &[Tuple],
    universe: &[TermId],
) -> BTreeSet<Tuple> {
    let mut out = BTreeSet::new();
    for t in tuples {
        let vars = store.vars_in_order(t);
        if vars.is_empty() {
            out.insert(t.clone());
            continue;
        }
        if universe.is_empty() {
            continue;
        }
        let mut assignment = vec![0usize; vars.len()];
        loop {
            let pairs: Vec<(TermId, TermId)> = vars
                .iter()
                .zip(assignment.iter())
                .map(|(&v, &k)| (store.var_term(v), universe[k]))
                .collect();
            let s = store.mk_subst(&pairs);
            out.insert(store.apply_all(&s, t));
            // advance the mixed-radix counter
            let mut i = 0;
            loop {
                if i == assignment.len() {
                    break;
                }
                assignment[i] += 1;
                if assignment[i] < universe.len() {
                    break;
                }
                assignment[i] = 0;
                i += 1;
            }
            if i == assignment.len() {
                break;
            }
        }
    }
    out
}
