//! The goal-directed evaluation engine.
//!
//! Evaluation works on the net built by [`crate::net`]: the query seeds
//! `input_q`, data flows along edges, and derived answers accumulate in
//! `ans_p` nodes. All flow happens through two operations:
//!
//! * `transfer(D, u, v)` pushes a batch `D` through the edge `(u, v)`.
//!   Flow-through nodes (`pre_filter`, non-memorizing extensional filters,
//!   `post_filter`) process the batch immediately and forward the result;
//!   every other node accumulates it into its working buffers.
//! * `fire(u, v)` drains the buffers of `u` that feed `(u, v)`, performs
//!   the node's join against the extensional relation or the callee's
//!   answer set, and transfers the result.
//!
//! The main loop repeatedly asks the configured control strategy to pick
//! one active edge (an edge whose source has pending buffered work) and
//! fires it; the loop ends when no edge is active, when the requested
//! number of answers has been reached, or when a time/fire budget runs
//! out. Any selection order yields the same answer set.
//!
//! Three disciplines keep the computation finite and non-redundant:
//!
//! * **term-depth bound** — subqueries and tuples whose terms are deeper
//!   than the bound `l` are dropped at creation. With the optional
//!   iterative-deepening mode the engine re-runs with `l = 0, 1, 2, ...`,
//!   clearing inputs and subqueries between rounds but keeping answers.
//! * **most-general-item sets** — every master set (input tuples, answer
//!   tuples, subqueries, input tuple pairs) keeps only items that are not
//!   instances of another stored item; a newly added more-general item
//!   evicts the instances it covers, including their pending buffer
//!   copies.
//! * **tail-recursion elimination** — predicates marked for it route
//!   their recursive tail calls straight back to `input_p` as tuple
//!   pairs (current call, original caller's answer slot), so answers of
//!   the whole recursion chain land in `ans_p` directly instead of being
//!   copied back through a stack of `post_filter` nodes.
//!
//! Instrumentation counts fires, transfers, unification attempts,
//! extensional tuples read, subsumption drops, depth prunings and
//! re-insertions, plus the simulated page traffic from
//! [`crate::control::RelationStore`]. With `validate` enabled the engine
//! checks its structural invariants after every fire.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use crate::control::{ControlContext, PageOp, RelKey, RelationStore, StrategyKind};
use crate::lang::{EdbInstance, KnowledgeBase, PredKind, PredTable, Program, Query};
use crate::net::{Edge, NetConfig, NetStructure, NodeId};
use crate::term::{Atom, PredId, Subst, TermId, TermStore, Tuple, VarId, VarSpace};

/// A pending call pattern at a filter node: the (partially instantiated)
/// answer slot of the clause head, plus the binding of the variables
/// still relevant for the rest of the clause body.
#[derive(Clone, Debug)]
pub struct Subquery {
    pub args: Tuple,
    pub delta: Subst,
}

/// One stored item; which variant a node holds is fixed by its role.
#[derive(Clone, Debug)]
enum Item {
    Tuple(Tuple),
    Pair(Tuple, Tuple),
    Sq(Subquery),
}

impl Item {
    fn tuple(&self) -> &Tuple {
        match self {
            Item::Tuple(t) => t,
            _ => panic!("expected a tuple item"),
        }
    }
}

/// A batch in flight through an edge.
enum Data {
    Tuples(Vec<Tuple>),
    Sqs(Vec<Subquery>),
    Pairs(Vec<(Tuple, Tuple)>),
}

impl Data {
    fn is_empty(&self) -> bool {
        match self {
            Data::Tuples(v) => v.is_empty(),
            Data::Sqs(v) => v.is_empty(),
            Data::Pairs(v) => v.is_empty(),
        }
    }
}

/// Outcome of trying to add an item to an [`Antichain`].
enum Add {
    /// The item is an instance of (or equal to) a stored one.
    Rejected,
    Added {
        id: u64,
        /// Stored items evicted because they are instances of the new one.
        removed: Vec<u64>,
        /// True if a renaming-equal item had been added before.
        reinserted: bool,
    },
}

#[derive(Clone, Debug)]
struct AcEntry {
    id: u64,
    item: Item,
    /// Flattened comparison key; generality between items is one-sided
    /// matching between keys.
    key: Vec<TermId>,
    ground: bool,
    /// First key component when ground: the bucket this entry is indexed
    /// under in `by_first`.
    slot: Option<TermId>,
}

/// An insertion-ordered set keeping only most-general items.
///
/// Ground items take a hash fast path: a ground item can subsume another
/// item only by being equal to it. The remaining instance scans are
/// narrowed by the first key component: a key starting with the ground
/// term `f` can only cover, or be covered by, keys whose own first
/// component is `f` or non-ground.
#[derive(Clone, Debug)]
struct Antichain {
    entries: Vec<AcEntry>,
    ground: HashMap<Vec<TermId>, u64>,
    /// Entry ids bucketed by ground first key component.
    by_first: HashMap<TermId, Vec<u64>>,
    /// Ids of entries with an empty key or a non-ground first component.
    open: Vec<u64>,
    next_id: u64,
    /// Renaming-canonical keys of everything ever added (None = untracked).
    ever: Option<HashSet<String>>,
}

impl Antichain {
    fn new(track_reinserts: bool) -> Self {
        Antichain {
            entries: Vec::new(),
            ground: HashMap::new(),
            by_first: HashMap::new(),
            open: Vec::new(),
            next_id: 0,
            ever: track_reinserts.then(HashSet::new),
        }
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn iter(&self) -> impl Iterator<Item = &AcEntry> {
        self.entries.iter()
    }

    fn clear(&mut self) {
        self.entries.clear();
        self.ground.clear();
        self.by_first.clear();
        self.open.clear();
        if let Some(ever) = &mut self.ever {
            ever.clear();
        }
    }

    fn entry(&self, id: u64) -> Option<&AcEntry> {
        // ids are assigned in increasing order and entries stay sorted
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    /// True when the key is ground and already stored: the cheap duplicate
    /// test callers can run before materializing an item.
    fn known_ground(&self, store: &TermStore, key: &[TermId]) -> bool {
        store.is_ground_tuple(key) && self.ground.contains_key(key)
    }

    /// True if `key` is an instance of a stored non-ground key. (A ground
    /// key covers only an equal one, which the exact-match map handles.)
    fn covered(&self, store: &TermStore, key: &[TermId], slot: Option<TermId>) -> bool {
        let covers = |id: u64| {
            let e = self.entry(id).expect("indexed id is live");
            !e.ground && store.tuple_is_instance(key, &e.key)
        };
        if let Some(f) = slot {
            if self.by_first.get(&f).is_some_and(|b| b.iter().any(|&id| covers(id))) {
                return true;
            }
        }
        self.open.iter().any(|&id| covers(id))
    }

    /// Ids of stored keys that are instances of the non-ground `key`.
    /// Their first components are instances of `key`'s, so a ground slot
    /// confines the scan to a single bucket.
    fn evictees(&self, store: &TermStore, key: &[TermId], slot: Option<TermId>) -> Vec<u64> {
        match slot {
            Some(f) => self
                .by_first
                .get(&f)
                .into_iter()
                .flatten()
                .copied()
                .filter(|&id| {
                    let e = self.entry(id).expect("indexed id is live");
                    store.tuple_is_instance(&e.key, key)
                })
                .collect(),
            None => self
                .entries
                .iter()
                .filter(|e| store.tuple_is_instance(&e.key, key))
                .map(|e| e.id)
                .collect(),
        }
    }

    fn add(&mut self, store: &TermStore, item: Item, key: Vec<TermId>) -> Add {
        let is_ground = store.is_ground_tuple(&key);
        let slot = key.first().copied().filter(|&t| store.is_ground(t));
        if is_ground && self.ground.contains_key(&key) {
            return Add::Rejected;
        }
        if self.covered(store, &key, slot) {
            return Add::Rejected;
        }
        let mut removed: Vec<u64> = Vec::new();
        if !is_ground {
            // a ground item covers only itself, so only a non-ground one
            // can evict
            removed = self.evictees(store, &key, slot);
            self.remove_ids(&removed);
        }
        let reinserted = match &mut self.ever {
            Some(ever) => !ever.insert(store.variant_key(&key)),
            None => false,
        };
        let id = self.next_id;
        self.next_id += 1;
        if is_ground {
            self.ground.insert(key.clone(), id);
        }
        match slot {
            Some(f) => self.by_first.entry(f).or_default().push(id),
            None => self.open.push(id),
        }
        self.entries.push(AcEntry { id, item, key, ground: is_ground, slot });
        Add::Added { id, removed, reinserted }
    }

    fn remove_ids(&mut self, ids: &[u64]) {
        if ids.is_empty() {
            return;
        }
        for e in self.entries.iter().filter(|e| ids.contains(&e.id)) {
            if e.ground {
                self.ground.remove(&e.key);
            }
            if let Some(f) = e.slot {
                if let Some(bucket) = self.by_first.get_mut(&f) {
                    bucket.retain(|id| !ids.contains(id));
                }
            }
        }
        self.open.retain(|id| !ids.contains(id));
        self.entries.retain(|e| !ids.contains(&e.id));
    }
}

/// State of an `input_p` or `ans_p` node: the master set plus one pending
/// buffer per outgoing edge. Buffers carry copies so draining them never
/// touches the (simulated) paged master relation.
struct TupleNode {
    master: Antichain,
    buffers: BTreeMap<NodeId, Vec<(u64, Item)>>,
}

impl TupleNode {
    fn new(targets: impl Iterator<Item = NodeId>) -> Self {
        TupleNode {
            master: Antichain::new(true),
            buffers: targets.map(|w| (w, Vec::new())).collect(),
        }
    }

    fn drop_from_buffers(&mut self, removed: &[u64]) {
        if removed.is_empty() {
            return;
        }
        for buf in self.buffers.values_mut() {
            buf.retain(|(id, _)| !removed.contains(id));
        }
    }
}

/// A stored subquery's filter atom under its binding, kept for the
/// reverse join when answer tuples arrive.
struct BoundAtom {
    /// First argument when ground: the bucket it is indexed under.
    slot: Option<TermId>,
    atom: Atom,
}

/// State of a memorizing filter node.
struct FilterState {
    subqueries: Antichain,
    /// Pending subqueries for the in-clause successor edge.
    buf_succ: Vec<(u64, Subquery)>,
    /// Pending subqueries for the edge to the callee's `input_p`
    /// (intensional filters only).
    buf_input: Vec<(u64, Subquery)>,
    /// Answer tuples received from the callee's `ans_p`, not yet joined.
    buf_tuples: Vec<Tuple>,
    /// Instantiated filter atoms of the stored subqueries, bucketed by
    /// first argument (intensional filters only).
    bound: HashMap<u64, BoundAtom>,
    bound_by_first: HashMap<TermId, Vec<u64>>,
    bound_open: Vec<u64>,
}

impl FilterState {
    fn new() -> Self {
        FilterState {
            subqueries: Antichain::new(true),
            buf_succ: Vec::new(),
            buf_input: Vec::new(),
            buf_tuples: Vec::new(),
            bound: HashMap::new(),
            bound_by_first: HashMap::new(),
            bound_open: Vec::new(),
        }
    }

    fn index_bound(&mut self, id: u64, slot: Option<TermId>, atom: Atom) {
        match slot {
            Some(f) => self.bound_by_first.entry(f).or_default().push(id),
            None => self.bound_open.push(id),
        }
        self.bound.insert(id, BoundAtom { slot, atom });
    }

    fn drop_bound(&mut self, removed: &[u64]) {
        for id in removed {
            let Some(b) = self.bound.remove(id) else { continue };
            match b.slot {
                Some(f) => {
                    if let Some(bucket) = self.bound_by_first.get_mut(&f) {
                        bucket.retain(|x| x != id);
                    }
                }
                None => self.bound_open.retain(|x| x != id),
            }
        }
    }
}

/// Engine tuning knobs.
#[derive(Clone, Debug)]
pub struct EngineConfig {
    /// Term-depth bound `l`; terms deeper than this are pruned.
    pub depth_bound: u32,
    pub strategy: StrategyKind,
    /// Memorizing type for extensional filters.
    pub memorize_edb: bool,
    /// Enable tail recursion elimination.
    pub tre: bool,
    /// Restrict tail recursion elimination to these predicates; `None`
    /// selects every intensional predicate with a tail-recursive clause.
    pub tre_preds: Option<Vec<PredId>>,
    /// Stop after this many answers for the query predicate.
    pub max_answers: Option<usize>,
    pub time_limit: Option<Duration>,
    /// Iterative deepening: run the depth bound up from 0 to
    /// `depth_bound`, keeping answers between rounds.
    pub deepen: bool,
    /// Safety valve on the number of fires per run.
    pub max_fires: u64,
    /// Check structural invariants after every fire (slow).
    pub validate: bool,
    /// Record a line per fire and per round.
    pub trace: bool,
    /// Simulated page size (items per page).
    pub page_capacity: usize,
    /// Simulated buffer pool size (pages).
    pub memory_pages: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            depth_bound: 0,
            strategy: StrategyKind::Fifo,
            memorize_edb: true,
            tre: false,
            tre_preds: None,
            max_answers: None,
            time_limit: None,
            deepen: false,
            max_fires: 10_000_000,
            validate: false,
            trace: false,
            page_capacity: 64,
            memory_pages: 8,
        }
    }
}

/// Counters accumulated over a run.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stats {
    pub fires: u64,
    pub transfers: u64,
    pub unify_attempts: u64,
    /// Successful master-set insertions, by item kind.
    pub tuples_added: u64,
    pub pairs_added: u64,
    pub subqueries_added: u64,
    /// Insertions whose renaming-equal item had been inserted before
    /// (should stay zero: subsumption prevents reprocessing).
    pub reinsertions: u64,
    /// Candidates dropped because a stored item was at least as general.
    pub subsumed: u64,
    /// Candidates dropped by the term-depth bound.
    pub depth_pruned: u64,
    /// Items entering / drained from per-edge pending buffers.
    pub buffer_added: u64,
    pub buffer_consumed: u64,
    /// Extensional tuples scanned by joining fires: the whole relation
    /// per scan, mirroring the page-level cost model.
    pub edb_tuples_read: u64,
    /// Times the disk-minimizing strategy let a loading fire pass while a
    /// load-free edge was active (should stay zero).
    pub diskmin_violations: u64,
    pub page_loads: u64,
    pub page_unloads: u64,
}

/// Per-depth-round summary.
#[derive(Clone, Copy, Debug)]
pub struct RoundInfo {
    pub depth: u32,
    pub fires: u64,
    /// Answers for the query predicate after the round.
    pub answers: usize,
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Answer tuples for the query predicate, most general only, in
    /// derivation order.
    pub answers: Vec<Tuple>,
    /// True if a time or fire budget interrupted pending work.
    pub partial: bool,
    pub rounds: Vec<RoundInfo>,
    pub stats: Stats,
    pub trace: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EngineError {
    /// The engine evaluates goals of the form `p(x1, .., xn)` with `p`
    /// intensional and pairwise distinct variables; other formulas must
    /// be normalized into that shape first.
    #[error("goal `{0}` is not directly evaluable (expected an intensional atom whose arguments are pairwise distinct variables); normalize the query first")]
    ImproperGoal(String),
}

pub struct Engine<'a> {
    store: &'a mut TermStore,
    preds: &'a PredTable,
    edb: &'a EdbInstance,
    net: NetStructure,
    cfg: EngineConfig,
    goal: Atom,
    /// Current term-depth bound.
    depth: u32,
    inputs: BTreeMap<PredId, TupleNode>,
    answers: BTreeMap<PredId, TupleNode>,
    filters: BTreeMap<(usize, usize), FilterState>,
    edb_index: BTreeMap<PredId, FactIndex>,
    stamps: BTreeMap<NodeId, u64>,
    clock: u64,
    act: BTreeMap<Edge, u64>,
    next_seq: u64,
    pages: RelationStore,
    stats: Stats,
    trace: Vec<String>,
}

fn is_proper_goal(store: &TermStore, preds: &PredTable, goal: &Atom) -> bool {
    if !preds.is_idb(goal.pred) {
        return false;
    }
    let mut seen = HashSet::new();
    goal.args.iter().all(|&t| match store.as_var(t) {
        Some(v) => seen.insert(v),
        None => false,
    })
}

/// Flattened comparison key of a subquery at a node with the given
/// relevant variables: the answer slot followed by the image of each
/// relevant variable.
fn sq_key(store: &TermStore, args: &[TermId], delta: &Subst, pre_vars: &[VarId]) -> Vec<TermId> {
    let mut key = args.to_vec();
    key.extend(pre_vars.iter().map(|&x| delta.get(x).unwrap_or_else(|| store.var_term(x))));
    key
}

fn pair_key(a: &[TermId], b: &[TermId]) -> Vec<TermId> {
    let mut key = a.to_vec();
    key.extend_from_slice(b);
    key
}

/// Depth-guarded insertion into a transient most-general batch.
fn add_subquery(
    store: &mut TermStore,
    stats: &mut Stats,
    depth: u32,
    gamma: &mut Antichain,
    dest_pre_vars: &[VarId],
    args: Tuple,
    delta: Subst,
) {
    if store.tuple_depth(&args) > depth || store.subst_depth(&delta) > depth {
        stats.depth_pruned += 1;
        return;
    }
    let key = sq_key(store, &args, &delta, dest_pre_vars);
    if matches!(
        gamma.add(store, Item::Sq(Subquery { args, delta }), key),
        Add::Rejected
    ) {
        stats.subsumed += 1;
    }
}

fn add_tuple(store: &mut TermStore, stats: &mut Stats, gamma: &mut Antichain, t: Tuple) {
    let fresh = store.fresh_variant_tuple(&t, VarSpace::Engine);
    let key = fresh.clone();
    if matches!(gamma.add(store, Item::Tuple(fresh), key), Add::Rejected) {
        stats.subsumed += 1;
    }
}

fn add_tuple_pair(
    store: &mut TermStore,
    stats: &mut Stats,
    gamma: &mut Antichain,
    a: Tuple,
    b: Tuple,
) {
    let n = a.len();
    let mut joint = a;
    joint.extend(b);
    let (fresh, _) = store.fresh_variant_all(&joint, VarSpace::Engine);
    let (fa, fb) = (fresh[..n].to_vec(), fresh[n..].to_vec());
    let key = fresh;
    if matches!(gamma.add(store, Item::Pair(fa, fb), key), Add::Rejected) {
        stats.subsumed += 1;
    }
}

/// First-argument index over an extensional relation, built once per
/// predicate.
struct FactIndex {
    by_first: HashMap<TermId, Vec<usize>>,
    /// Facts with no arguments or a non-ground first argument.
    open: Vec<usize>,
}

impl FactIndex {
    fn build(store: &TermStore, tuples: &[Tuple]) -> Self {
        let mut by_first: HashMap<TermId, Vec<usize>> = HashMap::new();
        let mut open = Vec::new();
        for (i, t) in tuples.iter().enumerate() {
            match t.first() {
                Some(&f) if store.is_ground(f) => by_first.entry(f).or_default().push(i),
                _ => open.push(i),
            }
        }
        FactIndex { by_first, open }
    }
}

/// A fact collection a filter joins against: the extensional relation
/// with its prebuilt index, or an answer node's master set (whose keys
/// are bucketed the same way).
enum FactView<'f> {
    Edb { tuples: &'f [Tuple], index: &'f FactIndex },
    Master(&'f Antichain),
}

impl<'f> FactView<'f> {
    /// Appends the facts that could unify with a pattern whose first
    /// argument is the given ground term; `None` (no, or a non-ground,
    /// first argument) keeps every fact a candidate.
    fn candidates(&self, first: Option<TermId>, out: &mut Vec<&'f Tuple>) {
        match *self {
            FactView::Edb { tuples, index } => match first {
                Some(f) => {
                    if let Some(bucket) = index.by_first.get(&f) {
                        out.extend(bucket.iter().map(|&i| &tuples[i]));
                    }
                    out.extend(index.open.iter().map(|&i| &tuples[i]));
                }
                None => out.extend(tuples.iter()),
            },
            FactView::Master(set) => {
                let tuple_of =
                    |id: &u64| set.entry(*id).expect("indexed id is live").item.tuple();
                match first {
                    Some(f) => {
                        if let Some(bucket) = set.by_first.get(&f) {
                            out.extend(bucket.iter().map(tuple_of));
                        }
                        out.extend(set.open.iter().map(tuple_of));
                    }
                    None => out.extend(set.iter().map(|e| e.item.tuple())),
                }
            }
        }
    }
}

/// Unifies a filter's instantiated atom with one fact. A ground fact is
/// matched one-sidedly (the cheap and overwhelmingly common case); a
/// non-ground fact is renamed apart first, since stored answers can share
/// variables with the patterns.
fn unify_candidate(
    store: &mut TermStore,
    pred: PredId,
    pat: &Atom,
    fact: &Tuple,
) -> Option<Subst> {
    if store.is_ground_tuple(fact) {
        if pat.args.len() != fact.len() {
            return None;
        }
        let pairs: Vec<_> = pat.args.iter().copied().zip(fact.iter().copied()).collect();
        store.match_list(&pairs)
    } else {
        let fact_atom = Atom { pred, args: store.fresh_variant_tuple(fact, VarSpace::Engine) };
        store.mgu_atoms(pat, &fact_atom)
    }
}

/// Forwards one unifier's outcome to `gamma`. The destination key is read
/// off the unifier directly, so a duplicate ground outcome — the bulk of a
/// saturated join's work — is rejected before any substitution is built.
#[allow(clippy::too_many_arguments)]
fn join_outcome(
    store: &mut TermStore,
    stats: &mut Stats,
    depth: u32,
    sq: &Subquery,
    unifier: &Subst,
    post_vars: &[VarId],
    dest_pre_vars: &[VarId],
    gamma: &mut Antichain,
) {
    let args = store.apply_all(unifier, &sq.args);
    if store.tuple_depth(&args) > depth {
        stats.depth_pruned += 1;
        return;
    }
    // image of a variable under the restricted composition delta.unifier
    let image = |store: &mut TermStore, x: VarId| match sq.delta.get(x) {
        Some(t) => store.apply(unifier, t),
        None => unifier.get(x).unwrap_or_else(|| store.var_term(x)),
    };
    for &x in post_vars {
        let img = image(store, x);
        if store.term_depth(img) > depth {
            stats.depth_pruned += 1;
            return;
        }
    }
    let mut key = args.clone();
    for &x in dest_pre_vars {
        let img =
            if post_vars.contains(&x) { image(store, x) } else { store.var_term(x) };
        key.push(img);
    }
    if gamma.known_ground(store, &key) {
        stats.subsumed += 1;
        return;
    }
    let delta = store.compose(&sq.delta, unifier).restrict(post_vars);
    debug_assert_eq!(key, sq_key(store, &args, &delta, dest_pre_vars));
    if matches!(gamma.add(store, Item::Sq(Subquery { args, delta }), key), Add::Rejected) {
        stats.subsumed += 1;
    }
}

/// Joins subquery patterns against a collection of facts, adding each
/// unifier's outcome to `gamma`.
#[allow(clippy::too_many_arguments)]
fn join_indexed(
    store: &mut TermStore,
    stats: &mut Stats,
    depth: u32,
    pred: PredId,
    sqs: &[Subquery],
    bound: &[Atom],
    facts: &FactView<'_>,
    post_vars: &[VarId],
    dest_pre_vars: &[VarId],
    gamma: &mut Antichain,
) {
    let mut cands: Vec<&Tuple> = Vec::new();
    for (sq, pat) in sqs.iter().zip(bound) {
        let first = pat.args.first().copied().filter(|&t| store.is_ground(t));
        cands.clear();
        facts.candidates(first, &mut cands);
        for &fact in &cands {
            stats.unify_attempts += 1;
            if let Some(unifier) = unify_candidate(store, pred, pat, fact) {
                join_outcome(store, stats, depth, sq, &unifier, post_vars, dest_pre_vars, gamma);
            }
        }
    }
}

/// Joins arriving answer tuples against a filter's stored subqueries,
/// adding each unifier's outcome to `gamma`. A tuple with a ground first
/// component meets only the subqueries whose instantiated filter atom
/// starts with that term or with a non-ground one.
#[allow(clippy::too_many_arguments)]
fn join_tuples_into_sqs(
    store: &mut TermStore,
    stats: &mut Stats,
    depth: u32,
    pred: PredId,
    st: &FilterState,
    tuples: &[Tuple],
    post_vars: &[VarId],
    dest_pre_vars: &[VarId],
    gamma: &mut Antichain,
) {
    let mut ids: Vec<u64> = Vec::new();
    for t in tuples {
        ids.clear();
        match t.first().copied().filter(|&x| store.is_ground(x)) {
            Some(f) => {
                if let Some(bucket) = st.bound_by_first.get(&f) {
                    ids.extend_from_slice(bucket);
                }
                ids.extend_from_slice(&st.bound_open);
            }
            None => ids.extend(st.subqueries.iter().map(|e| e.id)),
        }
        for &id in &ids {
            let b = &st.bound[&id];
            let e = st.subqueries.entry(id).expect("bound ids reference live subqueries");
            let sq = match &e.item {
                Item::Sq(sq) => sq,
                _ => unreachable!("filter masters hold subqueries"),
            };
            stats.unify_attempts += 1;
            if let Some(unifier) = unify_candidate(store, pred, &b.atom, t) {
                join_outcome(store, stats, depth, sq, &unifier, post_vars, dest_pre_vars, gamma);
            }
        }
    }
}

impl<'a> Engine<'a> {
    pub fn new(
        store: &'a mut TermStore,
        preds: &'a PredTable,
        program: &Program,
        edb: &'a EdbInstance,
        goal: Atom,
        cfg: EngineConfig,
    ) -> Result<Self, EngineError> {
        if !is_proper_goal(store, preds, &goal) {
            return Err(EngineError::ImproperGoal(preds.atom_to_string(store, &goal)));
        }
        let tre_preds = if cfg.tre {
            match &cfg.tre_preds {
                Some(list) => list.iter().copied().filter(|&p| preds.is_idb(p)).collect(),
                None => program
                    .clauses
                    .iter()
                    .filter(|c| {
                        c.body
                            .last()
                            .is_some_and(|b| b.pred == c.head.pred && preds.is_idb(b.pred))
                    })
                    .map(|c| c.head.pred)
                    .collect(),
            }
        } else {
            HashSet::new()
        };
        let net = NetStructure::build(
            store,
            preds,
            program,
            &NetConfig { memorize_edb: cfg.memorize_edb, tre_preds },
        );
        let mut inputs = BTreeMap::new();
        let mut answers = BTreeMap::new();
        for &p in &net.idb_preds {
            inputs.insert(p, TupleNode::new(net.out_edges(NodeId::Input(p)).iter().copied()));
            answers.insert(p, TupleNode::new(net.out_edges(NodeId::Ans(p)).iter().copied()));
        }
        let mut filters = BTreeMap::new();
        for (i, fs) in net.filters.iter().enumerate() {
            for j in 1..=fs.len() {
                filters.insert((i, j), FilterState::new());
            }
        }
        let mut pages = RelationStore::new(cfg.page_capacity, cfg.memory_pages);
        let mut edb_index = BTreeMap::new();
        for p in edb.preds() {
            pages.register(RelKey::Edb(p), edb.tuples(p).len());
            edb_index.insert(p, FactIndex::build(store, edb.tuples(p)));
        }
        Ok(Engine {
            store,
            preds,
            edb,
            net,
            cfg,
            goal,
            depth: 0,
            inputs,
            answers,
            filters,
            edb_index,
            stamps: BTreeMap::new(),
            clock: 0,
            act: BTreeMap::new(),
            next_seq: 0,
            pages,
            stats: Stats::default(),
            trace: Vec::new(),
        })
    }

    pub fn net(&self) -> &NetStructure {
        &self.net
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    /// Current answer tuples of a predicate, in derivation order.
    pub fn answers_of(&self, p: PredId) -> Vec<Tuple> {
        self.answers
            .get(&p)
            .map(|n| n.master.iter().map(|e| e.item.tuple().clone()).collect())
            .unwrap_or_default()
    }

    /// Current input tuples of a predicate (pairs are flattened keys).
    pub fn input_tuples(&self, p: PredId) -> Vec<Tuple> {
        self.inputs
            .get(&p)
            .map(|n| n.master.iter().map(|e| e.key.clone()).collect())
            .unwrap_or_default()
    }

    pub fn filter_subqueries(&self, i: usize, j: usize) -> Vec<Subquery> {
        self.filters
            .get(&(i, j))
            .map(|f| {
                f.subqueries
                    .iter()
                    .map(|e| match &e.item {
                        Item::Sq(sq) => sq.clone(),
                        _ => unreachable!("filter masters hold subqueries"),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    fn stamp(&mut self, v: NodeId) {
        self.clock += 1;
        self.stamps.insert(v, self.clock);
    }

    fn pre_vars_of(&self, v: NodeId) -> Vec<VarId> {
        match v {
            NodeId::Filter(i, j) => self.net.filter(i, j).pre_vars.clone(),
            NodeId::Post(_) => Vec::new(),
            _ => unreachable!("subqueries only travel to filter or post nodes"),
        }
    }

    // ------------------------------------------------------------------
    // rounds
    // ------------------------------------------------------------------

    fn reset_round(&mut self) {
        for (&p, node) in &mut self.inputs {
            node.master.clear();
            for buf in node.buffers.values_mut() {
                buf.clear();
            }
            self.pages.reset(RelKey::Tuples(NodeId::Input(p)));
        }
        for (&(i, j), st) in &mut self.filters {
            st.subqueries.clear();
            st.buf_succ.clear();
            st.buf_input.clear();
            st.buf_tuples.clear();
            st.bound.clear();
            st.bound_by_first.clear();
            st.bound_open.clear();
            self.pages.reset(RelKey::Subqueries(NodeId::Filter(i, j)));
        }
        // answers survive across rounds
    }

    fn seed(&mut self) {
        let q = self.goal.pred;
        let seed = self.store.fresh_variant_tuple(&self.goal.args.clone(), VarSpace::Engine);
        let rel = RelKey::Tuples(NodeId::Input(q));
        let node = self.inputs.get_mut(&q).expect("goal predicate is intensional");
        let (item, key) = if self.net.tre(q) {
            (Item::Pair(seed.clone(), seed.clone()), pair_key(&seed, &seed))
        } else {
            (Item::Tuple(seed.clone()), seed.clone())
        };
        match node.master.add(self.store, item.clone(), key) {
            Add::Added { id, .. } => {
                let buffers = node.buffers.len() as u64;
                for buf in node.buffers.values_mut() {
                    buf.push((id, item.clone()));
                }
                self.stats.buffer_added += buffers;
                match item {
                    Item::Pair(..) => self.stats.pairs_added += 1,
                    _ => self.stats.tuples_added += 1,
                }
                self.pages.append(rel, 1);
                self.stamp(NodeId::Input(q));
                if self.cfg.trace {
                    let shown = self.store.tuple_to_string(&seed);
                    self.trace.push(format!(
                        "depth {}: seeded input_{} with ({})",
                        self.depth,
                        self.preds.name(q),
                        shown
                    ));
                }
            }
            Add::Rejected => unreachable!("seeding an empty input set cannot be subsumed"),
        }
    }

    // ------------------------------------------------------------------
    // active edges
    // ------------------------------------------------------------------

    fn edge_active(&self, e: Edge) -> bool {
        let (u, v) = e;
        match u {
            NodeId::Pre(_) | NodeId::Post(_) => false,
            NodeId::Input(p) => self.inputs[&p].buffers.get(&v).is_some_and(|b| !b.is_empty()),
            NodeId::Ans(p) => self.answers[&p].buffers.get(&v).is_some_and(|b| !b.is_empty()),
            NodeId::Filter(i, j) => {
                let f = self.net.filter(i, j);
                let st = &self.filters[&(i, j)];
                match f.kind {
                    PredKind::Edb => f.memorizing && !st.buf_succ.is_empty(),
                    PredKind::Idb => {
                        if Some(v) == f.succ2 {
                            !st.buf_input.is_empty()
                        } else {
                            !st.buf_succ.is_empty() || !st.buf_tuples.is_empty()
                        }
                    }
                }
            }
        }
    }

    fn active_edges(&self) -> Vec<Edge> {
        self.net.edges.iter().copied().filter(|&e| self.edge_active(e)).collect()
    }

    fn note_activations(&mut self, active: &[Edge]) {
        self.act.retain(|e, _| active.binary_search(e).is_ok());
        for &e in active {
            if !self.act.contains_key(&e) {
                self.act.insert(e, self.next_seq);
                self.next_seq += 1;
            }
        }
    }

    // ------------------------------------------------------------------
    // transfer
    // ------------------------------------------------------------------

    fn transfer(&mut self, data: Data, u: NodeId, v: NodeId) {
        if data.is_empty() {
            return;
        }
        self.stats.transfers += 1;

        // fan-out from an input node: unify against the clause head and
        // forward immediately through the pre filter
        if let NodeId::Input(p) = u {
            let i = match v {
                NodeId::Pre(i) => i,
                _ => unreachable!("input nodes only feed pre filters"),
            };
            let head = self.net.clauses[i].head.clone();
            let dest = self.net.clauses[i].pre_succ;
            let body_vars = self.net.clauses[i].post_vars.clone();
            let dest_pre = self.pre_vars_of(dest);
            let mut gamma = Antichain::new(false);
            match data {
                Data::Tuples(ts) => {
                    for t in ts {
                        self.stats.unify_attempts += 1;
                        let call = Atom { pred: p, args: t.clone() };
                        if let Some(g) = self.store.mgu_atoms(&call, &head) {
                            let args = self.store.apply_all(&g, &t);
                            let delta = g.restrict(&body_vars);
                            add_subquery(
                                self.store,
                                &mut self.stats,
                                self.depth,
                                &mut gamma,
                                &dest_pre,
                                args,
                                delta,
                            );
                        }
                    }
                }
                Data::Pairs(ps) => {
                    for (t, slot) in ps {
                        self.stats.unify_attempts += 1;
                        let call = Atom { pred: p, args: t.clone() };
                        if let Some(g) = self.store.mgu_atoms(&call, &head) {
                            let args = self.store.apply_all(&g, &slot);
                            let delta = g.restrict(&body_vars);
                            add_subquery(
                                self.store,
                                &mut self.stats,
                                self.depth,
                                &mut gamma,
                                &dest_pre,
                                args,
                                delta,
                            );
                        }
                    }
                }
                Data::Sqs(_) => unreachable!("input nodes emit tuples or pairs"),
            }
            let sqs = gamma_sqs(gamma);
            self.transfer(Data::Sqs(sqs), v, dest);
            return;
        }

        // answer delivery: park the tuples at the consuming filter
        if let NodeId::Ans(_) = u {
            let (i, j) = match v {
                NodeId::Filter(i, j) => (i, j),
                _ => unreachable!("answer nodes only feed filters"),
            };
            let ts = match data {
                Data::Tuples(ts) => ts,
                _ => unreachable!("answer nodes emit tuples"),
            };
            self.stats.buffer_added += ts.len() as u64;
            self.filters.get_mut(&(i, j)).expect("filter state exists").buf_tuples.extend(ts);
            self.stamp(v);
            return;
        }

        match v {
            NodeId::Input(p) => {
                let rel = RelKey::Tuples(NodeId::Input(p));
                self.pages.scan(rel);
                let mut added = 0usize;
                let mut removed_total = 0usize;
                match data {
                    Data::Tuples(ts) => {
                        for t in ts {
                            // senders mint fresh variants already, so the
                            // tuple doubles as its own key
                            let node = self.inputs.get_mut(&p).expect("input node exists");
                            match node.master.add(self.store, Item::Tuple(t.clone()), t) {
                                Add::Added { id, removed, reinserted } => {
                                    node.drop_from_buffers(&removed);
                                    removed_total += removed.len();
                                    let item = node
                                        .master
                                        .entry(id)
                                        .expect("just added")
                                        .item
                                        .clone();
                                    for buf in node.buffers.values_mut() {
                                        buf.push((id, item.clone()));
                                        self.stats.buffer_added += 1;
                                    }
                                    added += 1;
                                    self.stats.tuples_added += 1;
                                    self.stats.reinsertions += reinserted as u64;
                                    self.stamp(v);
                                }
                                Add::Rejected => self.stats.subsumed += 1,
                            }
                        }
                    }
                    Data::Pairs(ps) => {
                        for (a, b) in ps {
                            let key = pair_key(&a, &b);
                            let item = Item::Pair(a, b);
                            let node = self.inputs.get_mut(&p).expect("input node exists");
                            match node.master.add(self.store, item.clone(), key) {
                                Add::Added { id, removed, reinserted } => {
                                    node.drop_from_buffers(&removed);
                                    removed_total += removed.len();
                                    for buf in node.buffers.values_mut() {
                                        buf.push((id, item.clone()));
                                        self.stats.buffer_added += 1;
                                    }
                                    added += 1;
                                    self.stats.pairs_added += 1;
                                    self.stats.reinsertions += reinserted as u64;
                                    self.stamp(v);
                                }
                                Add::Rejected => self.stats.subsumed += 1,
                            }
                        }
                    }
                    Data::Sqs(_) => unreachable!("input nodes receive tuples or pairs"),
                }
                self.pages.append(rel, added);
                self.pages.remove(rel, removed_total);
            }
            NodeId::Ans(p) => {
                let ts = match data {
                    Data::Tuples(ts) => ts,
                    _ => unreachable!("answer nodes receive tuples"),
                };
                let rel = RelKey::Tuples(NodeId::Ans(p));
                self.pages.scan(rel);
                let mut added = 0usize;
                let mut removed_total = 0usize;
                for t in ts {
                    // the instance check runs on a fresh variant, but the
                    // stored tuple keeps its original variables
                    let fresh = self.store.fresh_variant_tuple(&t, VarSpace::Engine);
                    let node = self.answers.get_mut(&p).expect("answer node exists");
                    match node.master.add(self.store, Item::Tuple(t), fresh) {
                        Add::Added { id, removed, reinserted } => {
                            node.drop_from_buffers(&removed);
                            removed_total += removed.len();
                            let item = node.master.entry(id).expect("just added").item.clone();
                            for buf in node.buffers.values_mut() {
                                buf.push((id, item.clone()));
                                self.stats.buffer_added += 1;
                            }
                            added += 1;
                            self.stats.tuples_added += 1;
                            self.stats.reinsertions += reinserted as u64;
                            self.stamp(v);
                        }
                        Add::Rejected => self.stats.subsumed += 1,
                    }
                }
                self.pages.append(rel, added);
                self.pages.remove(rel, removed_total);
            }
            NodeId::Filter(i, j) => {
                let sqs = match data {
                    Data::Sqs(s) => s,
                    _ => unreachable!("filters receive subqueries"),
                };
                let f = self.net.filter(i, j).clone();
                if f.kind == PredKind::Edb && !f.memorizing {
                    // flow-through: join against the extensional relation
                    // immediately and forward
                    let succ = f.succ.expect("extensional filters keep their successor");
                    let dest_pre = self.pre_vars_of(succ);
                    let mut gamma = Antichain::new(false);
                    let mut live: Vec<Subquery> = Vec::new();
                    let mut bound: Vec<Atom> = Vec::new();
                    for sq in sqs {
                        let b = self.store.apply_atom(&sq.delta, &f.atom);
                        if self.store.atom_depth(&b) > self.depth {
                            self.stats.depth_pruned += 1;
                            continue;
                        }
                        live.push(sq);
                        bound.push(b);
                    }
                    if !live.is_empty() {
                        let facts = self.edb.tuples(f.atom.pred);
                        self.pages.scan(RelKey::Edb(f.atom.pred));
                        self.stats.edb_tuples_read += facts.len() as u64;
                        if !facts.is_empty() {
                            let view = FactView::Edb {
                                tuples: facts,
                                index: &self.edb_index[&f.atom.pred],
                            };
                            join_indexed(
                                self.store,
                                &mut self.stats,
                                self.depth,
                                f.atom.pred,
                                &live,
                                &bound,
                                &view,
                                &f.post_vars,
                                &dest_pre,
                                &mut gamma,
                            );
                        }
                    }
                    let out = gamma_sqs(gamma);
                    self.transfer(Data::Sqs(out), v, succ);
                    return;
                }
                // memorizing filter: accumulate most-general subqueries
                let rel = RelKey::Subqueries(v);
                self.pages.scan(rel);
                let mut added = 0usize;
                let mut removed_total = 0usize;
                for sq in sqs {
                    let b = self.store.apply_atom(&sq.delta, &f.atom);
                    if self.store.atom_depth(&b) > self.depth {
                        self.stats.depth_pruned += 1;
                        continue;
                    }
                    let key = sq_key(self.store, &sq.args, &sq.delta, &f.pre_vars);
                    let st = self.filters.get_mut(&(i, j)).expect("filter state exists");
                    match st.subqueries.add(self.store, Item::Sq(sq.clone()), key) {
                        Add::Added { id, removed, reinserted } => {
                            if !removed.is_empty() {
                                st.buf_succ.retain(|(x, _)| !removed.contains(x));
                                st.buf_input.retain(|(x, _)| !removed.contains(x));
                                st.drop_bound(&removed);
                                removed_total += removed.len();
                            }
                            if f.kind == PredKind::Idb {
                                let slot = b
                                    .args
                                    .first()
                                    .copied()
                                    .filter(|&t| self.store.is_ground(t));
                                st.index_bound(id, slot, b);
                            }
                            if f.tre_terminal {
                                st.buf_input.push((id, sq));
                                self.stats.buffer_added += 1;
                            } else {
                                st.buf_succ.push((id, sq.clone()));
                                self.stats.buffer_added += 1;
                                if f.kind == PredKind::Idb {
                                    st.buf_input.push((id, sq));
                                    self.stats.buffer_added += 1;
                                }
                            }
                            added += 1;
                            self.stats.subqueries_added += 1;
                            self.stats.reinsertions += reinserted as u64;
                            self.stamp(v);
                        }
                        Add::Rejected => self.stats.subsumed += 1,
                    }
                }
                self.pages.append(rel, added);
                self.pages.remove(rel, removed_total);
            }
            NodeId::Post(i) => {
                let sqs = match data {
                    Data::Sqs(s) => s,
                    _ => unreachable!("post filters receive subqueries"),
                };
                debug_assert!(
                    sqs.iter().all(|sq| sq.delta.is_empty()),
                    "subqueries reaching a post filter carry no bindings"
                );
                let head_pred = self.net.clauses[i].head.pred;
                let ts = sqs.into_iter().map(|sq| sq.args).collect();
                self.transfer(Data::Tuples(ts), v, NodeId::Ans(head_pred));
            }
            NodeId::Pre(_) => unreachable!("pre filters are reached only from input nodes"),
        }
    }

    // ------------------------------------------------------------------
    // fire
    // ------------------------------------------------------------------

    fn fire(&mut self, e: Edge) {
        let (u, v) = e;
        self.stats.fires += 1;
        if self.cfg.trace {
            let line = format!(
                "fire {} -> {}",
                self.net.label(self.preds, u),
                self.net.label(self.preds, v)
            );
            self.trace.push(line);
        }
        match u {
            NodeId::Input(p) => {
                let buf = self
                    .inputs
                    .get_mut(&p)
                    .expect("input node exists")
                    .buffers
                    .get_mut(&v)
                    .map(std::mem::take)
                    .unwrap_or_default();
                self.stats.buffer_consumed += buf.len() as u64;
                let data = split_items(buf);
                self.transfer(data, u, v);
            }
            NodeId::Ans(p) => {
                let buf = self
                    .answers
                    .get_mut(&p)
                    .expect("answer node exists")
                    .buffers
                    .get_mut(&v)
                    .map(std::mem::take)
                    .unwrap_or_default();
                self.stats.buffer_consumed += buf.len() as u64;
                let ts = buf
                    .into_iter()
                    .map(|(_, item)| match item {
                        Item::Tuple(t) => t,
                        _ => unreachable!("answer buffers hold tuples"),
                    })
                    .collect();
                self.transfer(Data::Tuples(ts), u, v);
            }
            NodeId::Filter(i, j) => {
                let f = self.net.filter(i, j).clone();
                let p = f.atom.pred;
                if f.kind == PredKind::Edb {
                    // memorizing extensional filter: join pending
                    // subqueries with the stored relation
                    let pending = std::mem::take(
                        &mut self.filters.get_mut(&(i, j)).expect("filter state").buf_succ,
                    );
                    self.stats.buffer_consumed += pending.len() as u64;
                    let sqs: Vec<Subquery> = pending.into_iter().map(|(_, sq)| sq).collect();
                    let bound: Vec<Atom> =
                        sqs.iter().map(|sq| self.store.apply_atom(&sq.delta, &f.atom)).collect();
                    let mut gamma = Antichain::new(false);
                    let dest_pre = self.pre_vars_of(v);
                    if !sqs.is_empty() {
                        let facts = self.edb.tuples(p);
                        self.pages.scan(RelKey::Edb(p));
                        self.stats.edb_tuples_read += facts.len() as u64;
                        if !facts.is_empty() {
                            let view =
                                FactView::Edb { tuples: facts, index: &self.edb_index[&p] };
                            join_indexed(
                                self.store,
                                &mut self.stats,
                                self.depth,
                                p,
                                &sqs,
                                &bound,
                                &view,
                                &f.post_vars,
                                &dest_pre,
                                &mut gamma,
                            );
                        }
                    }
                    let out = gamma_sqs(gamma);
                    self.transfer(Data::Sqs(out), u, v);
                } else if Some(v) == f.succ2 {
                    // forward pending call patterns to the callee's input
                    let pending = std::mem::take(
                        &mut self.filters.get_mut(&(i, j)).expect("filter state").buf_input,
                    );
                    self.stats.buffer_consumed += pending.len() as u64;
                    let mut gamma = Antichain::new(false);
                    if self.net.tre(p) {
                        for (_, sq) in pending {
                            let call = self.store.apply_all(&sq.delta, &f.atom.args);
                            if f.tre_terminal {
                                // tail call: keep the caller's answer slot
                                add_tuple_pair(
                                    self.store,
                                    &mut self.stats,
                                    &mut gamma,
                                    call,
                                    sq.args,
                                );
                            } else {
                                add_tuple_pair(
                                    self.store,
                                    &mut self.stats,
                                    &mut gamma,
                                    call.clone(),
                                    call,
                                );
                            }
                        }
                        let pairs = gamma
                            .iter()
                            .map(|e| match &e.item {
                                Item::Pair(a, b) => (a.clone(), b.clone()),
                                _ => unreachable!("pair batch"),
                            })
                            .collect();
                        self.transfer(Data::Pairs(pairs), u, v);
                    } else {
                        for (_, sq) in pending {
                            let call = self.store.apply_all(&sq.delta, &f.atom.args);
                            add_tuple(self.store, &mut self.stats, &mut gamma, call);
                        }
                        let ts = gamma
                            .iter()
                            .map(|e| e.item.tuple().clone())
                            .collect();
                        self.transfer(Data::Tuples(ts), u, v);
                    }
                } else {
                    // intensional filter joining against the callee's
                    // answers: new subqueries meet all answers, then new
                    // answers meet all stored subqueries
                    let st = self.filters.get_mut(&(i, j)).expect("filter state");
                    let pending_sqs = std::mem::take(&mut st.buf_succ);
                    let pending_ts = std::mem::take(&mut st.buf_tuples);
                    self.stats.buffer_consumed += (pending_sqs.len() + pending_ts.len()) as u64;
                    let mut gamma = Antichain::new(false);
                    let dest_pre = self.pre_vars_of(v);

                    if !pending_sqs.is_empty() {
                        let sqs: Vec<Subquery> =
                            pending_sqs.into_iter().map(|(_, sq)| sq).collect();
                        let bound: Vec<Atom> = sqs
                            .iter()
                            .map(|sq| self.store.apply_atom(&sq.delta, &f.atom))
                            .collect();
                        self.pages.scan(RelKey::Tuples(NodeId::Ans(p)));
                        let depth = self.depth;
                        let view = FactView::Master(&self.answers[&p].master);
                        join_indexed(
                            self.store,
                            &mut self.stats,
                            depth,
                            p,
                            &sqs,
                            &bound,
                            &view,
                            &f.post_vars,
                            &dest_pre,
                            &mut gamma,
                        );
                    }

                    if !pending_ts.is_empty() {
                        self.pages.scan(RelKey::Subqueries(u));
                        let depth = self.depth;
                        let st = &self.filters[&(i, j)];
                        join_tuples_into_sqs(
                            self.store,
                            &mut self.stats,
                            depth,
                            p,
                            st,
                            &pending_ts,
                            &f.post_vars,
                            &dest_pre,
                            &mut gamma,
                        );
                    }
                    let out = gamma_sqs(gamma);
                    self.transfer(Data::Sqs(out), u, v);
                }
            }
            _ => unreachable!("pre and post filters never fire"),
        }
    }

    // ------------------------------------------------------------------
    // cost model for the disk-minimizing strategy
    // ------------------------------------------------------------------

    /// Page operations firing `e` would perform, with batch sizes taken
    /// as upper bounds from the current buffers. Shares structure with
    /// the charging in `transfer`/`fire`, so a zero-load prediction is
    /// conservative: the actual fire touches a subset of these pages.
    fn edge_ops(&self, e: Edge) -> Vec<PageOp> {
        let (u, v) = e;
        let mut ops = Vec::new();
        let est = self.workload(e).max(1);
        match u {
            NodeId::Input(_) => self.cascade_ops(v, est, &mut ops),
            NodeId::Ans(_) => {} // buffer-to-buffer move
            NodeId::Filter(i, j) => {
                let f = self.net.filter(i, j);
                let st = &self.filters[&(i, j)];
                match f.kind {
                    PredKind::Edb => {
                        ops.push(PageOp::Scan(RelKey::Edb(f.atom.pred)));
                        if let Some(succ) = f.succ {
                            self.cascade_ops(succ, est, &mut ops);
                        }
                    }
                    PredKind::Idb => {
                        if Some(v) == f.succ2 {
                            self.cascade_ops(v, est, &mut ops);
                        } else {
                            if !st.buf_succ.is_empty() {
                                ops.push(PageOp::Scan(RelKey::Tuples(NodeId::Ans(f.atom.pred))));
                            }
                            if !st.buf_tuples.is_empty() {
                                ops.push(PageOp::Scan(RelKey::Subqueries(u)));
                            }
                            if let Some(succ) = f.succ {
                                self.cascade_ops(succ, est, &mut ops);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        ops
    }

    /// Storage footprint of a batch cascading into `v` and onward through
    /// the flow-through nodes.
    fn cascade_ops(&self, v: NodeId, est: usize, ops: &mut Vec<PageOp>) {
        match v {
            NodeId::Pre(i) => self.cascade_ops(self.net.clauses[i].pre_succ, est, ops),
            NodeId::Filter(i, j) => {
                let f = self.net.filter(i, j);
                if f.kind == PredKind::Edb && !f.memorizing {
                    ops.push(PageOp::Scan(RelKey::Edb(f.atom.pred)));
                    if let Some(succ) = f.succ {
                        self.cascade_ops(succ, est, ops);
                    }
                } else {
                    ops.push(PageOp::Scan(RelKey::Subqueries(v)));
                    ops.push(PageOp::Append(RelKey::Subqueries(v), est));
                }
            }
            NodeId::Post(i) => {
                self.cascade_ops(NodeId::Ans(self.net.clauses[i].head.pred), est, ops)
            }
            NodeId::Input(_) | NodeId::Ans(_) => {
                ops.push(PageOp::Scan(RelKey::Tuples(v)));
                ops.push(PageOp::Append(RelKey::Tuples(v), est));
            }
        }
    }

    /// Buffered items a fire of `e` would consume.
    fn workload(&self, e: Edge) -> usize {
        let (u, v) = e;
        match u {
            NodeId::Input(p) => {
                self.inputs[&p].buffers.get(&v).map_or(0, |b| b.len())
            }
            NodeId::Ans(p) => self.answers[&p].buffers.get(&v).map_or(0, |b| b.len()),
            NodeId::Filter(i, j) => {
                let f = self.net.filter(i, j);
                let st = &self.filters[&(i, j)];
                match f.kind {
                    PredKind::Edb => st.buf_succ.len(),
                    PredKind::Idb => {
                        if Some(v) == f.succ2 {
                            st.buf_input.len()
                        } else {
                            st.buf_succ.len() + st.buf_tuples.len()
                        }
                    }
                }
            }
            _ => 0,
        }
    }

    // ------------------------------------------------------------------
    // main loop
    // ------------------------------------------------------------------

    fn answer_budget_met(&self) -> bool {
        self.cfg
            .max_answers
            .is_some_and(|k| self.answers[&self.goal.pred].master.len() >= k)
    }

    pub fn run(&mut self) -> RunOutcome {
        let mut strategy = self.cfg.strategy.make();
        let start = Instant::now();
        let deadline = self.cfg.time_limit.map(|d| start + d);
        let (l_from, l_to) = if self.cfg.deepen {
            (0, self.cfg.depth_bound)
        } else {
            (self.cfg.depth_bound, self.cfg.depth_bound)
        };
        let mut rounds = Vec::new();
        let mut partial = false;
        let mut stopped = false;

        for l in l_from..=l_to {
            self.depth = l;
            self.reset_round();
            if self.cfg.trace && l > l_from {
                self.trace.push(format!(
                    "depth {}: new round, {} answers retained",
                    l,
                    self.answers[&self.goal.pred].master.len()
                ));
            }
            self.seed();
            let fires_before = self.stats.fires;
            loop {
                if self.answer_budget_met() {
                    stopped = true;
                    break;
                }
                if deadline.is_some_and(|d| Instant::now() >= d) {
                    partial = true;
                    stopped = true;
                    break;
                }
                if self.stats.fires >= self.cfg.max_fires {
                    partial = true;
                    stopped = true;
                    break;
                }
                let active = self.active_edges();
                if active.is_empty() {
                    break;
                }
                self.note_activations(&active);
                let chosen = {
                    let ctx = self.make_ctx(&active);
                    strategy.select(&active, &ctx)
                };
                assert!(
                    active.binary_search(&chosen).is_ok(),
                    "strategy must pick an active edge"
                );
                if self.cfg.strategy == StrategyKind::DiskMin {
                    let loads = self.pages.predicted_loads(&self.edge_ops(chosen));
                    if loads > 0
                        && active
                            .iter()
                            .any(|&e| self.pages.predicted_loads(&self.edge_ops(e)) == 0)
                    {
                        self.stats.diskmin_violations += 1;
                    }
                }
                self.fire(chosen);
                if self.cfg.validate {
                    self.validate();
                }
            }
            let answers_now = self.answers[&self.goal.pred].master.len();
            rounds.push(RoundInfo {
                depth: l,
                fires: self.stats.fires - fires_before,
                answers: answers_now,
            });
            if self.cfg.trace {
                self.trace
                    .push(format!("depth {l}: round done, {answers_now} answers"));
            }
            if stopped {
                break;
            }
        }

        self.stats.page_loads = self.pages.stats.loads;
        self.stats.page_unloads = self.pages.stats.unloads;
        RunOutcome {
            answers: self.answers_of(self.goal.pred),
            partial,
            rounds,
            stats: self.stats,
            trace: std::mem::take(&mut self.trace),
        }
    }

    fn make_ctx<'e>(&'e self, active: &[Edge]) -> Ctx<'e> {
        let mut ops = HashMap::new();
        let mut work = HashMap::new();
        let mut loads = HashMap::new();
        let mut enabled: HashMap<Edge, usize> = HashMap::new();
        if self.cfg.strategy == StrategyKind::DiskMin {
            for &e in active {
                let o = self.edge_ops(e);
                loads.insert(e, self.pages.predicted_loads(&o));
                work.insert(e, self.workload(e));
                ops.insert(e, o);
                let mut n = 0;
                if matches!(e.1, NodeId::Input(_) | NodeId::Ans(_) | NodeId::Filter(..)) {
                    for &w in self.net.out_edges(e.1) {
                        let next = (e.1, w);
                        let next_loads = *loads
                            .entry(next)
                            .or_insert_with(|| self.pages.predicted_loads(&self.edge_ops(next)));
                        if next_loads == 0 {
                            n += 1;
                        }
                    }
                }
                enabled.insert(e, n);
            }
        }
        Ctx {
            net: &self.net,
            act: &self.act,
            stamps: &self.stamps,
            loads,
            enabled,
            work,
        }
    }

    // ------------------------------------------------------------------
    // invariants
    // ------------------------------------------------------------------

    /// Structural invariant checks, enabled by [`EngineConfig::validate`].
    fn validate(&mut self) {
        let l = self.depth;
        for (&(i, j), st) in &self.filters {
            let f = self.net.filter(i, j);
            for e in st.subqueries.iter() {
                let sq = match &e.item {
                    Item::Sq(sq) => sq,
                    _ => panic!("filter master holds a non-subquery item"),
                };
                assert_eq!(
                    sq.args.len(),
                    self.preds.arity(self.net.clauses[i].head.pred),
                    "answer slot arity matches the clause head"
                );
                assert!(
                    self.store.tuple_depth(&sq.args) <= l,
                    "subquery answer slot within depth bound"
                );
                assert!(
                    self.store.subst_depth(&sq.delta) <= l,
                    "subquery binding within depth bound"
                );
                for x in sq.delta.domain() {
                    assert!(
                        f.pre_vars.contains(&x),
                        "binding domain inside the node's relevant variables"
                    );
                }
                let args_vars: HashSet<VarId> =
                    self.store.vars_in_order(&sq.args).into_iter().collect();
                for x in sq.delta.domain() {
                    assert!(
                        !args_vars.contains(&x),
                        "binding domain disjoint from answer-slot variables"
                    );
                }
                for (_, t) in sq.delta.iter() {
                    let again = self.store.apply(&sq.delta, t);
                    assert_eq!(again, t, "stored bindings are idempotent");
                }
                for v in self.store.vars_in_order(&e.key) {
                    assert_ne!(
                        self.store.var_space(v),
                        Some(VarSpace::Oracle),
                        "engine state never contains oracle-namespace variables"
                    );
                }
            }
            assert_antichain(self.store, &st.subqueries, "subqueries");
            for (id, _) in st.buf_succ.iter().chain(st.buf_input.iter()) {
                assert!(
                    st.subqueries.entry(*id).is_some(),
                    "pending buffers reference live subqueries"
                );
            }
            if f.kind == PredKind::Idb {
                assert_eq!(
                    st.bound.len(),
                    st.subqueries.len(),
                    "every stored subquery has its instantiated atom kept"
                );
                let indexed = st.bound_by_first.values().map(Vec::len).sum::<usize>()
                    + st.bound_open.len();
                assert_eq!(
                    indexed,
                    st.bound.len(),
                    "the first-argument index covers each bound atom once"
                );
                for id in st.bound.keys() {
                    assert!(
                        st.subqueries.entry(*id).is_some(),
                        "bound atoms reference live subqueries"
                    );
                }
            }
        }
        let tuple_nodes = self
            .inputs
            .iter()
            .map(|(&p, n)| (p, n, true))
            .chain(self.answers.iter().map(|(&p, n)| (p, n, false)));
        for (p, node, is_input) in tuple_nodes {
            let tre_input = is_input && self.net.tre(p);
            for e in node.master.iter() {
                match (&e.item, tre_input) {
                    (Item::Pair(a, b), true) => {
                        assert_eq!(a.len(), self.preds.arity(p));
                        assert_eq!(b.len(), self.preds.arity(p));
                    }
                    (Item::Tuple(t), _) => assert_eq!(t.len(), self.preds.arity(p)),
                    (Item::Pair(..), false) => {
                        panic!("pairs only live in tail-recursion-eliminated inputs")
                    }
                    (Item::Sq(_), _) => panic!("tuple node holds a subquery"),
                }
            }
            assert_antichain(self.store, &node.master, "tuples");
            for buf in node.buffers.values() {
                for (id, _) in buf {
                    assert!(node.master.entry(*id).is_some(), "buffer ids are live");
                }
            }
        }
        assert!(
            self.stats.buffer_consumed <= self.stats.buffer_added,
            "each buffered item is consumed at most once"
        );
    }
}

fn assert_antichain(store: &TermStore, set: &Antichain, what: &str) {
    let keys: Vec<&Vec<TermId>> = set.iter().map(|e| &e.key).collect();
    for (a, ka) in keys.iter().enumerate() {
        for (b, kb) in keys.iter().enumerate() {
            if a != b {
                assert!(
                    !store.tuple_is_instance(ka, kb),
                    "{what} set keeps only most-general items"
                );
            }
        }
    }
    let indexed = set.by_first.values().map(Vec::len).sum::<usize>() + set.open.len();
    assert_eq!(indexed, set.len(), "{what} first-argument index covers each entry once");
    for id in set.by_first.values().flatten().chain(set.open.iter()) {
        assert!(set.entry(*id).is_some(), "{what} index references live entries");
    }
}

fn gamma_sqs(gamma: Antichain) -> Vec<Subquery> {
    gamma
        .entries
        .into_iter()
        .map(|e| match e.item {
            Item::Sq(sq) => sq,
            _ => unreachable!("subquery batch"),
        })
        .collect()
}

fn split_items(buf: Vec<(u64, Item)>) -> Data {
    let mut tuples = Vec::new();
    let mut pairs = Vec::new();
    for (_, item) in buf {
        match item {
            Item::Tuple(t) => tuples.push(t),
            Item::Pair(a, b) => pairs.push((a, b)),
            Item::Sq(_) => unreachable!("tuple-node buffers hold tuples or pairs"),
        }
    }
    if pairs.is_empty() {
        Data::Tuples(tuples)
    } else {
        debug_assert!(tuples.is_empty(), "a node holds either tuples or pairs");
        Data::Pairs(pairs)
    }
}

/// Strategy-facing snapshot of the evaluation state.
struct Ctx<'e> {
    net: &'e NetStructure,
    act: &'e BTreeMap<Edge, u64>,
    stamps: &'e BTreeMap<NodeId, u64>,
    loads: HashMap<Edge, usize>,
    enabled: HashMap<Edge, usize>,
    work: HashMap<Edge, usize>,
}

impl ControlContext for Ctx<'_> {
    fn net(&self) -> &NetStructure {
        self.net
    }

    fn activation_seq(&self, e: Edge) -> u64 {
        self.act.get(&e).copied().unwrap_or(u64::MAX)
    }

    fn timestamp(&self, v: NodeId) -> u64 {
        self.stamps.get(&v).copied().unwrap_or(0)
    }

    fn predicted_loads(&self, e: Edge) -> usize {
        self.loads.get(&e).copied().unwrap_or(0)
    }

    fn enabled_memory_ops(&self, e: Edge) -> usize {
        self.enabled.get(&e).copied().unwrap_or(0)
    }

    fn workload(&self, e: Edge) -> usize {
        self.work.get(&e).copied().unwrap_or(0)
    }
}

/// Evaluates a proper goal (an intensional atom with pairwise distinct
/// variable arguments) against the knowledge base.
pub fn evaluate(
    kb: &mut KnowledgeBase,
    goal: &Atom,
    cfg: &EngineConfig,
) -> Result<RunOutcome, EngineError> {
    let KnowledgeBase { store, preds, program, edb } = kb;
    let mut engine = Engine::new(store, preds, program, edb, goal.clone(), cfg.clone())?;
    Ok(engine.run())
}

/// Normalizes an arbitrary query into a proper goal (extending the
/// program with bridging clauses when needed) and evaluates it. Returns
/// the goal together with the outcome; answer tuples are bindings of the
/// query's free variables in order.
pub fn run_query(
    kb: &mut KnowledgeBase,
    query: &Query,
    cfg: &EngineConfig,
) -> Result<(Atom, RunOutcome), EngineError> {
    let goal = kb.normalize_query(query);
    let outcome = evaluate(kb, &goal, cfg)?;
    Ok((goal, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::KnowledgeBase;

    fn cfg() -> EngineConfig {
        EngineConfig { validate: true, ..EngineConfig::default() }
    }

    fn answers_sorted(kb: &KnowledgeBase, out: &RunOutcome) -> Vec<String> {
        let mut v: Vec<String> =
            out.answers.iter().map(|t| kb.answer_to_string(t)).collect();
        v.sort();
        v
    }

    fn run(program: &str, edb: &str, query: &str, cfg: &EngineConfig) -> (KnowledgeBase, RunOutcome) {
        let mut kb = KnowledgeBase::parse(program, &[edb]).unwrap();
        let q = kb.parse_query(query).unwrap();
        let (_, out) = run_query(&mut kb, &q, cfg).unwrap();
        (kb, out)
    }

    const TC: &str = "p(X, Y) :- e(X, Y).\np(X, Y) :- e(X, Z), p(Z, Y).";
    const TC_EDB: &str = "e(a, b). e(b, c). e(c, d).";

    #[test]
    fn transitive_closure_from_a_constant() {
        for strategy in StrategyKind::all() {
            let c = EngineConfig { strategy, ..cfg() };
            let (kb, out) = run(TC, TC_EDB, "p(a, Y).", &c);
            // the constant argument makes the engine answer through a
            // bridging predicate over the free variable
            assert_eq!(
                answers_sorted(&kb, &out),
                vec!["(b)", "(c)", "(d)"],
                "strategy {}",
                strategy.name()
            );
            assert!(!out.partial);
        }
    }

    #[test]
    fn open_query_enumerates_the_whole_closure() {
        let (kb, out) = run(TC, TC_EDB, "p(X, Y).", &cfg());
        assert_eq!(out.answers.len(), 6);
        assert!(answers_sorted(&kb, &out).contains(&"(a, d)".to_string()));
    }

    #[test]
    fn strategies_and_memorizing_agree() {
        let base = run(TC, TC_EDB, "p(a, Y).", &cfg()).1;
        let expected: usize = base.answers.len();
        for strategy in StrategyKind::all() {
            for memorize in [false, true] {
                let c = EngineConfig { strategy, memorize_edb: memorize, ..cfg() };
                let (_, out) = run(TC, TC_EDB, "p(a, Y).", &c);
                assert_eq!(out.answers.len(), expected);
            }
        }
    }

    #[test]
    fn tail_recursion_elimination_gives_the_same_answers() {
        let c = EngineConfig { tre: true, ..cfg() };
        let (kb, out) = run(TC, TC_EDB, "p(a, Y).", &c);
        assert_eq!(answers_sorted(&kb, &out), vec!["(b)", "(c)", "(d)"]);
        assert!(out.stats.pairs_added > 0, "pair machinery was exercised");
    }

    #[test]
    fn depth_bound_prunes_deep_answers() {
        let prog = "nat(z).\nnat(s(X)) :- nat(X).";
        for (l, expected) in [(0, 1), (1, 2), (3, 4)] {
            let c = EngineConfig { depth_bound: l, ..cfg() };
            let (_, out) = run(prog, "", "nat(X).", &c);
            assert_eq!(out.answers.len(), expected, "bound {l}");
        }
    }

    #[test]
    fn iterative_deepening_stops_at_the_answer_budget() {
        let prog = "nat(z).\nnat(s(X)) :- nat(X).";
        let c = EngineConfig {
            depth_bound: 50,
            deepen: true,
            max_answers: Some(3),
            trace: true,
            ..cfg()
        };
        let (kb, out) = run(prog, "", "nat(X).", &c);
        assert_eq!(answers_sorted(&kb, &out), vec!["(s(s(z)))", "(s(z))", "(z)"]);
        assert!(!out.partial, "an answer-budget stop is a complete result");
        assert_eq!(out.rounds.len(), 3, "rounds 0, 1, 2");
        assert_eq!(out.rounds[0].answers, 1);
        assert_eq!(out.rounds[1].answers, 2);
        assert_eq!(out.rounds[2].answers, 3);
        assert!(out
            .trace
            .iter()
            .any(|l| l.contains("1 answers retained")));
    }

    #[test]
    fn generalized_answers_subsume_their_instances() {
        // q holds a non-ground fact, so the general answer covers the
        // specific one derived through r
        let prog = "p(X) :- q(X).\np(a) :- r(a).\nq(W).";
        let edb = "r(a).";
        let (kb, out) = run(prog, edb, "p(X).", &cfg());
        assert_eq!(out.answers.len(), 1, "the variable answer absorbs p(a)");
        assert!(kb.store.as_var(out.answers[0][0]).is_some());
        assert_eq!(out.stats.reinsertions, 0);
    }

    #[test]
    fn no_reinsertions_on_recursive_programs() {
        let (_, out) = run(TC, TC_EDB, "p(X, Y).", &cfg());
        assert_eq!(out.stats.reinsertions, 0);
        assert!(out.stats.buffer_consumed <= out.stats.buffer_added);
    }

    #[test]
    fn improper_goals_are_rejected() {
        let mut kb = KnowledgeBase::parse(TC, &[TC_EDB]).unwrap();
        let p = kb.preds.id("p").unwrap();
        let a = kb.store.constant("a");
        let goal = Atom { pred: p, args: vec![a, a] };
        let err = evaluate(&mut kb, &goal, &cfg()).unwrap_err();
        assert!(matches!(err, EngineError::ImproperGoal(_)));
    }

    #[test]
    fn compound_queries_run_through_normalization() {
        let mut kb = KnowledgeBase::parse(TC, &[TC_EDB]).unwrap();
        let q = kb.parse_query("p(a, Y) & p(Y, d).").unwrap();
        let (_, out) = run_query(&mut kb, &q, &cfg()).unwrap();
        let mut shown: Vec<String> = out.answers.iter().map(|t| kb.answer_to_string(t)).collect();
        shown.sort();
        assert_eq!(shown, vec!["(b)", "(c)"]);
    }

    #[test]
    fn zero_arity_goal_through_normalization() {
        let prog = "p :- q1(a, c).\nq1(X, Y) :- r1(X, Y).\nq1(X, Y) :- r1(X, Z), q1(Z, Y).";
        let edb = "r1(a, b). r1(b, c).";
        let mut kb = KnowledgeBase::parse(prog, &[edb]).unwrap();
        let q = kb.parse_query("p.").unwrap();
        let (_, out) = run_query(&mut kb, &q, &cfg()).unwrap();
        assert_eq!(out.answers.len(), 1);
        assert_eq!(out.answers[0].len(), 0, "a propositional answer is the empty tuple");
    }

    #[test]
    fn function_symbols_flow_through_clause_heads() {
        let prog = "wrap(f(X)) :- item(X).";
        let edb = "item(a). item(b).";
        let c = EngineConfig { depth_bound: 1, ..cfg() };
        let (kb, out) = run(prog, edb, "wrap(Y).", &c);
        assert_eq!(answers_sorted(&kb, &out), vec!["(f(a))", "(f(b))"]);
    }

    #[test]
    fn max_answers_stops_early_without_partial_flag() {
        let c = EngineConfig { max_answers: Some(1), ..cfg() };
        let (_, out) = run(TC, TC_EDB, "p(a, Y).", &c);
        assert_eq!(out.answers.len(), 1);
        assert!(!out.partial);
    }

    #[test]
    fn fire_budget_marks_the_run_partial() {
        let c = EngineConfig { max_fires: 2, ..cfg() };
        let (_, out) = run(TC, TC_EDB, "p(a, Y).", &c);
        assert!(out.partial);
    }

    #[test]
    fn stats_count_extensional_reads() {
        let (_, out) = run(TC, TC_EDB, "p(a, Y).", &cfg());
        assert!(out.stats.edb_tuples_read > 0);
        assert!(out.stats.fires > 0);
        assert!(out.stats.page_loads > 0, "cold extensional pages were loaded");
    }

    #[test]
    fn mutual_recursion_terminates_and_answers() {
        let prog = "even(z).\neven(s(X)) :- odd(X).\nodd(s(X)) :- even(X).";
        let c = EngineConfig { depth_bound: 4, ..cfg() };
        let (kb, out) = run(prog, "", "even(N).", &c);
        assert_eq!(
            answers_sorted(&kb, &out),
            vec!["(s(s(s(s(z)))))", "(s(s(z)))", "(z)"]
        );
    }

    #[test]
    fn tre_on_non_tail_recursive_predicates_is_harmless() {
        // left recursion is not a tail call; forcing the pair machinery on
        // it must not change the answers
        let prog = "p(X, Y) :- p(X, Z), e(Z, Y).\np(X, Y) :- e(X, Y).";
        let mut kb = KnowledgeBase::parse(prog, &[TC_EDB]).unwrap();
        let p = kb.preds.id("p").unwrap();
        let c = EngineConfig { tre: true, tre_preds: Some(vec![p]), ..cfg() };
        let q = kb.parse_query("p(a, Y).").unwrap();
        let (_, out) = run_query(&mut kb, &q, &c).unwrap();
        assert_eq!(out.answers.len(), 3);
    }
}
