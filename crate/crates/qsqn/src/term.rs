//! Terms, substitutions and unification over a hash-consed term DAG.
//!
//! Every term lives in a [`TermStore`]: structurally equal terms are interned
//! to the same [`TermId`], so term equality is id equality and shared
//! subterms are stored once. This keeps unification polynomial even in the
//! classic worst case `f(x1,...,xn) = f(g(x0,x0), ..., g(x{n-1},x{n-1}))`,
//! whose most general unifier is exponential as a tree but linear as a DAG.
//!
//! Conventions used throughout the crate:
//!
//! * constants are compound terms of arity 0;
//! * variables are identified by [`VarId`] (display names are cosmetic);
//! * generated variables come from per-namespace monotone counters
//!   ([`VarSpace::Engine`] prints as `_G<n>`, [`VarSpace::Oracle`] as
//!   `_O<n>`), so they can never be captured by parsed input or by the
//!   other namespace;
//! * substitutions map variables to term ids, contain no binding `x/x`,
//!   and are idempotent whenever they were produced by [`TermStore::mgu_list`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use indexmap::IndexSet;

/// Interned functor/constant symbol.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct SymbolId(u32);

/// A variable, compared by identity. The printable name is looked up in the
/// store and plays no semantic role.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct VarId(u32);

/// Handle of an interned term node. Equal ids mean structurally equal terms.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TermId(u32);

/// Predicate symbol handle. The name/arity/kind table lives in the language
/// layer; the term layer only needs identity.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct PredId(pub u32);

/// A generalized tuple: the argument vector of an atom, possibly containing
/// variables and compound terms.
pub type Tuple = Vec<TermId>;

/// An atom `p(t1,...,tn)`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Atom {
    pub pred: PredId,
    pub args: Tuple,
}

/// One node of the term DAG.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum TermNode {
    Var(VarId),
    /// Functor application; arity 0 is a constant.
    App(SymbolId, Vec<TermId>),
}

/// Namespace for generated variables. The two namespaces use disjoint
/// reserved name prefixes so engine-side and oracle-side fresh variables can
/// never be confused, even when both operate on the same store.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VarSpace {
    Engine,
    Oracle,
}

impl VarSpace {
    fn prefix(self) -> &'static str {
        match self {
            VarSpace::Engine => "_G",
            VarSpace::Oracle => "_O",
        }
    }
}

/// True for variable names reserved for generated variables (`_G<digits>` or
/// `_O<digits>`). The parser rejects these so printed terms stay unambiguous.
pub fn is_reserved_var_name(name: &str) -> bool {
    for prefix in ["_G", "_O"] {
        if let Some(rest) = name.strip_prefix(prefix) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                return true;
            }
        }
    }
    false
}

/// A substitution: a finite map from variables to terms with no binding
/// `x/x`. Iteration order is fixed (by variable id) so every computation that
/// walks a substitution is deterministic.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct Subst {
    map: BTreeMap<VarId, TermId>,
}

impl Subst {
    pub fn empty() -> Self {
        Subst::default()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn get(&self, v: VarId) -> Option<TermId> {
        self.map.get(&v).copied()
    }

    pub fn contains(&self, v: VarId) -> bool {
        self.map.contains_key(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (VarId, TermId)> + '_ {
        self.map.iter().map(|(&v, &t)| (v, t))
    }

    pub fn domain(&self) -> impl Iterator<Item = VarId> + '_ {
        self.map.keys().copied()
    }

    /// Restriction to a set of variables: keeps exactly the bindings whose
    /// variable occurs in `keep`.
    pub fn restrict(&self, keep: &[VarId]) -> Subst {
        Subst {
            map: self
                .map
                .iter()
                .filter(|(v, _)| keep.contains(v))
                .map(|(&v, &t)| (v, t))
                .collect(),
        }
    }

    fn from_map(map: BTreeMap<VarId, TermId>) -> Self {
        Subst { map }
    }
}

/// The term store: an append-only, hash-consed arena of term nodes plus the
/// symbol and variable tables.
///
/// Methods that can create new nodes take `&mut self`; pure inspections take
/// `&self`. Cloning the store snapshots all terms (used by test harnesses
/// that run several evaluations from one parse).
#[derive(Clone, Debug)]
pub struct TermStore {
    nodes: IndexSet<TermNode>,
    /// Term depth per node (max nesting of arity>=1 functors; see
    /// [`TermStore::term_depth`]).
    depths: Vec<u32>,
    /// Per-node "contains no variable" flag.
    ground: Vec<bool>,
    symbols: IndexSet<String>,
    var_names: Vec<String>,
    var_spaces: Vec<Option<VarSpace>>,
    /// `Var(v)` node of each variable (every variable has exactly one node).
    var_terms: Vec<TermId>,
    vars_by_name: HashMap<String, VarId>,
    fresh_counters: [u64; 2],
}

impl Default for TermStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TermStore {
    pub fn new() -> Self {
        TermStore {
            nodes: IndexSet::new(),
            depths: Vec::new(),
            ground: Vec::new(),
            symbols: IndexSet::new(),
            var_names: Vec::new(),
            var_spaces: Vec::new(),
            var_terms: Vec::new(),
            vars_by_name: HashMap::new(),
            fresh_counters: [0, 0],
        }
    }

    // ----- interning -------------------------------------------------------

    pub fn symbol(&mut self, name: &str) -> SymbolId {
        if let Some(i) = self.symbols.get_index_of(name) {
            return SymbolId(i as u32);
        }
        let (i, _) = self.symbols.insert_full(name.to_string());
        SymbolId(i as u32)
    }

    pub fn symbol_name(&self, s: SymbolId) -> &str {
        self.symbols.get_index(s.0 as usize).expect("symbol id out of range")
    }

    pub fn symbol_exists(&self, name: &str) -> bool {
        self.symbols.contains(name)
    }

    fn intern(&mut self, node: TermNode) -> TermId {
        if let Some(i) = self.nodes.get_index_of(&node) {
            return TermId(i as u32);
        }
        let (depth, ground) = match &node {
            TermNode::Var(_) => (0, false),
            TermNode::App(_, args) => {
                let mut depth = 0;
                let mut ground = true;
                for &a in args {
                    depth = depth.max(self.depths[a.0 as usize]);
                    ground &= self.ground[a.0 as usize];
                }
                // Only proper function applications add a nesting level;
                // constants (arity 0) have depth 0.
                if args.is_empty() {
                    (0, true)
                } else {
                    (depth + 1, ground)
                }
            }
        };
        let (i, inserted) = self.nodes.insert_full(node);
        debug_assert!(inserted);
        self.depths.push(depth);
        self.ground.push(ground);
        TermId(i as u32)
    }

    /// Interns `f(args...)`; with no args this is the constant `f`.
    pub fn app(&mut self, f: SymbolId, args: Vec<TermId>) -> TermId {
        self.intern(TermNode::App(f, args))
    }

    pub fn constant(&mut self, name: &str) -> TermId {
        let s = self.symbol(name);
        self.app(s, Vec::new())
    }

    /// Interns a named (parsed) variable; the same name always yields the
    /// same variable.
    pub fn var_named(&mut self, name: &str) -> TermId {
        debug_assert!(
            !is_reserved_var_name(name),
            "variable name {name:?} is reserved for generated variables"
        );
        if let Some(&v) = self.vars_by_name.get(name) {
            return self.var_terms[v.0 as usize];
        }
        self.new_var(name.to_string(), None, true)
    }

    /// A brand-new anonymous variable (each `_` in source is one of these).
    /// It has no registered name, so nothing can refer to it again; it
    /// displays as `_`.
    pub fn anon_var(&mut self) -> TermId {
        self.new_var("_".to_string(), None, false)
    }

    /// A brand-new variable from the given namespace's counter.
    pub fn fresh_var(&mut self, space: VarSpace) -> TermId {
        let idx = match space {
            VarSpace::Engine => 0,
            VarSpace::Oracle => 1,
        };
        let n = self.fresh_counters[idx];
        self.fresh_counters[idx] += 1;
        let name = format!("{}{}", space.prefix(), n);
        self.new_var(name, Some(space), false)
    }

    fn new_var(&mut self, name: String, space: Option<VarSpace>, register: bool) -> TermId {
        let v = VarId(self.var_names.len() as u32);
        if register {
            self.vars_by_name.insert(name.clone(), v);
        }
        self.var_names.push(name);
        self.var_spaces.push(space);
        let t = self.intern(TermNode::Var(v));
        self.var_terms.push(t);
        t
    }

    // ----- inspection ------------------------------------------------------

    pub fn node(&self, t: TermId) -> &TermNode {
        self.nodes.get_index(t.0 as usize).expect("term id out of range")
    }

    pub fn var_name(&self, v: VarId) -> &str {
        &self.var_names[v.0 as usize]
    }

    pub fn var_space(&self, v: VarId) -> Option<VarSpace> {
        self.var_spaces[v.0 as usize]
    }

    /// The unique `Var(v)` node of a variable.
    pub fn var_term(&self, v: VarId) -> TermId {
        self.var_terms[v.0 as usize]
    }

    /// `Some(v)` iff the term is a variable.
    pub fn as_var(&self, t: TermId) -> Option<VarId> {
        match self.node(t) {
            TermNode::Var(v) => Some(*v),
            TermNode::App(..) => None,
        }
    }

    pub fn is_ground(&self, t: TermId) -> bool {
        self.ground[t.0 as usize]
    }

    pub fn is_ground_tuple(&self, ts: &[TermId]) -> bool {
        ts.iter().all(|&t| self.is_ground(t))
    }

    // ----- term depth ------------------------------------------------------

    /// Maximal nesting depth of proper (arity >= 1) function symbols:
    /// variables and constants have depth 0, `f(g(a), x)` has depth 2.
    pub fn term_depth(&self, t: TermId) -> u32 {
        self.depths[t.0 as usize]
    }

    /// Depth of a tuple (and of an atom's argument vector): the maximum of
    /// the component depths, 0 for the empty tuple.
    pub fn tuple_depth(&self, ts: &[TermId]) -> u32 {
        ts.iter().map(|&t| self.term_depth(t)).max().unwrap_or(0)
    }

    pub fn atom_depth(&self, a: &Atom) -> u32 {
        self.tuple_depth(&a.args)
    }

    /// Depth of a substitution: maximum depth over its range.
    pub fn subst_depth(&self, s: &Subst) -> u32 {
        s.iter().map(|(_, t)| self.term_depth(t)).max().unwrap_or(0)
    }

    // ----- applying and composing substitutions ----------------------------

    /// Applies `s` to `t` simultaneously (no re-substitution into inserted
    /// terms). Shared subterms are rewritten once per call.
    pub fn apply(&mut self, s: &Subst, t: TermId) -> TermId {
        if s.is_empty() {
            return t;
        }
        let mut memo = HashMap::new();
        self.apply_memo(s, t, &mut memo)
    }

    /// Applies `s` to every term of `ts` with one shared memo table.
    pub fn apply_all(&mut self, s: &Subst, ts: &[TermId]) -> Vec<TermId> {
        if s.is_empty() {
            return ts.to_vec();
        }
        let mut memo = HashMap::new();
        ts.iter().map(|&t| self.apply_memo(s, t, &mut memo)).collect()
    }

    pub fn apply_atom(&mut self, s: &Subst, a: &Atom) -> Atom {
        Atom {
            pred: a.pred,
            args: self.apply_all(s, &a.args),
        }
    }

    fn apply_memo(&mut self, s: &Subst, t: TermId, memo: &mut HashMap<TermId, TermId>) -> TermId {
        if self.is_ground(t) {
            return t;
        }
        if let Some(&r) = memo.get(&t) {
            return r;
        }
        let r = match self.node(t).clone() {
            TermNode::Var(v) => s.get(v).unwrap_or(t),
            TermNode::App(f, args) => {
                let new_args: Vec<TermId> =
                    args.iter().map(|&a| self.apply_memo(s, a, memo)).collect();
                if new_args == args {
                    t
                } else {
                    self.app(f, new_args)
                }
            }
        };
        memo.insert(t, r);
        r
    }

    /// Builds a substitution from `(variable term, image)` pairs, dropping
    /// identity bindings. Panics if a left-hand side is not a variable.
    pub fn mk_subst(&self, pairs: &[(TermId, TermId)]) -> Subst {
        let mut map = BTreeMap::new();
        for &(vt, t) in pairs {
            let v = self.as_var(vt).expect("substitution domain must be variables");
            if vt != t {
                map.insert(v, t);
            }
        }
        Subst::from_map(map)
    }

    /// Composition `theta . delta` ("apply theta, then delta"): every image
    /// of `theta` is rewritten by `delta`, identity bindings are dropped, and
    /// the bindings of `delta` for variables outside `dom(theta)` are kept.
    pub fn compose(&mut self, theta: &Subst, delta: &Subst) -> Subst {
        if theta.is_empty() {
            return delta.clone();
        }
        if delta.is_empty() {
            return theta.clone();
        }
        let mut memo = HashMap::new();
        let mut map = BTreeMap::new();
        for (x, t) in theta.iter() {
            let td = self.apply_memo(delta, t, &mut memo);
            if td != self.var_term(x) {
                map.insert(x, td);
            }
        }
        for (y, t) in delta.iter() {
            if !theta.contains(y) {
                map.insert(y, t);
            }
        }
        Subst::from_map(map)
    }

    // ----- unification and matching ----------------------------------------

    fn occurs(&self, x: VarId, t: TermId) -> bool {
        let xt = self.var_term(x);
        if t == xt {
            return true;
        }
        if self.is_ground(t) {
            return false;
        }
        let mut stack = vec![t];
        let mut seen = HashSet::new();
        while let Some(id) = stack.pop() {
            if id == xt {
                return true;
            }
            if self.is_ground(id) || !seen.insert(id) {
                continue;
            }
            if let TermNode::App(_, args) = self.node(id) {
                stack.extend(args.iter().copied());
            }
        }
        false
    }

    /// Most general unifier of the pair list, or `None` if not unifiable.
    /// Runs with occurs check; a returned unifier is idempotent.
    pub fn mgu_list(&mut self, pairs: &[(TermId, TermId)]) -> Option<Subst> {
        let mut s = Subst::empty();
        let mut stack: Vec<(TermId, TermId)> = pairs.to_vec();
        stack.reverse();
        while let Some((a0, b0)) = stack.pop() {
            let a = self.apply(&s, a0);
            let b = self.apply(&s, b0);
            if a == b {
                continue; // hash-consing: identical terms share ids
            }
            match (self.node(a).clone(), self.node(b).clone()) {
                (TermNode::Var(x), _) => {
                    if self.occurs(x, b) {
                        return None;
                    }
                    s = self.extend_binding(s, x, b);
                }
                (_, TermNode::Var(y)) => {
                    if self.occurs(y, a) {
                        return None;
                    }
                    s = self.extend_binding(s, y, a);
                }
                (TermNode::App(f, fa), TermNode::App(g, ga)) => {
                    if f != g || fa.len() != ga.len() {
                        return None;
                    }
                    for i in (0..fa.len()).rev() {
                        stack.push((fa[i], ga[i]));
                    }
                }
            }
        }
        Some(s)
    }

    fn extend_binding(&mut self, s: Subst, x: VarId, t: TermId) -> Subst {
        let single = Subst::from_map(BTreeMap::from([(x, t)]));
        self.compose(&s, &single)
    }

    /// Unifies two terms.
    pub fn mgu_terms(&mut self, a: TermId, b: TermId) -> Option<Subst> {
        self.mgu_list(&[(a, b)])
    }

    /// Unifies two atoms (same predicate required).
    pub fn mgu_atoms(&mut self, a: &Atom, b: &Atom) -> Option<Subst> {
        if a.pred != b.pred || a.args.len() != b.args.len() {
            return None;
        }
        let pairs: Vec<_> = a.args.iter().copied().zip(b.args.iter().copied()).collect();
        self.mgu_list(&pairs)
    }

    /// One-sided simultaneous matching: finds `g` with `pattern . g = target`
    /// for every pair, binding only pattern variables. Variables of the
    /// target are treated as constants (direction matters).
    pub fn match_list(&self, pairs: &[(TermId, TermId)]) -> Option<Subst> {
        let mut bound: BTreeMap<VarId, TermId> = BTreeMap::new();
        let mut stack: Vec<(TermId, TermId)> = pairs.to_vec();
        while let Some((p, t)) = stack.pop() {
            if p == t && self.is_ground(p) {
                continue;
            }
            match self.node(p) {
                TermNode::Var(x) => match bound.get(x) {
                    Some(&prev) => {
                        if prev != t {
                            return None;
                        }
                    }
                    None => {
                        bound.insert(*x, t);
                    }
                },
                TermNode::App(f, pa) => match self.node(t) {
                    TermNode::App(g, ta) if g == f && ta.len() == pa.len() => {
                        stack.extend(pa.iter().copied().zip(ta.iter().copied()));
                    }
                    _ => return None,
                },
            }
        }
        // Bindings x -> x were needed for consistency checking but are not
        // part of the matcher proper.
        bound.retain(|&v, &mut t| self.var_term(v) != t);
        Some(Subst::from_map(bound))
    }

    /// Is the tuple `inst` an instance of the tuple `gen` (one substitution
    /// across all components)?
    pub fn tuple_is_instance(&self, inst: &[TermId], gen: &[TermId]) -> bool {
        inst.len() == gen.len()
            && self
                .match_list(&gen.iter().copied().zip(inst.iter().copied()).collect::<Vec<_>>())
                .is_some()
    }

    /// `Some(g)` with `e2 . g = e1` if expression `e1` (as a tuple) is an
    /// instance of `e2`.
    pub fn instance_witness(&self, e1: &[TermId], e2: &[TermId]) -> Option<Subst> {
        if e1.len() != e2.len() {
            return None;
        }
        self.match_list(&e2.iter().copied().zip(e1.iter().copied()).collect::<Vec<_>>())
    }

    // ----- variants ---------------------------------------------------------

    /// The variables of the expression list in first-occurrence order
    /// (preorder, left to right). Shared subterms are visited once, which
    /// does not change the order of first occurrences.
    pub fn vars_in_order(&self, roots: &[TermId]) -> Vec<VarId> {
        let mut out = Vec::new();
        let mut seen_nodes = HashSet::new();
        let mut seen_vars = HashSet::new();
        for &root in roots {
            if self.is_ground(root) {
                continue;
            }
            let mut stack = vec![root];
            while let Some(id) = stack.pop() {
                if self.is_ground(id) || !seen_nodes.insert(id) {
                    continue;
                }
                match self.node(id) {
                    TermNode::Var(v) => {
                        if seen_vars.insert(*v) {
                            out.push(*v);
                        }
                    }
                    TermNode::App(_, args) => {
                        for &a in args.iter().rev() {
                            stack.push(a);
                        }
                    }
                }
            }
        }
        out
    }

    /// Variables of a subquery-style pair (tuple plus substitution range).
    pub fn vars_of_subst(&self, s: &Subst) -> Vec<VarId> {
        let range: Vec<TermId> = s.iter().map(|(_, t)| t).collect();
        self.vars_in_order(&range)
    }

    /// A renaming of `vars` to brand-new variables of the namespace.
    pub fn renaming_for(&mut self, vars: &[VarId], space: VarSpace) -> Subst {
        let mut map = BTreeMap::new();
        for &v in vars {
            let fresh = self.fresh_var(space);
            map.insert(v, fresh);
        }
        Subst::from_map(map)
    }

    /// Fresh variant of an expression list: every variable (shared ones
    /// consistently) replaced by a new variable of the namespace. Returns the
    /// renamed expressions and the renaming used.
    pub fn fresh_variant_all(&mut self, roots: &[TermId], space: VarSpace) -> (Vec<TermId>, Subst) {
        let vars = self.vars_in_order(roots);
        if vars.is_empty() {
            return (roots.to_vec(), Subst::empty());
        }
        let ren = self.renaming_for(&vars, space);
        let renamed = self.apply_all(&ren, roots);
        (renamed, ren)
    }

    pub fn fresh_variant_tuple(&mut self, t: &[TermId], space: VarSpace) -> Tuple {
        self.fresh_variant_all(t, space).0
    }

    pub fn fresh_variant_atom(&mut self, a: &Atom, space: VarSpace) -> Atom {
        Atom {
            pred: a.pred,
            args: self.fresh_variant_tuple(&a.args, space),
        }
    }

    // ----- DAG sizes --------------------------------------------------------

    /// Size of a term as a rooted DAG: number of distinct nodes plus number
    /// of arcs (each argument position of each distinct node counts one arc,
    /// so `f(x, a, x)` has 3 nodes and 3 arcs, size 6).
    pub fn dag_size(&self, t: TermId) -> u64 {
        let mut nodes = 0u64;
        let mut arcs = 0u64;
        let mut seen = HashSet::new();
        let mut stack = vec![t];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            nodes += 1;
            if let TermNode::App(_, args) = self.node(id) {
                arcs += args.len() as u64;
                stack.extend(args.iter().copied());
            }
        }
        nodes + arcs
    }

    /// Size of a tuple: the sum of its component sizes.
    pub fn dag_size_tuple(&self, ts: &[TermId]) -> u64 {
        ts.iter().map(|&t| self.dag_size(t)).sum()
    }

    /// Size of a substitution with k bindings: `k + sum of range sizes`.
    pub fn dag_size_subst(&self, s: &Subst) -> u64 {
        s.len() as u64 + s.iter().map(|(_, t)| self.dag_size(t)).sum::<u64>()
    }

    /// Number of distinct DAG nodes reachable from all roots together.
    pub fn dag_node_count(&self, roots: &[TermId]) -> u64 {
        let mut seen = HashSet::new();
        let mut stack: Vec<TermId> = roots.to_vec();
        let mut count = 0u64;
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            count += 1;
            if let TermNode::App(_, args) = self.node(id) {
                stack.extend(args.iter().copied());
            }
        }
        count
    }

    // ----- printing ---------------------------------------------------------

    /// Canonical text form: `f(t1,...,tn)`, bare name for constants and
    /// variables. Optional `names` overrides variable display names.
    pub fn term_to_string_with(&self, t: TermId, names: &HashMap<VarId, String>) -> String {
        let mut out = String::new();
        self.write_term(&mut out, t, names);
        out
    }

    pub fn term_to_string(&self, t: TermId) -> String {
        self.term_to_string_with(t, &HashMap::new())
    }

    fn write_term(&self, out: &mut String, t: TermId, names: &HashMap<VarId, String>) {
        match self.node(t) {
            TermNode::Var(v) => match names.get(v) {
                Some(n) => out.push_str(n),
                None => out.push_str(self.var_name(*v)),
            },
            TermNode::App(f, args) => {
                out.push_str(self.symbol_name(*f));
                if !args.is_empty() {
                    out.push('(');
                    for (i, &a) in args.iter().enumerate() {
                        if i > 0 {
                            out.push_str(", ");
                        }
                        self.write_term(out, a, names);
                    }
                    out.push(')');
                }
            }
        }
    }

    pub fn tuple_to_string_with(&self, ts: &[TermId], names: &HashMap<VarId, String>) -> String {
        let mut out = String::from("(");
        for (i, &t) in ts.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            self.write_term(&mut out, t, names);
        }
        out.push(')');
        out
    }

    pub fn tuple_to_string(&self, ts: &[TermId]) -> String {
        self.tuple_to_string_with(ts, &HashMap::new())
    }

    pub fn subst_to_string(&self, s: &Subst) -> String {
        let mut out = String::from("{");
        for (i, (v, t)) in s.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{}/{}", self.var_name(v), self.term_to_string(t));
        }
        out.push('}');
        out
    }

    /// Display names `_0, _1, ...` for the variables of `roots` in first
    /// occurrence order; used to print answers in a run-independent form.
    pub fn canonical_display_names(&self, roots: &[TermId]) -> HashMap<VarId, String> {
        self.vars_in_order(roots)
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, format!("_{i}")))
            .collect()
    }

    /// Canonical renaming key of an expression list: its text form with
    /// variables replaced positionally (`_0, _1, ...` in first-occurrence
    /// order). Two expression lists get equal keys iff they are variants of
    /// each other.
    pub fn variant_key(&self, roots: &[TermId]) -> String {
        let names = self.canonical_display_names(roots);
        let mut out = String::new();
        for (i, &t) in roots.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            self.write_term(&mut out, t, &names);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> TermStore {
        TermStore::new()
    }

    /// Builds f(args...) with a one-letter functor.
    fn f(st: &mut TermStore, name: &str, args: Vec<TermId>) -> TermId {
        let s = st.symbol(name);
        st.app(s, args)
    }

    #[test]
    fn hash_consing_dedups_nodes() {
        let mut st = store();
        let a1 = st.constant("a");
        let a2 = st.constant("a");
        assert_eq!(a1, a2);
        let x = st.var_named("X");
        let t1 = f(&mut st, "f", vec![x, a1]);
        let t2 = f(&mut st, "f", vec![x, a2]);
        assert_eq!(t1, t2);
        let b = st.constant("b");
        let t3 = f(&mut st, "f", vec![x, b]);
        assert_ne!(t1, t3);
    }

    #[test]
    fn term_depth_counts_proper_functors_only() {
        let mut st = store();
        let a = st.constant("a");
        let x = st.var_named("X");
        assert_eq!(st.term_depth(a), 0);
        assert_eq!(st.term_depth(x), 0);
        let ga = f(&mut st, "g", vec![a]);
        let t = f(&mut st, "f", vec![ga, x]);
        assert_eq!(st.term_depth(t), 2);
        // atom p(x, y) has depth 0; tuple depth is the max over components
        assert_eq!(st.tuple_depth(&[x, a]), 0);
        assert_eq!(st.tuple_depth(&[t, a]), 2);
    }

    #[test]
    fn subst_depth_is_max_over_range() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let z = st.var_named("Z");
        let a = st.constant("a");
        let fy = f(&mut st, "f", vec![y]);
        let s = st.mk_subst(&[(x, fy), (z, a)]);
        assert_eq!(st.subst_depth(&s), 1);
        assert_eq!(st.subst_depth(&Subst::empty()), 0);
    }

    #[test]
    fn dag_size_shares_repeated_subterms() {
        let mut st = store();
        let x = st.var_named("X");
        let a = st.constant("a");
        // f(x, a, x): 3 distinct nodes, 3 arcs
        let t = f(&mut st, "f", vec![x, a, x]);
        assert_eq!(st.dag_size(t), 6);
        assert_eq!(st.dag_size(a), 1);
        assert_eq!(st.dag_size_tuple(&[t, a]), 7);
        let s = st.mk_subst(&[(x, a)]);
        assert_eq!(st.dag_size_subst(&s), 2);
    }

    #[test]
    fn apply_is_simultaneous() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let fy = f(&mut st, "f", vec![y]);
        // {X/f(Y), Y/X} applied to g(X, Y) must give g(f(Y), X), not g(f(X), X).
        let s = st.mk_subst(&[(x, fy), (y, x)]);
        let g = f(&mut st, "g", vec![x, y]);
        let applied = st.apply(&s, g);
        let expect = {
            let inner = f(&mut st, "f", vec![y]);
            f(&mut st, "g", vec![inner, x])
        };
        assert_eq!(applied, expect);
    }

    #[test]
    fn compose_matches_the_definition() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let fy = f(&mut st, "f", vec![y]);
        let theta = st.mk_subst(&[(x, fy)]);
        let delta = st.mk_subst(&[(y, x)]);
        // {X/f(Y)} . {Y/X} = {X/f(X), Y/X}
        let comp = st.compose(&theta, &delta);
        let fx = f(&mut st, "f", vec![x]);
        let expect = st.mk_subst(&[(x, fx), (y, x)]);
        assert_eq!(comp, expect);
    }

    #[test]
    fn compose_drops_identities_and_shadowed_bindings() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let a = st.constant("a");
        // {X/Y} . {Y/X} deletes X/X; Y/X stays.
        let theta = st.mk_subst(&[(x, y)]);
        let delta = st.mk_subst(&[(y, x)]);
        let comp = st.compose(&theta, &delta);
        assert_eq!(comp, st.mk_subst(&[(y, x)]));
        // {X/a} . {X/b} keeps X/a: X is in dom(theta), so delta's binding is dropped.
        let b = st.constant("b");
        let theta = st.mk_subst(&[(x, a)]);
        let delta = st.mk_subst(&[(x, b)]);
        assert_eq!(st.compose(&theta, &delta), st.mk_subst(&[(x, a)]));
    }

    #[test]
    fn mgu_basic_and_occurs_check() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let a = st.constant("a");
        let t1 = f(&mut st, "f", vec![x, a]);
        let t2 = f(&mut st, "f", vec![y, y]);
        let s = st.mgu_terms(t1, t2).expect("unifiable");
        let t1s = st.apply(&s, t1);
        let t2s = st.apply(&s, t2);
        assert_eq!(t1s, t2s);
        // idempotent
        let again = st.apply(&s, t1s);
        assert_eq!(again, t1s);
        // occurs check: X and f(X) do not unify
        let fx = f(&mut st, "f", vec![x]);
        assert!(st.mgu_terms(x, fx).is_none());
    }

    #[test]
    fn mgu_is_idempotent_on_chained_variables() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let z = st.var_named("Z");
        let t1 = f(&mut st, "f", vec![x, y]);
        let t2 = f(&mut st, "f", vec![y, z]);
        let s = st.mgu_terms(t1, t2).expect("unifiable");
        for (_, t) in s.iter() {
            let tt = st.apply(&s, t);
            assert_eq!(tt, t, "range must be untouched by the unifier itself");
        }
    }

    #[test]
    fn matching_is_one_sided() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let a = st.constant("a");
        let b = st.constant("b");
        // (a, b) is an instance of (X, Y) but not vice versa
        assert!(st.tuple_is_instance(&[a, b], &[x, y]));
        assert!(!st.tuple_is_instance(&[x, y], &[a, b]));
        // repeated variables must match consistently
        assert!(st.tuple_is_instance(&[a, a], &[x, x]));
        assert!(!st.tuple_is_instance(&[a, b], &[x, x]));
        // a variable is an instance of a variable
        assert!(st.tuple_is_instance(&[x], &[y]));
        // shared variables: (X, a) is an instance of (X, Y)
        assert!(st.tuple_is_instance(&[x, a], &[x, y]));
        // ... but (a, X) is not an instance of (X, X)
        assert!(!st.tuple_is_instance(&[a, x], &[x, x]));
    }

    #[test]
    fn fresh_variants_are_mutual_instances() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let gxy = f(&mut st, "g", vec![x, y, x]);
        let (renamed, ren) = st.fresh_variant_all(&[gxy, y], VarSpace::Engine);
        assert_eq!(ren.len(), 2);
        assert!(st.tuple_is_instance(&renamed, &[gxy, y]));
        assert!(st.tuple_is_instance(&[gxy, y], &renamed));
        // shared variables stay shared after renaming
        let key_before = st.variant_key(&[gxy, y]);
        let key_after = st.variant_key(&renamed);
        assert_eq!(key_before, key_after);
    }

    #[test]
    fn variant_keys_distinguish_sharing() {
        let mut st = store();
        let x = st.var_named("X");
        let y = st.var_named("Y");
        let z = st.var_named("Z");
        assert_eq!(st.variant_key(&[x, x]), st.variant_key(&[z, z]));
        assert_ne!(st.variant_key(&[x, x]), st.variant_key(&[x, y]));
    }

    #[test]
    fn fresh_namespaces_are_disjoint() {
        let mut st = store();
        let g = st.fresh_var(VarSpace::Engine);
        let o = st.fresh_var(VarSpace::Oracle);
        let gv = st.as_var(g).unwrap();
        let ov = st.as_var(o).unwrap();
        assert_eq!(st.var_space(gv), Some(VarSpace::Engine));
        assert_eq!(st.var_space(ov), Some(VarSpace::Oracle));
        assert!(is_reserved_var_name(st.var_name(gv)));
        assert!(is_reserved_var_name(st.var_name(ov)));
        assert!(!is_reserved_var_name("X"));
        assert!(!is_reserved_var_name("_Goo"));
        assert!(!is_reserved_var_name("_G"));
    }

    #[test]
    fn unification_stays_polynomial_on_the_exponential_tree_case() {
        // f(x1,...,xn) = f(g(x0,x0), ..., g(x{n-1},x{n-1})): the unified term
        // is exponential as a tree but linear as a DAG.
        let n = 20;
        let mut st = store();
        let xs: Vec<TermId> = (0..=n).map(|i| st.var_named(&format!("X{i}"))).collect();
        let lhs = {
            let args = xs[1..=n].to_vec();
            f(&mut st, "f", args)
        };
        let rhs = {
            let mut args = Vec::new();
            for i in 0..n {
                let gi = f(&mut st, "g", vec![xs[i], xs[i]]);
                args.push(gi);
            }
            f(&mut st, "f", args)
        };
        let s = st.mgu_terms(lhs, rhs).expect("unifiable");
        let unified = st.apply(&s, lhs);
        assert_eq!(unified, st.apply(&s, rhs));
        // 20 g-nodes + x0 + the f-root
        assert!(st.dag_node_count(&[unified]) <= 3 * (n as u64) + 2);
    }

    #[test]
    fn printing_round_trips_structure() {
        let mut st = store();
        let x = st.var_named("X");
        let a = st.constant("a");
        let ga = f(&mut st, "g", vec![a]);
        let t = f(&mut st, "f", vec![ga, x]);
        assert_eq!(st.term_to_string(t), "f(g(a), X)");
        assert_eq!(st.tuple_to_string(&[t, a]), "(f(g(a), X), a)");
        let s = st.mk_subst(&[(x, ga)]);
        assert_eq!(st.subst_to_string(&s), "{X/g(a)}");
    }
}
