//! Property tests for the term layer against a naive tree-based reference
//! unifier. The reference works on plain recursive trees with textual
//! variables and a map-based substitution, so any disagreement points at
//! the shared/hash-consed representation rather than at the test itself.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use qsqn::term::{TermId, TermStore, VarId, VarSpace};

/// Plain tree terms: a variable or an application (constants are nullary).
#[derive(Clone, Debug, PartialEq, Eq)]
enum T {
    V(String),
    A(String, Vec<T>),
}

fn term_strategy() -> impl Strategy<Value = T> {
    let leaf = prop_oneof![
        prop::sample::select(vec!["U", "V", "W", "X", "Y"]).prop_map(|v| T::V(v.into())),
        prop::sample::select(vec!["a", "b", "c"]).prop_map(|c| T::A(c.into(), vec![])),
    ];
    leaf.prop_recursive(4, 24, 3, |inner| {
        (
            prop::sample::select(vec!["f", "g", "h"]),
            prop::collection::vec(inner, 1..=3),
        )
            .prop_map(|(f, args)| T::A(f.into(), args))
    })
}

type RSubst = BTreeMap<String, T>;

/// Chases variable bindings at the root only.
fn walk(t: &T, s: &RSubst) -> T {
    let mut cur = t.clone();
    while let T::V(x) = &cur {
        match s.get(x) {
            Some(next) => cur = next.clone(),
            None => break,
        }
    }
    cur
}

fn occurs(x: &str, t: &T, s: &RSubst) -> bool {
    match walk(t, s) {
        T::V(y) => x == y,
        T::A(_, args) => args.iter().any(|a| occurs(x, a, s)),
    }
}

/// Textbook unification with the occurs check, extending `s`.
fn ref_unify(a: &T, b: &T, s: &mut RSubst) -> bool {
    let a = walk(a, s);
    let b = walk(b, s);
    match (a, b) {
        (T::V(x), T::V(y)) if x == y => true,
        (T::V(x), t) | (t, T::V(x)) => {
            if occurs(&x, &t, s) {
                false
            } else {
                s.insert(x, t);
                true
            }
        }
        (T::A(f, xs), T::A(g, ys)) => {
            f == g
                && xs.len() == ys.len()
                && xs.iter().zip(&ys).all(|(x, y)| ref_unify(x, y, s))
        }
    }
}

/// Resolves every variable through the substitution, recursively.
fn deep_apply(t: &T, s: &RSubst) -> T {
    match walk(t, s) {
        T::V(x) => T::V(x),
        T::A(f, args) => T::A(f, args.iter().map(|a| deep_apply(a, s)).collect()),
    }
}

fn intern(store: &mut TermStore, t: &T) -> TermId {
    match t {
        T::V(x) => store.var_named(x),
        T::A(f, args) => {
            let ids: Vec<TermId> = args.iter().map(|a| intern(store, a)).collect();
            let sym = store.symbol(f);
            store.app(sym, ids)
        }
    }
}

proptest! {
    /// The engine unifier succeeds exactly when the reference does, and a
    /// successful result is an idempotent most-general common instance.
    #[test]
    fn unification_agrees_with_the_reference(a in term_strategy(), b in term_strategy()) {
        let mut store = TermStore::new();
        let ta = intern(&mut store, &a);
        let tb = intern(&mut store, &b);
        let engine = store.mgu_terms(ta, tb);
        let mut rs = RSubst::new();
        let reference = ref_unify(&a, &b, &mut rs);
        prop_assert_eq!(engine.is_some(), reference, "a = {:?}, b = {:?}", a, b);
        if let Some(sigma) = engine {
            let ua = store.apply(&sigma, ta);
            let ub = store.apply(&sigma, tb);
            prop_assert_eq!(ua, ub, "both sides must map to the same shared term");
            prop_assert_eq!(store.apply(&sigma, ua), ua, "the unifier must be idempotent");
            prop_assert!(store.tuple_is_instance(&[ua], &[ta]));
            prop_assert!(store.tuple_is_instance(&[ua], &[tb]));
            // most general: a variant of what the reference computes
            let resolved = deep_apply(&a, &rs);
            prop_assert_eq!(deep_apply(&b, &rs), resolved.clone());
            let reference_term = intern(&mut store, &resolved);
            prop_assert_eq!(
                store.variant_key(&[ua]),
                store.variant_key(&[reference_term]),
                "unified term {} is not a variant of the reference result {}",
                store.term_to_string(ua),
                store.term_to_string(reference_term)
            );
        }
    }

    /// Fresh variants keep the structure (same variant key, instances of
    /// each other) while using entirely new variables.
    #[test]
    fn fresh_variants_rename_apart(a in term_strategy()) {
        let mut store = TermStore::new();
        let ta = intern(&mut store, &a);
        let (fresh, _renaming) = store.fresh_variant_all(&[ta], VarSpace::Engine);
        prop_assert_eq!(store.variant_key(&[ta]), store.variant_key(&fresh));
        prop_assert!(store.tuple_is_instance(&fresh, &[ta]));
        prop_assert!(store.tuple_is_instance(&[ta], &fresh));
        let old: BTreeSet<VarId> = store.vars_in_order(&[ta]).into_iter().collect();
        let new: BTreeSet<VarId> = store.vars_in_order(&fresh).into_iter().collect();
        prop_assert!(old.is_disjoint(&new));
    }

    /// `compose(theta, delta)` means "apply theta, then delta".
    #[test]
    fn composition_applies_left_then_right(
        a in term_strategy(),
        b in term_strategy(),
        c in term_strategy(),
        d in term_strategy(),
    ) {
        let mut store = TermStore::new();
        let ta = intern(&mut store, &a);
        let tb = intern(&mut store, &b);
        let tc = intern(&mut store, &c);
        let td = intern(&mut store, &d);
        let theta = store.mgu_terms(ta, tb);
        let delta = store.mgu_terms(tc, td);
        if let (Some(theta), Some(delta)) = (theta, delta) {
            let comp = store.compose(&theta, &delta);
            for t in [ta, tb, tc, td] {
                let staged = {
                    let mid = store.apply(&theta, t);
                    store.apply(&delta, mid)
                };
                prop_assert_eq!(store.apply(&comp, t), staged);
            }
        }
    }

    /// Instantiation can only deepen a term — the monotonicity that makes
    /// pruning on the depth bound sound.
    #[test]
    fn instantiation_never_shrinks_depth(a in term_strategy(), b in term_strategy()) {
        let mut store = TermStore::new();
        let ta = intern(&mut store, &a);
        let tb = intern(&mut store, &b);
        if let Some(sigma) = store.mgu_terms(ta, tb) {
            for t in [ta, tb] {
                let inst = store.apply(&sigma, t);
                prop_assert!(store.term_depth(inst) >= store.term_depth(t));
            }
        }
    }
}
