//! Language front end: programs, extensional databases and queries.
//!
//! The concrete syntax follows logic-programming convention:
//!
//! * identifiers starting with a lowercase letter are constants, functors
//!   and predicate names; identifiers starting with an uppercase letter or
//!   `_` are variables (a bare `_` is anonymous — fresh at every occurrence);
//! * integer literals are constants;
//! * clauses are `head :- b1, ..., bn.` or `head.`; an extensional database
//!   file contains only facts;
//! * query files contain `?- formula.` where the formula combines atoms
//!   with `&` (and, binds tighter), `|` (or) and parentheses;
//! * `%` starts a line comment;
//! * `#extensional p/2.` and `#intensional p/2.` declare a predicate's kind
//!   explicitly (needed for predicates that have no clauses and no facts).
//!
//! Predicates are classified automatically: anything that appears in a
//! clause head is intensional, everything else extensional; declarations
//! override for otherwise-unmentioned predicates and conflicts are errors.
//! Variable names `_G<n>` and `_O<n>` are reserved for generated variables
//! and rejected by the parser, as is the generated predicate prefix `_q<n>`
//! (unspellable anyway, since `_q0` lexes as a variable).
//!
//! Queries of arbitrary positive shape are normalized to a pair of an
//! extended program and a single goal atom `q(x1,...,xk)` whose arguments
//! are the distinct free variables of the formula ([`KnowledgeBase::normalize_query`]).

use std::collections::HashMap;
use std::fmt;

use crate::term::{is_reserved_var_name, Atom, PredId, Subst, TermId, TermStore, Tuple, VarId};

/// Predicate kind: extensional (facts only) or intensional (defined by
/// clauses).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PredKind {
    Edb,
    Idb,
}

#[derive(Clone, Debug)]
struct PredInfo {
    name: String,
    arity: usize,
    kind: PredKind,
}

/// Table of predicate symbols with fixed arity and kind.
#[derive(Clone, Debug, Default)]
pub struct PredTable {
    infos: Vec<PredInfo>,
    by_name: HashMap<String, PredId>,
}

impl PredTable {
    pub fn len(&self) -> usize {
        self.infos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infos.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = PredId> {
        (0..self.infos.len() as u32).map(PredId)
    }

    pub fn id(&self, name: &str) -> Option<PredId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, p: PredId) -> &str {
        &self.infos[p.0 as usize].name
    }

    pub fn arity(&self, p: PredId) -> usize {
        self.infos[p.0 as usize].arity
    }

    pub fn kind(&self, p: PredId) -> PredKind {
        self.infos[p.0 as usize].kind
    }

    pub fn is_idb(&self, p: PredId) -> bool {
        self.kind(p) == PredKind::Idb
    }

    /// Interns `name/arity`; re-use with a different arity is an error.
    /// New predicates start extensional; classification may flip them later.
    fn intern(&mut self, name: &str, arity: usize, at: Pos) -> Result<PredId, FrontendError> {
        if let Some(&p) = self.by_name.get(name) {
            let have = self.infos[p.0 as usize].arity;
            if have != arity {
                return Err(FrontendError::ArityConflict {
                    pred: name.to_string(),
                    expected: have,
                    found: arity,
                    line: at.line,
                    col: at.col,
                });
            }
            return Ok(p);
        }
        let p = PredId(self.infos.len() as u32);
        self.infos.push(PredInfo {
            name: name.to_string(),
            arity,
            kind: PredKind::Edb,
        });
        self.by_name.insert(name.to_string(), p);
        Ok(p)
    }

    fn set_kind(&mut self, p: PredId, kind: PredKind) {
        self.infos[p.0 as usize].kind = kind;
    }

    /// A brand-new intensional predicate `_q<n>` (the prefix cannot be
    /// written in source, so only earlier generated predicates can clash).
    pub fn fresh_pred(&mut self, arity: usize) -> PredId {
        let mut n = 0usize;
        loop {
            let name = format!("_q{n}");
            if !self.by_name.contains_key(&name) {
                let p = PredId(self.infos.len() as u32);
                self.infos.push(PredInfo {
                    name,
                    arity,
                    kind: PredKind::Idb,
                });
                self.by_name.insert(format!("_q{n}"), p);
                return p;
            }
            n += 1;
        }
    }

    pub fn atom_to_string(&self, store: &TermStore, a: &Atom) -> String {
        self.atom_to_string_with(store, a, &HashMap::new())
    }

    pub fn atom_to_string_with(
        &self,
        store: &TermStore,
        a: &Atom,
        names: &HashMap<VarId, String>,
    ) -> String {
        if a.args.is_empty() {
            self.name(a.pred).to_string()
        } else {
            let tuple = store.tuple_to_string_with(&a.args, names);
            format!("{}{}", self.name(a.pred), tuple)
        }
    }
}

/// A definite clause `head :- body.` (a fact when the body is empty).
#[derive(Clone, Debug)]
pub struct Clause {
    pub head: Atom,
    pub body: Vec<Atom>,
}

/// An ordered list of clauses. Order matters: the depth-first control
/// strategy prefers clauses in source order.
#[derive(Clone, Debug, Default)]
pub struct Program {
    pub clauses: Vec<Clause>,
}

impl Program {
    pub fn clause_to_string(&self, store: &TermStore, preds: &PredTable, i: usize) -> String {
        let c = &self.clauses[i];
        let head = preds.atom_to_string(store, &c.head);
        if c.body.is_empty() {
            format!("{head}.")
        } else {
            let body: Vec<String> = c.body.iter().map(|a| preds.atom_to_string(store, a)).collect();
            format!("{} :- {}.", head, body.join(", "))
        }
    }

    pub fn to_text(&self, store: &TermStore, preds: &PredTable) -> String {
        (0..self.clauses.len())
            .map(|i| self.clause_to_string(store, preds, i))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// The extensional database: one set of generalized tuples per extensional
/// predicate. Tuples may contain variables and compound terms; exact
/// syntactic duplicates are dropped, insertion order is kept.
#[derive(Clone, Debug, Default)]
pub struct EdbInstance {
    relations: HashMap<PredId, Vec<Tuple>>,
    seen: HashMap<PredId, std::collections::HashSet<Tuple>>,
}

impl EdbInstance {
    pub fn tuples(&self, p: PredId) -> &[Tuple] {
        self.relations.get(&p).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn preds(&self) -> impl Iterator<Item = PredId> + '_ {
        self.relations.keys().copied()
    }

    pub fn total_tuples(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    pub fn insert(&mut self, p: PredId, t: Tuple) {
        if self.seen.entry(p).or_default().insert(t.clone()) {
            self.relations.entry(p).or_default().push(t);
        }
    }
}

/// A positive quantifier-free query formula.
#[derive(Clone, Debug)]
pub enum QueryFormula {
    Atom(Atom),
    And(Vec<QueryFormula>),
    Or(Vec<QueryFormula>),
}

/// A parsed query: the formula plus its free variables in first-occurrence
/// order (the answer tuple shape).
#[derive(Clone, Debug)]
pub struct Query {
    pub formula: QueryFormula,
    pub free_vars: Vec<VarId>,
}

/// Errors from parsing and loading.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrontendError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: u32, col: u32, msg: String },
    #[error("arity conflict at {line}:{col}: predicate {pred} has arity {expected}, used with {found}")]
    ArityConflict {
        pred: String,
        expected: usize,
        found: usize,
        line: u32,
        col: u32,
    },
    #[error("predicate {pred} is extensional (has facts or a declaration) but appears in a clause head")]
    ExtensionalHead { pred: String },
    #[error("predicate {pred} is declared intensional but has facts")]
    IntensionalFact { pred: String },
    #[error("unknown predicate {pred} at {line}:{col}")]
    UnknownPredicate { pred: String, line: u32, col: u32 },
    #[error("csv {name}: {msg}")]
    Csv { name: String, msg: String },
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
struct Pos {
    line: u32,
    col: u32,
}

#[derive(Clone, PartialEq, Eq, Debug)]
enum Tok {
    /// Lowercase identifier or integer literal: constant / functor /
    /// predicate name.
    Name(String),
    /// Uppercase or `_`-initial identifier.
    Var(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Rule,   // :-
    Query,  // ?-
    And,    // &
    Or,     // |
    Hash,   // #
    Slash,  // /
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Name(s) => write!(f, "`{s}`"),
            Tok::Var(s) => write!(f, "variable `{s}`"),
            Tok::LParen => write!(f, "`(`"),
            Tok::RParen => write!(f, "`)`"),
            Tok::Comma => write!(f, "`,`"),
            Tok::Dot => write!(f, "`.`"),
            Tok::Rule => write!(f, "`:-`"),
            Tok::Query => write!(f, "`?-`"),
            Tok::And => write!(f, "`&`"),
            Tok::Or => write!(f, "`|`"),
            Tok::Hash => write!(f, "`#`"),
            Tok::Slash => write!(f, "`/`"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, Pos)>, FrontendError> {
    let mut toks = Vec::new();
    let mut line: u32 = 1;
    let mut col: u32 = 1;
    let mut chars = text.chars().peekable();
    macro_rules! bump {
        () => {{
            let c = chars.next();
            if c == Some('\n') {
                line += 1;
                col = 1;
            } else if c.is_some() {
                col += 1;
            }
            c
        }};
    }
    loop {
        let pos = Pos { line, col };
        let c = match chars.peek().copied() {
            None => {
                toks.push((Tok::Eof, pos));
                return Ok(toks);
            }
            Some(c) => c,
        };
        match c {
            ' ' | '\t' | '\r' | '\n' => {
                bump!();
            }
            '%' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    bump!();
                }
            }
            '(' => {
                bump!();
                toks.push((Tok::LParen, pos));
            }
            ')' => {
                bump!();
                toks.push((Tok::RParen, pos));
            }
            ',' => {
                bump!();
                toks.push((Tok::Comma, pos));
            }
            '.' => {
                bump!();
                toks.push((Tok::Dot, pos));
            }
            '&' => {
                bump!();
                toks.push((Tok::And, pos));
            }
            '|' => {
                bump!();
                toks.push((Tok::Or, pos));
            }
            '#' => {
                bump!();
                toks.push((Tok::Hash, pos));
            }
            '/' => {
                bump!();
                toks.push((Tok::Slash, pos));
            }
            ':' => {
                bump!();
                if chars.peek() == Some(&'-') {
                    bump!();
                    toks.push((Tok::Rule, pos));
                } else {
                    return Err(syntax(pos, "expected `:-`".into()));
                }
            }
            '?' => {
                bump!();
                if chars.peek() == Some(&'-') {
                    bump!();
                    toks.push((Tok::Query, pos));
                } else {
                    return Err(syntax(pos, "expected `?-`".into()));
                }
            }
            c if c.is_ascii_digit() => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_digit() {
                        s.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                toks.push((Tok::Name(s), pos));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' {
                        s.push(c);
                        bump!();
                    } else {
                        break;
                    }
                }
                let first = s.chars().next().unwrap();
                if first.is_ascii_uppercase() || first == '_' {
                    if is_reserved_var_name(&s) {
                        return Err(syntax(
                            pos,
                            format!("variable name `{s}` is reserved for generated variables"),
                        ));
                    }
                    toks.push((Tok::Var(s), pos));
                } else {
                    toks.push((Tok::Name(s), pos));
                }
            }
            other => {
                return Err(syntax(pos, format!("unexpected character `{other}`")));
            }
        }
    }
}

fn syntax(pos: Pos, msg: String) -> FrontendError {
    FrontendError::Syntax {
        line: pos.line,
        col: pos.col,
        msg,
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser<'a> {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    store: &'a mut TermStore,
    preds: &'a mut PredTable,
}

impl<'a> Parser<'a> {
    fn new(
        text: &str,
        store: &'a mut TermStore,
        preds: &'a mut PredTable,
    ) -> Result<Self, FrontendError> {
        Ok(Parser {
            toks: lex(text)?,
            at: 0,
            store,
            preds,
        })
    }

    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn next(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok) -> Result<Pos, FrontendError> {
        let pos = self.pos();
        let (got, _) = self.next();
        if &got == want {
            Ok(pos)
        } else {
            Err(syntax(pos, format!("expected {want}, found {got}")))
        }
    }

    fn at_eof(&self) -> bool {
        matches!(self.peek(), Tok::Eof)
    }

    fn term(&mut self) -> Result<TermId, FrontendError> {
        let pos = self.pos();
        match self.next().0 {
            Tok::Var(name) => {
                if name == "_" {
                    Ok(self.store.anon_var())
                } else {
                    Ok(self.store.var_named(&name))
                }
            }
            Tok::Name(name) => {
                if matches!(self.peek(), Tok::LParen) {
                    self.next();
                    let args = self.term_list()?;
                    self.expect(&Tok::RParen)?;
                    let f = self.store.symbol(&name);
                    Ok(self.store.app(f, args))
                } else {
                    Ok(self.store.constant(&name))
                }
            }
            got => Err(syntax(pos, format!("expected a term, found {got}"))),
        }
    }

    fn term_list(&mut self) -> Result<Vec<TermId>, FrontendError> {
        let mut out = vec![self.term()?];
        while matches!(self.peek(), Tok::Comma) {
            self.next();
            out.push(self.term()?);
        }
        Ok(out)
    }

    /// `p`, `p(t1,...,tn)`. `known_only` makes unknown predicates an error
    /// (used for queries, which cannot introduce predicates).
    fn atom(&mut self, known_only: bool) -> Result<Atom, FrontendError> {
        let pos = self.pos();
        let name = match self.next().0 {
            Tok::Name(n) => n,
            got => return Err(syntax(pos, format!("expected a predicate name, found {got}"))),
        };
        let args = if matches!(self.peek(), Tok::LParen) {
            self.next();
            let args = self.term_list()?;
            self.expect(&Tok::RParen)?;
            args
        } else {
            Vec::new()
        };
        if known_only && self.preds.id(&name).is_none() {
            return Err(FrontendError::UnknownPredicate {
                pred: name,
                line: pos.line,
                col: pos.col,
            });
        }
        let pred = self.preds.intern(&name, args.len(), pos)?;
        Ok(Atom { pred, args })
    }

    /// `#extensional p/2.` or `#intensional p/2.`
    fn directive(&mut self) -> Result<(String, PredId), FrontendError> {
        self.expect(&Tok::Hash)?;
        let pos = self.pos();
        let word = match self.next().0 {
            Tok::Name(n) => n,
            got => return Err(syntax(pos, format!("expected a directive name, found {got}"))),
        };
        if word != "extensional" && word != "intensional" {
            return Err(syntax(pos, format!("unknown directive `#{word}`")));
        }
        let ppos = self.pos();
        let name = match self.next().0 {
            Tok::Name(n) => n,
            got => return Err(syntax(ppos, format!("expected a predicate name, found {got}"))),
        };
        self.expect(&Tok::Slash)?;
        let apos = self.pos();
        let arity: usize = match self.next().0 {
            Tok::Name(n) => n
                .parse()
                .map_err(|_| syntax(apos, format!("expected an arity number, found `{n}`")))?,
            got => return Err(syntax(apos, format!("expected an arity number, found {got}"))),
        };
        self.expect(&Tok::Dot)?;
        let p = self.preds.intern(&name, arity, ppos)?;
        Ok((word, p))
    }

    fn formula(&mut self) -> Result<QueryFormula, FrontendError> {
        let mut parts = vec![self.formula_and()?];
        while matches!(self.peek(), Tok::Or) {
            self.next();
            parts.push(self.formula_and()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            QueryFormula::Or(parts)
        })
    }

    fn formula_and(&mut self) -> Result<QueryFormula, FrontendError> {
        let mut parts = vec![self.formula_primary()?];
        while matches!(self.peek(), Tok::And) {
            self.next();
            parts.push(self.formula_primary()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            QueryFormula::And(parts)
        })
    }

    fn formula_primary(&mut self) -> Result<QueryFormula, FrontendError> {
        if matches!(self.peek(), Tok::LParen) {
            self.next();
            let f = self.formula()?;
            self.expect(&Tok::RParen)?;
            Ok(f)
        } else {
            Ok(QueryFormula::Atom(self.atom(true)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

/// Declared kinds gathered while parsing, resolved in [`KbBuilder::finish`].
#[derive(Clone, Debug, Default)]
struct PendingDecls {
    extensional: Vec<PredId>,
    intensional: Vec<PredId>,
}

/// Incremental loader for programs, EDB files and CSV relations.
#[derive(Debug, Default)]
pub struct KbBuilder {
    store: TermStore,
    preds: PredTable,
    program: Program,
    edb: EdbInstance,
    decls: PendingDecls,
}

impl KbBuilder {
    pub fn new() -> Self {
        KbBuilder::default()
    }

    /// Parses program text: clauses and directives.
    pub fn add_program_text(&mut self, text: &str) -> Result<&mut Self, FrontendError> {
        let mut p = Parser::new(text, &mut self.store, &mut self.preds)?;
        while !p.at_eof() {
            if matches!(p.peek(), Tok::Hash) {
                let (word, pred) = p.directive()?;
                Self::note_decl(&mut self.decls, &word, pred);
                continue;
            }
            let head = p.atom(false)?;
            let mut body = Vec::new();
            if matches!(p.peek(), Tok::Rule) {
                p.next();
                body.push(p.atom(false)?);
                while matches!(p.peek(), Tok::Comma) {
                    p.next();
                    body.push(p.atom(false)?);
                }
            }
            p.expect(&Tok::Dot)?;
            self.program.clauses.push(Clause { head, body });
        }
        Ok(self)
    }

    /// Parses EDB text: facts and directives only.
    pub fn add_edb_text(&mut self, text: &str) -> Result<&mut Self, FrontendError> {
        let mut p = Parser::new(text, &mut self.store, &mut self.preds)?;
        while !p.at_eof() {
            if matches!(p.peek(), Tok::Hash) {
                let (word, pred) = p.directive()?;
                Self::note_decl(&mut self.decls, &word, pred);
                continue;
            }
            let pos = p.pos();
            let fact = p.atom(false)?;
            if matches!(p.peek(), Tok::Rule) {
                return Err(syntax(p.pos(), "rules are not allowed in EDB input".into()));
            }
            let _ = pos;
            p.expect(&Tok::Dot)?;
            self.edb.insert(fact.pred, fact.args);
        }
        Ok(self)
    }

    /// Loads a relation from CSV text: one tuple of constants per row, no
    /// header. Cells are taken verbatim (after trimming) as constant names.
    pub fn add_csv(&mut self, pred_name: &str, data: &str) -> Result<&mut Self, FrontendError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(data.as_bytes());
        let err = |msg: String| FrontendError::Csv {
            name: pred_name.to_string(),
            msg,
        };
        let mut pred: Option<PredId> = self.preds.id(pred_name);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| err(format!("row {}: {e}", row + 1)))?;
            if rec.len() == 1 && rec.get(0) == Some("") {
                continue; // blank line
            }
            let arity = rec.len();
            let p = match pred {
                Some(p) => p,
                None => {
                    let p = self
                        .preds
                        .intern(pred_name, arity, Pos { line: 0, col: 0 })?;
                    pred = Some(p);
                    p
                }
            };
            if self.preds.arity(p) != arity {
                return Err(err(format!(
                    "row {}: arity {} does not match {}/{}",
                    row + 1,
                    arity,
                    pred_name,
                    self.preds.arity(p)
                )));
            }
            let mut tuple = Tuple::with_capacity(arity);
            for cell in rec.iter() {
                if cell.is_empty() {
                    return Err(err(format!("row {}: empty cell", row + 1)));
                }
                tuple.push(self.store.constant(cell));
            }
            self.edb.insert(p, tuple);
        }
        Ok(self)
    }

    fn note_decl(decls: &mut PendingDecls, word: &str, pred: PredId) {
        match word {
            "extensional" => decls.extensional.push(pred),
            _ => decls.intensional.push(pred),
        }
    }

    /// Classifies predicates and produces the finished knowledge base.
    ///
    /// Classification: clause-head predicates are intensional; `#intensional`
    /// declarations add to that set; everything else is extensional. A
    /// predicate may not both have facts (or an `#extensional` declaration)
    /// and occur in a clause head, and a declared-intensional predicate may
    /// not have facts.
    pub fn finish(mut self) -> Result<KnowledgeBase, FrontendError> {
        let mut intensional = std::collections::HashSet::new();
        for c in &self.program.clauses {
            intensional.insert(c.head.pred);
        }
        for &p in &self.decls.intensional {
            intensional.insert(p);
        }
        for &p in &self.decls.extensional {
            if intensional.contains(&p) {
                return Err(FrontendError::ExtensionalHead {
                    pred: self.preds.name(p).to_string(),
                });
            }
        }
        for p in self.edb.preds() {
            if intensional.contains(&p) {
                let name = self.preds.name(p).to_string();
                return Err(if self.decls.intensional.contains(&p) {
                    FrontendError::IntensionalFact { pred: name }
                } else {
                    FrontendError::ExtensionalHead { pred: name }
                });
            }
        }
        for p in self.preds.iter().collect::<Vec<_>>() {
            let kind = if intensional.contains(&p) {
                PredKind::Idb
            } else {
                PredKind::Edb
            };
            self.preds.set_kind(p, kind);
        }
        Ok(KnowledgeBase {
            store: self.store,
            preds: self.preds,
            program: self.program,
            edb: self.edb,
        })
    }
}

/// A parsed, classified knowledge base: term store, predicate table,
/// program and extensional instance.
#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    pub store: TermStore,
    pub preds: PredTable,
    pub program: Program,
    pub edb: EdbInstance,
}

impl KnowledgeBase {
    /// One-call builder for the common case of one program text and any
    /// number of EDB texts.
    pub fn parse(program: &str, edbs: &[&str]) -> Result<Self, FrontendError> {
        let mut b = KbBuilder::new();
        b.add_program_text(program)?;
        for e in edbs {
            b.add_edb_text(e)?;
        }
        b.finish()
    }

    /// Parses `?- formula.` (the `?-` may be omitted). All predicates must
    /// already be known.
    pub fn parse_query(&mut self, text: &str) -> Result<Query, FrontendError> {
        let mut p = Parser::new(text, &mut self.store, &mut self.preds)?;
        if matches!(p.peek(), Tok::Query) {
            p.next();
        }
        let formula = p.formula()?;
        p.expect(&Tok::Dot)?;
        if !p.at_eof() {
            return Err(syntax(p.pos(), "trailing input after query".into()));
        }
        let free_vars = self.formula_vars(&formula);
        Ok(Query { formula, free_vars })
    }

    fn formula_vars(&self, f: &QueryFormula) -> Vec<VarId> {
        let mut args = Vec::new();
        collect_formula_args(f, &mut args);
        self.store.vars_in_order(&args)
    }

    /// Normalizes a query to a single goal atom `q(x̄)` over the (possibly
    /// extended) program, where x̄ are the free variables of the formula in
    /// first-occurrence order.
    ///
    /// A query that is already a single atom of an intensional predicate
    /// with pairwise-distinct variable arguments is returned unchanged.
    /// Everything else gets fresh intensional predicates, introduced
    /// bottom-up: one defining clause per conjunction (body = the
    /// conjuncts) and one clause per disjunct of a disjunction. The answer
    /// relation of the returned goal then coincides with the satisfiers of
    /// the formula projected on x̄.
    pub fn normalize_query(&mut self, q: &Query) -> Atom {
        if let QueryFormula::Atom(a) = &q.formula {
            if self.is_proper_goal(a) {
                return a.clone();
            }
        }
        let atom = self.norm_formula(&q.formula);
        if self.is_proper_goal(&atom) {
            return atom;
        }
        // A single improper atom (constants, repeated variables, or an
        // extensional predicate): wrap it once.
        let args: Vec<TermId> = q.free_vars.iter().map(|&v| self.store.var_term(v)).collect();
        let head_pred = self.preds.fresh_pred(args.len());
        let head = Atom {
            pred: head_pred,
            args,
        };
        self.program.clauses.push(Clause {
            head: head.clone(),
            body: vec![atom],
        });
        head
    }

    fn is_proper_goal(&self, a: &Atom) -> bool {
        if !self.preds.is_idb(a.pred) {
            return false;
        }
        let mut seen = std::collections::HashSet::new();
        a.args
            .iter()
            .all(|&t| matches!(self.store.as_var(t), Some(v) if seen.insert(v)))
    }

    fn norm_formula(&mut self, f: &QueryFormula) -> Atom {
        match f {
            QueryFormula::Atom(a) => a.clone(),
            QueryFormula::And(parts) => {
                let body: Vec<Atom> = parts.iter().map(|p| self.norm_formula(p)).collect();
                let head = self.fresh_head(f);
                self.program.clauses.push(Clause {
                    head: head.clone(),
                    body,
                });
                head
            }
            QueryFormula::Or(parts) => {
                let branches: Vec<Atom> = parts.iter().map(|p| self.norm_formula(p)).collect();
                let head = self.fresh_head(f);
                for b in branches {
                    self.program.clauses.push(Clause {
                        head: head.clone(),
                        body: vec![b],
                    });
                }
                head
            }
        }
    }

    fn fresh_head(&mut self, f: &QueryFormula) -> Atom {
        let vars = self.formula_vars_of(f);
        let args: Vec<TermId> = vars.iter().map(|&v| self.store.var_term(v)).collect();
        let pred = self.preds.fresh_pred(args.len());
        Atom { pred, args }
    }

    fn formula_vars_of(&self, f: &QueryFormula) -> Vec<VarId> {
        let mut args = Vec::new();
        collect_formula_args(f, &mut args);
        self.store.vars_in_order(&args)
    }

    /// Clause indices whose head predicate is `p`, in source order.
    pub fn clauses_of(&self, p: PredId) -> Vec<usize> {
        self.program
            .clauses
            .iter()
            .enumerate()
            .filter(|(_, c)| c.head.pred == p)
            .map(|(i, _)| i)
            .collect()
    }

    /// Renders an answer tuple for display, canonicalizing variable names.
    pub fn answer_to_string(&self, t: &[TermId]) -> String {
        let names = self.store.canonical_display_names(t);
        self.store.tuple_to_string_with(t, &names)
    }
}

fn collect_formula_args(f: &QueryFormula, out: &mut Vec<TermId>) {
    match f {
        QueryFormula::Atom(a) => out.extend(a.args.iter().copied()),
        QueryFormula::And(parts) | QueryFormula::Or(parts) => {
            for p in parts {
                collect_formula_args(p, out);
            }
        }
    }
}

/// Convenience used by tests and substitution-aware printing: renders a
/// subquery pair `(t̄, δ)`.
pub fn subquery_to_string(store: &TermStore, preds: &PredTable, t: &[TermId], d: &Subst) -> String {
    let _ = preds;
    format!("({}, {})", store.tuple_to_string(t), store.subst_to_string(d))
}
