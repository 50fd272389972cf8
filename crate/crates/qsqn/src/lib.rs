//! Goal-directed query evaluation for Horn knowledge bases.
//!
//! This crate evaluates queries against definite logic programs with
//! function symbols over an extensional database of facts. Evaluation is
//! goal-directed and set-at-a-time: the program is compiled into a net of
//! nodes connected by edges ([`net`]), data flows through the net in bulk
//! ([`engine`]), and the order in which edges fire is left to a pluggable
//! control strategy ([`control`]). Termination with function symbols is
//! obtained by bounding the depth of the terms that may flow through the
//! net and increasing the bound iteratively until enough answers are found.
//!
//! The [`oracle`] module contains two deliberately independent reference
//! evaluators (depth-bounded SLD resolution and a ground fixpoint engine)
//! used by the test suite to cross-check the net evaluator.

pub mod control;
pub mod engine;
pub mod lang;
pub mod net;
pub mod oracle;
pub mod term;
