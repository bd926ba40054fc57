//! Grammar-guided Monte Carlo tree search for pipeline and hyperparameter
//! configuration search.
//!
//! A context-free grammar describes the configuration space: pipeline
//! structure, component choices and discretized hyperparameter values. Each
//! complete leftmost derivation is one configuration. [`engine::Search`]
//! explores the derivation tree with a pluggable [`policy::SelectionPolicy`]
//! (UCT, bootstrap Thompson sampling or a tree Parzen estimator), prunes
//! every configuration it returns, and records metrics for ablation tables
//! and anytime score curves.
//!
//! ```
//! use std::sync::Arc;
//! use cfg_mcts::engine::{run, Budget, Clock};
//! use cfg_mcts::evaluator::SyntheticEvaluator;
//! use cfg_mcts::grammar::Grammar;
//! use cfg_mcts::policy::SelectionPolicy;
//!
//! let grammar = Grammar::load(
//!     "PIPE := SCALE CLF\nSCALE := \"minmax\" | \"std\"\nCLF := \"svc\" C\nC := range(0.03125, 32768, log)",
//!     3,
//! )
//! .unwrap();
//! let report = run(
//!     Arc::new(grammar),
//!     SelectionPolicy::uct(0.7),
//!     SyntheticEvaluator::new(7),
//!     Budget::Iterations(200),
//!     42,
//!     Clock::Wall,
//! )
//! .unwrap();
//! assert!(report.exhausted);
//! assert_eq!(report.outcomes.len(), 6);
//! ```

pub mod cli;
pub mod engine;
pub mod evaluator;
pub mod grammar;
pub mod metrics;
pub mod policy;
pub mod tree;

/// The bundled demonstration grammar.
pub const DEMO_GRAMMAR: &str = include_str!("../grammars/demo.cfg");
