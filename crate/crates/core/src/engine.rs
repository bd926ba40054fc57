//! The anytime search loop.
//!
//! A *search call* ([`Search::search_once`]) repeats selection, expansion,
//! simulation and backpropagation until selection lands on a terminal node
//! (or the budget runs out), then recommends the best materialized leaf and
//! prunes it. [`Search::run`] keeps issuing search calls until the budget
//! or the search space is exhausted, so every returned configuration is new.
//!
//! One pass of the inner loop is an *iteration*: it performs exactly one
//! evaluation and one backpropagation.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::evaluator::{EvalError, RewardEvaluator};
use crate::grammar::{DerivationState, Grammar, PipelineConfig};
use crate::metrics::{IterationRecord, Recorder};
use crate::policy::{rng_stream, RngStream, SelectionPolicy};
use crate::tree::{NodeId, SearchTree, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("search space exhausted")]
    Exhausted,
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("evaluator: {0}")]
    Evaluator(#[from] EvalError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Inner-loop iterations (evaluations) across the whole run.
    Iterations(u64),
    /// Search calls, i.e. returned configurations.
    Searches(u64),
    /// Wall-clock seconds, evaluator time included.
    Seconds(f64),
}

impl Budget {
    fn check(&self) -> Result<(), EngineError> {
        match *self {
            Budget::Iterations(0) | Budget::Searches(0) => {
                Err(EngineError::InvalidBudget("limit must be positive".into()))
            }
            Budget::Seconds(s) if !(s > 0.0 && s.is_finite()) => {
                Err(EngineError::InvalidBudget(format!("{s} seconds")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct BudgetTracker {
    budget: Budget,
    iterations: u64,
    searches: u64,
    started: Instant,
}

impl BudgetTracker {
    fn new(budget: Budget) -> Self {
        BudgetTracker {
            budget,
            iterations: 0,
            searches: 0,
            started: Instant::now(),
        }
    }

    fn can_iterate(&self) -> bool {
        match self.budget {
            Budget::Iterations(n) => self.iterations < n,
            Budget::Searches(_) => true,
            Budget::Seconds(s) => self.started.elapsed().as_secs_f64() < s,
        }
    }

    fn can_search(&self) -> bool {
        match self.budget {
            Budget::Searches(n) => self.searches < n,
            _ => self.can_iterate(),
        }
    }
}

/// How algorithm time is measured.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Clock {
    /// Monotonic wall time, evaluator calls excluded.
    #[default]
    Wall,
    /// Fixed cost per action, for reproducible timing columns.
    Logical { seconds_per_action: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Index of the search call that returned this configuration.
    pub search: usize,
    pub config: PipelineConfig,
    pub reward: f64,
    /// Iterations spent inside this search call.
    pub iterations_used: u64,
    /// True when this was the last live configuration.
    pub exhausted: bool,
}

#[derive(Serialize)]
struct OutcomeLine<'a> {
    search: usize,
    key: &'a str,
    reward: f64,
    iterations: u64,
    exhausted: bool,
    config: Map<String, Value>,
}

impl SearchOutcome {
    /// One JSON object, no trailing newline.
    pub fn to_json_line(&self) -> String {
        let line = OutcomeLine {
            search: self.search,
            key: &self.config.canonical_key,
            reward: self.reward,
            iterations: self.iterations_used,
            exhausted: self.exhausted,
            config: self
                .config
                .structured
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect(),
        };
        serde_json::to_string(&line).expect("outcome serializes")
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcomes: Vec<SearchOutcome>,
    pub records: Vec<IterationRecord>,
    /// `(elapsed seconds, reward)` per evaluation.
    pub observations: Vec<(f64, f64)>,
    pub failures: Vec<String>,
    pub exhausted: bool,
    pub iterations: u64,
    /// Set when a fatal error stopped the run early.
    pub aborted: Option<EngineError>,
}

impl RunReport {
    pub fn best_reward(&self) -> Option<f64> {
        self.records.last().map(|r| r.best_so_far)
    }

    pub fn outcomes_jsonl(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&o.to_json_line());
            out.push('\n');
        }
        out
    }
}

/// Descends from the root by policy selection and stops at the first node
/// that is terminal, has an unexpanded slot, or has no live expanded child.
/// Returns the node and the number of edges descended.
pub fn selection(
    tree: &SearchTree,
    policy: &SelectionPolicy,
    rng: &mut RngStream,
) -> Result<(NodeId, u64), TreeError> {
    if tree.is_exhausted() {
        return Err(TreeError::Exhausted);
    }
    let mut id = tree.root();
    let mut descents = 0;
    loop {
        let node = tree.node(id);
        if node.is_terminal() || node.has_unexpanded() {
            return Ok((id, descents));
        }
        match policy.select(tree, id, rng) {
            Some(slot) => {
                id = node.children[slot].expect("policy returns expanded slots");
                descents += 1;
            }
            None => return Ok((id, descents)),
        }
    }
}

/// Completes the derivation at `id` with uniformly random alternatives.
/// Materialized descendants are followed while they exist, and pruned ones
/// are never entered; nothing new is materialized. Returns the complete
/// state and the number of steps taken.
pub fn simulation(
    tree: &SearchTree,
    id: NodeId,
    rng: &mut RngStream,
) -> Result<(DerivationState, u64), TreeError> {
    let mut steps = 0;
    let mut cur = id;
    loop {
        let node = tree.node(cur);
        if node.pruned {
            return Err(TreeError::Pruned);
        }
        if node.is_terminal() {
            return Ok((node.state.clone(), steps));
        }
        let open: Vec<usize> = node
            .children
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_none_or(|c| !tree.node(c).pruned))
            .map(|(slot, _)| slot)
            .collect();
        if open.is_empty() {
            return Err(TreeError::Exhausted);
        }
        let slot = open[rng.gen_range(0..open.len())];
        steps += 1;
        match node.children[slot] {
            Some(child) => cur = child,
            None => {
                let grammar = tree.grammar();
                let mut state = node.state.apply_rule(slot, grammar)?;
                loop {
                    let n = grammar.applicable_alternatives(&state);
                    if n == 0 {
                        return Ok((state, steps));
                    }
                    state.derive(rng.gen_range(0..n), grammar)?;
                    steps += 1;
                }
            }
        }
    }
}

pub struct Search<E> {
    tree: SearchTree,
    policy: SelectionPolicy,
    evaluator: E,
    rng: RngStream,
    budget: BudgetTracker,
    clock: Clock,
    recorder: Recorder,
    observations: Vec<(f64, f64)>,
    logical_elapsed: f64,
}

impl<E: RewardEvaluator> Search<E> {
    pub fn new(
        grammar: Arc<Grammar>,
        policy: SelectionPolicy,
        evaluator: E,
        budget: Budget,
        seed: u64,
    ) -> Result<Self, EngineError> {
        policy.validate().map_err(EngineError::Policy)?;
        budget.check()?;
        if !grammar.is_expanded() {
            return Err(EngineError::Tree(TreeError::Grammar(
                crate::grammar::GrammarError::NotExpanded,
            )));
        }
        Ok(Search {
            tree: SearchTree::new(grammar, policy.fresh_stats()),
            policy,
            evaluator,
            rng: rng_stream(seed),
            budget: BudgetTracker::new(budget),
            clock: Clock::Wall,
            recorder: Recorder::default(),
            observations: Vec::new(),
            logical_elapsed: 0.0,
        })
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn tree(&self) -> &SearchTree {
        &self.tree
    }

    pub fn policy(&self) -> &SelectionPolicy {
        &self.policy
    }

    pub fn evaluator(&self) -> &E {
        &self.evaluator
    }

    pub fn records(&self) -> &[IterationRecord] {
        self.recorder.records()
    }

    pub fn iterations_used(&self) -> u64 {
        self.budget.iterations
    }

    /// One search call. `Ok(None)` when the budget ran out before any leaf
    /// was materialized.
    pub fn search_once(&mut self) -> Result<Option<SearchOutcome>, EngineError> {
        if self.tree.is_exhausted() {
            return Err(EngineError::Exhausted);
        }
        if !self.budget.can_search() {
            return Err(EngineError::BudgetExhausted);
        }
        let search = self.budget.searches as usize;
        self.budget.searches += 1;
        let first_iteration = self.budget.iterations;

        loop {
            if !self.budget.can_iterate() || self.tree.is_exhausted() {
                break;
            }
            let started = Instant::now();
            let (selected, descents) = selection(&self.tree, &self.policy, &mut self.rng)?;
            let mut actions = descents;
            let node = self.tree.node(selected);
            let (target, state, terminal) = if node.is_terminal() {
                (selected, node.state.clone(), true)
            } else if node.has_unexpanded() {
                let child = self.tree.expand_child(selected)?;
                actions += 1;
                let (state, steps) = simulation(&self.tree, child, &mut self.rng)?;
                actions += steps;
                (child, state, false)
            } else {
                // Every expanded child is pruned and nothing is left to expand.
                self.tree.prune_dead_end(selected);
                continue;
            };
            let config = state.to_config().map_err(TreeError::from)?;
            let before_eval = started.elapsed();

            let reward = match self.evaluator.evaluate(&config) {
                Ok(r) if (0.0..=1.0).contains(&r) => r,
                Ok(r) => {
                    return Err(EngineError::Evaluator(EvalError::Protocol(format!(
                        "reward {r} outside [0, 1]"
                    ))))
                }
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => {
                    self.recorder
                        .record_failure(format!("{}: {e}", config.canonical_key));
                    0.0
                }
            };

            let resumed = Instant::now();
            if self.tree.node(target).is_terminal() {
                self.tree.node_mut(target).reward = Some(reward);
            }
            self.policy
                .backpropagate(&mut self.tree, target, reward, &mut self.rng);
            self.budget.iterations += 1;
            let algorithm_time = match self.clock {
                Clock::Wall => (before_eval + resumed.elapsed()).as_secs_f64(),
                Clock::Logical { seconds_per_action } => actions as f64 * seconds_per_action,
            };
            self.logical_elapsed += algorithm_time;
            let elapsed = match self.clock {
                Clock::Wall => self.budget.started.elapsed().as_secs_f64(),
                Clock::Logical { .. } => self.logical_elapsed,
            };
            self.recorder.record(
                search,
                algorithm_time,
                actions,
                &config.canonical_key,
                reward,
            );
            self.observations.push((elapsed, reward));
            if terminal {
                break;
            }
        }

        let leaf = match self.tree.best_leaf(&self.policy) {
            Ok(leaf) => leaf,
            Err(TreeError::Exhausted) if self.tree.is_exhausted() => {
                return Err(EngineError::Exhausted)
            }
            Err(TreeError::Exhausted) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        self.tree.prune_leaf(leaf)?;
        let node = self.tree.node(leaf);
        Ok(Some(SearchOutcome {
            search,
            config: node.state.to_config().map_err(TreeError::from)?,
            reward: node.reward.expect("materialized leaves are evaluated"),
            iterations_used: self.budget.iterations - first_iteration,
            exhausted: self.tree.is_exhausted(),
        }))
    }

    /// Issues search calls until the budget or the search space runs out.
    pub fn run(mut self) -> (RunReport, Self) {
        let mut outcomes = Vec::new();
        let mut aborted = None;
        loop {
            match self.search_once() {
                Ok(Some(outcome)) => {
                    let done = outcome.exhausted;
                    outcomes.push(outcome);
                    if done {
                        break;
                    }
                }
                Ok(None) | Err(EngineError::BudgetExhausted) | Err(EngineError::Exhausted) => break,
                Err(e) => {
                    aborted = Some(e);
                    break;
                }
            }
        }
        let report = RunReport {
            outcomes,
            records: self.recorder.records().to_vec(),
            observations: self.observations.clone(),
            failures: self.recorder.failures().to_vec(),
            exhausted: self.tree.is_exhausted(),
            iterations: self.budget.iterations,
            aborted,
        };
        (report, self)
    }
}

/// Convenience wrapper: builds a [`Search`] and runs it to completion.
pub fn run<E: RewardEvaluator>(
    grammar: Arc<Grammar>,
    policy: SelectionPolicy,
    evaluator: E,
    budget: Budget,
    seed: u64,
    clock: Clock,
) -> Result<RunReport, EngineError> {
    let search = Search::new(grammar, policy, evaluator, budget, seed)?.with_clock(clock);
    Ok(search.run().0)
}
