//! Lazily materialized production tree with pruning.
//!
//! Nodes live in an arena owned by [`SearchTree`] and are addressed by
//! [`NodeId`]. Child slots follow grammar alternative order; an empty slot
//! is an alternative that has not been expanded yet.

use std::fmt::Write as _;
use std::sync::Arc;

use num_bigint::BigUint;
use num_traits::Zero;
use thiserror::Error;

use crate::grammar::{DerivationState, Grammar, GrammarError};
use crate::policy::SelectionPolicy;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("node is fully expanded")]
    FullyExpanded,
    #[error("node is terminal")]
    Terminal,
    #[error("node is not terminal")]
    NotTerminal,
    #[error("node is pruned")]
    Pruned,
    #[error("search space exhausted")]
    Exhausted,
    #[error(transparent)]
    Grammar(#[from] GrammarError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Per-node statistics for the active selection policy.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyStats {
    Uct {
        reward_sum: f64,
        visits: u64,
    },
    /// One `(alpha, beta)` pair per bootstrap replicate.
    Bts {
        alpha: Vec<f64>,
        beta: Vec<f64>,
        visits: u64,
    },
    Tpe {
        rewards: Vec<f64>,
    },
}

impl PolicyStats {
    /// Number of backpropagations that passed through the node.
    pub fn visits(&self) -> u64 {
        match self {
            PolicyStats::Uct { visits, .. } | PolicyStats::Bts { visits, .. } => *visits,
            PolicyStats::Tpe { rewards } => rewards.len() as u64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchNode {
    pub state: DerivationState,
    pub parent: Option<NodeId>,
    /// Alternative index of this node in its parent.
    pub slot: usize,
    pub children: Vec<Option<NodeId>>,
    pub stats: PolicyStats,
    pub pruned: bool,
    /// Most recent reward observed for this (terminal) node.
    pub reward: Option<f64>,
}

impl SearchNode {
    pub fn is_terminal(&self) -> bool {
        self.children.is_empty()
    }

    pub fn has_unexpanded(&self) -> bool {
        self.children.iter().any(Option::is_none)
    }

    pub fn depth(&self) -> usize {
        self.state.trace().len()
    }
}

pub struct SearchTree {
    grammar: Arc<Grammar>,
    nodes: Vec<SearchNode>,
    fresh: PolicyStats,
}

impl SearchTree {
    /// Creates a tree holding only the root, with `fresh` as the initial
    /// statistics of every node.
    pub fn new(grammar: Arc<Grammar>, fresh: PolicyStats) -> Self {
        let state = DerivationState::start(&grammar);
        let root = SearchNode {
            children: vec![None; grammar.applicable_alternatives(&state)],
            state,
            parent: None,
            slot: 0,
            stats: fresh.clone(),
            pruned: false,
            reward: None,
        };
        SearchTree {
            grammar,
            nodes: vec![root],
            fresh,
        }
    }

    pub fn grammar(&self) -> &Arc<Grammar> {
        &self.grammar
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &SearchNode {
        &self.nodes[id.index()]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut SearchNode {
        &mut self.nodes[id.index()]
    }

    pub fn is_exhausted(&self) -> bool {
        self.nodes[0].pruned
    }

    /// Expanded, unpruned children as `(slot, id)` pairs in slot order.
    pub fn live_children(&self, id: NodeId) -> impl Iterator<Item = (usize, NodeId)> + '_ {
        self.nodes[id.index()]
            .children
            .iter()
            .enumerate()
            .filter_map(|(slot, c)| c.map(|c| (slot, c)))
            .filter(|(_, c)| !self.nodes[c.index()].pruned)
    }

    /// Path from `id` up to and including the root.
    pub fn ancestors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::successors(Some(id), |n| self.nodes[n.index()].parent)
    }

    /// Materializes the lowest-index unexpanded child slot of `id`.
    pub fn expand_child(&mut self, id: NodeId) -> Result<NodeId, TreeError> {
        let node = &self.nodes[id.index()];
        if node.pruned {
            return Err(TreeError::Pruned);
        }
        if node.is_terminal() {
            return Err(TreeError::Terminal);
        }
        let slot = node
            .children
            .iter()
            .position(Option::is_none)
            .ok_or(TreeError::FullyExpanded)?;
        let state = node.state.apply_rule(slot, &self.grammar)?;
        let child = NodeId(self.nodes.len() as u32);
        self.nodes.push(SearchNode {
            children: vec![None; self.grammar.applicable_alternatives(&state)],
            state,
            parent: Some(id),
            slot,
            stats: self.fresh.clone(),
            pruned: false,
            reward: None,
        });
        self.nodes[id.index()].children[slot] = Some(child);
        Ok(child)
    }

    /// Prunes a terminal node and cascades to every ancestor whose slots
    /// are all expanded and pruned. Pruning twice is a no-op.
    pub fn prune_leaf(&mut self, leaf: NodeId) -> Result<(), TreeError> {
        if !self.nodes[leaf.index()].is_terminal() {
            return Err(TreeError::NotTerminal);
        }
        self.prune(leaf);
        Ok(())
    }

    /// Prunes an internal node that can no longer reach a live leaf.
    pub(crate) fn prune_dead_end(&mut self, id: NodeId) {
        self.prune(id);
    }

    fn prune(&mut self, id: NodeId) {
        if self.nodes[id.index()].pruned {
            return;
        }
        self.nodes[id.index()].pruned = true;
        let mut cur = self.nodes[id.index()].parent;
        while let Some(p) = cur {
            let node = &self.nodes[p.index()];
            let exhausted = node
                .children
                .iter()
                .all(|c| c.is_some_and(|c| self.nodes[c.index()].pruned));
            if !exhausted || node.pruned {
                break;
            }
            self.nodes[p.index()].pruned = true;
            cur = self.nodes[p.index()].parent;
        }
    }

    /// Greedy descent from the root to a materialized live terminal.
    ///
    /// Children are tried in decreasing greedy value (ties: lowest slot);
    /// when a branch holds no materialized live terminal the next-ranked
    /// sibling is tried.
    pub fn best_leaf(&self, policy: &SelectionPolicy) -> Result<NodeId, TreeError> {
        if self.is_exhausted() {
            return Err(TreeError::Exhausted);
        }
        self.best_leaf_from(NodeId::ROOT, policy)
            .ok_or(TreeError::Exhausted)
    }

    fn best_leaf_from(&self, id: NodeId, policy: &SelectionPolicy) -> Option<NodeId> {
        if self.nodes[id.index()].is_terminal() {
            return Some(id);
        }
        let mut ranked: Vec<(f64, usize, NodeId)> = self
            .live_children(id)
            .map(|(slot, c)| (policy.greedy_value(&self.nodes[c.index()].stats), slot, c))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked
            .into_iter()
            .find_map(|(_, _, c)| self.best_leaf_from(c, policy))
    }

    /// Number of complete derivations not yet pruned, counting unexpanded
    /// slots by the grammar's production count.
    pub fn live_leaf_count(&self) -> BigUint {
        self.live_below(NodeId::ROOT)
    }

    fn live_below(&self, id: NodeId) -> BigUint {
        let node = &self.nodes[id.index()];
        if node.pruned {
            return BigUint::zero();
        }
        if node.is_terminal() {
            return BigUint::from(1u32);
        }
        let mut total = BigUint::zero();
        for (slot, child) in node.children.iter().enumerate() {
            total += match child {
                Some(c) => self.live_below(*c),
                None => {
                    let state = node
                        .state
                        .apply_rule(slot, &self.grammar)
                        .expect("slot within alternatives");
                    self.grammar
                        .count_completions(&state)
                        .expect("tree grammars are expanded")
                }
            };
        }
        total
    }

    /// Indented text dump, one materialized node per line:
    /// `<depth*2 spaces><label> visits=<n> value=<v> [pruned]`.
    pub fn dump(&self, policy: &SelectionPolicy) -> String {
        let mut out = String::new();
        let mut stack = vec![(NodeId::ROOT, 0usize)];
        while let Some((id, depth)) = stack.pop() {
            let node = &self.nodes[id.index()];
            let label = match node.parent {
                None => self.grammar.start().to_string(),
                Some(p) => {
                    let lhs = self.nodes[p.index()]
                        .state
                        .leftmost_nonterminal()
                        .expect("parent is not terminal");
                    let rhs = self
                        .grammar
                        .rule(lhs.name())
                        .and_then(|r| r.sequence(node.slot))
                        .unwrap_or(&[]);
                    rhs.iter()
                        .map(ToString::to_string)
                        .collect::<Vec<_>>()
                        .join(" ")
                }
            };
            let _ = write!(
                out,
                "{:indent$}{label} visits={} value={}",
                "",
                node.stats.visits(),
                policy.greedy_value(&node.stats),
                indent = depth * 2
            );
            if node.pruned {
                out.push_str(" [pruned]");
            }
            out.push('\n');
            for child in node.children.iter().rev().flatten() {
                stack.push((*child, depth + 1));
            }
        }
        out
    }
}
