//! Selection and backpropagation policies: UCT, bootstrap Thompson
//! sampling (BTS) and a tree Parzen estimator (TPE).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tree::{NodeId, PolicyStats, SearchTree};

/// Seeded generator owned by one search run. ChaCha8 output is identical
/// across platforms for a given seed.
pub type RngStream = ChaCha8Rng;

pub fn rng_stream(seed: u64) -> RngStream {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Which logarithm sits in the UCT exploration term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BonusForm {
    /// `sqrt(ln(visits(node)) / visits(parent))`
    #[default]
    NodeLog,
    /// `sqrt(ln(visits(parent)) / visits(node))`
    ParentLog,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectionPolicy {
    Uct {
        c: f64,
        form: BonusForm,
    },
    Bts {
        replicates: usize,
        alpha0: f64,
        beta0: f64,
    },
    Tpe {
        /// Quantile in (0, 1).
        gamma: f64,
        smoothing: f64,
    },
}

impl SelectionPolicy {
    pub fn uct(c: f64) -> Self {
        SelectionPolicy::Uct {
            c,
            form: BonusForm::NodeLog,
        }
    }

    pub fn bts(replicates: usize) -> Self {
        SelectionPolicy::Bts {
            replicates,
            alpha0: 1.0,
            beta0: 1.0,
        }
    }

    pub fn tpe(gamma: f64) -> Self {
        SelectionPolicy::Tpe {
            gamma,
            smoothing: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionPolicy::Uct { .. } => "uct",
            SelectionPolicy::Bts { .. } => "bts",
            SelectionPolicy::Tpe { .. } => "tpe",
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            SelectionPolicy::Uct { c, .. } if !(c >= 0.0 && c.is_finite()) => Err(format!(
                "UCT constant must be a non-negative number, got {c}"
            )),
            SelectionPolicy::Bts { replicates: 0, .. } => {
                Err("BTS needs at least one replicate".into())
            }
            SelectionPolicy::Bts { alpha0, beta0, .. } if !(alpha0 >= 0.0 && beta0 > 0.0) => Err(
                format!("BTS priors must satisfy alpha0 >= 0, beta0 > 0 (got {alpha0}, {beta0})"),
            ),
            SelectionPolicy::Tpe { gamma, .. } if !(gamma > 0.0 && gamma < 1.0) => {
                Err(format!("TPE gamma must lie in (0, 1), got {gamma}"))
            }
            SelectionPolicy::Tpe { smoothing, .. }
                if !(smoothing > 0.0 && smoothing.is_finite()) =>
            {
                Err(format!("TPE smoothing must be positive, got {smoothing}"))
            }
            _ => Ok(()),
        }
    }

    pub fn fresh_stats(&self) -> PolicyStats {
        match *self {
            SelectionPolicy::Uct { .. } => PolicyStats::Uct {
                reward_sum: 0.0,
                visits: 0,
            },
            SelectionPolicy::Bts {
                replicates,
                alpha0,
                beta0,
            } => PolicyStats::Bts {
                alpha: vec![alpha0; replicates],
                beta: vec![beta0; replicates],
                visits: 0,
            },
            SelectionPolicy::Tpe { .. } => PolicyStats::Tpe {
                rewards: Vec::new(),
            },
        }
    }

    /// Exploitation-only value used for the final recommendation.
    pub fn greedy_value(&self, stats: &PolicyStats) -> f64 {
        match stats {
            PolicyStats::Uct { reward_sum, visits } => {
                if *visits == 0 {
                    0.0
                } else {
                    reward_sum / *visits as f64
                }
            }
            PolicyStats::Bts { alpha, beta, .. } => {
                alpha.iter().zip(beta).map(|(a, b)| a / b).sum::<f64>() / alpha.len() as f64
            }
            PolicyStats::Tpe { rewards } => {
                if rewards.is_empty() {
                    0.0
                } else {
                    rewards.iter().sum::<f64>() / rewards.len() as f64
                }
            }
        }
    }

    /// Picks one live expanded child of `id`, returning its slot. `None`
    /// when the node has no live expanded child.
    pub fn select(&self, tree: &SearchTree, id: NodeId, rng: &mut RngStream) -> Option<usize> {
        let live: Vec<(usize, NodeId)> = tree.live_children(id).collect();
        match live.len() {
            0 => return None,
            1 => return Some(live[0].0),
            _ => {}
        }
        match *self {
            SelectionPolicy::Uct { c, form } => {
                let parent_visits = tree.node(id).stats.visits();
                let mut best = (f64::NEG_INFINITY, live[0].0);
                for &(slot, child) in &live {
                    let v = uct_value(&tree.node(child).stats, parent_visits, c, form);
                    if v > best.0 {
                        best = (v, slot);
                    }
                }
                Some(best.1)
            }
            SelectionPolicy::Bts { replicates, .. } => {
                let j = rng.gen_range(0..replicates);
                let weights: Vec<f64> = live
                    .iter()
                    .map(|&(_, c)| bts_value(&tree.node(c).stats, j))
                    .collect();
                Some(live[sample_proportional(&weights, rng)].0)
            }
            SelectionPolicy::Tpe { gamma, smoothing } => {
                let weights: Vec<f64> = tpe_ratios(tree, id, gamma, smoothing)
                    .into_iter()
                    .map(|(_, r)| r)
                    .collect();
                Some(live[sample_proportional(&weights, rng)].0)
            }
        }
    }

    /// Adds `delta` to every node from `id` up to the root.
    pub fn backpropagate(
        &self,
        tree: &mut SearchTree,
        id: NodeId,
        delta: f64,
        rng: &mut RngStream,
    ) {
        match self {
            SelectionPolicy::Bts { .. } => bts_backprop(tree, id, delta, &mut || rng.gen_bool(0.5)),
            _ => {
                let path: Vec<NodeId> = tree.ancestors(id).collect();
                for n in path {
                    match &mut tree.node_mut(n).stats {
                        PolicyStats::Uct { reward_sum, visits } => {
                            *reward_sum += delta;
                            *visits += 1;
                        }
                        PolicyStats::Tpe { rewards } => rewards.push(delta),
                        PolicyStats::Bts { .. } => unreachable!("stats match the policy"),
                    }
                }
            }
        }
    }
}

/// UCT score of a node with the given stats. Unvisited nodes score +inf.
pub fn uct_value(stats: &PolicyStats, parent_visits: u64, c: f64, form: BonusForm) -> f64 {
    let PolicyStats::Uct { reward_sum, visits } = *stats else {
        panic!("uct_value on non-UCT stats");
    };
    if visits == 0 {
        return f64::INFINITY;
    }
    let n = visits as f64;
    let np = parent_visits.max(1) as f64;
    let bonus = match form {
        BonusForm::NodeLog => (n.ln() / np).sqrt(),
        BonusForm::ParentLog => (np.ln() / n).sqrt(),
    };
    reward_sum / n + c * bonus
}

/// BTS backpropagation with an explicit coin: for every node on the root
/// path and every replicate, a heads adds `delta` to alpha and 1 to beta.
pub fn bts_backprop(tree: &mut SearchTree, id: NodeId, delta: f64, coin: &mut dyn FnMut() -> bool) {
    let path: Vec<NodeId> = tree.ancestors(id).collect();
    for n in path {
        let PolicyStats::Bts {
            alpha,
            beta,
            visits,
        } = &mut tree.node_mut(n).stats
        else {
            panic!("bts_backprop on non-BTS stats");
        };
        *visits += 1;
        for (a, b) in alpha.iter_mut().zip(beta.iter_mut()) {
            if coin() {
                *a += delta;
                *b += 1.0;
            }
        }
    }
}

fn bts_value(stats: &PolicyStats, j: usize) -> f64 {
    match stats {
        PolicyStats::Bts { alpha, beta, .. } => alpha[j] / beta[j],
        _ => panic!("bts_value on non-BTS stats"),
    }
}

/// Nearest-rank quantile: the element at index `ceil(gamma * n) - 1` of the
/// ascending sort, clamped to the list.
pub fn tpe_threshold(rewards: &[f64], gamma: f64) -> f64 {
    assert!(!rewards.is_empty(), "threshold of an empty reward list");
    let mut values = rewards.to_vec();
    // The epsilon keeps products like 0.7 * 10 = 7.000000000000001 on rank 7.
    let rank = (gamma * values.len() as f64 - 1e-9).ceil() as i64;
    let idx = (rank - 1).clamp(0, values.len() as i64 - 1) as usize;
    *values.select_nth_unstable_by(idx, f64::total_cmp).1
}

/// `g(c)/l(c)` for each live expanded child of `id`, as `(slot, ratio)`.
///
/// With `y*` the gamma-quantile of the node's rewards, a child with `m`
/// observations of which `b` lie strictly below `y*` has
/// `l = (b + s) / (B + sK)` and `g = (m - b + s) / (G + sK)`, where `B` and
/// `G` total the below and at-or-above counts over the `K` live children.
pub fn tpe_ratios(tree: &SearchTree, id: NodeId, gamma: f64, smoothing: f64) -> Vec<(usize, f64)> {
    let PolicyStats::Tpe { rewards } = &tree.node(id).stats else {
        panic!("tpe_ratios on non-TPE stats");
    };
    let live: Vec<(usize, NodeId)> = tree.live_children(id).collect();
    let threshold = if rewards.is_empty() {
        f64::NEG_INFINITY
    } else {
        tpe_threshold(rewards, gamma)
    };
    let counts: Vec<(usize, usize)> = live
        .iter()
        .map(|&(_, c)| match &tree.node(c).stats {
            PolicyStats::Tpe { rewards } => {
                let below = rewards.iter().filter(|&&y| y < threshold).count();
                (below, rewards.len() - below)
            }
            _ => panic!("tpe_ratios on non-TPE stats"),
        })
        .collect();
    density_ratios(&counts, smoothing)
        .into_iter()
        .zip(&live)
        .map(|(r, &(slot, _))| (slot, r))
        .collect()
}

/// Smoothed `g/l` ratios from per-child `(below, at_or_above)` counts.
pub fn density_ratios(counts: &[(usize, usize)], smoothing: f64) -> Vec<f64> {
    let k = counts.len() as f64;
    let below_total: usize = counts.iter().map(|c| c.0).sum();
    let above_total: usize = counts.iter().map(|c| c.1).sum();
    let l_den = below_total as f64 + smoothing * k;
    let g_den = above_total as f64 + smoothing * k;
    counts
        .iter()
        .map(|&(b, a)| {
            let l = (b as f64 + smoothing) / l_den;
            let g = (a as f64 + smoothing) / g_den;
            g / l
        })
        .collect()
}

/// Index drawn with probability proportional to `weights`; uniform when
/// every weight is zero.
pub fn sample_proportional(weights: &[f64], rng: &mut RngStream) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.gen_range(0..weights.len());
    }
    let mut target = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    // Rounding can leave a sliver past the last positive weight.
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}
