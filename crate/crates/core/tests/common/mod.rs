//! Random acyclic grammars with an enumeration oracle that does not touch
//! the library's derivation code.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use cfg_mcts::evaluator::TabularOracle;
use cfg_mcts::grammar::Grammar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum Item {
    T(String),
    N(usize),
}

/// Rule `i` may only reference rules `j > i`, so the grammar is acyclic.
/// Every alternative carries at least one terminal of its own, so distinct
/// derivations have distinct keys.
#[derive(Debug, Clone)]
pub struct GrammarSpec {
    pub rules: Vec<Vec<Vec<Item>>>,
}

impl GrammarSpec {
    pub fn text(&self) -> String {
        let mut out = String::from("%start R0\n");
        for (i, alts) in self.rules.iter().enumerate() {
            let rendered: Vec<String> = alts
                .iter()
                .map(|alt| {
                    alt.iter()
                        .map(|it| match it {
                            Item::T(t) => format!("\"{t}\""),
                            Item::N(j) => format!("R{j}"),
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            out.push_str(&format!("R{i} := {}\n", rendered.join(" | ")));
        }
        out
    }

    pub fn grammar(&self) -> Arc<Grammar> {
        Arc::new(Grammar::load(&self.text(), 3).expect("generated grammar loads"))
    }

    pub fn count(&self) -> u128 {
        let mut memo = vec![None; self.rules.len()];
        self.count_rule(0, &mut memo)
    }

    fn count_rule(&self, i: usize, memo: &mut Vec<Option<u128>>) -> u128 {
        if let Some(n) = memo[i] {
            return n;
        }
        let mut total = 0u128;
        for alt in &self.rules[i] {
            let mut prod = 1u128;
            for it in alt {
                if let Item::N(j) = it {
                    prod = prod.saturating_mul(self.count_rule(*j, memo));
                }
            }
            total = total.saturating_add(prod);
        }
        memo[i] = Some(total);
        total
    }

    /// Every terminal sequence derivable from rule `i`, lowest alternative
    /// first.
    pub fn expansions(&self, i: usize) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for alt in &self.rules[i] {
            let mut partial: Vec<Vec<String>> = vec![Vec::new()];
            for it in alt {
                let pieces = match it {
                    Item::T(t) => vec![vec![t.clone()]],
                    Item::N(j) => self.expansions(*j),
                };
                let mut next = Vec::with_capacity(partial.len() * pieces.len());
                for p in &partial {
                    for q in &pieces {
                        let mut s = p.clone();
                        s.extend(q.iter().cloned());
                        next.push(s);
                    }
                }
                partial = next;
            }
            out.extend(partial);
        }
        out
    }

    pub fn keys(&self) -> Vec<String> {
        self.expansions(0)
            .into_iter()
            .map(|s| s.join(" "))
            .collect()
    }

    pub fn terminals(&self) -> Vec<String> {
        self.rules
            .iter()
            .flatten()
            .flatten()
            .filter_map(|it| match it {
                Item::T(t) => Some(t.clone()),
                Item::N(_) => None,
            })
            .collect()
    }
}

/// A random grammar whose production count lies in `productions`.
pub fn random_spec(
    seed: u64,
    max_rules: usize,
    max_alts: usize,
    productions: std::ops::RangeInclusive<u128>,
) -> GrammarSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let spec = attempt(&mut rng, max_rules, max_alts);
        let n = spec.count();
        if productions.contains(&n) {
            return spec;
        }
    }
}

fn attempt(rng: &mut ChaCha8Rng, max_rules: usize, max_alts: usize) -> GrammarSpec {
    let n_rules = rng.gen_range(1..=max_rules);
    let mut term = 0usize;
    let mut fresh = |rng: &mut ChaCha8Rng| {
        term += 1;
        let tags = ["svc", "knn", "pca", "sgd", "rf", "ica", "std", "mm"];
        Item::T(format!("{}{term}", tags.choose(rng).unwrap()))
    };
    let mut rules: Vec<Vec<Vec<Item>>> = Vec::with_capacity(n_rules);
    for i in 0..n_rules {
        let n_alts = rng.gen_range(1..=max_alts);
        let mut alts = Vec::with_capacity(n_alts);
        for _ in 0..n_alts {
            let mut alt = vec![fresh(rng)];
            for _ in 0..rng.gen_range(0..3) {
                if i + 1 < n_rules && rng.gen_bool(0.6) {
                    alt.push(Item::N(rng.gen_range(i + 1..n_rules)));
                } else {
                    alt.push(fresh(rng));
                }
            }
            alt.shuffle(rng);
            alts.push(alt);
        }
        rules.push(alts);
    }
    // Make every rule reachable from R0.
    for j in 1..n_rules {
        let referenced = rules[..j]
            .iter()
            .flatten()
            .flatten()
            .any(|it| matches!(it, Item::N(k) if *k == j));
        if !referenced {
            let i = rng.gen_range(0..j);
            let a = rng.gen_range(0..rules[i].len());
            let pos = rng.gen_range(0..=rules[i][a].len());
            rules[i][a].insert(pos, Item::N(j));
        }
    }
    GrammarSpec { rules }
}

/// Rewards that average per-terminal scores. The terminals of one seeded
/// target derivation score 1 and all others score below 0.9, so the target
/// is the unique maximum at 1.0.
pub fn planted_table(spec: &GrammarSpec, seed: u64) -> (HashMap<String, f64>, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let keys = spec.keys();
    let target = keys.choose(&mut rng).unwrap().clone();
    let target_terms: Vec<&str> = target.split(' ').collect();
    let mut score: HashMap<String, f64> = HashMap::new();
    for t in spec.terminals() {
        let s = if target_terms.contains(&t.as_str()) {
            1.0
        } else {
            rng.gen_range(0.0..0.9)
        };
        score.insert(t, s);
    }
    let table = keys
        .into_iter()
        .map(|k| {
            let terms: Vec<&str> = k.split(' ').collect();
            let r = terms.iter().map(|t| score[*t]).sum::<f64>() / terms.len() as f64;
            (k, r)
        })
        .collect();
    (table, target)
}

pub fn oracle(table: HashMap<String, f64>) -> TabularOracle {
    TabularOracle::new(table, None).expect("rewards in range")
}
