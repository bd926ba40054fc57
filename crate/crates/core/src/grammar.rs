//! Context-free grammar loading, hyperparameter range expansion and
//! leftmost derivation.
//!
//! Grammar files hold one rule per line:
//!
//! ```text
//! %start PIPELINE                       # optional, defaults to the first rule
//! PIPELINE := SCALE CLASSIFIER
//! SCALE    := "minmax" | "standard"
//! CLASSIFIER := "svc" SVC_C
//!     | "sgd"                           # a line starting with `|` continues the previous rule
//! SVC_C    := range(0.03125, 32768, log, 3)
//! ```
//!
//! A `range(low, high[, uniform|log[, count[, int|real]]])` item must be the
//! only item of its alternative; [`Grammar::expand_ranges`] replaces it with
//! `count` terminal alternatives.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, OnceLock};

use num_bigint::BigUint;
use num_traits::{One, Zero};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("grammar is empty")]
    Empty,
    #[error("undefined non-terminal {0}")]
    Undefined(String),
    #[error("duplicate rule for {name} at line {line}")]
    Duplicate { name: String, line: usize },
    #[error("rule {0} is unreachable from the start symbol")]
    Unreachable(String),
    #[error("recursive grammar: {0} derives itself")]
    Recursive(String),
    #[error("invalid range for {rule}: {reason}")]
    InvalidRange { rule: String, reason: String },
    #[error("default range count must be at least 2, got {0}")]
    InvalidCount(usize),
    #[error("grammar still contains unexpanded ranges")]
    NotExpanded,
    #[error("alternative {index} out of range for {nonterminal} ({available} alternatives)")]
    AlternativeOutOfRange {
        nonterminal: String,
        index: usize,
        available: usize,
    },
    #[error("derivation is already complete")]
    Complete,
    #[error("derivation is incomplete")]
    Incomplete,
    #[error("{count} productions exceed the enumeration limit {limit}")]
    TooMany { count: BigUint, limit: usize },
}

pub type Result<T> = std::result::Result<T, GrammarError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    NonTerminal,
    Terminal,
}

/// A grammar symbol. Cloning is cheap; the name is shared.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Symbol {
    name: Arc<str>,
    kind: SymbolKind,
}

impl Symbol {
    pub fn terminal(name: &str) -> Self {
        Symbol {
            name: Arc::from(name),
            kind: SymbolKind::Terminal,
        }
    }

    pub fn nonterminal(name: &str) -> Self {
        Symbol {
            name: Arc::from(name),
            kind: SymbolKind::NonTerminal,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> SymbolKind {
        self.kind
    }

    pub fn is_terminal(&self) -> bool {
        self.kind == SymbolKind::Terminal
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SymbolKind::NonTerminal => f.write_str(&self.name),
            SymbolKind::Terminal => write!(f, "{:?}", &*self.name),
        }
    }
}

/// Returns true if `name` is a valid non-terminal name (`[A-Z][A-Z0-9_]*`).
pub fn is_nonterminal_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Uniform,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Real,
    Integer,
}

/// A continuous hyperparameter range, discretized into a grid of terminals.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSpec {
    pub low: f64,
    pub high: f64,
    pub scale: Scale,
    /// Number of grid points; `None` takes the expansion default.
    pub count: Option<usize>,
    pub value_type: ValueType,
    // Source spelling of the endpoints, reused verbatim for real ranges.
    low_text: String,
    high_text: String,
}

impl RangeSpec {
    pub fn new(
        low: f64,
        high: f64,
        scale: Scale,
        count: Option<usize>,
        value_type: ValueType,
    ) -> Self {
        RangeSpec {
            low,
            high,
            scale,
            count,
            value_type,
            low_text: format!("{low:?}"),
            high_text: format!("{high:?}"),
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.low.is_finite() && self.high.is_finite()) {
            return Err("bounds must be finite".into());
        }
        if self.low >= self.high {
            return Err(format!("low {} must be below high {}", self.low, self.high));
        }
        if self.scale == Scale::Log && self.low <= 0.0 {
            return Err(format!(
                "log scale needs a positive low bound, got {}",
                self.low
            ));
        }
        if self.count == Some(0) {
            return Err("count must be positive".into());
        }
        Ok(())
    }

    /// Grid values as terminal strings: both endpoints plus evenly (uniform)
    /// or geometrically (log) spaced interior points. Integer ranges round
    /// half-down and drop duplicates.
    pub fn grid(&self, default_count: usize) -> Vec<String> {
        let n = self.count.unwrap_or(default_count);
        let point = |i: usize| -> f64 {
            if n == 1 {
                return self.low;
            }
            let t = i as f64 / (n - 1) as f64;
            match self.scale {
                Scale::Uniform => self.low + (self.high - self.low) * t,
                Scale::Log => self.low * (self.high / self.low).powf(t),
            }
        };
        let mut out: Vec<String> = Vec::with_capacity(n);
        for i in 0..n {
            let text = match self.value_type {
                ValueType::Integer => format!("{}", (point(i) - 0.5).ceil() as i64),
                ValueType::Real if i == 0 => self.low_text.clone(),
                ValueType::Real if i == n - 1 => self.high_text.clone(),
                ValueType::Real => format!("{:?}", point(i)),
            };
            if !out.contains(&text) {
                out.push(text);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Alternative {
    Sequence(Vec<Symbol>),
    Range(RangeSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: Symbol,
    pub alternatives: Vec<Alternative>,
}

impl Rule {
    /// Right-hand side of alternative `index`, if it is a plain sequence.
    pub fn sequence(&self, index: usize) -> Option<&[Symbol]> {
        match self.alternatives.get(index)? {
            Alternative::Sequence(symbols) => Some(symbols),
            Alternative::Range(_) => None,
        }
    }
}

/// A validated grammar: every referenced non-terminal is defined, every rule
/// is reachable from the start symbol, and no non-terminal derives itself.
#[derive(Debug)]
pub struct Grammar {
    start: Symbol,
    rules: Vec<Rule>,
    index: HashMap<Arc<str>, usize>,
    expanded: bool,
    counts: OnceLock<Vec<BigUint>>,
}

impl Clone for Grammar {
    fn clone(&self) -> Self {
        Grammar {
            start: self.start.clone(),
            rules: self.rules.clone(),
            index: self.index.clone(),
            expanded: self.expanded,
            counts: OnceLock::new(),
        }
    }
}

impl PartialEq for Grammar {
    fn eq(&self, other: &Self) -> bool {
        self.start == other.start && self.rules == other.rules
    }
}

impl Grammar {
    /// Builds and validates a grammar from rules given in source order.
    pub fn from_rules(start: &str, rules: Vec<Rule>) -> Result<Self> {
        let mut index = HashMap::with_capacity(rules.len());
        for (i, rule) in rules.iter().enumerate() {
            if index.insert(rule.lhs.name.clone(), i).is_some() {
                return Err(GrammarError::Duplicate {
                    name: rule.lhs.name().to_string(),
                    line: i + 1,
                });
            }
        }
        let expanded = rules.iter().all(|r| {
            r.alternatives
                .iter()
                .all(|a| matches!(a, Alternative::Sequence(_)))
        });
        let grammar = Grammar {
            start: Symbol::nonterminal(start),
            rules,
            index,
            expanded,
            counts: OnceLock::new(),
        };
        grammar.validate()?;
        Ok(grammar)
    }

    /// Parses and expands in one step.
    pub fn load(text: &str, default_count: usize) -> Result<Self> {
        parse_grammar(text)?.expand_ranges(default_count, 0)
    }

    fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(GrammarError::Empty);
        }
        if !self.index.contains_key(self.start.name()) {
            return Err(GrammarError::Undefined(self.start.name().to_string()));
        }
        for rule in &self.rules {
            if rule.alternatives.is_empty() {
                return Err(GrammarError::Syntax {
                    line: 0,
                    column: 0,
                    message: format!("rule {} has no alternatives", rule.lhs),
                });
            }
            for alt in &rule.alternatives {
                match alt {
                    Alternative::Sequence(symbols) => {
                        if symbols.is_empty() {
                            return Err(GrammarError::Syntax {
                                line: 0,
                                column: 0,
                                message: format!("rule {} has an empty alternative", rule.lhs),
                            });
                        }
                        for s in symbols {
                            if !s.is_terminal() && !self.index.contains_key(s.name()) {
                                return Err(GrammarError::Undefined(s.name().to_string()));
                            }
                        }
                    }
                    Alternative::Range(spec) => {
                        spec.check().map_err(|reason| GrammarError::InvalidRange {
                            rule: rule.lhs.name().to_string(),
                            reason,
                        })?
                    }
                }
            }
        }

        // Reachability.
        let mut seen = vec![false; self.rules.len()];
        let mut stack = vec![self.index[self.start.name()]];
        seen[stack[0]] = true;
        while let Some(i) = stack.pop() {
            for child in self.child_rules(i) {
                if !seen[child] {
                    seen[child] = true;
                    stack.push(child);
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(GrammarError::Unreachable(
                self.rules[i].lhs.name().to_string(),
            ));
        }

        // Cycle detection over the non-terminal reference graph.
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Active,
            Done,
        }
        let mut marks = vec![Mark::New; self.rules.len()];
        for root in 0..self.rules.len() {
            if marks[root] != Mark::New {
                continue;
            }
            let mut stack: Vec<(usize, Vec<usize>)> =
                vec![(root, self.child_rules(root).collect())];
            marks[root] = Mark::Active;
            while let Some((node, pending)) = stack.last_mut() {
                match pending.pop() {
                    Some(next) => match marks[next] {
                        Mark::Active => {
                            return Err(GrammarError::Recursive(
                                self.rules[next].lhs.name().to_string(),
                            ))
                        }
                        Mark::New => {
                            marks[next] = Mark::Active;
                            let children = self.child_rules(next).collect();
                            stack.push((next, children));
                        }
                        Mark::Done => {}
                    },
                    None => {
                        marks[*node] = Mark::Done;
                        stack.pop();
                    }
                }
            }
        }
        Ok(())
    }

    fn child_rules(&self, rule: usize) -> impl Iterator<Item = usize> + '_ {
        self.rules[rule]
            .alternatives
            .iter()
            .filter_map(|a| match a {
                Alternative::Sequence(s) => Some(s),
                Alternative::Range(_) => None,
            })
            .flatten()
            .filter(|s| !s.is_terminal())
            .map(|s| self.index[s.name()])
    }

    pub fn start(&self) -> &Symbol {
        &self.start
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, name: &str) -> Option<&Rule> {
        self.index.get(name).map(|&i| &self.rules[i])
    }

    pub fn is_expanded(&self) -> bool {
        self.expanded
    }

    /// Replaces every range alternative with its grid of terminal
    /// alternatives, in place of the range and in grid order.
    ///
    /// `seed` is accepted for a stochastic sampling mode; the grid ignores it.
    pub fn expand_ranges(&self, default_count: usize, _seed: u64) -> Result<Grammar> {
        if default_count < 2 {
            return Err(GrammarError::InvalidCount(default_count));
        }
        let rules = self
            .rules
            .iter()
            .map(|rule| {
                let mut alternatives = Vec::with_capacity(rule.alternatives.len());
                for alt in &rule.alternatives {
                    match alt {
                        Alternative::Sequence(_) => alternatives.push(alt.clone()),
                        Alternative::Range(spec) => {
                            spec.check().map_err(|reason| GrammarError::InvalidRange {
                                rule: rule.lhs.name().to_string(),
                                reason,
                            })?;
                            alternatives.extend(
                                spec.grid(default_count)
                                    .iter()
                                    .map(|v| Alternative::Sequence(vec![Symbol::terminal(v)])),
                            );
                        }
                    }
                }
                Ok(Rule {
                    lhs: rule.lhs.clone(),
                    alternatives,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Grammar::from_rules(self.start.name(), rules)
    }

    /// Number of alternatives for the state's leftmost non-terminal; zero
    /// when the state is complete.
    pub fn applicable_alternatives(&self, state: &DerivationState) -> usize {
        state
            .leftmost_nonterminal()
            .and_then(|s| self.rule(s.name()))
            .map_or(0, |r| r.alternatives.len())
    }

    /// Exact number of complete derivations from the start symbol.
    pub fn count_productions(&self) -> Result<BigUint> {
        let counts = self.rule_counts()?;
        Ok(counts[self.index[self.start.name()]].clone())
    }

    /// Number of complete derivations reachable from `state`.
    pub fn count_completions(&self, state: &DerivationState) -> Result<BigUint> {
        let counts = self.rule_counts()?;
        Ok(state.form[state.cursor..]
            .iter()
            .filter(|slot| !slot.symbol.is_terminal())
            .fold(BigUint::one(), |acc, slot| {
                acc * &counts[self.index[slot.symbol.name()]]
            }))
    }

    fn rule_counts(&self) -> Result<&[BigUint]> {
        if !self.expanded {
            return Err(GrammarError::NotExpanded);
        }
        Ok(self.counts.get_or_init(|| {
            let mut memo: Vec<Option<BigUint>> = vec![None; self.rules.len()];
            for i in 0..self.rules.len() {
                self.count_rule(i, &mut memo);
            }
            memo.into_iter().map(Option::unwrap).collect()
        }))
    }

    // Product over each alternative's symbols, summed over alternatives.
    // Recursion depth is bounded by the (acyclic) rule graph depth.
    fn count_rule(&self, i: usize, memo: &mut Vec<Option<BigUint>>) -> BigUint {
        if let Some(c) = &memo[i] {
            return c.clone();
        }
        let mut total = BigUint::zero();
        for alt in &self.rules[i].alternatives {
            if let Alternative::Sequence(symbols) = alt {
                let mut product = BigUint::one();
                for s in symbols.iter().filter(|s| !s.is_terminal()) {
                    product *= self.count_rule(self.index[s.name()], memo);
                }
                total += product;
            }
        }
        memo[i] = Some(total.clone());
        total
    }

    /// Every complete derivation in depth-first, lowest-alternative-first
    /// order. Fails if the grammar has more than `limit` productions.
    pub fn enumerate(&self, limit: usize) -> Result<Vec<DerivationState>> {
        let count = self.count_productions()?;
        if count > BigUint::from(limit) {
            return Err(GrammarError::TooMany { count, limit });
        }
        let mut out = Vec::new();
        let mut stack = vec![DerivationState::start(self)];
        while let Some(state) = stack.pop() {
            let n = self.applicable_alternatives(&state);
            if n == 0 {
                out.push(state);
                continue;
            }
            for alt in (0..n).rev() {
                stack.push(state.apply_rule(alt, self)?);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Grammar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "%start {}", self.start)?;
        for rule in &self.rules {
            write!(f, "{} :=", rule.lhs)?;
            for (i, alt) in rule.alternatives.iter().enumerate() {
                if i > 0 {
                    f.write_str(" |")?;
                }
                match alt {
                    Alternative::Sequence(symbols) => {
                        for s in symbols {
                            write!(f, " {s}")?;
                        }
                    }
                    Alternative::Range(r) => {
                        let scale = match r.scale {
                            Scale::Uniform => "uniform",
                            Scale::Log => "log",
                        };
                        write!(f, " range({}, {}, {scale}", r.low_text, r.high_text)?;
                        if let Some(c) = r.count {
                            write!(f, ", {c}")?;
                        }
                        if r.value_type == ValueType::Integer {
                            f.write_str(", int")?;
                        }
                        f.write_str(")")?;
                    }
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Str(String),
    Assign,
    Pipe,
    Range(RangeSpec),
    Directive(String),
}

struct Lexer<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    _src: &'a str,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str, line: usize) -> Self {
        Lexer {
            chars: src.chars().collect(),
            pos: 0,
            line,
            _src: src,
        }
    }

    fn error(&self, column: usize, message: impl Into<String>) -> GrammarError {
        GrammarError::Syntax {
            line: self.line,
            column: column + 1,
            message: message.into(),
        }
    }

    fn tokens(mut self) -> Result<Vec<(usize, Token)>> {
        let mut out = Vec::new();
        while let Some(&c) = self.chars.get(self.pos) {
            let col = self.pos;
            match c {
                '#' => break,
                c if c.is_whitespace() => self.pos += 1,
                '|' => {
                    self.pos += 1;
                    out.push((col, Token::Pipe));
                }
                ':' => {
                    if self.chars.get(self.pos + 1) == Some(&'=') {
                        self.pos += 2;
                        out.push((col, Token::Assign));
                    } else {
                        return Err(self.error(col, "expected ':='"));
                    }
                }
                '"' => out.push((col, Token::Str(self.string()?))),
                '%' => {
                    self.pos += 1;
                    let word = self.word();
                    if word.is_empty() {
                        return Err(self.error(col, "expected directive name after '%'"));
                    }
                    out.push((col, Token::Directive(word)));
                }
                c if c.is_alphanumeric() || c == '_' => {
                    let word = self.word();
                    if word == "range" && self.chars.get(self.pos) == Some(&'(') {
                        out.push((col, Token::Range(self.range(col)?)));
                    } else if is_nonterminal_name(&word) {
                        out.push((col, Token::Ident(word)));
                    } else {
                        return Err(self.error(
                            col,
                            format!("invalid symbol '{word}': non-terminals match [A-Z][A-Z0-9_]*, terminals are quoted"),
                        ));
                    }
                }
                other => return Err(self.error(col, format!("unexpected character '{other}'"))),
            }
        }
        Ok(out)
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while self
            .chars
            .get(self.pos)
            .is_some_and(|c| c.is_alphanumeric() || *c == '_')
        {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn string(&mut self) -> Result<String> {
        let open = self.pos;
        self.pos += 1;
        let mut s = String::new();
        loop {
            match self.chars.get(self.pos) {
                None => return Err(self.error(open, "unterminated string")),
                Some('"') => {
                    self.pos += 1;
                    return Ok(s);
                }
                Some('\\') => {
                    match self.chars.get(self.pos + 1) {
                        Some('"') => s.push('"'),
                        Some('\\') => s.push('\\'),
                        Some('n') => s.push('\n'),
                        Some('t') => s.push('\t'),
                        _ => return Err(self.error(self.pos, "invalid escape")),
                    }
                    self.pos += 2;
                }
                Some(&c) => {
                    s.push(c);
                    self.pos += 1;
                }
            }
        }
    }

    fn range(&mut self, col: usize) -> Result<RangeSpec> {
        // at '('
        self.pos += 1;
        let start = self.pos;
        let close = self.chars[start..]
            .iter()
            .position(|&c| c == ')')
            .ok_or_else(|| self.error(col, "unterminated range("))?;
        let body: String = self.chars[start..start + close].iter().collect();
        self.pos = start + close + 1;
        let args: Vec<&str> = body.split(',').map(str::trim).collect();
        if args.len() < 2 || args.len() > 5 {
            return Err(self.error(
                col,
                "range expects range(low, high[, uniform|log[, count[, int|real]]])",
            ));
        }
        let number = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| self.error(col, format!("invalid number '{s}' in range")))
        };
        let low = number(args[0])?;
        let high = number(args[1])?;
        let scale = match args.get(2).copied() {
            None | Some("uniform") => Scale::Uniform,
            Some("log") => Scale::Log,
            Some(other) => return Err(self.error(col, format!("unknown range scale '{other}'"))),
        };
        let count = match args.get(3) {
            None => None,
            Some(s) => Some(
                s.parse::<usize>()
                    .ok()
                    .filter(|&c| c > 0)
                    .ok_or_else(|| self.error(col, format!("invalid range count '{s}'")))?,
            ),
        };
        let value_type = match args.get(4).copied() {
            None | Some("real") => ValueType::Real,
            Some("int") => ValueType::Integer,
            Some(other) => {
                return Err(self.error(col, format!("unknown range value type '{other}'")))
            }
        };
        Ok(RangeSpec {
            low,
            high,
            scale,
            count,
            value_type,
            low_text: args[0].to_string(),
            high_text: args[1].to_string(),
        })
    }
}

/// Parses grammar source text. Ranges are kept unexpanded; see
/// [`Grammar::expand_ranges`].
pub fn parse_grammar(text: &str) -> Result<Grammar> {
    let mut start: Option<String> = None;
    let mut rules: Vec<Rule> = Vec::new();
    let mut lines: Vec<usize> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let lexer = Lexer::new(raw, line);
        let err = |column: usize, message: String| GrammarError::Syntax {
            line,
            column: column + 1,
            message,
        };
        let tokens = lexer.tokens()?;
        let Some((col0, first)) = tokens.first() else {
            continue;
        };
        let alternatives_from: usize;
        match first {
            Token::Directive(name) if name == "start" => match tokens.as_slice() {
                [_, (_, Token::Ident(s))] => {
                    if start.replace(s.clone()).is_some() {
                        return Err(err(*col0, "duplicate %start directive".into()));
                    }
                    continue;
                }
                _ => return Err(err(*col0, "expected '%start NAME'".into())),
            },
            Token::Directive(name) => return Err(err(*col0, format!("unknown directive %{name}"))),
            Token::Pipe => {
                if rules.is_empty() {
                    return Err(err(
                        *col0,
                        "continuation line without a preceding rule".into(),
                    ));
                }
                alternatives_from = 0;
            }
            Token::Ident(name) => {
                match tokens.get(1) {
                    Some((_, Token::Assign)) => {}
                    Some((c, _)) => return Err(err(*c, "expected ':='".into())),
                    None => return Err(err(raw.len(), "expected ':=' after rule name".into())),
                }
                if let Some(&prev) = index.get(name) {
                    let _ = prev;
                    return Err(GrammarError::Duplicate {
                        name: name.clone(),
                        line,
                    });
                }
                index.insert(name.clone(), rules.len());
                rules.push(Rule {
                    lhs: Symbol::nonterminal(name),
                    alternatives: Vec::new(),
                });
                lines.push(line);
                alternatives_from = 2;
            }
            _ => return Err(err(*col0, "expected a rule 'NAME := ...'".into())),
        }

        let rule = rules.last_mut().expect("rule present");
        let mut current: Vec<(usize, Token)> = Vec::new();
        let mut leading_pipe = first == &Token::Pipe;
        let body = &tokens[alternatives_from..];
        let end_col = raw.chars().count();
        let mut flush = |current: &mut Vec<(usize, Token)>, col: usize| -> Result<()> {
            if current.is_empty() {
                return Err(err(col, "empty alternative".into()));
            }
            let alt = if let [(_, Token::Range(spec))] = current.as_slice() {
                Alternative::Range(spec.clone())
            } else {
                let mut symbols = Vec::with_capacity(current.len());
                for (c, tok) in current.drain(..) {
                    match tok {
                        Token::Ident(name) => symbols.push(Symbol::nonterminal(&name)),
                        Token::Str(s) => symbols.push(Symbol::terminal(&s)),
                        Token::Range(_) => {
                            return Err(err(
                                c,
                                "range(...) must be the only item of its alternative".into(),
                            ))
                        }
                        Token::Assign => return Err(err(c, "unexpected ':='".into())),
                        Token::Directive(_) => return Err(err(c, "unexpected directive".into())),
                        Token::Pipe => unreachable!(),
                    }
                }
                Alternative::Sequence(symbols)
            };
            current.clear();
            rule.alternatives.push(alt);
            Ok(())
        };
        for (c, tok) in body.iter().cloned() {
            if tok == Token::Pipe {
                if leading_pipe {
                    leading_pipe = false;
                    continue;
                }
                flush(&mut current, c)?;
            } else {
                leading_pipe = false;
                current.push((c, tok));
            }
        }
        flush(&mut current, end_col)?;
    }

    if rules.is_empty() {
        return Err(GrammarError::Empty);
    }
    let start = start.unwrap_or_else(|| rules[0].lhs.name().to_string());
    Grammar::from_rules(&start, rules).map_err(|e| match e {
        // Report the source line rather than the rule position.
        GrammarError::Duplicate { name, line } => GrammarError::Duplicate {
            line: lines.get(line - 1).copied().unwrap_or(line),
            name,
        },
        other => other,
    })
}

// ---------------------------------------------------------------------------
// Derivations

/// One derivation step: the non-terminal rewritten, the alternative chosen,
/// and the step that introduced the non-terminal (`None` for the start symbol).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Step {
    pub nonterminal: Arc<str>,
    pub alternative: usize,
    pub parent: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Slot {
    symbol: Symbol,
    origin: Option<u32>,
}

/// A partial leftmost derivation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DerivationState {
    form: Vec<Slot>,
    trace: Vec<Step>,
    // Position of the leftmost non-terminal, or `form.len()` when complete.
    cursor: usize,
}

impl DerivationState {
    pub fn start(grammar: &Grammar) -> Self {
        DerivationState {
            form: vec![Slot {
                symbol: grammar.start.clone(),
                origin: None,
            }],
            trace: Vec::new(),
            cursor: 0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.cursor == self.form.len()
    }

    pub fn sentential_form(&self) -> impl ExactSizeIterator<Item = &Symbol> + '_ {
        self.form.iter().map(|s| &s.symbol)
    }

    pub fn trace(&self) -> &[Step] {
        &self.trace
    }

    pub fn leftmost_nonterminal(&self) -> Option<&Symbol> {
        self.form.get(self.cursor).map(|s| &s.symbol)
    }

    /// Returns a new state with the leftmost non-terminal replaced by
    /// alternative `alt`.
    pub fn apply_rule(&self, alt: usize, grammar: &Grammar) -> Result<DerivationState> {
        let mut next = self.clone();
        next.derive(alt, grammar)?;
        Ok(next)
    }

    /// In-place form of [`apply_rule`](Self::apply_rule).
    pub fn derive(&mut self, alt: usize, grammar: &Grammar) -> Result<()> {
        let Some(slot) = self.form.get(self.cursor) else {
            return Err(GrammarError::Complete);
        };
        let rule = grammar
            .rule(slot.symbol.name())
            .ok_or_else(|| GrammarError::Undefined(slot.symbol.name().to_string()))?;
        if alt >= rule.alternatives.len() {
            return Err(GrammarError::AlternativeOutOfRange {
                nonterminal: rule.lhs.name().to_string(),
                index: alt,
                available: rule.alternatives.len(),
            });
        }
        let rhs = rule.sequence(alt).ok_or(GrammarError::NotExpanded)?;
        let step = self.trace.len() as u32;
        self.trace.push(Step {
            nonterminal: rule.lhs.name.clone(),
            alternative: alt,
            parent: slot.origin,
        });
        let replacement = rhs.iter().map(|symbol| Slot {
            symbol: symbol.clone(),
            origin: Some(step),
        });
        self.form.splice(self.cursor..=self.cursor, replacement);
        while self.cursor < self.form.len() && self.form[self.cursor].symbol.is_terminal() {
            self.cursor += 1;
        }
        Ok(())
    }

    /// Canonical key of a complete state (space-joined terminals).
    pub fn key(&self) -> Result<String> {
        if !self.is_complete() {
            return Err(GrammarError::Incomplete);
        }
        Ok(self.terminal_key())
    }

    fn terminal_key(&self) -> String {
        let mut key = String::new();
        for (i, slot) in self.form.iter().enumerate() {
            if i > 0 {
                key.push(' ');
            }
            key.push_str(slot.symbol.name());
        }
        key
    }

    fn path(&self, origin: Option<u32>) -> String {
        let mut names = Vec::new();
        let mut cur = origin;
        while let Some(i) = cur {
            let step = &self.trace[i as usize];
            names.push(&*step.nonterminal);
            cur = step.parent;
        }
        names.reverse();
        names.join("/")
    }

    pub fn to_config(&self) -> Result<PipelineConfig> {
        if !self.is_complete() {
            return Err(GrammarError::Incomplete);
        }
        let mut structured: Vec<(String, String)> = Vec::with_capacity(self.form.len());
        let mut used: HashMap<String, usize> = HashMap::new();
        for slot in &self.form {
            let base = self.path(slot.origin);
            let n = used.entry(base.clone()).or_insert(0);
            *n += 1;
            let path = if *n == 1 { base } else { format!("{base}#{n}") };
            structured.push((path, slot.symbol.name().to_string()));
        }
        Ok(PipelineConfig {
            terminals: self
                .form
                .iter()
                .map(|s| s.symbol.name().to_string())
                .collect(),
            canonical_key: self.terminal_key(),
            structured,
        })
    }
}

impl fmt::Display for DerivationState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, slot) in self.form.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{}", slot.symbol)?;
        }
        Ok(())
    }
}

/// A complete configuration as handed to evaluators.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PipelineConfig {
    pub terminals: Vec<String>,
    pub canonical_key: String,
    /// `(derivation path, terminal)` pairs in derivation order. Paths are
    /// `/`-joined non-terminal names; repeats get a `#n` suffix.
    pub structured: Vec<(String, String)>,
}

impl PipelineConfig {
    /// Builds a configuration directly from a canonical key, for evaluators
    /// that only need the key.
    pub fn from_key(key: &str) -> Self {
        PipelineConfig {
            terminals: key.split(' ').map(str::to_string).collect(),
            canonical_key: key.to_string(),
            structured: Vec::new(),
        }
    }
}

/// Non-terminal names referenced anywhere in the grammar (testing aid).
pub fn referenced_nonterminals(grammar: &Grammar) -> HashSet<String> {
    grammar
        .rules()
        .iter()
        .flat_map(|r| r.alternatives.iter())
        .filter_map(|a| match a {
            Alternative::Sequence(s) => Some(s),
            Alternative::Range(_) => None,
        })
        .flatten()
        .filter(|s| !s.is_terminal())
        .map(|s| s.name().to_string())
        .collect()
}
