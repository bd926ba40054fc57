//! Reward sources for complete configurations.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::grammar::PipelineConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("evaluation timed out after {0} s")]
    Timeout(f64),
    #[error("worker reported an error: {0}")]
    Worker(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("worker failed {failures} times in a row: {last}")]
    WorkerDead { failures: u32, last: String },
    #[error("no reward for key {0:?}")]
    UnknownKey(String),
    #[error("{0}")]
    Config(String),
}

impl EvalError {
    /// Fatal errors abort the run; the others score zero and the search
    /// carries on.
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            EvalError::WorkerDead { .. } | EvalError::UnknownKey(_) | EvalError::Config(_)
        )
    }
}

pub trait RewardEvaluator {
    /// Reward in `[0, 1]` for a complete configuration.
    fn evaluate(&mut self, config: &PipelineConfig) -> Result<f64, EvalError>;

    /// Equal keys always give equal rewards.
    fn is_deterministic(&self) -> bool;
}

impl<E: RewardEvaluator + ?Sized> RewardEvaluator for Box<E> {
    fn evaluate(&mut self, config: &PipelineConfig) -> Result<f64, EvalError> {
        (**self).evaluate(config)
    }

    fn is_deterministic(&self) -> bool {
        (**self).is_deterministic()
    }
}

fn check_range(reward: f64) -> Result<f64, EvalError> {
    if (0.0..=1.0).contains(&reward) {
        Ok(reward)
    } else {
        Err(EvalError::Protocol(format!(
            "reward {reward} outside [0, 1]"
        )))
    }
}

// ---------------------------------------------------------------------------

/// Lookup table from canonical key to reward.
#[derive(Debug, Clone, Default)]
pub struct TabularOracle {
    table: HashMap<String, f64>,
    default: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableRow {
    key: String,
    reward: f64,
}

impl TabularOracle {
    pub fn new(table: HashMap<String, f64>, default: Option<f64>) -> Result<Self, EvalError> {
        if let Some((k, r)) = table.iter().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return Err(EvalError::Config(format!(
                "reward {r} for {k:?} outside [0, 1]"
            )));
        }
        if let Some(d) = default.filter(|d| !(0.0..=1.0).contains(d)) {
            return Err(EvalError::Config(format!(
                "default reward {d} outside [0, 1]"
            )));
        }
        Ok(TabularOracle { table, default })
    }

    /// Reads a `key,reward` CSV file.
    pub fn from_csv(path: &Path, default: Option<f64>) -> Result<Self, EvalError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        if headers != vec!["key", "reward"] {
            return Err(EvalError::Config(format!(
                "{}: expected header key,reward",
                path.display()
            )));
        }
        let mut table = HashMap::new();
        for row in reader.deserialize::<TableRow>() {
            let row = row.map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
            table.insert(row.key, row.reward);
        }
        Self::new(table, default)
    }

    /// Writes the table as CSV with quoted keys, sorted by key.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut writer = csv::WriterBuilder::new()
            .quote_style(csv::QuoteStyle::NonNumeric)
            .from_path(path)?;
        let mut rows: Vec<_> = self.table.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        for (key, &reward) in rows {
            writer.serialize(TableRow {
                key: key.clone(),
                reward,
            })?;
        }
        writer.flush()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn max_reward(&self) -> Option<f64> {
        self.table.values().copied().reduce(f64::max)
    }
}

impl RewardEvaluator for TabularOracle {
    fn evaluate(&mut self, config: &PipelineConfig) -> Result<f64, EvalError> {
        self.table
            .get(&config.canonical_key)
            .copied()
            .or(self.default)
            .ok_or_else(|| EvalError::UnknownKey(config.canonical_key.clone()))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------

/// Pseudo-random landscape: reward is a stable hash of `(seed, key)` mapped
/// to `[0, 1)`. An optional planted key scores exactly 1.0 and every other
/// key is squeezed into `[0, 0.9)` so the plant is the unique optimum.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    seed: u64,
    planted: Option<String>,
}

impl SyntheticEvaluator {
    pub fn new(seed: u64) -> Self {
        SyntheticEvaluator {
            seed,
            planted: None,
        }
    }

    pub fn with_planted(seed: u64, key: impl Into<String>) -> Self {
        SyntheticEvaluator {
            seed,
            planted: Some(key.into()),
        }
    }

    pub fn planted(&self) -> Option<&str> {
        self.planted.as_deref()
    }

    pub fn reward(&self, key: &str) -> f64 {
        if self.planted.as_deref() == Some(key) {
            return 1.0;
        }
        let u = unit_hash(self.seed, key);
        if self.planted.is_some() {
            0.9 * u
        } else {
            u
        }
    }
}

/// FNV-1a over the key, seeded and finished with the SplitMix64 mixer;
/// the top 53 bits become a float in `[0, 1)`.
pub fn unit_hash(seed: u64, key: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl RewardEvaluator for SyntheticEvaluator {
    fn evaluate(&mut self, config: &PipelineConfig) -> Result<f64, EvalError> {
        Ok(self.reward(&config.canonical_key))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------

/// Memoizes a deterministic evaluator by canonical key.
pub struct Cached<E> {
    inner: E,
    memo: HashMap<String, f64>,
}

impl<E: RewardEvaluator> Cached<E> {
    pub fn new(inner: E) -> Result<Self, EvalError> {
        if !inner.is_deterministic() {
            return Err(EvalError::Config(
                "cannot cache a nondeterministic evaluator".into(),
            ));
        }
        Ok(Cached {
            inner,
            memo: HashMap::new(),
        })
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: RewardEvaluator> RewardEvaluator for Cached<E> {
    fn evaluate(&mut self, config: &PipelineConfig) -> Result<f64, EvalError> {
        if let Some(&r) = self.memo.get(&config.canonical_key) {
            return Ok(r);
        }
        let r = self.inner.evaluate(config)?;
        self.memo.insert(config.canonical_key.clone(), r);
        Ok(r)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct Request<'a> {
    id: u64,
    config: Map<String, Value>,
    key: &'a str,
    timeout_s: f64,
}

#[derive(Debug, Deserialize)]
struct Response {
    id: u64,
    #[serde(default)]
    reward: Option<f64>,
    #[serde(default)]
    error: Option<String>,
}

/// Renders one request line (without the trailing newline).
pub fn request_line(id: u64, config: &PipelineConfig, timeout_s: f64) -> String {
    let request = Request {
        id,
        config: config
            .structured
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect(),
        key: &config.canonical_key,
        timeout_s,
    };
    serde_json::to_string(&request).expect("request serializes")
}

/// Interprets one response line for request `id`.
pub fn parse_response(line: &str, id: u64) -> Result<f64, EvalError> {
    let response: Response = serde_json::from_str(line.trim_end())
        .map_err(|e| EvalError::Protocol(format!("malformed response {line:?}: {e}")))?;
    if response.id != id {
        return Err(EvalError::Protocol(format!(
            "response id {} does not match request id {id}",
            response.id
        )));
    }
    match (response.reward, response.error) {
        (_, Some(err)) => Err(EvalError::Worker(err)),
        (Some(r), None) => check_range(r),
        (None, None) => Err(EvalError::Protocol(
            "response has neither reward nor error".into(),
        )),
    }
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(program: &str, args: &[String]) -> Result<Self, String> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("cannot start {program}: {e}"))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Worker {
            child,
            stdin,
            lines: rx,
        })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Evaluates configurations in a child process speaking line-delimited
/// JSON over stdin/stdout. One request is in flight at a time.
///
/// Request: `{"id":n,"config":{path:terminal,...},"key":"...","timeout_s":t}`.
/// Response: `{"id":n,"reward":r}` or `{"id":n,"error":"..."}`.
pub struct ExternalEvaluator {
    program: String,
    args: Vec<String>,
    timeout: Duration,
    max_failures: u32,
    worker: Option<Worker>,
    next_id: u64,
    consecutive_failures: u32,
    failures: Vec<String>,
}

impl ExternalEvaluator {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout_s: f64) -> Self {
        ExternalEvaluator {
            program: program.into(),
            args,
            timeout: Duration::from_secs_f64(timeout_s),
            max_failures: 3,
            worker: None,
            next_id: 1,
            consecutive_failures: 0,
            failures: Vec::new(),
        }
    }

    /// Splits a command line on whitespace.
    pub fn from_command_line(command: &str, timeout_s: f64) -> Result<Self, EvalError> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| EvalError::Config("empty worker command".into()))?;
        Ok(Self::new(program, parts.collect(), timeout_s))
    }

    /// Consecutive crashes or timeouts tolerated before the run aborts.
    pub fn with_max_failures(mut self, n: u32) -> Self {
        self.max_failures = n.max(1);
        self
    }

    /// Messages of every failed evaluation so far.
    pub fn failures(&self) -> &[String] {
        &self.failures
    }

    fn worker(&mut self) -> Result<&mut Worker, EvalError> {
        if self.worker.is_none() {
            match Worker::spawn(&self.program, &self.args) {
                Ok(w) => self.worker = Some(w),
                Err(e) => return Err(self.fail_hard(e)),
            }
        }
        Ok(self.worker.as_mut().expect("worker spawned"))
    }

    fn restart(&mut self) {
        if let Some(w) = self.worker.take() {
            w.kill();
        }
    }

    // Crash-like failure: counts toward the restart limit.
    fn fail_hard(&mut self, message: String) -> EvalError {
        self.restart();
        self.consecutive_failures += 1;
        if self.consecutive_failures >= self.max_failures {
            EvalError::WorkerDead {
                failures: self.consecutive_failures,
                last: message,
            }
        } else {
            EvalError::Worker(message)
        }
    }

    fn exchange(&mut self, id: u64, line: &str) -> Result<f64, EvalError> {
        let timeout = self.timeout;
        let worker = self.worker()?;
        let sent = writeln!(worker.stdin, "{line}").and_then(|_| worker.stdin.flush());
        if let Err(e) = sent {
            return Err(self.fail_hard(format!("write to worker failed: {e}")));
        }
        match worker.lines.recv_timeout(timeout) {
            Ok(Ok(response)) => {
                let result = parse_response(&response, id);
                match &result {
                    Ok(_) | Err(EvalError::Worker(_)) => self.consecutive_failures = 0,
                    Err(EvalError::Protocol(msg)) => {
                        // An id mismatch means the stream is out of step.
                        if msg.contains("does not match") {
                            self.restart();
                        }
                    }
                    Err(_) => {}
                }
                result
            }
            Ok(Err(e)) => Err(self.fail_hard(format!("read from worker failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                // The worker is still busy with this request; replace it.
                self.restart();
                Err(EvalError::Timeout(timeout.as_secs_f64()))
            }
            Err(RecvTimeoutError::Disconnected) => Err(self.fail_hard("worker exited".into())),
        }
    }
}

impl RewardEvaluator for ExternalEvaluator {
    fn evaluate(&mut self, config: &PipelineConfig) -> Result<f64, EvalError> {
        let id = self.next_id;
        self.next_id += 1;
        let line = request_line(id, config, self.timeout.as_secs_f64());
        let result = self.exchange(id, &line);
        if let Err(e) = &result {
            self.failures.push(e.to_string());
        }
        result
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        self.restart();
    }
}
