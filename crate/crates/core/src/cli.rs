//! Command-line front end: `run`, `ablate` and `enumerate`.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;

use crate::engine::{Budget, Clock, RunReport, Search};
use crate::evaluator::{
    Cached, ExternalEvaluator, RewardEvaluator, SyntheticEvaluator, TabularOracle,
};
use crate::grammar::{DerivationState, Grammar};
use crate::metrics::{
    average_summaries, iterations_csv, labelled_summary_csv, summarize, summary_csv,
};
use crate::policy::{rng_stream, BonusForm, SelectionPolicy};

/// Exit code for a failed search or evaluator.
pub const EXIT_FAILURE: i32 = 1;
/// Exit code for bad flags, files or configuration.
pub const EXIT_USAGE: i32 = 2;

/// Logical clock cost per action in seconds.
const LOGICAL_SECONDS_PER_ACTION: f64 = 1e-6;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failure(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(
    name = "cfg-mcts",
    version,
    about = "Grammar-guided Monte Carlo tree search"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one search and write outcomes and metrics.
    Run(RunArgs),
    /// Sweep one policy parameter and write one summary row per value.
    Ablate(AblateArgs),
    /// Print the number of productions and, below a cap, every key.
    Enumerate(EnumerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyKind {
    Uct,
    Bts,
    Tpe,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormArg {
    /// ln(visits(node)) / visits(parent)
    Paper,
    /// ln(visits(parent)) / visits(node)
    Textbook,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClockArg {
    Wall,
    Logical,
}

#[derive(Debug, Clone, Args)]
struct GrammarArgs {
    /// Grammar file; the bundled demo grammar when omitted.
    #[arg(long)]
    grammar: Option<PathBuf>,
    /// Grid points for ranges without an explicit count.
    #[arg(long)]
    range_count: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    #[command(flatten)]
    grammar: GrammarArgs,
    /// key=value file with defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long, value_enum)]
    eq1_form: Option<FormArg>,
    /// Budget in inner iterations (evaluations).
    #[arg(long, group = "budget")]
    budget_iters: Option<u64>,
    /// Budget in seconds.
    #[arg(long, group = "budget")]
    budget_secs: Option<f64>,
    /// Budget in search calls (returned configurations).
    #[arg(long, group = "budget")]
    budget_searches: Option<u64>,
    /// tabular:<csv>, synthetic:<seed>[,planted] or cmd:<command line>.
    #[arg(long)]
    eval: Option<String>,
    /// Per-evaluation timeout for external workers.
    #[arg(long)]
    timeout_s: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    clock: Option<ClockArg>,
}

#[derive(Debug, Clone, Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// UCT exploration constant.
    #[arg(long)]
    c: Option<f64>,
    /// BTS replicates.
    #[arg(long)]
    j: Option<usize>,
    /// TPE quantile, as a fraction or a percentage.
    #[arg(long)]
    gamma: Option<f64>,
    /// Also write the final search tree to tree.txt.
    #[arg(long)]
    dump_tree: bool,
}

#[derive(Debug, Clone, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated UCT constants.
    #[arg(long)]
    c: Option<String>,
    /// Comma-separated BTS replicate counts.
    #[arg(long)]
    j: Option<String>,
    /// Comma-separated TPE quantiles.
    #[arg(long)]
    gamma: Option<String>,
    /// Runs per setting, seeded seed, seed+1, ...
    #[arg(long, default_value_t = 4)]
    runs: u64,
}

#[derive(Debug, Clone, Args)]
struct EnumerateArgs {
    #[command(flatten)]
    grammar: GrammarArgs,
    /// List every canonical key.
    #[arg(long)]
    list: bool,
    /// Refuse to list more keys than this.
    #[arg(long, default_value_t = 100_000)]
    cap: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Enumerate(a) => cmd_enumerate(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

/// Settings from a `--config` file, overridden by flags.
#[derive(Debug, Default)]
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                usage(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    n + 1
                ))
            })?;
            map.insert(k.trim().replace('-', "_"), v.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {v:?}"))),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: &FileConfig,
    key: &str,
) -> CliResult<Option<T>> {
    match flag {
        Some(v) => Ok(Some(v)),
        None => file.get(key),
    }
}

fn pick_enum<T: ValueEnum>(flag: Option<T>, file: &FileConfig, key: &str) -> CliResult<Option<T>> {
    match (flag, file.raw(key)) {
        (Some(v), _) => Ok(Some(v)),
        (None, Some(v)) => T::from_str(v, true)
            .map(Some)
            .map_err(|_| usage(format!("config key {key}: unknown value {v:?}"))),
        (None, None) => Ok(None),
    }
}

fn load_grammar(args: &GrammarArgs, file: &FileConfig) -> CliResult<Arc<Grammar>> {
    let count = pick(args.range_count, file, "range_count")?.unwrap_or(3);
    if count == 0 {
        return Err(usage("--range-count must be positive"));
    }
    let path: Option<PathBuf> = match &args.grammar {
        Some(p) => Some(p.clone()),
        None => file.raw("grammar").map(PathBuf::from),
    };
    let text = match &path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read grammar {}: {e}", p.display())))?,
        None => crate::DEMO_GRAMMAR.to_string(),
    };
    let grammar = Grammar::load(&text, count).map_err(|e| {
        let name = path
            .as_ref()
            .map_or("<demo>".to_string(), |p| p.display().to_string());
        usage(format!("{name}: {e}"))
    })?;
    Ok(Arc::new(grammar))
}

fn parse_gamma(g: f64) -> f64 {
    if g > 1.0 {
        g / 100.0
    } else {
        g
    }
}

/// Fully resolved settings shared by `run` and `ablate`.
struct Settings {
    grammar: Arc<Grammar>,
    policy: PolicyKind,
    form: BonusForm,
    smoothing: f64,
    budget: Budget,
    eval: String,
    timeout_s: f64,
    seed: u64,
    out_dir: PathBuf,
    clock: Clock,
}

fn resolve(common: &CommonArgs, file: &FileConfig, default_budget: Budget) -> CliResult<Settings> {
    let grammar = load_grammar(&common.grammar, file)?;
    let policy = pick_enum(common.policy, file, "policy")?.unwrap_or(PolicyKind::Uct);
    let form = match pick_enum(common.eq1_form, file, "eq1_form")?.unwrap_or(FormArg::Paper) {
        FormArg::Paper => BonusForm::NodeLog,
        FormArg::Textbook => BonusForm::ParentLog,
    };
    let smoothing = pick(common.smoothing, file, "smoothing")?.unwrap_or(1.0);

    let iters = pick(common.budget_iters, file, "budget_iters")?;
    let secs = pick(common.budget_secs, file, "budget_secs")?;
    let searches = pick(common.budget_searches, file, "budget_searches")?;
    let budget = match (iters, secs, searches) {
        (None, None, None) => default_budget,
        (Some(n), None, None) => Budget::Iterations(n),
        (None, Some(s), None) => Budget::Seconds(s),
        (None, None, Some(n)) => Budget::Searches(n),
        _ => {
            return Err(usage(
                "give at most one of --budget-iters, --budget-secs, --budget-searches",
            ))
        }
    };

    let eval = match &common.eval {
        Some(e) => e.clone(),
        None => file
            .raw("eval")
            .map(str::to_string)
            .unwrap_or_else(|| "synthetic:0".into()),
    };
    let timeout_s = pick(common.timeout_s, file, "timeout_s")?.unwrap_or(300.0);
    if !(timeout_s > 0.0 && timeout_s.is_finite()) {
        return Err(usage(format!(
            "--timeout-s must be positive, got {timeout_s}"
        )));
    }
    let seed = pick(common.seed, file, "seed")?.unwrap_or(0);
    let out_dir = match &common.out_dir {
        Some(d) => d.clone(),
        None => PathBuf::from(file.raw("out_dir").unwrap_or("out")),
    };
    let clock = match pick_enum(common.clock, file, "clock")?.unwrap_or(ClockArg::Wall) {
        ClockArg::Wall => Clock::Wall,
        ClockArg::Logical => Clock::Logical {
            seconds_per_action: LOGICAL_SECONDS_PER_ACTION,
        },
    };
    Ok(Settings {
        grammar,
        policy,
        form,
        smoothing,
        budget,
        eval,
        timeout_s,
        seed,
        out_dir,
        clock,
    })
}

fn build_policy(s: &Settings, c: f64, j: usize, gamma: f64) -> CliResult<SelectionPolicy> {
    let policy = match s.policy {
        PolicyKind::Uct => SelectionPolicy::Uct { c, form: s.form },
        PolicyKind::Bts => SelectionPolicy::bts(j),
        PolicyKind::Tpe => SelectionPolicy::Tpe {
            gamma: parse_gamma(gamma),
            smoothing: s.smoothing,
        },
    };
    policy.validate().map_err(usage)?;
    Ok(policy)
}

/// A complete derivation with uniformly random alternatives.
fn random_key(grammar: &Grammar, seed: u64) -> String {
    let mut rng = rng_stream(seed);
    let mut state = DerivationState::start(grammar);
    while !state.is_complete() {
        let n = grammar.applicable_alternatives(&state);
        state
            .derive(rng.gen_range(0..n), grammar)
            .expect("alternative in range");
    }
    state.key().expect("complete derivation")
}

fn build_evaluator(
    spec: &str,
    grammar: &Grammar,
    timeout_s: f64,
) -> CliResult<Box<dyn RewardEvaluator>> {
    let (kind, rest) = spec.split_once(':').ok_or_else(|| {
        usage(format!(
            "--eval {spec:?}: expected tabular:, synthetic: or cmd:"
        ))
    })?;
    match kind {
        "tabular" => {
            let oracle =
                TabularOracle::from_csv(Path::new(rest), None).map_err(|e| usage(e.to_string()))?;
            Ok(Box::new(
                Cached::new(oracle).map_err(|e| usage(e.to_string()))?,
            ))
        }
        "synthetic" => {
            let (seed, planted) = match rest.split_once(',') {
                Some((s, "planted")) => (s, true),
                Some((_, other)) => {
                    return Err(usage(format!("--eval synthetic: unknown option {other:?}")))
                }
                None => (rest, false),
            };
            let seed: u64 = seed
                .parse()
                .map_err(|_| usage(format!("--eval synthetic: bad seed {seed:?}")))?;
            let eval = if planted {
                SyntheticEvaluator::with_planted(seed, random_key(grammar, seed))
            } else {
                SyntheticEvaluator::new(seed)
            };
            Ok(Box::new(eval))
        }
        "cmd" => {
            let ext = ExternalEvaluator::from_command_line(rest, timeout_s)
                .map_err(|e| usage(e.to_string()))?;
            Ok(Box::new(ext))
        }
        _ => Err(usage(format!("--eval: unknown evaluator kind {kind:?}"))),
    }
}

fn execute(
    s: &Settings,
    policy: SelectionPolicy,
    seed: u64,
    dump: bool,
) -> CliResult<(RunReport, Option<String>)> {
    let eval = build_evaluator(&s.eval, &s.grammar, s.timeout_s)?;
    let dump_policy = policy.clone();
    let search = Search::new(s.grammar.clone(), policy, eval, s.budget, seed)
        .map_err(|e| usage(e.to_string()))?
        .with_clock(s.clock);
    let (report, search) = search.run();
    for f in &report.failures {
        eprintln!("warning: {f}");
    }
    Ok((report, dump.then(|| search.tree().dump(&dump_policy))))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

// ---------------------------------------------------------------------------
// commands

fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let s = resolve(&args.common, &file, Budget::Iterations(100))?;
    let c = pick(args.c, &file, "c")?.unwrap_or(0.7);
    let j = pick(args.j, &file, "j")?.unwrap_or(1);
    let gamma = pick(args.gamma, &file, "gamma")?.unwrap_or(0.85);
    let policy = build_policy(&s, c, j, gamma)?;
    create_out_dir(&s.out_dir)?;

    let (report, dump) = execute(&s, policy, s.seed, args.dump_tree)?;
    write_file(&s.out_dir.join("outcomes.jsonl"), &report.outcomes_jsonl())?;
    write_file(
        &s.out_dir.join("iterations.csv"),
        &iterations_csv(&report.records),
    )?;
    write_file(
        &s.out_dir.join("summary.csv"),
        &summary_csv(&[summarize(&report.records)]),
    )?;
    if args.dump_tree {
        write_file(&s.out_dir.join("tree.txt"), dump.as_deref().unwrap_or(""))?;
    }

    match report.best_reward() {
        Some(best) => println!(
            "{} configurations, {} iterations, best reward {best}{}",
            report.outcomes.len(),
            report.iterations,
            if report.exhausted {
                ", search space exhausted"
            } else {
                ""
            }
        ),
        None => println!("no configurations evaluated"),
    }
    if let Some(e) = report.aborted {
        return Err(CliError::Failure(format!("search aborted: {e}")));
    }
    Ok(())
}

fn split_list<T: std::str::FromStr>(flag: &str, text: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| usage(format!("--{flag}: cannot parse {v:?}")))
        })
        .collect()
}

fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let s = resolve(&args.common, &file, Budget::Searches(100))?;
    if args.runs == 0 {
        return Err(usage("--runs must be positive"));
    }
    let list = |flag: &Option<String>, key: &str, default: &str| -> String {
        flag.clone()
            .or_else(|| file.raw(key).map(str::to_string))
            .unwrap_or_else(|| default.to_string())
    };
    let settings: Vec<(String, SelectionPolicy)> = match s.policy {
        PolicyKind::Uct => split_list::<f64>("c", &list(&args.c, "c", "0,0.1,0.7,1"))?
            .into_iter()
            .map(|c| Ok((format!("c={c}"), build_policy(&s, c, 1, 0.85)?)))
            .collect::<CliResult<_>>()?,
        PolicyKind::Bts => split_list::<usize>("j", &list(&args.j, "j", "1,10,100,1000"))?
            .into_iter()
            .map(|j| Ok((format!("j={j}"), build_policy(&s, 0.7, j, 0.85)?)))
            .collect::<CliResult<_>>()?,
        PolicyKind::Tpe => {
            split_list::<f64>("gamma", &list(&args.gamma, "gamma", "0.5,0.65,0.75,0.85"))?
                .into_iter()
                .map(|g| {
                    Ok((
                        format!("gamma={}", parse_gamma(g)),
                        build_policy(&s, 0.7, 1, g)?,
                    ))
                })
                .collect::<CliResult<_>>()?
        }
    };
    create_out_dir(&s.out_dir)?;

    let mut rows = Vec::new();
    for (label, policy) in settings {
        let mut runs = Vec::new();
        for r in 0..args.runs {
            let (report, _) = execute(&s, policy.clone(), s.seed + r, false)?;
            if let Some(e) = report.aborted {
                return Err(CliError::Failure(format!(
                    "{label}, run {r}: search aborted: {e}"
                )));
            }
            runs.push(summarize(&report.records));
        }
        rows.push((label, average_summaries(&runs)));
    }
    let csv = labelled_summary_csv("setting", &rows);
    write_file(&s.out_dir.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_enumerate(args: &EnumerateArgs) -> CliResult<()> {
    let grammar = load_grammar(&args.grammar, &FileConfig::default())?;
    let count = grammar
        .count_productions()
        .map_err(|e| CliError::Failure(e.to_string()))?;
    println!("{count}");
    if !args.list {
        return Ok(());
    }
    let states = match grammar.enumerate(args.cap) {
        Ok(states) => states,
        Err(_) => {
            eprintln!(
                "error: {count} productions exceed the listing cap of {}",
                args.cap
            );
            return Err(usage("listing refused"));
        }
    };
    let mut out = String::new();
    for state in states {
        out.push_str(&state.key().map_err(|e| CliError::Failure(e.to_string()))?);
        out.push('\n');
    }
    print!("{out}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_percentages() {
        assert_eq!(parse_gamma(85.0), 0.85);
        assert_eq!(parse_gamma(0.5), 0.5);
    }

    #[test]
    fn planted_key_is_seeded() {
        let g = Grammar::load(crate::DEMO_GRAMMAR, 3).unwrap();
        assert_eq!(random_key(&g, 5), random_key(&g, 5));
    }

    #[test]
    fn unknown_evaluator_is_usage_error() {
        let g = Grammar::load("S := \"a\"", 3).unwrap();
        assert_eq!(
            build_evaluator("magic:1", &g, 1.0).err().unwrap().code(),
            EXIT_USAGE
        );
    }
}
