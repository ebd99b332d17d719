use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use arpo::agent::{Policy, ScriptedPolicy};
use arpo::env::{generate_task_suite, DomainTag, SuiteSpec, Task};
use arpo::policy::PolicyParams;
use arpo::records::{read_jsonl, write_jsonl, write_jsonl_to};
use arpo::rollout::{run_episodes, RolloutConfig};
use arpo::selection::{select_tasks, write_reports, ProbeConfig};
use arpo::trainer::checkpoint::{load_params, save_params};
use arpo::trainer::config::TrainConfig;
use arpo::trainer::eval::{evaluate, Protocol};
use arpo::trainer::metrics::export_metrics;
use arpo::trainer::sft::pretrain_baseline;
use arpo::trainer::train_in_dir;

const BASELINE_FILE: &str = "baseline.params";
const BASELINE_KEY_FILE: &str = "baseline.toml";

#[derive(Parser)]
#[command(name = "arpo", version, about = "Group-relative policy optimization with success replay on a synthetic desktop environment")]
struct Cli {
    /// TOML configuration file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set epochs=3` or
    /// `--set baseline.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run directory. Holds training output and the cached baseline, which
    /// `select-tasks` and `eval` share with `train`.
    #[arg(long, env = "ARPO_RUN_DIR", default_value = "runs/default", global = true)]
    run_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task suite as JSON lines.
    GenTasks(GenTasks),
    /// Probe each task with the baseline and keep the ones it can solve.
    SelectTasks(SelectTasks),
    /// Train with the configured algorithm inside the run directory.
    Train(Train),
    /// Evaluate a policy under the standard and hard protocols.
    Eval(Eval),
    /// Measure virtual rollout time across environment counts.
    BenchRollout(BenchRollout),
    /// Write plot-ready CSV files derived from a run's metrics.
    ExportMetrics,
}

#[derive(Args)]
struct GenTasks {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    feasible: usize,
    #[arg(long, default_value_t = 4)]
    infeasible: usize,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    /// Fraction of tasks tagged in-domain.
    #[arg(long, default_value_t = 0.25)]
    in_domain_fraction: f64,
}

#[derive(Args)]
struct PolicyArg {
    /// Parameters file or checkpoint; defaults to the configured baseline.
    #[arg(long)]
    policy: Option<PathBuf>,
}

#[derive(Args)]
struct SelectTasks {
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-task probe results as JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyArg,
    #[arg(long, default_value_t = 16)]
    rollouts: usize,
    /// Minimum successes for a task to be kept.
    #[arg(long, default_value_t = 1)]
    keep_threshold: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    tasks: PathBuf,
    /// Tasks evaluated as out-of-domain, never trained on.
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Train on the in-domain tasks of `--tasks` and hold out the rest.
    #[arg(long, conflicts_with = "held_out")]
    split: bool,
    /// Continue from the newest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    policy: PolicyArg,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    tasks: PathBuf,
    #[command(flatten)]
    policy: PolicyArg,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-task results as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scripted {
    NeverFinish,
    Uniform,
    Oracle,
}

#[derive(Args)]
struct BenchRollout {
    /// Task suite; defaults to 32 generated feasible tasks.
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256")]
    n_envs: Vec<usize>,
    #[arg(long, value_enum, default_value = "never-finish")]
    scripted: Scripted,
    /// Learned parameters to roll out instead of a scripted policy.
    #[arg(long, conflicts_with = "scripted")]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Trajectories of the first environment count, as JSON lines.
    #[arg(long)]
    trajectories: Option<PathBuf>,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not KEY=VALUE"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = path.split_last().expect("split yields at least one item");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` is not a table"))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn load_config(cli: &Cli, extra: &[String]) -> anyhow::Result<TrainConfig> {
    let text = match &cli.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| arpo::Error::io(path, e))?,
        None => String::new(),
    };
    let mut table: toml::Table = text.parse().map_err(|e| arpo::Error::config(format!("{e}")))?;
    for o in cli.overrides.iter().chain(extra) {
        apply_override(&mut table, o)?;
    }
    let merged = toml::to_string(&table).context("re-encoding configuration")?;
    Ok(TrainConfig::from_toml(&merged)?)
}

fn load_tasks(path: &Path) -> anyhow::Result<Vec<Task>> {
    let tasks: Vec<Task> = read_jsonl(path)?;
    for t in &tasks {
        t.validate()?;
    }
    if tasks.is_empty() {
        bail!(arpo::Error::config(format!("{} holds no tasks", path.display())));
    }
    Ok(tasks)
}

/// The explicit policy file if given, otherwise the baseline described by the
/// configuration, cached in `cache_dir` when one is given.
fn resolve_policy(arg: &PolicyArg, config: &TrainConfig, cache_dir: Option<&Path>) -> anyhow::Result<PolicyParams> {
    if let Some(path) = &arg.policy {
        return Ok(load_params(path)?);
    }
    let key = format!(
        "embed = {}\nhidden = {}\n{}",
        config.embed,
        config.hidden,
        toml::to_string(&config.baseline).context("encoding baseline settings")?
    );
    if let Some(dir) = cache_dir {
        let params = dir.join(BASELINE_FILE);
        let stamp = dir.join(BASELINE_KEY_FILE);
        if params.exists() && std::fs::read_to_string(&stamp).ok().as_deref() == Some(key.as_str()) {
            return Ok(load_params(&params)?);
        }
    }
    eprintln!("pretraining baseline ({} steps)", config.baseline.steps);
    let baseline = pretrain_baseline(&config.baseline, config.shape())?;
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir).map_err(|e| arpo::Error::io(dir, e))?;
        save_params(&dir.join(BASELINE_FILE), &baseline)?;
        let stamp = dir.join(BASELINE_KEY_FILE);
        std::fs::write(&stamp, key).map_err(|e| arpo::Error::io(&stamp, e))?;
    }
    Ok(baseline)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenTasks(a) => {
            let config = load_config(cli, &[])?;
            let spec = SuiteSpec {
                seed: a.seed,
                n_feasible: a.feasible,
                n_infeasible: a.infeasible,
                min_len: a.min_len,
                max_len: a.max_len,
                in_domain_fraction: a.in_domain_fraction,
                max_steps: config.max_steps,
            };
            let tasks = generate_task_suite(&spec)?;
            write_jsonl(&a.out, &tasks)?;
            let in_domain = tasks.iter().filter(|t| t.domain_tag == DomainTag::InDomain).count();
            eprintln!("wrote {} tasks ({in_domain} in-domain) to {}", tasks.len(), a.out.display());
        }
        Command::SelectTasks(a) => {
            let config = load_config(cli, &[])?;
            let tasks = load_tasks(&a.tasks)?;
            let policy = resolve_policy(&a.policy, &config, Some(&cli.run_dir))?;
            let probe = ProbeConfig {
                n_rollouts: a.rollouts,
                keep_threshold: a.keep_threshold,
                temperature: config.rollout_temperature,
                n_envs: config.n_envs,
                max_steps: config.max_steps,
            };
            let (selected, reports) = select_tasks(&tasks, &policy, &probe, config.seed)?;
            write_jsonl(&a.out, &selected)?;
            if let Some(path) = &a.report {
                write_reports(path, &reports)?;
            }
            eprintln!("kept {} of {} tasks", selected.len(), tasks.len());
        }
        Command::Train(a) => {
            let mut extra = Vec::new();
            if let Some(v) = &a.algorithm {
                extra.push(format!("algorithm=\"{v}\""));
            }
            if let Some(v) = a.epochs {
                extra.push(format!("epochs={v}"));
            }
            if let Some(v) = a.seed {
                extra.push(format!("seed={v}"));
            }
            let config = load_config(cli, &extra)?;
            let all = load_tasks(&a.tasks)?;
            let (tasks, held_out) = if a.split {
                all.into_iter().partition(|t| t.domain_tag == DomainTag::InDomain)
            } else {
                let held_out = match &a.held_out {
                    Some(p) => load_tasks(p)?,
                    None => Vec::new(),
                };
                (all, held_out)
            };
            let baseline = resolve_policy(&a.policy, &config, Some(&cli.run_dir))?;
            let summary = train_in_dir(&cli.run_dir, config, tasks, held_out, baseline, a.resume)?;
            eprintln!(
                "{} epochs, {} optimizer steps in {}",
                summary.epochs_done,
                summary.steps,
                summary.run_dir.display()
            );
        }
        Command::Eval(a) => {
            let mut config = load_config(cli, &[])?;
            if let Some(v) = a.episodes {
                config.eval_episodes_per_task = v;
            }
            if let Some(v) = a.temperature {
                config.eval_temperature = v;
            }
            config.validate()?;
            let tasks = load_tasks(&a.tasks)?;
            let policy = resolve_policy(&a.policy, &config, Some(&cli.run_dir))?;
            let eval_config = arpo::trainer::eval::EvalConfig {
                episodes_per_task: config.eval_episodes_per_task,
                temperature: config.eval_temperature,
                max_steps: config.max_steps,
                n_envs: config.n_envs,
            };
            let report = evaluate(&policy, &tasks, &eval_config, a.seed)?;
            println!("protocol,domain,success_rate");
            for protocol in [Protocol::Standard, Protocol::Hard] {
                let name = if protocol == Protocol::Standard { "standard" } else { "hard" };
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                println!("{name},all,{}", fmt(report.success_rate(protocol)));
                println!("{name},in_domain,{}", fmt(report.domain_success(protocol, DomainTag::InDomain)));
                println!("{name},out_of_domain,{}", fmt(report.domain_success(protocol, DomainTag::OutOfDomain)));
            }
            if let Some(path) = &a.out {
                let text = serde_json::to_string_pretty(&report).context("encoding report")?;
                std::fs::write(path, text).map_err(|e| arpo::Error::io(path, e))?;
            }
        }
        Command::BenchRollout(a) => {
            let config = load_config(cli, &[])?;
            let tasks = match &a.tasks {
                Some(p) => load_tasks(p)?,
                None => generate_task_suite(&SuiteSpec::new(a.seed, 32, 0, 2..=6))?,
            };
            let learned = a.policy.as_deref().map(load_params).transpose()?;
            let scripted = match a.scripted {
                Scripted::NeverFinish => ScriptedPolicy::NeverFinish,
                Scripted::Uniform => ScriptedPolicy::Uniform,
                Scripted::Oracle => ScriptedPolicy::Oracle,
            };
            let policy: &dyn Policy = match &learned {
                Some(p) => p,
                None => &scripted,
            };
            let mut out: Box<dyn std::io::Write> = match &a.out {
                Some(p) => Box::new(std::fs::File::create(p).map_err(|e| arpo::Error::io(p, e))?),
                None => Box::new(std::io::stdout().lock()),
            };
            writeln!(out, "n_envs,per_batch_vtime,per_epoch_vtime")?;
            for (i, &n_envs) in a.n_envs.iter().enumerate() {
                let rollout = RolloutConfig {
                    n_envs,
                    ..config.rollout()
                };
                rollout.validate()?;
                let (trajectories, report) = run_episodes(&tasks, config.group_size, policy, &rollout, a.seed)?;
                writeln!(
                    out,
                    "{},{},{}",
                    report.n_envs,
                    report.per_batch_vtime(),
                    report.per_epoch_vtime
                )?;
                if i == 0 {
                    if let Some(path) = &a.trajectories {
                        let file = std::fs::File::create(path).map_err(|e| arpo::Error::io(path, e))?;
                        write_jsonl_to(std::io::BufWriter::new(file), &trajectories)
                            .map_err(|e| arpo::Error::io(path, e))?;
                    }
                }
            }
            out.flush()?;
        }
        Command::ExportMetrics => {
            for path in export_metrics(&cli.run_dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<arpo::Error>().map_or(1, arpo::Error::exit_code);
            ExitCode::from(code)
        }
    }
}
