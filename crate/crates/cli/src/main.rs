//! `hdt`: dataset generation, sub-goal labeling, training, evaluation and
//! report tables.
//!
//! Every command is deterministic given its flags. Failures print a single
//! `error: ...` line on stderr and exit with status 1.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hdt::checkpoint::Checkpoint;
use hdt::data::load_dataset;
use hdt::env::{generate_dataset, EnvSpec, Quality};
use hdt::eval::{evaluate_traces, DesiredReturn, EvalResult, RolloutConfig, SubgoalRefresh};
use hdt::report::{load_records, report_tables, write_records, EvalRecord};
use hdt::subgoal::{augment_dataset, SubgoalMethod};
use hdt::train::{TrainConfig, Trainer};

/// Keys of a run config that are not training hyperparameters.
const RUN_KEYS: [&str; 3] = ["dataset", "out_dir", "resume"];

pub const LAST_CHECKPOINT: &str = "last.ckpt.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt.json";
pub const TRAIN_REPORT: &str = "report.csv";

#[derive(Parser)]
#[command(name = "hdt", version, about = "Hierarchical decision transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a scripted demonstrator and write a dataset file.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long)]
        quality: Quality,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        layout_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach sub-goals and returns-to-go to every step of a dataset.
    Label {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "weighted-avg")]
        method: SubgoalMethod,
    },
    /// Train a policy from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint and write one result row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `max`, `half-max` or a number; required for return-conditioned policies.
        #[arg(long)]
        desired_return: Option<DesiredReturn>,
        #[arg(long, default_value = "every-step")]
        subgoal_refresh: SubgoalRefresh,
        #[arg(long, default_value_t = 0)]
        layout_seed: u64,
        /// Result CSV; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step JSON lines of every episode.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Build the three comparison tables from evaluation CSVs.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Training hyperparameters plus where to read and write.
struct RunConfig {
    dataset: PathBuf,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
    train: TrainConfig,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut take_path = |key: &str| -> Result<Option<PathBuf>> {
            match map.remove(key) {
                None => Ok(None),
                Some(serde_json::Value::String(s)) => Ok(Some(base.join(s))),
                Some(_) => bail!("config key `{key}` must be a string"),
            }
        };
        let dataset = take_path(RUN_KEYS[0])?.context("config is missing `dataset`")?;
        let out_dir = take_path(RUN_KEYS[1])?.context("config is missing `out_dir`")?;
        let resume = take_path(RUN_KEYS[2])?;
        let train = TrainConfig::from_json(&serde_json::Value::Object(map).to_string())?;
        Ok(Self {
            dataset,
            out_dir,
            resume,
            train,
        })
    }
}

fn gen_data(env: &str, quality: Quality, episodes: u64, seed: u64, layout_seed: u64, out: &Path) -> Result<()> {
    let spec = EnvSpec::with_layout(env.parse()?, layout_seed);
    let dataset = generate_dataset(&spec, quality, episodes as usize, seed)?;
    dataset.save(out)?;
    println!(
        "{}: {} episodes, mean return {:.4}, mean length {:.2}, zero-reward fraction {:.4}",
        out.display(),
        dataset.len(),
        dataset.mean_return(),
        dataset.mean_length(),
        dataset.zero_reward_fraction()
    );
    Ok(())
}

fn label(input: &Path, out: &Path, method: SubgoalMethod) -> Result<()> {
    let dataset = load_dataset(input)?;
    augment_dataset(&dataset, method)?.save(out)?;
    Ok(())
}

fn train(config: &Path) -> Result<()> {
    let run = RunConfig::load(config)?;
    let dataset = load_dataset(&run.dataset)?;
    let mut trainer = match &run.resume {
        Some(ckpt) => {
            let ckpt = Checkpoint::load(ckpt)?;
            let t = Trainer::resume(&dataset, &ckpt)?;
            if *t.config() != run.train {
                bail!("resume checkpoint was trained with a different config");
            }
            t
        }
        None => Trainer::new(&dataset, run.train)?,
    };
    trainer.run()?;
    let outcome = trainer.finish();
    fs::create_dir_all(&run.out_dir).with_context(|| format!("creating {}", run.out_dir.display()))?;
    outcome.last.save(run.out_dir.join(LAST_CHECKPOINT))?;
    outcome.best.save(run.out_dir.join(BEST_CHECKPOINT))?;
    let report = run.out_dir.join(TRAIN_REPORT);
    outcome
        .report
        .write_csv(fs::File::create(&report).with_context(|| format!("creating {}", report.display()))?)?;
    println!(
        "{}: {} iterations, {} evaluation points",
        run.out_dir.display(),
        outcome.last.iteration,
        outcome.report.points.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    checkpoint: &Path,
    env: &str,
    episodes: u64,
    seed: u64,
    desired_return: Option<DesiredReturn>,
    subgoal_refresh: SubgoalRefresh,
    layout_seed: u64,
    out: Option<&Path>,
    trace: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let spec = EnvSpec::with_layout(env.parse()?, layout_seed);
    ckpt.check_env(&spec)?;
    let agent = ckpt.agent()?;
    if desired_return.is_some() && !agent.kind.needs_desired_return() {
        bail!("policy {} does not take a desired return", agent.kind);
    }
    let config = RolloutConfig {
        episodes: episodes as usize,
        seed,
        desired_return: desired_return.map(|d| d.resolve(ckpt.dataset.max_return)),
        subgoal_refresh,
    };
    let traces = evaluate_traces(&agent, &spec, &config)?;
    if let Some(path) = trace {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = io::BufWriter::new(file);
        for (e, t) in traces.iter().enumerate() {
            t.write_jsonl(e, &mut w)?;
        }
        w.flush()?;
    }
    let result = EvalResult::from_traces(&traces);
    let record = EvalRecord {
        env: spec.name().to_string(),
        policy: agent.kind,
        dataset: ckpt.dataset.label.clone().unwrap_or_else(|| "unknown".into()),
        desired_return,
        desired_return_value: config.desired_return,
        episodes: config.episodes,
        seed,
        mean_return: result.mean_return,
        success_rate: result.success_rate,
        mean_length: result.mean_length,
        dataset_mean_return: ckpt.dataset.mean_return,
        dataset_mean_length: ckpt.dataset.mean_length,
    };
    match out {
        Some(path) => {
            let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_records(&[record], file)?;
        }
        None => write_records(&[record], io::stdout().lock())?,
    }
    Ok(())
}

fn report(results: &[PathBuf], out_dir: &Path) -> Result<()> {
    let mut records = Vec::new();
    for path in results {
        records.extend(load_records(path)?);
    }
    for path in report_tables(&records)?.write(out_dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HDT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .with_context(|| format!("HDT_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() -> Result<()> {
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData {
            env,
            quality,
            episodes,
            seed,
            layout_seed,
            out,
        } => gen_data(&env, quality, episodes, seed, layout_seed, &out),
        Command::Label { input, out, method } => label(&input, &out, method),
        Command::Train { config } => train(&config),
        Command::Eval {
            checkpoint,
            env,
            episodes,
            seed,
            desired_return,
            subgoal_refresh,
            layout_seed,
            out,
            trace,
        } => eval(
            &checkpoint,
            &env,
            episodes,
            seed,
            desired_return,
            subgoal_refresh,
            layout_seed,
            out.as_deref(),
            trace.as_deref(),
        ),
        Command::Report { results, out_dir } => report(&results, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
