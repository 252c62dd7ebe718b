//! `multionlab` command line: episode datasets, training, evaluation,
//! replay export and the verification suites.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 verification failure,
//! 3 runtime fault. `MULTIONLAB_THREADS` caps the worker thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use multionlab::config::RunConfig;
use multionlab::dataset::Dataset;
use multionlab::eval::{self, EvalOptions, PolicyMode};
use multionlab::metrics::{format_csv, format_table, Report};
use multionlab::policy::Variant;
use multionlab::replay::{self, TrajectoryLog};
use multionlab::train::{load_policy, Trainer, LOG_FILE};
use multionlab::verify::{self, Mutation};
use multionlab::world::Split;

#[derive(Parser)]
#[command(name = "multionlab", version, about = "Multi-object navigation with auxiliary spatial supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fixed episode dataset.
    GenEpisodes(GenArgs),
    /// Train an agent with PPO.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a dataset.
    Eval(EvalArgs),
    /// Export recorded episodes step by step, or check an export.
    Replay(ReplayArgs),
    /// Run the oracle and property suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    /// train, val or test.
    #[arg(long)]
    split: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Run config supplying the world and success radius (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML). Defaults are used when omitted.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Auxiliary losses: none, dir or dir+dist.
    #[arg(long)]
    aux: Option<String>,
    /// nomap, projneural, oraclemap or oracleegomap.
    #[arg(long)]
    variant: Option<String>,
    /// Environment step budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory (overrides the config's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue the run in this directory from its latest checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many updates.
    #[arg(long, default_value_t = 10)]
    log_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint or run directory; repeat to aggregate across runs.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// greedy or sample.
    #[arg(long, default_value = "greedy")]
    mode: String,
    /// Seed of the per-episode sampling streams.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the reports as CSV.
    #[arg(long)]
    emit_csv: Option<PathBuf>,
    /// Record every episode for `replay` (JSON lines).
    #[arg(long)]
    record: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Recorded episodes from `eval --record`.
    #[arg(long, required_unless_present = "check", requires = "out")]
    trajectory: Option<PathBuf>,
    /// Export file; with several episodes, one file per episode is written
    /// next to it with the episode id appended.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only export this episode.
    #[arg(long)]
    episode: Option<u64>,
    /// Also write a CSV of the scalar columns next to each export.
    #[arg(long)]
    csv: bool,
    /// Parse and validate an existing export instead.
    #[arg(long, conflicts_with = "trajectory")]
    check: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Inject a defect: none, label-sign-flip or wrong-clip-bound.
    #[arg(long, default_value = "none")]
    inject: String,
    /// Run only this suite (repeatable).
    #[arg(long)]
    suite: Vec<String>,
}

/// Errors caused by bad user input rather than a runtime fault.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn usage<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| Usage(e.to_string()).into())
}

fn threads() -> Result<usize> {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("MULTIONLAB_THREADS") {
        Ok(v) => {
            let cap: usize = usage(v.trim().parse().map_err(|_| format!("MULTIONLAB_THREADS must be a positive integer, got `{v}`")))?;
            if cap == 0 {
                return Err(Usage("MULTIONLAB_THREADS must be at least 1".into()).into());
            }
            Ok(cap.min(available))
        }
        Err(_) => Ok(available),
    }
}

/// Reads a user-named input file; a missing or unreadable file is a usage error.
fn read_input(path: &Path) -> Result<String> {
    usage(fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    // Syntax and schema problems are input errors; say where they are.
    let text = read_input(path)?;
    usage(RunConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display())))
}

fn gen_episodes(a: GenArgs) -> Result<Outcome> {
    let split: Split = usage(a.split.parse())?;
    if a.out.exists() && !a.force {
        return Err(Usage(format!("{} exists; pass --force to overwrite", a.out.display())).into());
    }
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let ds = Dataset::generate(split, a.count, a.seed, &cfg.world, cfg.sim.reward.success_radius)?;
    ds.save(&a.out)?;
    println!("wrote {} {split:?} episodes to {} (sha256 {})", ds.episodes.len(), a.out.display(), ds.content_hash()?);
    Ok(Outcome::Ok)
}

fn train(a: TrainArgs) -> Result<Outcome> {
    let threads = threads()?;
    let mut trainer = if let Some(dir) = &a.resume {
        if a.seed.is_some() || a.aux.is_some() || a.variant.is_some() || a.steps.is_some() || a.out.is_some() {
            return Err(Usage("--resume continues a run unchanged; drop the other run options".into()).into());
        }
        let t = Trainer::resume(dir, threads)?;
        eprintln!("resuming {} at update {} ({} env steps)", dir.display(), t.update_count(), t.env_steps());
        t
    } else {
        let mut cfg = match &a.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = a.seed {
            cfg.train.seed = s;
        }
        if let Some(arm) = &a.aux {
            cfg.aux = usage(cfg.aux.clone().with_arm(arm))?;
        }
        if let Some(v) = &a.variant {
            cfg.agent.variant = usage(v.parse::<Variant>())?;
        }
        if let Some(n) = a.steps {
            cfg.train.total_env_steps = n;
        }
        if let Some(out) = &a.out {
            cfg.output_dir = out.clone();
        }
        usage(cfg.validate())?;
        let dir = cfg.output_dir.clone();
        if dir.join(LOG_FILE).exists() {
            return Err(Usage(format!("{} already holds a run; use --resume or another --out", dir.display())).into());
        }
        Trainer::new(cfg, threads)?.with_output(dir)
    };
    let every = a.log_every.max(1);
    let total = trainer.config().total_updates();
    trainer.run(|l| {
        if l.update % every == 0 || l.update == total {
            let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
            eprintln!(
                "update {:>5}/{total}  steps {:>8}  return {:>7.3}  success {:.3}  progress {:.3}  ppl {:.3}  entropy {:.3}  dir acc {}  dist mae {}  {:.0}s",
                l.update,
                l.env_steps,
                l.ep_return,
                l.success,
                l.progress,
                l.ppl,
                l.entropy,
                pct(l.dir_accuracy),
                l.dist_mae.map_or("-".to_string(), |v| format!("{v:.2}")),
                l.elapsed_s
            );
        }
    })?;
    println!("finished {} updates, {} env steps, output in {}", trainer.update_count(), trainer.env_steps(), trainer.config().output_dir.display());
    Ok(Outcome::Ok)
}

fn eval_cmd(a: EvalArgs) -> Result<Outcome> {
    let mode: PolicyMode = usage(a.mode.parse())?;
    let dataset = usage(Dataset::from_text(&read_input(&a.dataset)?).map_err(|e| format!("{}: {e}", a.dataset.display())))?;
    let opts = EvalOptions { mode, seed: a.seed, threads: threads()? };
    let mut reports = Vec::new();
    let mut records = String::new();
    for ck in &a.checkpoint {
        if !ck.exists() {
            bail!(Usage(format!("checkpoint {} does not exist", ck.display())));
        }
        let (cfg, params) = load_policy(ck).with_context(|| format!("loading {}", ck.display()))?;
        let evals = eval::evaluate(&params, &cfg.sim, &dataset, &opts)?;
        let label = ck.display().to_string();
        reports.push(eval::report(&label, &evals));
        if a.record.is_some() {
            for (e, spec) in evals.iter().zip(&dataset.episodes) {
                let log = TrajectoryLog::from_eval(e, spec, cfg.agent.variant, &cfg.sim, &dataset.header.world.map);
                records.push_str(&serde_json::to_string(&log)?);
                records.push('\n');
            }
        }
    }
    if reports.len() > 1 {
        let agg = Report::across_runs(&format!("mean of {} runs", reports.len()), &reports);
        reports.push(agg);
    }
    println!("dataset {} ({} episodes, sha256 {}), {mode:?} actions", a.dataset.display(), dataset.episodes.len(), dataset.content_hash()?);
    print!("{}", format_table(&reports));
    if let Some(p) = &a.emit_csv {
        fs::write(p, format_csv(&reports)).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.record {
        fs::write(p, records).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(Outcome::Ok)
}

fn replay_cmd(a: ReplayArgs) -> Result<Outcome> {
    if let Some(p) = &a.check {
        let text = read_input(p)?;
        return match replay::check_export(&text) {
            Ok(n) => {
                println!("{}: {n} steps, round-trip ok", p.display());
                Ok(Outcome::Ok)
            }
            Err(e) => {
                eprintln!("{}: {e}", p.display());
                Ok(Outcome::VerificationFailed)
            }
        };
    }
    let (Some(traj), Some(out)) = (&a.trajectory, &a.out) else {
        bail!(Usage("replay needs --trajectory and --out, or --check".into()));
    };
    let text = read_input(traj)?;
    let logs = usage(TrajectoryLog::parse_all(&text).map_err(|e| format!("{}: {e}", traj.display())))?;
    // Keep the record number: one file may hold the same episode for several checkpoints.
    let logs: Vec<_> = logs.into_iter().enumerate().filter(|(_, l)| a.episode.is_none_or(|id| l.spec.episode_id == id)).collect();
    if logs.is_empty() {
        bail!(Usage("no matching episodes in the trajectory file".into()));
    }
    for (record, log) in &logs {
        let path = if logs.len() == 1 { out.clone() } else { with_suffix(out, &format!("-r{record}-ep{}", log.spec.episode_id)) };
        let (header, steps) = replay::export(log)?;
        fs::write(&path, replay::export_text(&header, &steps)?).with_context(|| format!("writing {}", path.display()))?;
        if a.csv {
            let csv = path.with_extension("csv");
            fs::write(&csv, replay::export_csv(&steps)).with_context(|| format!("writing {}", csv.display()))?;
        }
        println!("episode {}: {} steps -> {}", log.spec.episode_id, steps.len(), path.display());
    }
    Ok(Outcome::Ok)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn verify_cmd(a: VerifyArgs) -> Result<Outcome> {
    let mutation: Mutation = usage(a.inject.parse())?;
    let names: Vec<String> = if a.suite.is_empty() { verify::SUITES.iter().map(|s| s.to_string()).collect() } else { a.suite.clone() };
    let mut failed = 0;
    let start = std::time::Instant::now();
    for name in &names {
        let r = usage(verify::run_suite(name, mutation))?;
        println!("{r}");
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} of {} suites passed in {:.1}s", names.len() - failed, names.len(), start.elapsed().as_secs_f64());
    Ok(if failed == 0 { Outcome::Ok } else { Outcome::VerificationFailed })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenEpisodes(a) => gen_episodes(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Replay(a) => replay_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
