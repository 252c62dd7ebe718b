//! Acceptance criteria, one pass/fail line each.
//!
//! Criteria 1 to 9 are exact property checks and take about a minute.
//! Criteria 10 and 11 train 18 agents (NoMap and ProjNeural, three auxiliary
//! arms, three seeds, 1M environment steps each) from `configs/trend-*.toml`
//! and evaluate them on 200 validation episodes. Runs live under the cargo
//! target directory and are reused or resumed when their config matches, so
//! only the first invocation pays for training (a few hours on one core).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use multionlab::config::RunConfig;
use multionlab::dataset::Dataset;
use multionlab::eval::{evaluate, report, EvalOptions, PolicyMode};
use multionlab::metrics::{format_table, Report};
use multionlab::policy::Variant;
use multionlab::train::{latest_checkpoint, load_policy, Trainer, CONFIG_FILE};
use multionlab::verify::{
    check_aux_losses, check_determinism, check_gae, check_gradients_all, check_labels, check_metrics, check_monotone_reveal, check_ppo_algebra,
    check_telescoping, Check, Mutation,
};
use multionlab::world::Split;
use serde::{Deserialize, Serialize};

const SEEDS: [u64; 3] = [0, 1, 2];
const ARMS: [&str; 3] = ["none", "dir", "dir+dist"];
const EVAL_EPISODES: usize = 200;
const EVAL_SEED: u64 = 0;

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn config_path(variant: Variant) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../configs/trend-{}.toml", variant.name()))
}

/// Evaluation summary cached next to a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunEval {
    dataset_hash: String,
    checkpoint: String,
    report: Report,
    labeled: usize,
    dir_hits: usize,
    dist_abs: usize,
}

impl RunEval {
    fn dir_accuracy(&self) -> f64 {
        self.dir_hits as f64 / self.labeled.max(1) as f64
    }

    fn dist_mae(&self) -> f64 {
        self.dist_abs as f64 / self.labeled.max(1) as f64
    }
}

/// Trains (or finishes) one run unless an identical finished run exists.
fn ensure_trained(cfg: &RunConfig, dir: &Path) -> Result<(), String> {
    let expected = cfg.to_toml().map_err(|e| e.to_string())?;
    let same_config = fs::read_to_string(dir.join(CONFIG_FILE)).is_ok_and(|t| t == expected);
    let mut trainer = if same_config && latest_checkpoint(dir).is_ok() {
        Trainer::resume(dir, threads()).map_err(|e| e.to_string())?
    } else {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        }
        Trainer::new(cfg.clone(), threads()).map_err(|e| e.to_string())?.with_output(dir)
    };
    if trainer.finished() {
        return Ok(());
    }
    let start = Instant::now();
    let label = dir.file_name().unwrap().to_string_lossy().into_owned();
    eprintln!("  training {label} from update {}", trainer.update_count());
    trainer
        .run(|l| {
            if l.update % 100 == 0 {
                eprintln!("    {label}: update {} steps {} progress {:.3} ppl {:.3} ({:.0}s)", l.update, l.env_steps, l.progress, l.ppl, start.elapsed().as_secs_f64());
            }
        })
        .map_err(|e| e.to_string())
}

fn evaluate_run(dir: &Path, dataset: &Dataset, dataset_hash: &str) -> Result<RunEval, String> {
    let ck = latest_checkpoint(dir).map_err(|e| e.to_string())?;
    let ck_name = ck.file_name().unwrap().to_string_lossy().into_owned();
    let cache = dir.join("acceptance-eval.json");
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Ok(e) = serde_json::from_str::<RunEval>(&text) {
            if e.dataset_hash == dataset_hash && e.checkpoint == ck_name {
                return Ok(e);
            }
        }
    }
    let (cfg, params) = load_policy(dir).map_err(|e| e.to_string())?;
    let opts = EvalOptions { mode: PolicyMode::Sample, seed: EVAL_SEED, threads: threads() };
    let evals = evaluate(&params, &cfg.sim, dataset, &opts).map_err(|e| e.to_string())?;
    let (mut labeled, mut dir_hits, mut dist_abs) = (0, 0, 0);
    for e in &evals {
        let (n, h, a) = e.aux_tally();
        labeled += n;
        dir_hits += h;
        dist_abs += a;
    }
    let label = dir.file_name().unwrap().to_string_lossy().into_owned();
    let out = RunEval { dataset_hash: dataset_hash.into(), checkpoint: ck_name, report: report(&label, &evals), labeled, dir_hits, dist_abs };
    fs::write(&cache, serde_json::to_string_pretty(&out).unwrap()).map_err(|e| e.to_string())?;
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

struct Grid {
    /// `(variant, arm)` to per-seed evaluations.
    runs: Vec<(Variant, &'static str, Vec<RunEval>)>,
}

impl Grid {
    fn arm(&self, v: Variant, arm: &str) -> &[RunEval] {
        &self.runs.iter().find(|(rv, ra, _)| *rv == v && *ra == arm).unwrap().2
    }

    fn median_of(&self, v: Variant, arm: &str, f: impl Fn(&RunEval) -> f64) -> f64 {
        median(self.arm(v, arm).iter().map(f).collect())
    }
}

fn trend_grid() -> Result<Grid, String> {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs");
    fs::create_dir_all(&root).map_err(|e| e.to_string())?;
    let base = RunConfig::load(&config_path(Variant::NoMap)).map_err(|e| e.to_string())?;
    let dataset = Dataset::generate(Split::Val, EVAL_EPISODES, EVAL_SEED, &base.world, base.sim.reward.success_radius).map_err(|e| e.to_string())?;
    let hash = dataset.content_hash().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for variant in [Variant::NoMap, Variant::ProjNeural] {
        let cfg0 = RunConfig::load(&config_path(variant)).map_err(|e| e.to_string())?;
        if cfg0.world != base.world || cfg0.sim != base.sim {
            return Err("trend configs must share world and simulator settings".into());
        }
        for arm in ARMS {
            let mut evals = Vec::new();
            for seed in SEEDS {
                let name = format!("{}-{}-s{seed}", variant.name(), arm.replace('+', "_"));
                let dir = root.join(&name);
                let mut cfg = cfg0.clone();
                cfg.aux = cfg.aux.with_arm(arm).map_err(|e| e.to_string())?;
                cfg.train.seed = seed;
                cfg.output_dir = dir.clone();
                ensure_trained(&cfg, &dir)?;
                evals.push(evaluate_run(&dir, &dataset, &hash)?);
            }
            runs.push((variant, arm, evals));
        }
    }
    let mut table = Vec::new();
    for (v, arm, evals) in &runs {
        let reports: Vec<Report> = evals.iter().map(|e| e.report.clone()).collect();
        table.push(Report::across_runs(&format!("{} {arm}", v.name()), &reports));
    }
    println!("Trend runs ({} validation episodes, mean ± std over seeds):", EVAL_EPISODES);
    print!("{}", format_table(&table));
    for (v, arm, evals) in &runs {
        let per: Vec<String> = evals
            .iter()
            .map(|e| format!("ppl {:.3} prog {:.3} dir {:.1}% mae {:.2}", e.report.ppl.mean, e.report.progress.mean, 100.0 * e.dir_accuracy(), e.dist_mae()))
            .collect();
        println!("  {:<11} {:<9} {}", v.name(), arm, per.join(" | "));
    }
    Ok(Grid { runs })
}

fn trend_check(grid: &Grid) -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut between = false;
    for v in [Variant::NoMap, Variant::ProjNeural] {
        let ppl = |a: &str| grid.median_of(v, a, |e| e.report.ppl.mean);
        let prog = |a: &str| grid.median_of(v, a, |e| e.report.progress.mean);
        let better = ppl("dir+dist") > ppl("none") && prog("dir+dist") > prog("none");
        ok &= better;
        let (lo, hi) = (prog("none").min(prog("dir+dist")), prog("none").max(prog("dir+dist")));
        between |= (lo..=hi).contains(&prog("dir"));
        notes.push(format!(
            "{}: median ppl none {:.3} / dir {:.3} / dir+dist {:.3}, progress {:.3} / {:.3} / {:.3}",
            v.name(),
            ppl("none"),
            ppl("dir"),
            ppl("dir+dist"),
            prog("none"),
            prog("dir"),
            prog("dir+dist")
        ));
    }
    let detail = notes.join("; ");
    if ok && between {
        Ok(detail)
    } else if !ok {
        Err(format!("dir+dist does not beat none on both medians for both variants. {detail}"))
    } else {
        Err(format!("dir progress lies outside [none, dir+dist] for both variants. {detail}"))
    }
}

fn learnability_check(grid: &Grid) -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    for v in [Variant::NoMap, Variant::ProjNeural] {
        let acc = grid.median_of(v, "dir+dist", RunEval::dir_accuracy);
        let mae = grid.median_of(v, "dir+dist", RunEval::dist_mae);
        let acc_dir = grid.median_of(v, "dir", RunEval::dir_accuracy);
        ok &= acc > 0.25 && acc_dir > 0.25 && mae < 6.0;
        notes.push(format!("{}: direction accuracy {:.1}% (dir arm {:.1}%), distance MAE {:.2} bins", v.name(), 100.0 * acc, 100.0 * acc_dir, mae));
    }
    let detail = notes.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(format!("needs direction accuracy > 25% and distance MAE < 6. {detail}"))
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut line = |n: usize, name: &str, start: Instant, r: Check| {
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {d}");
            }
        }
    };
    let t = Instant::now();
    line(1, "label oracle equivalence", t, check_labels(Mutation::None));
    let t = Instant::now();
    let r = check_gradients_all().and_then(|d| if t.elapsed().as_secs_f64() < 120.0 { Ok(d) } else { Err(format!("too slow: {d}")) });
    line(2, "gradient correctness", t, r);
    let t = Instant::now();
    line(3, "PPO algebra", t, check_ppo_algebra(Mutation::None));
    let t = Instant::now();
    line(4, "auxiliary loss semantics", t, check_aux_losses());
    let t = Instant::now();
    line(5, "reward telescoping", t, check_telescoping(100, 5));
    let t = Instant::now();
    line(6, "GAE oracle", t, check_gae(1000, 6));
    let t = Instant::now();
    line(7, "metric identities", t, check_metrics(50, 11));
    let t = Instant::now();
    line(8, "monotone reveal", t, check_monotone_reveal(1000, 7));
    let t = Instant::now();
    line(9, "determinism", t, check_determinism(5));

    let t = Instant::now();
    match trend_grid() {
        Ok(grid) => {
            line(10, "directional trend", t, trend_check(&grid));
            line(11, "auxiliary learnability", Instant::now(), learnability_check(&grid));
        }
        Err(e) => {
            line(10, "directional trend", t, Err(format!("runs failed: {e}")));
            line(11, "auxiliary learnability", Instant::now(), Err("no runs".into()));
        }
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
