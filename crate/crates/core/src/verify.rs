//! Oracle and property suites behind the `verify` command.
//!
//! Each check compares the implementation against an independent
//! formulation (a sector test for direction bins, integer square roots for
//! distance bins, explicit sums for GAE, finite differences for gradients)
//! or against a stated invariant. A [`Mutation`] swaps a deliberately broken
//! variant into the code under test to show that the suite notices.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use multionlab_autodiff::{grad_check, AutodiffError, GradCheckReport, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{derive_seed, stream_episode, Dataset, MapCache, WorldConfig};
use crate::env::NavEnv;
use crate::error::{Error, Result};
use crate::metrics::{score_episode, Trajectory};
use crate::policy::{AgentConfig, Bound, PolicyParams, Variant};
use crate::ppo::{clipped_objective, compute_gae, minibatch_loss, surrogate, AuxConfig, EnvRollout, Minibatch, PpoConfig, RolloutBatch, Transition};
use crate::scripted::{run_scripted, scripted_action};
use crate::simulator::{Action, SimConfig, Simulator};
use crate::spatial::{direction_label, distance_label, AuxLabels, DIR_BINS, DIST_BINS, EGO_CENTER};
use crate::train::Trainer;
use crate::world::{geodesic_field, GenConfig, Split};

/// A deliberate defect injected into the code under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Direction labels measured clockwise instead of counter-clockwise.
    LabelSignFlip,
    /// Probability ratios clipped to `1 ± 2 eps` instead of `1 ± eps`.
    WrongClipBound,
}

impl FromStr for Mutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mutation> {
        match s {
            "none" => Ok(Mutation::None),
            "label-sign-flip" => Ok(Mutation::LabelSignFlip),
            "wrong-clip-bound" => Ok(Mutation::WrongClipBound),
            other => Err(Error::Config(format!("unknown mutation `{other}` (expected none, label-sign-flip or wrong-clip-bound)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12} {}  {:>7.2}s  {}", self.name, if self.passed { "PASS" } else { "FAIL" }, self.seconds, self.detail)
    }
}

pub const SUITES: [&str; 9] = ["labels", "gradients", "ppo", "aux-loss", "telescoping", "gae", "metrics", "reveal", "determinism"];

/// Outcome of one check: a summary on success, the first violation on failure.
pub type Check = std::result::Result<String, String>;

fn fail<E: fmt::Display>(e: E) -> String {
    format!("error: {e}")
}

pub fn run_suite(name: &str, mutation: Mutation) -> Result<SuiteResult> {
    let Some(&name) = SUITES.iter().find(|&&s| s == name) else {
        return Err(Error::Config(format!("unknown suite `{name}` (expected one of {})", SUITES.join(", "))));
    };
    let start = Instant::now();
    let outcome = match name {
        "labels" => check_labels(mutation),
        "gradients" => check_gradients_all(),
        "ppo" => check_ppo_algebra(mutation),
        "aux-loss" => check_aux_losses(),
        "telescoping" => check_telescoping(100, 5),
        "gae" => check_gae(1000, 6),
        "metrics" => check_metrics(50, 11),
        "reveal" => check_monotone_reveal(1000, 7),
        _ => check_determinism(5),
    };
    let (passed, detail) = match outcome {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    Ok(SuiteResult { name, passed, detail, seconds: start.elapsed().as_secs_f64() })
}

pub fn run_all(mutation: Mutation) -> Vec<SuiteResult> {
    SUITES.iter().map(|s| run_suite(s, mutation).expect("suite names are known")).collect()
}

// ---------------------------------------------------------------- labels

const S3: f64 = 0.866_025_403_784_438_6;

/// Unit vector at `30 k` degrees counter-clockwise from straight ahead, in
/// ego axes (x right, y ahead).
fn sector_edge(k: usize) -> (f64, f64) {
    // (-sin, cos) of k * 30 degrees, written out so axis-aligned edges are exact.
    const EDGES: [(f64, f64); 12] = [
        (0.0, 1.0),
        (-0.5, S3),
        (-S3, 0.5),
        (-1.0, 0.0),
        (-S3, -0.5),
        (-0.5, -S3),
        (0.0, -1.0),
        (0.5, -S3),
        (S3, -0.5),
        (1.0, 0.0),
        (S3, 0.5),
        (0.5, S3),
    ];
    EDGES[k % 12]
}

/// Direction bin by sector membership: `v` lies in sector `k` when it is on
/// or counter-clockwise of edge `k` and strictly clockwise of edge `k + 1`.
pub fn oracle_direction_bin(dx: i64, dy: i64) -> usize {
    let (vx, vy) = (dx as f64, dy as f64);
    let cross = |(ax, ay): (f64, f64)| ax * vy - ay * vx;
    (0..DIR_BINS)
        .find(|&k| cross(sector_edge(k)) >= 0.0 && cross(sector_edge(k + 1)) < 0.0)
        .expect("every nonzero vector lies in exactly one sector")
}

/// Distance bin from the integer square root of the squared offset.
pub fn oracle_distance_bin(dx: i64, dy: i64) -> usize {
    let sq = dx * dx + dy * dy;
    let mut r = 0i64;
    while (r + 1) * (r + 1) <= sq {
        r += 1;
    }
    (r as usize).min(DIST_BINS - 1)
}

/// Every integer offset of the 50x50 ego grid except the center.
pub fn check_labels(mutation: Mutation) -> Check {
    let start = Instant::now();
    let mut cases = 0;
    for dy in -25i64..25 {
        for dx in -25i64..25 {
            if dx == 0 && dy == 0 {
                continue;
            }
            cases += 1;
            let sx = if mutation == Mutation::LabelSignFlip { -dx } else { dx };
            let p = [(EGO_CENTER + sx as f64, EGO_CENTER + dy as f64)];
            let (dir, dist) = (direction_label(&p).1, distance_label(&p).1);
            let (od, os) = (oracle_direction_bin(dx, dy), oracle_distance_bin(dx, dy));
            if dir != od || dist != os {
                return Err(format!("offset ({dx}, {dy}): got (dir {dir}, dist {dist}), oracle (dir {od}, dist {os})"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 1.0 {
        return Err(format!("{cases} cases took {secs:.2}s (limit 1s)"));
    }
    Ok(format!("{cases}/{cases} offsets match the sector and integer-root oracles"))
}

// ------------------------------------------------------------- gradients

/// A very small network so finite differences stay cheap.
pub fn tiny_agent(variant: Variant) -> AgentConfig {
    AgentConfig {
        variant,
        hidden: 6,
        d_model: 5,
        ray_hidden: 5,
        embed_dim: 3,
        map_embed: 2,
        conv1: 3,
        conv2: 2,
        spatial_dim: 4,
        aux_hidden: 4,
        seen_head: false,
    }
}

fn tiny_world() -> WorldConfig {
    WorldConfig {
        map: GenConfig { width: 16, height: 16, rooms: 2, min_room: 3, max_room: 6, ..GenConfig::default() },
        n_goals: 2,
        ..WorldConfig::default()
    }
}

fn tiny_sim() -> SimConfig {
    SimConfig { n_rays: 4, ..SimConfig::default() }
}

/// Label pattern of a synthetic rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPattern {
    /// Alternating labeled and unlabeled steps.
    Mixed,
    All,
    None,
    /// The first half of each sequence labeled.
    FirstHalf,
}

/// Two environments, `len` steps each, from real episodes with synthetic
/// labels, plus f64 parameters with every entry randomized. Ratios and value
/// offsets are set so some samples sit inside and some outside the clip
/// range, well away from its edges.
pub fn synthetic_rollout(variant: Variant, len: usize, pattern: LabelPattern, seed: u64) -> Result<(PolicyParams<f64>, RolloutBatch)> {
    let cfg = tiny_agent(variant);
    let sim = tiny_sim();
    let world = tiny_world();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = PolicyParams::<f64>::init(&cfg, sim.n_rays, seed)?;
    for t in params.tensors_mut() {
        *t = Tensor::from_fn(t.shape(), |_| rng.gen_range(-0.5..0.5));
    }
    let ds = Dataset::generate(Split::Train, 2, seed, &world, sim.reward.success_radius)?;
    let mut cache = MapCache::new(world.map.clone());
    let mut envs = Vec::new();
    for (b, spec) in ds.episodes.iter().enumerate() {
        let map = ds.map_for(&mut cache, spec)?;
        let mut env = NavEnv::new(map, spec.clone(), sim.clone(), variant)?;
        let mut steps = Vec::new();
        for t in 0..len {
            let labeled = match pattern {
                LabelPattern::Mixed => (t + b) % 2 == 0,
                LabelPattern::All => true,
                LabelPattern::None => false,
                LabelPattern::FirstHalf => t < len / 2,
            };
            let labels = if labeled {
                AuxLabels { indicator: true, direction: Some(rng.gen_range(0..DIR_BINS)), distance: Some(rng.gen_range(0..DIST_BINS)), raw_phi: 0.0, raw_d: 0.0 }
            } else {
                AuxLabels::absent()
            };
            let action = [Action::Forward, Action::TurnLeft, Action::TurnRight][rng.gen_range(0..3)];
            steps.push(Transition {
                input: env.input(),
                action: action.index(),
                logp_old: 0.0,
                value_old: 0.0,
                reward: 0.0,
                done: false,
                // The second stream restarts mid-window to exercise masking.
                start: t == 0 || (b == 1 && t == 2),
                labels,
                pred_dir: 0,
                pred_dist: 0,
            });
            env.step(action)?;
        }
        let h0: Vec<f32> = (0..cfg.hidden).map(|_| rng.gen_range(-0.5..0.5)).collect();
        envs.push(EnvRollout { h0, steps, last_value: 0.0, advantages: vec![0.0; len], returns: vec![0.0; len] });
    }
    let mut batch = RolloutBatch { envs };

    // Current log-probabilities and values, read from a forward pass with
    // zero old log-probabilities.
    let mb = Minibatch::<f64>::from_rollout(&batch, &[0, 1])?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let bound = Bound::new(&params, &vars);
    let loss = minibatch_loss(&mut tape, &bound, &params, &mb, &PpoConfig::default(), &AuxConfig::default())?;
    let ratios = tape.value(loss.ratio).to_vec();
    let values = tape.value(loss.values).to_vec();
    const RATIOS: [f64; 6] = [0.6, 0.95, 1.3, 1.05, 0.75, 1.1];
    const ADVS: [f64; 6] = [1.0, -0.5, 0.8, -1.2, 0.3, 0.9];
    const DVS: [f64; 6] = [0.35, -0.05, -0.4, 0.1, 0.5, -0.3];
    const DRS: [f64; 6] = [0.2, -0.3, 0.45, -0.15, 0.6, -0.5];
    for t in 0..len {
        for b in 0..2 {
            let row = t * 2 + b;
            let k = row % 6;
            let s = &mut batch.envs[b].steps[t];
            s.logp_old = (ratios[row].ln() - RATIOS[k].ln()) as f32;
            s.value_old = (values[row] - DVS[k]) as f32;
            batch.envs[b].advantages[t] = ADVS[k];
            batch.envs[b].returns[t] = values[row] + DRS[k];
        }
    }
    Ok((params, batch))
}

fn ext(e: Error) -> AutodiffError {
    AutodiffError::External(e.to_string())
}

/// Finite-difference check of the full objective for one variant.
pub fn gradient_check(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let (params, batch) = synthetic_rollout(variant, 3, LabelPattern::Mixed, seed)?;
    let mb = Minibatch::<f64>::from_rollout(&batch, &[0, 1])?;
    let ppo = PpoConfig::default();
    let aux = AuxConfig::default();
    let report = grad_check(
        |tape, vars| {
            let bound = Bound::new(&params, vars);
            Ok(minibatch_loss(tape, &bound, &params, &mb, &ppo, &aux).map_err(ext)?.total)
        },
        params.tensors(),
        1e-5,
    )?;
    Ok(report)
}

/// Gradient of the total equals the weighted sum of component gradients.
pub fn check_gradient_linearity(variant: Variant, seed: u64) -> Check {
    let (params, batch) = synthetic_rollout(variant, 3, LabelPattern::Mixed, seed).map_err(fail)?;
    let mb = Minibatch::<f64>::from_rollout(&batch, &[0, 1]).map_err(fail)?;
    let ppo = PpoConfig::default();
    let aux = AuxConfig::default();
    let grads_of = |pick: &dyn Fn(&mut Tape<f64>, &crate::ppo::LossVars) -> Result<multionlab_autodiff::Var>| -> Result<Vec<Tensor<f64>>> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let bound = Bound::new(&params, &vars);
        let l = minibatch_loss(&mut tape, &bound, &params, &mb, &ppo, &aux)?;
        let target = pick(&mut tape, &l)?;
        let g = tape.backward(target)?;
        Ok(vars.iter().map(|&v| g.get_or_zeros(v)).collect())
    };
    let total = grads_of(&|_, l| Ok(l.total)).map_err(fail)?;
    let parts: [(f64, &dyn Fn(&mut Tape<f64>, &crate::ppo::LossVars) -> Result<multionlab_autodiff::Var>); 5] = [
        (-1.0, &|_, l| Ok(l.surrogate)),
        (ppo.value_coef, &|_, l| Ok(l.value)),
        (-ppo.entropy_coef, &|_, l| Ok(l.entropy)),
        (aux.lambda_dir, &|_, l| Ok(l.dir)),
        (aux.lambda_dist, &|_, l| Ok(l.dist)),
    ];
    let mut sum: Vec<Vec<f64>> = total.iter().map(|t| vec![0.0; t.len()]).collect();
    for (w, pick) in parts {
        let g = grads_of(pick).map_err(fail)?;
        for (s, gi) in sum.iter_mut().zip(&g) {
            for (a, &b) in s.iter_mut().zip(gi.data()) {
                *a += w * b;
            }
        }
    }
    let mut worst = 0.0f64;
    for (s, t) in sum.iter().zip(&total) {
        for (&a, &b) in s.iter().zip(t.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst > 1e-10 {
        return Err(format!("{}: component gradients differ from the total by {worst:e}", variant.name()));
    }
    Ok(format!("{}: linear to {worst:.1e}", variant.name()))
}

pub fn check_gradients_all() -> Check {
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let r = gradient_check(v, 17).map_err(fail)?;
        if !(r.max_rel_error < 1e-4) {
            return Err(format!(
                "{}: max relative error {:.2e} at param {} elem {} (analytic {:e}, numeric {:e})",
                v.name(),
                r.max_rel_error,
                r.worst.0,
                r.worst.1,
                r.analytic,
                r.numeric
            ));
        }
        parts.push(format!("{} {:.1e} over {}", v.name(), r.max_rel_error, r.elements));
    }
    parts.push(check_gradient_linearity(Variant::OracleEgoMap, 3)?);
    Ok(parts.join("; "))
}

// ------------------------------------------------------------------- ppo

/// A run small enough to train a few updates in well under a second.
pub fn tiny_run(variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.agent = tiny_agent(variant);
    cfg.agent.hidden = 16;
    cfg.agent.d_model = 16;
    cfg.agent.ray_hidden = 16;
    cfg.sim = tiny_sim();
    cfg.sim.max_steps = 60;
    cfg.world = tiny_world();
    cfg.ppo.num_envs = 4;
    cfg.ppo.minibatches = 2;
    cfg.ppo.rollout_len = 32;
    cfg.train.seed = seed;
    cfg.train.total_env_steps = 4 * 32 * 5;
    cfg
}

pub fn check_ppo_algebra(mutation: Mutation) -> Check {
    let eps = if mutation == Mutation::WrongClipBound { 0.4 } else { 0.2 };
    // Scalar objective and the tape surrogate must both give the textbook values.
    let cases: [(f64, f64, f64); 5] = [(1.0, 0.7, 0.7), (1.0, -1.3, -1.3), (2.0, 1.0, 1.2), (0.5, -1.0, -0.8), (1.1, 2.0, 2.2)];
    for (r, a, want) in cases {
        let got = clipped_objective(r, a, eps);
        if got != want {
            return Err(format!("clipped objective r={r} A={a}: got {got}, expected {want}"));
        }
        let mut tape = Tape::<f64>::new();
        let logp = tape.constant(Tensor::column(vec![r.ln()]));
        let (s, _) = surrogate(&mut tape, logp, &[0.0], &[a], eps).map_err(fail)?;
        let got = tape.value(s).item();
        if (got - want).abs() > 1e-12 {
            return Err(format!("tape surrogate r={r} A={a}: got {got}, expected {want}"));
        }
    }
    // Clip inactivity: a huge epsilon gives the plain ratio-weighted mean.
    let (rs, adv) = ([0.3, 1.7, 2.5, 0.9], [1.0, -2.0, 0.5, -0.25]);
    let mut tape = Tape::<f64>::new();
    let logp = tape.constant(Tensor::column(rs.iter().map(|r: &f64| r.ln()).collect()));
    let (s, ratio) = surrogate(&mut tape, logp, &[0.0; 4], &adv, 1e9).map_err(fail)?;
    let r_tape = tape.value(ratio).to_vec();
    let plain: f64 = r_tape.iter().zip(&adv).map(|(r, a)| r * a).sum::<f64>() / 4.0;
    if (tape.value(s).item() - plain).abs() > 1e-12 {
        return Err(format!("unclipped limit: {} vs {plain}", tape.value(s).item()));
    }
    // First-epoch identity on a real rollout.
    let mut trainer = Trainer::new(tiny_run(Variant::ProjNeural, 3), 1).map_err(fail)?;
    let (mut batch, _, _) = trainer.collect().map_err(fail)?;
    batch.compute_advantages(0.99, 0.95, true);
    let mb = Minibatch::<f32>::from_rollout(&batch, &[0, 1]).map_err(fail)?;
    let params = trainer.params();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let bound = Bound::new(params, &vars);
    let ppo = PpoConfig { clip_eps: eps, ..PpoConfig::default() };
    let l = minibatch_loss(&mut tape, &bound, params, &mb, &ppo, &AuxConfig::default()).map_err(fail)?;
    let dev = tape.value(l.ratio).data().iter().map(|r| (r - 1.0).abs()).fold(0.0f32, f32::max);
    let mean_adv = mb.advantages.iter().map(|&a| f64::from(a)).sum::<f64>() / mb.advantages.len() as f64;
    let surr = f64::from(tape.value(l.surrogate).item());
    if dev > 1e-6 || (surr - mean_adv).abs() > 1e-6 {
        return Err(format!("first epoch: max |r - 1| = {dev:e}, surrogate {surr} vs mean advantage {mean_adv}"));
    }
    Ok(format!("clip examples exact; unclipped limit holds; first-epoch max |r-1| = {dev:e}"))
}

// -------------------------------------------------------------- aux loss

/// Zeroes the last layers of both auxiliary heads (uniform predictions).
fn uniform_heads(params: &mut PolicyParams<f64>) {
    let names: Vec<String> = params.names().to_vec();
    for (n, t) in names.iter().zip(params.tensors_mut()) {
        if n.starts_with("dir2.") || n.starts_with("dist2.") {
            *t = Tensor::zeros(t.shape());
        }
    }
}

fn aux_parts(params: &PolicyParams<f64>, batch: &RolloutBatch, aux: &AuxConfig) -> Result<(f64, f64, f64, Vec<(String, f64)>)> {
    let mb = Minibatch::<f64>::from_rollout(batch, &[0, 1])?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let bound = Bound::new(params, &vars);
    let l = minibatch_loss(&mut tape, &bound, params, &mb, &PpoConfig::default(), aux)?;
    let (dir, dist, total) = (tape.value(l.dir).item(), tape.value(l.dist).item(), tape.value(l.total).item());
    let g = tape.backward(l.total)?;
    let head_grads = params
        .names()
        .iter()
        .zip(&vars)
        .filter(|(n, _)| n.starts_with("dir") || n.starts_with("dist"))
        .map(|(n, &v)| (n.clone(), g.get_or_zeros(v).data().iter().map(|x| x.abs()).fold(0.0, f64::max)))
        .collect();
    Ok((dir, dist, total, head_grads))
}

pub fn check_aux_losses() -> Check {
    let aux = AuxConfig::default();
    let (p, none) = synthetic_rollout(Variant::NoMap, 4, LabelPattern::None, 5).map_err(fail)?;
    let (dir, dist, _, grads) = aux_parts(&p, &none, &aux).map_err(fail)?;
    if dir != 0.0 || dist != 0.0 {
        return Err(format!("unlabeled batch: L_dir {dir}, L_dist {dist}"));
    }
    if let Some((n, g)) = grads.iter().find(|(_, g)| *g != 0.0) {
        return Err(format!("unlabeled batch: gradient {g:e} reaches {n}"));
    }
    let (mut p, all) = synthetic_rollout(Variant::NoMap, 4, LabelPattern::All, 5).map_err(fail)?;
    uniform_heads(&mut p);
    let (dir, dist, total_on, _) = aux_parts(&p, &all, &aux).map_err(fail)?;
    let (ln12, ln36) = (12f64.ln(), 36f64.ln());
    if (dir - ln12).abs() > 1e-5 || (dist - ln36).abs() > 1e-5 {
        return Err(format!("uniform heads, all labeled: L_dir {dir} (want {ln12}), L_dist {dist} (want {ln36})"));
    }
    let off = AuxConfig { direction: false, distance: false, ..aux.clone() };
    let (_, _, total_off, _) = aux_parts(&p, &all, &off).map_err(fail)?;
    let want = 0.25 * (ln12 + ln36);
    if (total_on - total_off - want).abs() > 1e-9 {
        return Err(format!("aux contribution {} (want {want})", total_on - total_off));
    }
    let (mut p, half) = synthetic_rollout(Variant::NoMap, 4, LabelPattern::FirstHalf, 5).map_err(fail)?;
    uniform_heads(&mut p);
    let (half_dir, _, _, _) = aux_parts(&p, &half, &aux).map_err(fail)?;
    if (half_dir - 0.5 * ln12).abs() > 1e-5 {
        return Err(format!("half labeled: L_dir {half_dir} (want {})", 0.5 * ln12));
    }
    Ok(format!("masked losses and head gradients zero; uniform L_dir {dir:.5}, L_dist {dist:.5}, half labeled {half_dir:.5}; aux term {want:.4}"))
}

// ----------------------------------------------------------- telescoping

/// Mostly scripted, partly random actions, so trajectories both wander and
/// reach goals.
fn mixed_action(sim: &Simulator, rng: &mut ChaCha8Rng, p_script: f64) -> Action {
    if rng.gen::<f64>() < p_script {
        scripted_action(sim)
    } else {
        [Action::Forward, Action::Forward, Action::TurnLeft, Action::TurnRight][rng.gen_range(0..4)]
    }
}

pub fn check_telescoping(pairs: usize, seed: u64) -> Check {
    let world = WorldConfig::default();
    let sim_cfg = SimConfig { max_steps: 400, ..SimConfig::default() };
    let mut cache = MapCache::new(world.map.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segments = 0;
    let mut worst = 0.0f64;
    for i in 0..pairs {
        let (map, spec) = stream_episode(&mut cache, Split::Train, seed, i as u64, &world, sim_cfg.reward.success_radius).map_err(fail)?;
        let fields = spec.goals.iter().map(|g| geodesic_field(&map, (g.x, g.y))).collect::<Result<Vec<_>>>().map_err(fail)?;
        let (mut sim, _) = Simulator::reset(Arc::clone(&map), spec.clone(), sim_cfg.clone()).map_err(fail)?;
        let p_script = rng.gen_range(0.3..0.9);
        let mut seg_goal = 0;
        let mut seg_start = spec.start;
        let mut closer_sum = 0.0;
        let mut end = spec.start;
        let mut flush = |goal: usize, from: crate::simulator::Pose, to: crate::simulator::Pose, sum: f64| -> Check {
            let want = fields[goal].at(from.x, from.y) - fields[goal].at(to.x, to.y);
            let err = (sum - want).abs();
            worst = worst.max(err);
            segments += 1;
            if err > 1e-9 {
                return Err(format!("pair {i}, goal {goal}: closer terms sum to {sum}, geodesic drop {want}"));
            }
            Ok(String::new())
        };
        while !sim.state().done {
            let a = mixed_action(&sim, &mut rng, p_script);
            let goal = sim.current_goal();
            let r = sim.step(a).map_err(fail)?;
            if (r.reward - (r.terms.goal + r.terms.closer + r.terms.time)).abs() > 0.0 {
                return Err(format!("pair {i}: reward {} is not the sum of its terms", r.reward));
            }
            if goal != seg_goal {
                flush(seg_goal, seg_start, end, closer_sum)?;
                seg_goal = goal;
                seg_start = end;
                closer_sum = 0.0;
            }
            closer_sum += r.terms.closer;
            end = sim.state().pose;
        }
        flush(seg_goal, seg_start, end, closer_sum)?;
    }
    Ok(format!("{pairs} episodes, {segments} goal segments, worst deviation {worst:.1e}"))
}

// ------------------------------------------------------------------- gae

/// Advantages by the explicit discounted sum of TD errors, truncated at
/// episode ends.
pub fn gae_oracle(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t == n { last_value } else { values[t] };
    let delta = |t: usize| rewards[t] + if dones[t] { 0.0 } else { gamma * v(t + 1) } - values[t];
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..n - t {
                if (t..t + l).any(|j| dones[j]) {
                    break;
                }
                sum += (gamma * lambda).powi(l as i32) * delta(t + l);
            }
            sum
        })
        .collect()
}

pub fn check_gae(sequences: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for s in 0..sequences {
        let (gamma, lambda) = match s % 4 {
            0 => (1.0, 1.0),
            1 => (rng.gen_range(0.8..1.0), 0.0),
            _ => (rng.gen_range(0.8..1.0), rng.gen_range(0.0..1.0)),
        };
        let r: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..6).map(|_| rng.gen_bool(0.2)).collect();
        let last = rng.gen_range(-2.0..2.0);
        let (a, ret) = compute_gae(&r, &v, &d, last, gamma, lambda);
        let o = gae_oracle(&r, &v, &d, last, gamma, lambda);
        for t in 0..6 {
            let err = (a[t] - o[t]).abs().max((ret[t] - o[t] - v[t]).abs());
            worst = worst.max(err);
            if err > 1e-10 {
                return Err(format!("sequence {s}, t={t}: GAE {} vs oracle {} (gamma {gamma}, lambda {lambda})", a[t], o[t]));
            }
        }
    }
    // Closed-form limits.
    let r = [1.0, -0.5, 2.0, 0.25, 0.0, 3.0];
    let (a, _) = compute_gae(&r, &[0.0; 6], &[false; 6], 0.0, 1.0, 1.0);
    for t in 0..6 {
        let tail: f64 = r[t..].iter().sum();
        if (a[t] - tail).abs() > 1e-12 {
            return Err(format!("Monte-Carlo limit at t={t}: {} vs {tail}", a[t]));
        }
    }
    let v = [0.3, -0.2, 0.5, 0.1, 0.7, -0.4];
    let (a, _) = compute_gae(&r, &v, &[false; 6], 0.9, 0.97, 0.0);
    for t in 0..6 {
        let next = if t == 5 { 0.9 } else { v[t + 1] };
        let td = r[t] + 0.97 * next - v[t];
        if (a[t] - td).abs() > 1e-12 {
            return Err(format!("TD(0) limit at t={t}: {} vs {td}", a[t]));
        }
    }
    Ok(format!("{sequences} random sequences match the explicit sum (worst {worst:.1e}); both limits exact"))
}

// --------------------------------------------------------------- metrics

pub fn check_metrics(episodes: usize, seed: u64) -> Check {
    let world = WorldConfig::default();
    let cfg = SimConfig::default();
    let ds = Dataset::generate(Split::Val, episodes, seed, &world, cfg.reward.success_radius).map_err(fail)?;
    let mut cache = MapCache::new(world.map.clone());
    let (mut min_spl, mut min_ppl) = (f64::INFINITY, f64::INFINITY);
    for spec in &ds.episodes {
        let map = ds.map_for(&mut cache, spec).map_err(fail)?;
        let (mut sim, _) = Simulator::reset(Arc::clone(&map), spec.clone(), cfg.clone()).map_err(fail)?;
        let traj = run_scripted(&mut sim).map_err(fail)?;
        let s = score_episode(&map, spec, &cfg, &traj).map_err(fail)?;
        if s.success != 1.0 || !(0.99..=1.0).contains(&s.spl) || !(0.99..=1.0).contains(&s.ppl) {
            return Err(format!("scripted episode {}: success {}, spl {:.4}, ppl {:.4}", spec.episode_id, s.success, s.spl, s.ppl));
        }
        min_spl = min_spl.min(s.spl);
        min_ppl = min_ppl.min(s.ppl);

        // Calling found at the start (outside the success radius) ends the
        // episode with nothing found.
        let mut zero = Trajectory::new(spec.start, spec.episode_id);
        zero.push(Action::Found, spec.start);
        let z = score_episode(&map, spec, &cfg, &zero).map_err(fail)?;
        if (z.success, z.progress, z.spl, z.ppl) != (0.0, 0.0, 0.0, 0.0) {
            return Err(format!("zero-found episode {} scored {z:?}", spec.episode_id));
        }

        // Noisy agents: bounds hold everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, spec.episode_id));
        let noisy_cfg = SimConfig { max_steps: 300, ..cfg.clone() };
        let (mut sim, _) = Simulator::reset(Arc::clone(&map), spec.clone(), noisy_cfg.clone()).map_err(fail)?;
        let mut traj = Trajectory::new(spec.start, spec.episode_id);
        while !sim.state().done {
            let a = if rng.gen_bool(0.02) { Action::Found } else { mixed_action(&sim, &mut rng, 0.6) };
            sim.step(a).map_err(fail)?;
            traj.push(a, sim.state().pose);
        }
        let s = score_episode(&map, spec, &noisy_cfg, &traj).map_err(fail)?;
        if !(0.0 <= s.spl && s.spl <= s.success && 0.0 <= s.ppl && s.ppl <= s.progress && s.progress <= 1.0) {
            return Err(format!("episode {}: bounds violated by {s:?}", spec.episode_id));
        }
    }
    Ok(format!("scripted agent solves {episodes}/{episodes}, min spl {min_spl:.4}, min ppl {min_ppl:.4}; zero-found and bound checks hold"))
}

// ---------------------------------------------------------------- reveal

pub fn check_monotone_reveal(episodes: usize, seed: u64) -> Check {
    let world = WorldConfig::default();
    let cfg = SimConfig { max_steps: 150, ..SimConfig::default() };
    let mut cache = MapCache::new(world.map.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = 0usize;
    for i in 0..episodes {
        let (map, spec) = stream_episode(&mut cache, Split::Train, seed, i as u64, &world, cfg.reward.success_radius).map_err(fail)?;
        let mut env = NavEnv::new(map, spec, cfg.clone(), Variant::ProjNeural).map_err(fail)?;
        let mut count = env.revealed().count();
        let mut seen = env.sim().state().seen.clone();
        while !env.done() {
            let a = if rng.gen_bool(0.01) { Action::Found } else { [Action::Forward, Action::Forward, Action::TurnLeft, Action::TurnRight][rng.gen_range(0..4)] };
            env.step(a).map_err(fail)?;
            steps += 1;
            let c = env.revealed().count();
            let s = &env.sim().state().seen;
            if c < count {
                return Err(format!("episode {i}: revealed cells dropped from {count} to {c}"));
            }
            if let Some(k) = (0..s.len()).find(|&k| seen[k] && !s[k]) {
                return Err(format!("episode {i}: seen flag {k} was cleared"));
            }
            count = c;
            seen.clone_from(s);
        }
    }
    Ok(format!("{episodes} random episodes, {steps} steps, no decrease"))
}

// ----------------------------------------------------------- determinism

/// Trains the same small run twice and compares checkpoint bytes.
pub fn check_determinism(updates: u64) -> Check {
    let run = |threads: usize| -> Result<(Vec<u8>, Vec<u8>)> {
        let mut t = Trainer::new(tiny_run(Variant::ProjNeural, 9), threads)?;
        for _ in 0..updates {
            t.step_update()?;
        }
        t.checkpoint_bytes()
    };
    let a = run(2).map_err(fail)?;
    let b = run(2).map_err(fail)?;
    if a != b {
        return Err(format!("checkpoints differ after {updates} updates"));
    }
    Ok(format!("{updates} updates twice: {} + {} checkpoint bytes identical", a.0.len(), a.1.len()))
}
