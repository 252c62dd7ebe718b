//! The PPO training loop: parallel rollout collection over a fixed set of
//! environment workers, advantage estimation, minibatch optimization,
//! per-update logs and resumable checkpoints.
//!
//! Each worker owns its environment, hidden state, random stream and
//! position in its episode stream, so results do not depend on how many
//! threads step the workers.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use multionlab_autodiff::{adam_step, clip_grad_norm, AdamConfig, AdamState, Checkpoint, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{derive_seed, stream_episode, streams_hash, MapCache};
use crate::env::{EnvSnapshot, NavEnv};
use crate::error::{Error, Result};
use crate::metrics::{score_simulator, EpisodeScore};
use crate::policy::{greedy_action, log_probs, policy_step, sample_action, Bound, PolicyParams, StepInput};
use crate::ppo::{minibatch_loss, EnvRollout, Minibatch, RolloutBatch, Transition};
use crate::simulator::Action;
use crate::spatial::AuxLabels;
use crate::world::Split;

pub const PARAMS_FILE: &str = "params.bin";
pub const STATE_FILE: &str = "state.json";
pub const LATEST_FILE: &str = "latest";
pub const LOG_FILE: &str = "log.jsonl";
pub const METADATA_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
/// Episodes per worker stream covered by the recorded dataset hash.
pub const STREAM_HASH_EPISODES: u64 = 16;
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Stream offset separating worker episode streams from other seed uses.
const WORKER_STREAM: u64 = 1000;
const PARAM_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

struct Worker {
    env: NavEnv,
    input: StepInput,
    labels: AuxLabels,
    rng: ChaCha8Rng,
    h: Vec<f32>,
    start: bool,
    stream_seed: u64,
    next_index: u64,
    cache: MapCache,
    ep_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WorkerState {
    env: EnvSnapshot,
    rng: ChaCha8Rng,
    h: Vec<f32>,
    start: bool,
    stream_seed: u64,
    next_index: u64,
    ep_return: f64,
}

/// A finished training episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub ep_return: f64,
    pub steps: u32,
    pub score: EpisodeScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: RunConfig,
    update: u64,
    env_steps: u64,
    episodes: u64,
    rng: ChaCha8Rng,
    workers: Vec<WorkerState>,
    recent: VecDeque<EpisodeRecord>,
}

/// One row of the scalar log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateLog {
    pub update: u64,
    pub env_steps: u64,
    pub loss_total: f64,
    /// Mean clipped surrogate (maximized).
    pub l_ppo: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub l_dir: f64,
    pub l_dist: f64,
    pub l_seen: Option<f64>,
    pub grad_norm: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Largest |r - 1| on the first minibatch of the update, before any step.
    pub first_ratio_dev: f64,
    /// Fraction of rollout steps with the auxiliary indicator set.
    pub labeled_fraction: f64,
    /// Direction accuracy of the sampling-time predictions on labeled steps.
    pub dir_accuracy: Option<f64>,
    pub dist_accuracy: Option<f64>,
    /// Mean absolute distance-bin error on labeled steps.
    pub dist_mae: Option<f64>,
    pub episodes_finished: u64,
    pub window_episodes: usize,
    pub ep_return: f64,
    pub success: f64,
    pub progress: f64,
    pub spl: f64,
    pub ppl: f64,
    pub elapsed_s: f64,
}

/// Auxiliary prediction tallies of one rollout.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct AuxTally {
    steps: u64,
    labeled: u64,
    dir_hits: u64,
    dist_hits: u64,
    dist_abs: u64,
}

pub struct Trainer {
    cfg: RunConfig,
    params: PolicyParams<f32>,
    adam: AdamState<f32>,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    update: u64,
    env_steps: u64,
    episodes: u64,
    recent: VecDeque<EpisodeRecord>,
    pool: rayon::ThreadPool,
    out_dir: Option<PathBuf>,
}

fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

impl Worker {
    fn fresh(cfg: &RunConfig, w: usize) -> Result<Worker> {
        let stream_seed = derive_seed(cfg.train.seed, WORKER_STREAM + w as u64);
        let mut cache = MapCache::new(cfg.world.map.clone());
        let (map, spec) = stream_episode(&mut cache, Split::Train, stream_seed, 0, &cfg.world, cfg.sim.reward.success_radius)?;
        let env = NavEnv::new(map, spec, cfg.sim.clone(), cfg.agent.variant)?;
        Ok(Worker {
            input: env.input(),
            labels: env.labels(),
            env,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(stream_seed, 1)),
            h: vec![0.0; cfg.agent.hidden],
            start: true,
            stream_seed,
            next_index: 1,
            cache,
            ep_return: 0.0,
        })
    }

    fn restore(cfg: &RunConfig, s: WorkerState) -> Result<Worker> {
        let mut cache = MapCache::new(cfg.world.map.clone());
        let map = cache.get(s.env.spec.map_seed)?;
        let env = NavEnv::restore(map, s.env, cfg.sim.clone(), cfg.agent.variant)?;
        if s.h.len() != cfg.agent.hidden {
            return Err(Error::Checkpoint(format!("hidden state of width {}, expected {}", s.h.len(), cfg.agent.hidden)));
        }
        Ok(Worker {
            input: env.input(),
            labels: env.labels(),
            env,
            rng: s.rng,
            h: s.h,
            start: s.start,
            stream_seed: s.stream_seed,
            next_index: s.next_index,
            cache,
            ep_return: s.ep_return,
        })
    }

    fn state(&self) -> WorkerState {
        WorkerState {
            env: self.env.snapshot(),
            rng: self.rng.clone(),
            h: self.h.clone(),
            start: self.start,
            stream_seed: self.stream_seed,
            next_index: self.next_index,
            ep_return: self.ep_return,
        }
    }

    /// Applies `action`; on episode end scores it and starts the next one.
    fn step(&mut self, action: Action, cfg: &RunConfig) -> Result<(f64, bool, Option<EpisodeRecord>)> {
        let r = self.env.step(action)?;
        self.ep_return += r.reward;
        let mut finished = None;
        if r.done {
            let sim = self.env.sim();
            finished = Some(EpisodeRecord { ep_return: self.ep_return, steps: sim.state().steps, score: score_simulator(sim) });
            let (map, spec) =
                stream_episode(&mut self.cache, Split::Train, self.stream_seed, self.next_index, &cfg.world, cfg.sim.reward.success_radius)?;
            self.next_index += 1;
            self.env = NavEnv::new(map, spec, cfg.sim.clone(), cfg.agent.variant)?;
            self.ep_return = 0.0;
        }
        self.start = r.done;
        self.input = self.env.input();
        self.labels = self.env.labels();
        Ok((r.reward, r.done, finished))
    }
}

impl Trainer {
    /// A fresh run. `threads` caps the rayon workers used for env stepping.
    pub fn new(cfg: RunConfig, threads: usize) -> Result<Trainer> {
        cfg.validate()?;
        let params = PolicyParams::init(&cfg.agent, cfg.sim.n_rays, derive_seed(cfg.train.seed, PARAM_STREAM))?;
        let adam = AdamState::new(params.tensors());
        let workers = (0..cfg.ppo.num_envs).map(|w| Worker::fresh(&cfg, w)).collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, SHUFFLE_STREAM)),
            params,
            adam,
            workers,
            update: 0,
            env_steps: 0,
            episodes: 0,
            recent: VecDeque::new(),
            pool: build_pool(threads)?,
            out_dir: None,
            cfg,
        })
    }

    /// Directs checkpoints, logs and failure dumps to `dir`.
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Trainer {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &PolicyParams<f32> {
        &self.params
    }

    pub fn update_count(&self) -> u64 {
        self.update
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn finished(&self) -> bool {
        self.update >= self.cfg.total_updates()
    }

    /// Steps every worker `rollout_len` times with the current policy.
    pub(crate) fn collect(&mut self) -> Result<(RolloutBatch, AuxTally, Vec<EpisodeRecord>)> {
        let t_len = self.cfg.ppo.rollout_len;
        let n = self.workers.len();
        let hidden = self.cfg.agent.hidden;
        let mut envs: Vec<EnvRollout> = self
            .workers
            .iter()
            .map(|w| EnvRollout { h0: w.h.clone(), steps: Vec::with_capacity(t_len), last_value: 0.0, advantages: Vec::new(), returns: Vec::new() })
            .collect();
        let mut tally = AuxTally::default();
        let mut finished = Vec::new();
        for _ in 0..t_len {
            let (out, masks) = self.policy_on_current()?;
            let mut actions = Vec::with_capacity(n);
            for (i, w) in self.workers.iter_mut().enumerate() {
                let logits = &out.logits.data()[i * 4..(i + 1) * 4];
                let a = sample_action(logits, &mut w.rng);
                let logp = log_probs(logits)[a];
                let dir_w = out.dir.cols();
                let dist_w = out.dist.cols();
                let pred_dir = greedy_action(&out.dir.data()[i * dir_w..(i + 1) * dir_w]);
                let pred_dist = greedy_action(&out.dist.data()[i * dist_w..(i + 1) * dist_w]);
                tally.steps += 1;
                if w.labels.indicator {
                    tally.labeled += 1;
                    tally.dir_hits += u64::from(w.labels.direction == Some(pred_dir));
                    tally.dist_hits += u64::from(w.labels.distance == Some(pred_dist));
                    tally.dist_abs += w.labels.distance.map_or(0, |d| d.abs_diff(pred_dist)) as u64;
                }
                envs[i].steps.push(Transition {
                    input: w.input.clone(),
                    action: a,
                    logp_old: logp,
                    value_old: out.values[i],
                    reward: 0.0,
                    done: false,
                    start: masks[i] == 0.0,
                    labels: w.labels,
                    pred_dir,
                    pred_dist,
                });
                w.h.copy_from_slice(&out.hidden.data()[i * hidden..(i + 1) * hidden]);
                actions.push(Action::from_index(a).expect("policy has one logit per action"));
            }
            let cfg = &self.cfg;
            let workers = &mut self.workers;
            let results: Vec<Result<(f64, bool, Option<EpisodeRecord>)>> =
                self.pool.install(|| workers.par_iter_mut().zip(actions.par_iter()).map(|(w, &a)| w.step(a, cfg)).collect());
            for (i, r) in results.into_iter().enumerate() {
                let (reward, done, fin) = r.map_err(|e| Error::Worker { index: i, source: Box::new(e) })?;
                let last = envs[i].steps.last_mut().expect("pushed above");
                last.reward = reward;
                last.done = done;
                if let Some(f) = fin {
                    finished.push(f);
                }
            }
        }
        let (out, _) = self.policy_on_current()?;
        for (e, v) in envs.iter_mut().zip(&out.values) {
            e.last_value = f64::from(*v);
        }
        self.env_steps += (n * t_len) as u64;
        Ok((RolloutBatch { envs }, tally, finished))
    }

    /// Policy outputs for the workers' current inputs and hidden states,
    /// without advancing anything.
    fn policy_on_current(&self) -> Result<(crate::policy::StepOutput<f32>, Vec<f32>)> {
        let hidden = self.cfg.agent.hidden;
        let inputs: Vec<&StepInput> = self.workers.iter().map(|w| &w.input).collect();
        let mut h = Vec::with_capacity(self.workers.len() * hidden);
        for w in &self.workers {
            h.extend_from_slice(&w.h);
        }
        let masks: Vec<f32> = self.workers.iter().map(|w| if w.start { 0.0 } else { 1.0 }).collect();
        let h = Tensor::matrix(self.workers.len(), hidden, h)?;
        Ok((policy_step(&self.params, &inputs, &h, &masks)?, masks))
    }

    /// One full update: collect, estimate advantages, optimize.
    pub fn step_update(&mut self) -> Result<UpdateLog> {
        let started = Instant::now();
        let (mut batch, tally, finished) = self.collect()?;
        let ppo = self.cfg.ppo.clone();
        let aux = self.cfg.aux.clone();
        batch.compute_advantages(ppo.gamma, ppo.gae_lambda, ppo.normalize_advantages);

        let n_env = batch.envs.len();
        let per_mb = n_env / ppo.minibatches;
        let adam_cfg = AdamConfig { lr: ppo.lr, eps: ppo.adam_eps, ..AdamConfig::default() };
        let mut log = UpdateLog::default();
        let mut count = 0.0;
        let mut seen_sum = 0.0;
        let mut first_ratio_dev = None;
        let mut clip_n = 0.0;
        let mut kl_sum = 0.0;
        let mut rows_total = 0.0;
        for epoch in 0..ppo.epochs {
            let mut order: Vec<usize> = (0..n_env).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(per_mb) {
                let mb = Minibatch::<f32>::from_rollout(&batch, chunk)?;
                let mut tape = Tape::new();
                let vars = self.params.bind(&mut tape, true);
                let bound = Bound::new(&self.params, &vars);
                let loss = minibatch_loss(&mut tape, &bound, &self.params, &mb, &ppo, &aux)?;
                let total = f64::from(tape.value(loss.total).item());
                if !total.is_finite() {
                    let dump = self.dump_minibatch(&batch, chunk, epoch)?;
                    return Err(Error::NonFinite(format!("update {} epoch {epoch}: loss {total}{dump}", self.update + 1)));
                }
                let ratios = tape.value(loss.ratio).to_vec();
                if first_ratio_dev.is_none() {
                    first_ratio_dev = Some(ratios.iter().map(|r| f64::from((r - 1.0).abs())).fold(0.0, f64::max));
                }
                for r in ratios.iter().map(|&r| f64::from(r)) {
                    clip_n += f64::from(u8::from((r - 1.0).abs() > ppo.clip_eps));
                    // Low-variance KL estimate (r - 1) - ln r.
                    kl_sum += (r - 1.0) - r.ln();
                }
                rows_total += ratios.len() as f64;
                log.loss_total += total;
                log.l_ppo += f64::from(tape.value(loss.surrogate).item());
                log.value_loss += f64::from(tape.value(loss.value).item());
                log.entropy += f64::from(tape.value(loss.entropy).item());
                log.l_dir += f64::from(tape.value(loss.dir).item());
                log.l_dist += f64::from(tape.value(loss.dist).item());
                if let Some(s) = loss.seen {
                    seen_sum += f64::from(tape.value(s).item());
                }
                let grads = tape.backward(loss.total)?;
                let mut g: Vec<Tensor<f32>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
                log.grad_norm += clip_grad_norm(&mut g, ppo.max_grad_norm);
                adam_step(self.params.tensors_mut(), &g, &mut self.adam, &adam_cfg)?;
                count += 1.0;
            }
        }
        if !self.params.is_finite() {
            let dump = self.dump_minibatch(&batch, &[], ppo.epochs)?;
            return Err(Error::NonFinite(format!("parameters after update {}{dump}", self.update + 1)));
        }
        for v in [&mut log.loss_total, &mut log.l_ppo, &mut log.value_loss, &mut log.entropy, &mut log.l_dir, &mut log.l_dist, &mut log.grad_norm] {
            *v /= count;
        }
        if self.cfg.agent.seen_head {
            log.l_seen = Some(seen_sum / count);
        }
        log.clip_fraction = clip_n / rows_total;
        log.approx_kl = kl_sum / rows_total;
        log.first_ratio_dev = first_ratio_dev.unwrap_or(0.0);

        self.update += 1;
        self.episodes += finished.len() as u64;
        for f in finished {
            self.recent.push_back(f);
            if self.recent.len() > self.cfg.train.stats_window {
                self.recent.pop_front();
            }
        }
        log.update = self.update;
        log.env_steps = self.env_steps;
        log.labeled_fraction = tally.labeled as f64 / tally.steps.max(1) as f64;
        if tally.labeled > 0 {
            let l = tally.labeled as f64;
            log.dir_accuracy = Some(tally.dir_hits as f64 / l);
            log.dist_accuracy = Some(tally.dist_hits as f64 / l);
            log.dist_mae = Some(tally.dist_abs as f64 / l);
        }
        log.episodes_finished = self.episodes;
        log.window_episodes = self.recent.len();
        if !self.recent.is_empty() {
            let k = self.recent.len() as f64;
            log.ep_return = self.recent.iter().map(|r| r.ep_return).sum::<f64>() / k;
            log.success = self.recent.iter().map(|r| r.score.success).sum::<f64>() / k;
            log.progress = self.recent.iter().map(|r| r.score.progress).sum::<f64>() / k;
            log.spl = self.recent.iter().map(|r| r.score.spl).sum::<f64>() / k;
            log.ppl = self.recent.iter().map(|r| r.score.ppl).sum::<f64>() / k;
        }
        log.elapsed_s = started.elapsed().as_secs_f64();
        Ok(log)
    }

    /// Writes the offending rollout slice to the output directory, if any,
    /// and returns a suffix for the error message.
    fn dump_minibatch(&self, batch: &RolloutBatch, envs: &[usize], epoch: usize) -> Result<String> {
        let Some(dir) = &self.out_dir else {
            return Ok(String::new());
        };
        #[derive(Serialize)]
        struct Dump<'a> {
            update: u64,
            epoch: usize,
            envs: &'a [usize],
            rollouts: Vec<&'a EnvRollout>,
        }
        let picked: Vec<&EnvRollout> = if envs.is_empty() { batch.envs.iter().collect() } else { envs.iter().map(|&e| &batch.envs[e]).collect() };
        let dump = Dump { update: self.update + 1, epoch, envs, rollouts: picked };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("nonfinite-update-{:06}.json", self.update + 1));
        fs::write(&path, serde_json::to_vec(&dump)?).map_err(|e| Error::io(&path, e))?;
        Ok(format!(" (minibatch dumped to {})", path.display()))
    }

    /// Checkpoint bytes: binary parameters and optimizer moments, and the
    /// JSON training state.
    pub fn checkpoint_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut ck = Checkpoint::new();
        self.params.write_checkpoint(&mut ck, "policy.");
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            ck.push(format!("adam.m.{i}"), m.clone());
            ck.push(format!("adam.v.{i}"), v.clone());
        }
        ck.push("adam.step", Tensor::scalar(self.adam.step as f64));
        let state = TrainerState {
            config: self.cfg.clone(),
            update: self.update,
            env_steps: self.env_steps,
            episodes: self.episodes,
            rng: self.rng.clone(),
            workers: self.workers.iter().map(Worker::state).collect(),
            recent: self.recent.clone(),
        };
        Ok((ck.to_bytes(), serde_json::to_vec(&state)?))
    }

    /// Saves a checkpoint under `dir/checkpoints/update-NNNNNN` and points
    /// `latest` at it. Returns the checkpoint directory.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let name = format!("update-{:06}", self.update);
        let ck_root = dir.join("checkpoints");
        let ck_dir = ck_root.join(&name);
        fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        let (params, state) = self.checkpoint_bytes()?;
        for (file, bytes) in [(PARAMS_FILE, &params), (STATE_FILE, &state)] {
            let path = ck_dir.join(file);
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let latest = ck_root.join(LATEST_FILE);
        fs::write(&latest, &name).map_err(|e| Error::io(&latest, e))?;
        Ok(ck_dir)
    }

    /// Rebuilds a trainer from a checkpoint directory so that it continues
    /// exactly as the original run would have.
    pub fn from_checkpoint(ck_dir: &Path, threads: usize) -> Result<Trainer> {
        let (ck, state) = read_checkpoint_files(ck_dir)?;
        let cfg = state.config;
        let params = PolicyParams::read_checkpoint(&ck, "policy.", &cfg.agent, cfg.sim.n_rays)?;
        let mut adam = AdamState::new(params.tensors());
        for i in 0..adam.m.len() {
            let get = |key: String| ck.get::<f32>(&key).ok_or_else(|| Error::Checkpoint(format!("missing entry `{key}`")));
            adam.m[i] = get(format!("adam.m.{i}"))?;
            adam.v[i] = get(format!("adam.v.{i}"))?;
        }
        adam.step = ck.get::<f64>("adam.step").ok_or_else(|| Error::Checkpoint("missing entry `adam.step`".into()))?.item() as u64;
        let workers = state.workers.into_iter().map(|w| Worker::restore(&cfg, w)).collect::<Result<Vec<_>>>()?;
        if workers.len() != cfg.ppo.num_envs {
            return Err(Error::Checkpoint(format!("{} workers saved, config has {}", workers.len(), cfg.ppo.num_envs)));
        }
        Ok(Trainer {
            params,
            adam,
            workers,
            rng: state.rng,
            update: state.update,
            env_steps: state.env_steps,
            episodes: state.episodes,
            recent: state.recent,
            pool: build_pool(threads)?,
            out_dir: None,
            cfg,
        })
    }

    /// Resumes from `dir/checkpoints/latest`, dropping log rows written after
    /// that checkpoint.
    pub fn resume(dir: &Path, threads: usize) -> Result<Trainer> {
        let ck_dir = latest_checkpoint(dir)?;
        let t = Trainer::from_checkpoint(&ck_dir, threads)?.with_output(dir);
        let log_path = dir.join(LOG_FILE);
        if log_path.exists() {
            let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut kept = String::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let row: UpdateLog = serde_json::from_str(line)?;
                if row.update <= t.update {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
            fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(t)
    }

    /// Writes the run metadata and resolved config into the output directory.
    pub fn write_metadata(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let seeds: Vec<u64> = self.workers.iter().map(|w| w.stream_seed).collect();
        let dataset_hash = streams_hash(&seeds, STREAM_HASH_EPISODES, &self.cfg.world, self.cfg.sim.reward.success_radius)?;
        let meta = serde_json::json!({
            "code_version": CODE_VERSION,
            "seed": self.cfg.train.seed,
            "dataset_hash": dataset_hash,
            "episode_stream": { "split": "train", "worker_seed_base": WORKER_STREAM, "hashed_episodes_per_worker": STREAM_HASH_EPISODES },
            "normalize_advantages": self.cfg.ppo.normalize_advantages,
            "aux_arm": self.cfg.aux.arm(),
            "config": self.cfg,
        });
        let path = dir.join(METADATA_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, self.cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Trains until the step budget is spent, appending log rows and writing
    /// periodic checkpoints. `on_log` sees every row.
    pub fn run(&mut self, mut on_log: impl FnMut(&UpdateLog)) -> Result<()> {
        self.write_metadata()?;
        let every = self.cfg.train.checkpoint_every;
        while !self.finished() {
            let row = self.step_update()?;
            on_log(&row);
            if let Some(dir) = self.out_dir.clone() {
                let path = dir.join(LOG_FILE);
                let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{}", serde_json::to_string(&row)?).map_err(|e| Error::io(&path, e))?;
                if (every > 0 && self.update % every == 0) || self.finished() {
                    self.save_checkpoint(&dir)?;
                }
            }
        }
        Ok(())
    }
}

fn read_checkpoint_files(ck_dir: &Path) -> Result<(Checkpoint, TrainerState)> {
    let params_path = ck_dir.join(PARAMS_FILE);
    let ck = Checkpoint::load(&params_path).map_err(|e| Error::Checkpoint(format!("{}: {e}", params_path.display())))?;
    let state_path = ck_dir.join(STATE_FILE);
    let text = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
    Ok((ck, serde_json::from_slice(&text)?))
}

/// The checkpoint directory named by `run_dir/checkpoints/latest`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let root = run_dir.join("checkpoints");
    let latest = root.join(LATEST_FILE);
    let name = fs::read_to_string(&latest).map_err(|e| Error::io(&latest, e))?;
    Ok(root.join(name.trim()))
}

/// Loads just the policy and its run config from a checkpoint directory or
/// a run directory (which resolves to its latest checkpoint).
pub fn load_policy(path: &Path) -> Result<(RunConfig, PolicyParams<f32>)> {
    let ck_dir = if path.join(PARAMS_FILE).exists() { path.to_path_buf() } else { latest_checkpoint(path)? };
    let (ck, state) = read_checkpoint_files(&ck_dir)?;
    let params = PolicyParams::read_checkpoint(&ck, "policy.", &state.config.agent, state.config.sim.n_rays)?;
    Ok((state.config, params))
}
