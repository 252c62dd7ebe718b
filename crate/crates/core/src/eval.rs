//! Policy evaluation over a fixed episode dataset.
//!
//! Episodes are stepped in lockstep groups for batching, but each episode
//! has its own random stream and the policy acts on rows independently, so
//! per-episode results do not depend on grouping or thread count.

use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_seed, Dataset, MapCache};
use crate::env::NavEnv;
use crate::error::{Error, Result};
use crate::metrics::{score_episode, EpisodeScore, Report, Trajectory};
use crate::policy::{greedy_action, policy_step, sample_action, PolicyParams, StepInput, Variant};
use crate::simulator::{Action, EpisodeSpec, SimConfig};
use crate::world::WorldMap;

/// Episodes stepped together through one batched policy call.
const GROUP: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    /// Most likely action.
    Greedy,
    /// Sample from the policy with a per-episode seeded stream.
    Sample,
}

impl FromStr for PolicyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<PolicyMode> {
        match s {
            "greedy" => Ok(PolicyMode::Greedy),
            "sample" => Ok(PolicyMode::Sample),
            other => Err(Error::Config(format!("unknown policy mode `{other}` (expected greedy or sample)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub mode: PolicyMode,
    pub seed: u64,
    pub threads: usize,
}

/// Outcome of one evaluated episode, with what is needed to replay it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub episode_id: u64,
    pub score: EpisodeScore,
    pub ep_return: f64,
    pub trajectory: Trajectory,
    /// Argmax direction and distance predictions before each action.
    pub predictions: Vec<(usize, usize)>,
    /// Direction and distance labels before each action, where supervised.
    pub labels: Vec<Option<(usize, usize)>>,
}

impl EpisodeEval {
    /// `(labeled steps, direction hits, summed distance bin error)`.
    pub fn aux_tally(&self) -> (usize, usize, usize) {
        let mut t = (0, 0, 0);
        for (&(pd, ps), l) in self.predictions.iter().zip(&self.labels) {
            if let Some((d, s)) = *l {
                t.0 += 1;
                t.1 += usize::from(pd == d);
                t.2 += ps.abs_diff(s);
            }
        }
        t
    }
}

struct Running {
    env: NavEnv,
    map: Arc<WorldMap>,
    spec: EpisodeSpec,
    rng: ChaCha8Rng,
    h: Vec<f32>,
    start: bool,
    ep_return: f64,
    trajectory: Trajectory,
    predictions: Vec<(usize, usize)>,
    labels: Vec<Option<(usize, usize)>>,
}

fn run_group(params: &PolicyParams<f32>, sim: &SimConfig, variant: Variant, group: Vec<(Arc<WorldMap>, EpisodeSpec)>, opts: &EvalOptions) -> Result<Vec<EpisodeEval>> {
    let hidden = params.config.hidden;
    let mut eps = group
        .into_iter()
        .map(|(map, spec)| {
            let env = NavEnv::new(Arc::clone(&map), spec.clone(), sim.clone(), variant)?;
            Ok(Running {
                env,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, spec.episode_id)),
                trajectory: Trajectory::new(spec.start, spec.episode_id),
                map,
                spec,
                h: vec![0.0; hidden],
                start: true,
                ep_return: 0.0,
                predictions: Vec::new(),
                labels: Vec::new(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    loop {
        let live: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].env.done()).collect();
        if live.is_empty() {
            break;
        }
        let inputs: Vec<StepInput> = live.iter().map(|&i| eps[i].env.input()).collect();
        let refs: Vec<&StepInput> = inputs.iter().collect();
        let mut h = Vec::with_capacity(live.len() * hidden);
        for &i in &live {
            h.extend_from_slice(&eps[i].h);
        }
        let masks: Vec<f32> = live.iter().map(|&i| if eps[i].start { 0.0 } else { 1.0 }).collect();
        let out = policy_step(params, &refs, &multionlab_autodiff::Tensor::matrix(live.len(), hidden, h)?, &masks)?;
        let (dw, sw) = (out.dir.cols(), out.dist.cols());
        for (row, &i) in live.iter().enumerate() {
            let e = &mut eps[i];
            let logits = &out.logits.data()[row * 4..(row + 1) * 4];
            let a = match opts.mode {
                PolicyMode::Greedy => greedy_action(logits),
                PolicyMode::Sample => sample_action(logits, &mut e.rng),
            };
            let l = e.env.labels();
            e.labels.push(l.direction.zip(l.distance));
            e.predictions.push((greedy_action(&out.dir.data()[row * dw..(row + 1) * dw]), greedy_action(&out.dist.data()[row * sw..(row + 1) * sw])));
            e.h.copy_from_slice(&out.hidden.data()[row * hidden..(row + 1) * hidden]);
            e.start = false;
            let action = Action::from_index(a).expect("policy has one logit per action");
            let r = e.env.step(action)?;
            e.ep_return += r.reward;
            e.trajectory.push(action, e.env.sim().state().pose);
        }
    }
    eps.into_iter()
        .map(|e| {
            Ok(EpisodeEval {
                episode_id: e.spec.episode_id,
                score: score_episode(&e.map, &e.spec, sim, &e.trajectory)?,
                ep_return: e.ep_return,
                trajectory: e.trajectory,
                predictions: e.predictions,
                labels: e.labels,
            })
        })
        .collect()
}

/// Runs the policy on every dataset episode, in dataset order.
pub fn evaluate(params: &PolicyParams<f32>, sim: &SimConfig, dataset: &Dataset, opts: &EvalOptions) -> Result<Vec<EpisodeEval>> {
    if (dataset.header.success_radius - sim.reward.success_radius).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "dataset success radius {} differs from the agent's {}",
            dataset.header.success_radius, sim.reward.success_radius
        )));
    }
    let mut cache = MapCache::new(dataset.header.world.map.clone());
    let mut items = Vec::with_capacity(dataset.episodes.len());
    for spec in &dataset.episodes {
        items.push((dataset.map_for(&mut cache, spec)?, spec.clone()));
    }
    let mut groups: Vec<Vec<(Arc<WorldMap>, EpisodeSpec)>> = Vec::new();
    for chunk in items.chunks(GROUP) {
        groups.push(chunk.to_vec());
    }
    let variant = params.config.variant;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<EpisodeEval>>> = pool.install(|| groups.into_par_iter().map(|g| run_group(params, sim, variant, g, opts)).collect());
    let mut out = Vec::with_capacity(dataset.episodes.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-episode mean ± std report.
pub fn report(label: &str, evals: &[EpisodeEval]) -> Report {
    let scores: Vec<EpisodeScore> = evals.iter().map(|e| e.score).collect();
    Report::from_scores(label, &scores)
}
