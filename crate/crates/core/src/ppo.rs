//! Rollout storage, generalized advantage estimation and the training
//! objective: clipped surrogate, clipped value loss, entropy bonus and the
//! indicator-masked auxiliary cross-entropies.

use multionlab_autodiff::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{encode, gru_input, gru_step, heads, Bound, PolicyParams, StepInput};
use crate::spatial::AuxLabels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub rollout_len: usize,
    pub num_envs: usize,
    pub normalize_advantages: bool,
    pub clip_value: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 2.5e-4,
            adam_eps: 1e-5,
            max_grad_norm: 0.5,
            rollout_len: 128,
            num_envs: 8,
            normalize_advantages: true,
            clip_value: true,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must be in (0, 1), got {}", self.clip_eps));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must be in [0, 1]".into());
        }
        if self.epochs == 0 || self.minibatches == 0 || self.rollout_len == 0 || self.num_envs == 0 {
            return bad("epochs, minibatches, rollout_len and num_envs must be positive".into());
        }
        if self.num_envs % self.minibatches != 0 {
            return bad(format!("num_envs ({}) must be a multiple of minibatches ({})", self.num_envs, self.minibatches));
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("lr and max_grad_norm must be positive".into());
        }
        Ok(())
    }
}

/// Denominator of the auxiliary losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxNorm {
    /// All transitions in the batch, labeled or not.
    Batch,
    /// Only labeled transitions.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub direction: bool,
    pub distance: bool,
    pub seen: bool,
    pub lambda_dir: f64,
    pub lambda_dist: f64,
    pub lambda_seen: f64,
    pub normalization: AuxNorm,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig { direction: true, distance: true, seen: false, lambda_dir: 0.25, lambda_dist: 0.25, lambda_seen: 0.25, normalization: AuxNorm::Batch }
    }
}

impl AuxConfig {
    /// Applies an ablation arm: `none`, `dir` or `dir+dist`.
    pub fn with_arm(mut self, arm: &str) -> Result<AuxConfig> {
        let (d, s) = match arm {
            "none" => (false, false),
            "dir" => (true, false),
            "dir+dist" => (true, true),
            other => return Err(Error::Config(format!("unknown aux arm `{other}` (expected none, dir or dir+dist)"))),
        };
        self.direction = d;
        self.distance = s;
        Ok(self)
    }

    pub fn arm(&self) -> &'static str {
        match (self.direction, self.distance) {
            (false, false) => "none",
            (true, false) => "dir",
            (true, true) => "dir+dist",
            (false, true) => "dist",
        }
    }

    pub fn effective_dir(&self) -> f64 {
        if self.direction { self.lambda_dir } else { 0.0 }
    }

    pub fn effective_dist(&self) -> f64 {
        if self.distance { self.lambda_dist } else { 0.0 }
    }

    pub fn effective_seen(&self) -> f64 {
        if self.seen { self.lambda_seen } else { 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_dir < 0.0 || self.lambda_dist < 0.0 || self.lambda_seen < 0.0 {
            return Err(Error::Config("auxiliary loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one stream. `dones[t]` marks that
/// the episode ended after step `t`; `last_value` bootstraps a window that
/// ends mid-episode. Returns `(advantages, returns)` with returns = A + V.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` for one sample.
pub fn clipped_objective(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// One environment step as stored for optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: StepInput,
    pub action: usize,
    pub logp_old: f32,
    pub value_old: f32,
    pub reward: f64,
    /// Episode ended after this step.
    pub done: bool,
    /// First step of an episode (previous hidden state is discarded).
    pub start: bool,
    pub labels: AuxLabels,
    pub pred_dir: usize,
    pub pred_dist: usize,
}

/// `T` consecutive steps of one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvRollout {
    pub h0: Vec<f32>,
    pub steps: Vec<Transition>,
    pub last_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub envs: Vec<EnvRollout>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.envs.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64, normalize: bool) {
        for e in &mut self.envs {
            let rewards: Vec<f64> = e.steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = e.steps.iter().map(|s| f64::from(s.value_old)).collect();
            let dones: Vec<bool> = e.steps.iter().map(|s| s.done).collect();
            let (a, r) = compute_gae(&rewards, &values, &dones, e.last_value, gamma, lambda);
            e.advantages = a;
            e.returns = r;
        }
        if normalize {
            let all: Vec<f64> = self.envs.iter().flat_map(|e| e.advantages.iter().copied()).collect();
            let n = all.len().max(1) as f64;
            let mean = all.iter().sum::<f64>() / n;
            let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let std = var.sqrt() + 1e-8;
            for e in &mut self.envs {
                for a in &mut e.advantages {
                    *a = (*a - mean) / std;
                }
            }
        }
    }
}

/// Optimization inputs for a set of whole environment sequences, laid out
/// time-major (row `t * B + b`).
#[derive(Debug, Clone)]
pub struct Minibatch<'a, T: Scalar> {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<&'a StepInput>,
    pub h0: Tensor<T>,
    pub masks: Vec<T>,
    pub actions: Vec<usize>,
    pub logp_old: Vec<T>,
    pub value_old: Vec<T>,
    pub advantages: Vec<T>,
    pub returns: Vec<T>,
    pub labels: Vec<AuxLabels>,
}

impl<'a, T: Scalar> Minibatch<'a, T> {
    pub fn from_rollout(batch: &'a RolloutBatch, envs: &[usize]) -> Result<Minibatch<'a, T>> {
        let b = envs.len();
        let len = envs.first().map_or(0, |&e| batch.envs[e].steps.len());
        if b == 0 || len == 0 || envs.iter().any(|&e| batch.envs[e].steps.len() != len) {
            return Err(Error::Config("minibatch needs equal-length non-empty sequences".into()));
        }
        let hidden = batch.envs[envs[0]].h0.len();
        let mut h0 = Vec::with_capacity(b * hidden);
        for &e in envs {
            h0.extend(batch.envs[e].h0.iter().map(|&v| T::lit(f64::from(v))));
        }
        let mut mb = Minibatch {
            batch: b,
            len,
            inputs: Vec::with_capacity(b * len),
            h0: Tensor::matrix(b, hidden, h0)?,
            masks: Vec::with_capacity(b * len),
            actions: Vec::with_capacity(b * len),
            logp_old: Vec::with_capacity(b * len),
            value_old: Vec::with_capacity(b * len),
            advantages: Vec::with_capacity(b * len),
            returns: Vec::with_capacity(b * len),
            labels: Vec::with_capacity(b * len),
        };
        for t in 0..len {
            for &e in envs {
                let er = &batch.envs[e];
                let s = &er.steps[t];
                mb.inputs.push(&s.input);
                mb.masks.push(if s.start { T::zero() } else { T::one() });
                mb.actions.push(s.action);
                mb.logp_old.push(T::lit(f64::from(s.logp_old)));
                mb.value_old.push(T::lit(f64::from(s.value_old)));
                mb.advantages.push(T::lit(er.advantages[t]));
                mb.returns.push(T::lit(er.returns[t]));
                mb.labels.push(s.labels);
            }
        }
        Ok(mb)
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

/// Loss components on the tape. `total` is what gets differentiated.
pub struct LossVars {
    pub total: Var,
    /// Mean clipped surrogate (to be maximized).
    pub surrogate: Var,
    pub value: Var,
    pub entropy: Var,
    pub dir: Var,
    pub dist: Var,
    pub seen: Option<Var>,
    pub ratio: Var,
    pub values: Var,
    pub logits: Var,
    pub dir_logits: Var,
    pub dist_logits: Var,
}

/// Mean of `min(r A, clip(r, 1-eps, 1+eps) A)` with `r = exp(logp - logp_old)`.
pub fn surrogate<T: Scalar>(tape: &mut Tape<T>, logp: Var, logp_old: &[T], adv: &[T], eps: f64) -> Result<(Var, Var)> {
    let old = tape.constant(Tensor::column(logp_old.to_vec()));
    let a = tape.constant(Tensor::column(adv.to_vec()));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff)?;
    let s1 = tape.mul(ratio, a)?;
    let clipped = tape.clip(ratio, T::lit(1.0 - eps), T::lit(1.0 + eps))?;
    let s2 = tape.mul(clipped, a)?;
    let m = tape.min(s1, s2)?;
    Ok((tape.mean(m)?, ratio))
}

/// Masked cross-entropy summed over labeled rows and divided by `norm`.
pub fn aux_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[Option<usize>], norm: f64) -> Result<Var> {
    let t: Vec<usize> = targets.iter().map(|x| x.unwrap_or(0)).collect();
    let w: Vec<T> = targets.iter().map(|x| if x.is_some() { T::one() } else { T::zero() }).collect();
    let ce = tape.softmax_cross_entropy(logits, &t, &w)?;
    let s = tape.sum(ce)?;
    Ok(tape.scale(s, T::lit(1.0 / norm.max(1.0)))?)
}

/// Unrolls the policy over the minibatch sequences and assembles the loss.
pub fn minibatch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound,
    params: &PolicyParams<T>,
    mb: &Minibatch<T>,
    ppo: &PpoConfig,
    aux: &AuxConfig,
) -> Result<LossVars> {
    let cfg = &params.config;
    let (b, len, n) = (mb.batch, mb.len, mb.rows());
    let x = encode(tape, p, cfg, params.n_rays, &mb.inputs)?;
    let gi_all = gru_input(tape, p, x)?;
    let mut h = tape.constant(mb.h0.clone());
    let mut hs = Vec::with_capacity(len);
    for t in 0..len {
        let gi = tape.slice_rows(gi_all, t * b, (t + 1) * b)?;
        let m = tape.constant(Tensor::column(mb.masks[t * b..(t + 1) * b].to_vec()));
        h = gru_step(tape, p, gi, h, m, cfg.hidden)?;
        hs.push(h);
    }
    let h_all = if hs.len() == 1 { hs[0] } else { tape.concat_rows(&hs)? };
    let out = heads(tape, p, cfg, h_all)?;

    let logp_all = tape.log_softmax(out.logits)?;
    let logp = tape.gather_cols(logp_all, &mb.actions)?;
    let (surr, ratio) = surrogate(tape, logp, &mb.logp_old, &mb.advantages, ppo.clip_eps)?;

    let ret = tape.constant(Tensor::column(mb.returns.clone()));
    let v_err = tape.sub(out.value, ret)?;
    let v_sq = tape.square(v_err)?;
    let v_term = if ppo.clip_value {
        let old = tape.constant(Tensor::column(mb.value_old.clone()));
        let dv = tape.sub(out.value, old)?;
        let dv = tape.clip(dv, T::lit(-ppo.clip_eps), T::lit(ppo.clip_eps))?;
        let vc = tape.add(old, dv)?;
        let vc_err = tape.sub(vc, ret)?;
        let vc_sq = tape.square(vc_err)?;
        tape.max(v_sq, vc_sq)?
    } else {
        v_sq
    };
    let v_mean = tape.mean(v_term)?;
    let value = tape.scale(v_mean, T::lit(0.5))?;

    let probs = tape.softmax(out.logits)?;
    let plogp = tape.mul(probs, logp_all)?;
    let row_sum = tape.sum_cols(plogp)?;
    let neg_ent = tape.mean(row_sum)?;
    let entropy = tape.neg(neg_ent)?;

    let dir_t: Vec<Option<usize>> = mb.labels.iter().map(|l| l.direction).collect();
    let dist_t: Vec<Option<usize>> = mb.labels.iter().map(|l| l.distance).collect();
    let norm = match aux.normalization {
        AuxNorm::Batch => n as f64,
        AuxNorm::Labeled => mb.labels.iter().filter(|l| l.indicator).count() as f64,
    };
    let dir = aux_loss(tape, out.dir, &dir_t, norm)?;
    let dist = aux_loss(tape, out.dist, &dist_t, norm)?;
    let seen = match out.seen {
        Some(s) => {
            let zeros = tape.constant(Tensor::zeros(&[n, 1]));
            let two = tape.concat_cols(&[zeros, s])?;
            let t: Vec<Option<usize>> = mb.labels.iter().map(|l| Some(usize::from(l.indicator))).collect();
            Some(aux_loss(tape, two, &t, n as f64)?)
        }
        None => None,
    };

    let mut total = tape.neg(surr)?;
    let vterm = tape.scale(value, T::lit(ppo.value_coef))?;
    total = tape.add(total, vterm)?;
    let eterm = tape.scale(entropy, T::lit(-ppo.entropy_coef))?;
    total = tape.add(total, eterm)?;
    for (w, l) in [(aux.effective_dir(), Some(dir)), (aux.effective_dist(), Some(dist)), (aux.effective_seen(), seen)] {
        if let (true, Some(l)) = (w > 0.0, l) {
            let term = tape.scale(l, T::lit(w))?;
            total = tape.add(total, term)?;
        }
    }
    Ok(LossVars { total, surrogate: surr, value, entropy, dir, dist, seen, ratio, values: out.value, logits: out.logits, dir_logits: out.dir, dist_logits: out.dist })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_algebra() {
        assert_eq!(clipped_objective(1.0, 0.7, 0.2), 0.7);
        assert!((clipped_objective(2.0, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn gae_limits() {
        let r = [1.0, -0.5, 2.0, 0.25];
        let v = [0.0; 4];
        let d = [false; 4];
        let (a, _) = compute_gae(&r, &v, &d, 0.0, 1.0, 1.0);
        assert_eq!(a, vec![2.75, 1.75, 2.25, 0.25]);
        let v = [0.3, -0.2, 0.5, 0.1];
        let (a, ret) = compute_gae(&r, &v, &d, 0.7, 0.9, 0.0);
        for t in 0..4 {
            let next = if t == 3 { 0.7 } else { v[t + 1] };
            assert!((a[t] - (r[t] + 0.9 * next - v[t])).abs() < 1e-15);
            assert!((ret[t] - a[t] - v[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn arms_map_to_flags() {
        let a = AuxConfig::default();
        assert_eq!(a.clone().with_arm("none").unwrap().effective_dir(), 0.0);
        let d = a.clone().with_arm("dir").unwrap();
        assert_eq!((d.effective_dir(), d.effective_dist()), (0.25, 0.0));
        assert_eq!(a.clone().with_arm("dir+dist").unwrap().arm(), "dir+dist");
        assert!(a.with_arm("both").is_err());
    }
}
