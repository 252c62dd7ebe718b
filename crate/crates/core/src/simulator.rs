//! Episode dynamics: poses, the four discrete actions, semantic ray casting,
//! seen-flag tracking, goal progression and the shaped reward.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{geodesic_field, GeodesicField, ObjectPlacement, WorldMap};

pub const N_HEADINGS: u8 = 12;
pub const N_ACTIONS: usize = 4;

const S3: f64 = 0.866_025_403_784_438_6;
/// Unit heading vectors for the 12 headings, exact on the axes.
const HEADING_COS: [f64; 12] = [1.0, S3, 0.5, 0.0, -0.5, -S3, -1.0, -S3, -0.5, 0.0, 0.5, S3];
const HEADING_SIN: [f64; 12] = [0.0, 0.5, S3, 1.0, S3, 0.5, 0.0, -0.5, -S3, -1.0, -S3, -0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Found,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Found];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }
}

/// Agent pose; `heading` counts 30 degree steps counter-clockwise from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: u8,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: u8) -> Pose {
        Pose { x, y, heading: heading % N_HEADINGS }
    }

    pub fn heading_rad(&self) -> f64 {
        f64::from(self.heading) * std::f64::consts::PI / 6.0
    }

    pub fn direction(&self) -> (f64, f64) {
        (HEADING_COS[self.heading as usize], HEADING_SIN[self.heading as usize])
    }

    pub fn turned(&self, steps: i32) -> Pose {
        let h = (i32::from(self.heading) + steps).rem_euclid(i32::from(N_HEADINGS)) as u8;
        Pose { heading: h, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub r_goal: f64,
    pub time_penalty: f64,
    pub success_radius: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r_goal: 2.5, time_penalty: -0.01, success_radius: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub fov_deg: f64,
    pub n_rays: usize,
    pub max_range: f64,
    pub forward_step: f64,
    pub object_radius: f64,
    pub max_steps: u32,
    pub reward: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            fov_deg: 90.0,
            n_rays: 32,
            max_range: 5.0,
            forward_step: 0.25,
            object_radius: 0.3,
            max_steps: 2500,
            reward: RewardConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.fov_deg > 0.0 && self.fov_deg < 360.0) {
            return bad(format!("fov_deg must be in (0, 360), got {}", self.fov_deg));
        }
        if self.n_rays == 0 || !(self.max_range > 0.0) || !(self.forward_step > 0.0) || !(self.object_radius > 0.0) {
            return bad("n_rays, max_range, forward_step and object_radius must be positive".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if !(self.reward.time_penalty < 0.0) {
            return bad(format!("time_penalty must be negative, got {}", self.reward.time_penalty));
        }
        if !(self.reward.success_radius > 0.0) {
            return bad("success_radius must be positive".into());
        }
        Ok(())
    }
}

/// A task instance: ordered goals plus optional distractors on one map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub episode_id: u64,
    pub map_id: String,
    pub map_seed: u64,
    pub start: Pose,
    pub goals: Vec<ObjectPlacement>,
    #[serde(default)]
    pub distractors: Vec<ObjectPlacement>,
    pub seed: u64,
}

impl EpisodeSpec {
    /// Goals first, then distractors; seen flags use this order.
    pub fn objects(&self) -> Vec<ObjectPlacement> {
        self.goals.iter().chain(&self.distractors).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HitClass {
    Obstacle,
    /// `index` refers to [`EpisodeSpec::objects`].
    Object { class_id: usize, index: usize },
    MaxRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    /// Angle relative to the heading, positive to the left.
    pub offset: f64,
    pub depth: f64,
    pub hit: HitClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub rays: Vec<Ray>,
    pub target_class: usize,
    pub prev_action: Option<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Running,
    Success,
    WrongFound,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose,
    pub goal_index: usize,
    pub seen: Vec<bool>,
    pub steps: u32,
    pub path_length: f64,
    pub forward_moves: u32,
    pub done: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub goal: f64,
    pub closer: f64,
    pub time: f64,
}

impl RewardTerms {
    pub fn total(&self) -> f64 {
        self.goal + self.closer + self.time
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub goal_index: usize,
    pub seen: Vec<bool>,
    pub geodesic_to_goal: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub obs: Observation,
    pub terms: RewardTerms,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

/// First hit of `n_rays` rays spread uniformly over the field of view, left
/// to right, by fixed-step marching at a quarter cell.
pub fn cast_rays(map: &WorldMap, objects: &[ObjectPlacement], pose: &Pose, cfg: &SimConfig) -> Vec<Ray> {
    let fov = cfg.fov_deg.to_radians();
    let step = map.resolution() / 4.0;
    let n_steps = (cfg.max_range / step).floor() as usize;
    let r2 = cfg.object_radius * cfg.object_radius;
    let heading = pose.heading_rad();
    (0..cfg.n_rays)
        .map(|i| {
            let offset = if cfg.n_rays == 1 { 0.0 } else { fov / 2.0 - fov * i as f64 / (cfg.n_rays - 1) as f64 };
            let (s, c) = (heading + offset).sin_cos();
            let mut hit = Ray { offset, depth: cfg.max_range, hit: HitClass::MaxRange };
            'march: for k in 1..=n_steps {
                let t = k as f64 * step;
                let (px, py) = (pose.x + t * c, pose.y + t * s);
                for (index, o) in objects.iter().enumerate() {
                    let (dx, dy) = (px - o.x, py - o.y);
                    if dx * dx + dy * dy <= r2 {
                        hit = Ray { offset, depth: t, hit: HitClass::Object { class_id: o.class_id, index } };
                        break 'march;
                    }
                }
                if !map.is_free_point(px, py) {
                    hit = Ray { offset, depth: t, hit: HitClass::Obstacle };
                    break;
                }
            }
            hit
        })
        .collect()
}

/// Monotone OR of ray hits into the per-object seen flags.
pub fn update_seen(seen: &mut [bool], rays: &[Ray]) {
    for r in rays {
        if let HitClass::Object { index, .. } = r.hit {
            if let Some(s) = seen.get_mut(index) {
                *s = true;
            }
        }
    }
}

/// One running episode.
#[derive(Debug, Clone)]
pub struct Simulator {
    map: Arc<WorldMap>,
    spec: EpisodeSpec,
    objects: Vec<ObjectPlacement>,
    cfg: SimConfig,
    goal_fields: Vec<Arc<GeodesicField>>,
    state: SimState,
    rays: Vec<Ray>,
}

impl Simulator {
    pub fn reset(map: Arc<WorldMap>, spec: EpisodeSpec, cfg: SimConfig) -> Result<(Simulator, Observation)> {
        cfg.validate()?;
        if spec.goals.is_empty() {
            return Err(Error::Config("episode has no goals".into()));
        }
        if !map.is_free_point(spec.start.x, spec.start.y) {
            return Err(Error::Blocked(format!("start pose ({:.3}, {:.3}) is not in free space", spec.start.x, spec.start.y)));
        }
        let goal_fields = spec
            .goals
            .iter()
            .map(|g| geodesic_field(&map, (g.x, g.y)).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let objects = spec.objects();
        let rays = cast_rays(&map, &objects, &spec.start, &cfg);
        let mut seen = vec![false; objects.len()];
        update_seen(&mut seen, &rays);
        let state = SimState {
            pose: spec.start,
            goal_index: 0,
            seen,
            steps: 0,
            path_length: 0.0,
            forward_moves: 0,
            done: false,
            outcome: Outcome::Running,
        };
        let sim = Simulator { map, spec, objects, cfg, goal_fields, state, rays };
        let obs = sim.observation(None);
        Ok((sim, obs))
    }

    /// Rebuilds a simulator mid-episode from a saved state.
    pub fn restore(map: Arc<WorldMap>, spec: EpisodeSpec, cfg: SimConfig, state: SimState) -> Result<Simulator> {
        let (mut sim, _) = Simulator::reset(map, spec, cfg)?;
        if state.seen.len() != sim.objects.len() || !sim.map.is_free_point(state.pose.x, state.pose.y) {
            return Err(Error::Trajectory("saved state does not fit its episode".into()));
        }
        sim.rays = cast_rays(&sim.map, &sim.objects, &state.pose, &sim.cfg);
        sim.state = state;
        Ok(sim)
    }

    pub fn map(&self) -> &Arc<WorldMap> {
        &self.map
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn objects(&self) -> &[ObjectPlacement] {
        &self.objects
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn rays(&self) -> &[Ray] {
        &self.rays
    }

    pub fn goal_field(&self, k: usize) -> &GeodesicField {
        &self.goal_fields[k]
    }

    /// Index of the goal the agent is currently looking for, clamped to the
    /// last goal once the episode has succeeded.
    pub fn current_goal(&self) -> usize {
        self.state.goal_index.min(self.spec.goals.len() - 1)
    }

    pub fn geodesic_to_goal(&self) -> f64 {
        let p = &self.state.pose;
        self.goal_fields[self.current_goal()].at(p.x, p.y)
    }

    fn observation(&self, prev_action: Option<Action>) -> Observation {
        Observation {
            rays: self.rays.clone(),
            target_class: self.spec.goals[self.current_goal()].class_id,
            prev_action,
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.state.done {
            return Err(Error::EpisodeDone);
        }
        let goal = self.current_goal();
        let field = Arc::clone(&self.goal_fields[goal]);
        let before = self.state.pose;
        let geo_before = field.at(before.x, before.y);
        let mut terms = RewardTerms { time: self.cfg.reward.time_penalty, ..Default::default() };
        match action {
            Action::Forward => {
                let (c, s) = before.direction();
                let (nx, ny) = (before.x + self.cfg.forward_step * c, before.y + self.cfg.forward_step * s);
                if self.map.is_free_point(nx, ny) {
                    self.state.pose = Pose { x: nx, y: ny, ..before };
                    self.state.path_length += self.cfg.forward_step;
                    self.state.forward_moves += 1;
                }
            }
            Action::TurnLeft => self.state.pose = before.turned(1),
            Action::TurnRight => self.state.pose = before.turned(-1),
            Action::Found => {
                if geo_before <= self.cfg.reward.success_radius {
                    terms.goal = self.cfg.reward.r_goal;
                    self.state.goal_index += 1;
                    if self.state.goal_index == self.spec.goals.len() {
                        self.state.done = true;
                        self.state.outcome = Outcome::Success;
                    }
                } else {
                    self.state.done = true;
                    self.state.outcome = Outcome::WrongFound;
                }
            }
        }
        let after = self.state.pose;
        terms.closer = geo_before - field.at(after.x, after.y);
        self.state.steps += 1;
        if !self.state.done && self.state.steps >= self.cfg.max_steps {
            self.state.done = true;
            self.state.outcome = Outcome::Timeout;
        }
        self.rays = cast_rays(&self.map, &self.objects, &after, &self.cfg);
        update_seen(&mut self.state.seen, &self.rays);
        Ok(StepResult {
            obs: self.observation(Some(action)),
            terms,
            reward: terms.total(),
            done: self.state.done,
            info: StepInfo {
                goal_index: self.state.goal_index,
                seen: self.state.seen.clone(),
                geodesic_to_goal: self.geodesic_to_goal(),
                outcome: self.state.outcome,
            },
        })
    }
}
