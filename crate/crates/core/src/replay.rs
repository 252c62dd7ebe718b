//! Recorded evaluation episodes and their per-step export for external
//! plotting: revealed egocentric map, auxiliary labels and the point implied
//! by the predicted direction and distance bins.
//!
//! Export files are JSON lines: a header row, then one row per step. Ego
//! maps are 50 strings of 50 characters, first string farthest ahead, with
//! `?` unrevealed, `.` free, `#` obstacle, `0`-`7` object classes and a
//! blank outside the map.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EpisodeEval;
use crate::policy::Variant;
use crate::simulator::{Action, EpisodeSpec, SimConfig, Simulator};
use crate::spatial::{bin_point, direction_label, distance_label, ego_to_world, ego_sample_cells, make_aux_labels, RevealedMask, EGO_SIDE};
use crate::world::{generate_map, Cell, GenConfig, WorldMap};

pub const TRAJECTORY_FORMAT: &str = "MULTIONLAB-TRAJECTORY";
pub const EXPORT_FORMAT: &str = "MULTIONLAB-REPLAY";
pub const REPLAY_VERSION: u32 = 1;

/// One recorded episode: enough to re-simulate it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub sim: SimConfig,
    pub map_config: GenConfig,
    pub spec: EpisodeSpec,
    pub actions: Vec<Action>,
    /// Argmax `(direction, distance)` before each action.
    pub predictions: Vec<(usize, usize)>,
}

impl TrajectoryLog {
    pub fn from_eval(e: &EpisodeEval, spec: &EpisodeSpec, variant: Variant, sim: &SimConfig, map_config: &GenConfig) -> TrajectoryLog {
        TrajectoryLog {
            format: TRAJECTORY_FORMAT.into(),
            version: REPLAY_VERSION,
            variant,
            sim: sim.clone(),
            map_config: map_config.clone(),
            spec: spec.clone(),
            actions: e.trajectory.actions.clone(),
            predictions: e.predictions.clone(),
        }
    }

    /// Parses a JSON-lines file of logs; errors name the line.
    pub fn parse_all(text: &str) -> Result<Vec<TrajectoryLog>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let log: TrajectoryLog = serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
            if log.format != TRAJECTORY_FORMAT || log.version != REPLAY_VERSION {
                return Err(Error::Parse { line: i + 1, msg: format!("not a {TRAJECTORY_FORMAT} v{REPLAY_VERSION} record") });
            }
            if log.predictions.len() != log.actions.len() {
                return Err(Error::Parse { line: i + 1, msg: "predictions and actions differ in length".into() });
            }
            out.push(log);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub format: String,
    pub version: u32,
    pub episode_id: u64,
    pub variant: Variant,
    pub steps: usize,
}

/// Whether the auxiliary heads were supervised at this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportStep {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub heading: u8,
    pub action: Action,
    pub goal_index: usize,
    pub supervision: Supervision,
    pub label_direction: Option<usize>,
    pub label_distance: Option<usize>,
    /// Target position in ego cells.
    pub target_ego: (f64, f64),
    pub pred_direction: usize,
    pub pred_distance: usize,
    /// Center of the predicted (direction, distance) bin in ego cells.
    pub pred_ego: (f64, f64),
    /// The same point in world meters.
    pub pred_world: (f64, f64),
    pub ego_map: Vec<String>,
}

fn render_ego(map: &WorldMap, sim: &Simulator, revealed: &RevealedMask) -> Vec<String> {
    let cells = ego_sample_cells(map, &sim.state().pose);
    let mut objects = vec![None; map.width() * map.height()];
    for o in sim.objects() {
        if let Some((cx, cy)) = map.cell_of(o.x, o.y) {
            objects[map.index(cx, cy)] = Some(o.class_id);
        }
    }
    (0..EGO_SIDE)
        .rev()
        .map(|j| {
            (0..EGO_SIDE)
                .map(|i| match cells[j * EGO_SIDE + i] {
                    None => ' ',
                    Some((cx, cy)) => {
                        let wi = map.index(cx, cy);
                        if !revealed.is_revealed(wi) {
                            '?'
                        } else if let Some(c) = objects[wi] {
                            char::from_digit(c as u32, 10).unwrap_or('*')
                        } else if map.cell(cx, cy) == Cell::Obstacle {
                            '#'
                        } else {
                            '.'
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Re-simulates a logged episode and builds its per-step export.
pub fn export(log: &TrajectoryLog) -> Result<(ExportHeader, Vec<ExportStep>)> {
    let map = Arc::new(generate_map(log.spec.map_seed, &log.map_config)?);
    if map.map_id() != log.spec.map_id {
        return Err(Error::Trajectory(format!("map seed {} generates {}, log expects {}", log.spec.map_seed, map.map_id(), log.spec.map_id)));
    }
    let (mut sim, _) = Simulator::reset(Arc::clone(&map), log.spec.clone(), log.sim.clone())?;
    let mut revealed = RevealedMask::new(&map);
    revealed.update(&map, sim.objects(), sim.rays(), &sim.state().pose);
    let res = map.resolution();
    let mut steps = Vec::with_capacity(log.actions.len());
    for (t, (&action, &(pd, pdist))) in log.actions.iter().zip(&log.predictions).enumerate() {
        let st = sim.state().clone();
        let goal = sim.current_goal();
        let g = &log.spec.goals[goal];
        let labels = make_aux_labels(&st, goal, g, res);
        let target_ego = crate::spatial::world_to_ego(&st.pose, res, g.x, g.y);
        let pred_ego = bin_point(pd, pdist);
        steps.push(ExportStep {
            step: t,
            x: st.pose.x,
            y: st.pose.y,
            heading: st.pose.heading,
            action,
            goal_index: st.goal_index,
            supervision: if labels.indicator { Supervision::Supervised } else { Supervision::Unsupervised },
            label_direction: labels.direction,
            label_distance: labels.distance,
            target_ego,
            pred_direction: pd,
            pred_distance: pdist,
            pred_ego,
            pred_world: ego_to_world(&st.pose, res, pred_ego.0, pred_ego.1),
            ego_map: render_ego(&map, &sim, &revealed),
        });
        sim.step(action)?;
        revealed.update(&map, sim.objects(), sim.rays(), &sim.state().pose);
    }
    let header = ExportHeader { format: EXPORT_FORMAT.into(), version: REPLAY_VERSION, episode_id: log.spec.episode_id, variant: log.variant, steps: steps.len() };
    Ok((header, steps))
}

pub fn export_text(header: &ExportHeader, steps: &[ExportStep]) -> Result<String> {
    let mut out = serde_json::to_string(header)?;
    out.push('\n');
    for s in steps {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

/// Flat CSV of the scalar columns, for plotting tools.
pub fn export_csv(steps: &[ExportStep]) -> String {
    let mut out = String::from("step,x,y,heading,action,goal_index,supervision,label_direction,label_distance,target_u,target_v,pred_direction,pred_distance,pred_u,pred_v,pred_x,pred_y\n");
    let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    for s in steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.step,
            s.x,
            s.y,
            s.heading,
            s.action,
            s.goal_index,
            if s.supervision == Supervision::Supervised { "supervised" } else { "unsupervised" },
            opt(s.label_direction),
            opt(s.label_distance),
            s.target_ego.0,
            s.target_ego.1,
            s.pred_direction,
            s.pred_distance,
            s.pred_ego.0,
            s.pred_ego.1,
            s.pred_world.0,
            s.pred_world.1
        );
    }
    out
}

/// Parses an export and checks that every row re-serializes to the same
/// text and is internally consistent. Returns the number of steps.
pub fn check_export(text: &str) -> Result<usize> {
    let mut lines = text.lines().enumerate();
    let Some((_, first)) = lines.next() else {
        return Err(Error::Parse { line: 1, msg: "empty export".into() });
    };
    let header: ExportHeader = serde_json::from_str(first).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.format != EXPORT_FORMAT || header.version != REPLAY_VERSION {
        return Err(Error::Parse { line: 1, msg: format!("not a {EXPORT_FORMAT} v{REPLAY_VERSION} export") });
    }
    if serde_json::to_string(&header)? != first {
        return Err(Error::Parse { line: 1, msg: "header does not round-trip".into() });
    }
    let mut n = 0;
    for (i, line) in lines {
        let ln = i + 1;
        let bad = |msg: String| Error::Parse { line: ln, msg };
        let s: ExportStep = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if serde_json::to_string(&s)? != line {
            return Err(bad("row does not round-trip".into()));
        }
        if s.step != n {
            return Err(bad(format!("step {} out of sequence (expected {n})", s.step)));
        }
        let labeled = s.label_direction.is_some() && s.label_distance.is_some();
        let unlabeled = s.label_direction.is_none() && s.label_distance.is_none();
        match s.supervision {
            Supervision::Supervised if !labeled => return Err(bad("supervised step without labels".into())),
            Supervision::Unsupervised if !unlabeled => return Err(bad("unsupervised step with labels".into())),
            _ => {}
        }
        let p = bin_point(s.pred_direction, s.pred_distance);
        if (p.0 - s.pred_ego.0).abs() > 1e-9 || (p.1 - s.pred_ego.1).abs() > 1e-9 {
            return Err(bad("prediction point does not match its bins".into()));
        }
        if s.ego_map.len() != EGO_SIDE || s.ego_map.iter().any(|r| r.chars().count() != EGO_SIDE) {
            return Err(bad("ego map is not 50x50".into()));
        }
        n += 1;
    }
    if n != header.steps {
        return Err(Error::Parse { line: n + 1, msg: format!("header announces {} steps, found {n}", header.steps) });
    }
    Ok(n)
}

/// Bins of an ego point, the inverse of [`bin_point`] for bin centers.
pub fn point_bins(p: (f64, f64)) -> (usize, usize) {
    (direction_label(&[p]).1, distance_label(&[p]).1)
}
