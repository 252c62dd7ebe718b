//! Episode scoring (Success, Progress, SPL, PPL) and aggregation into
//! evaluation reports.
//!
//! Shortest paths chain geodesic queries through the ordered goals:
//! start to goal 1, then goal 1 to goal 2, and so on. Turns add nothing to
//! the agent's path length.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulator::{Action, EpisodeSpec, Pose, SimConfig, Simulator};
use crate::world::{geodesic_field, GeodesicField, WorldMap};

/// Pose tolerance when validating a recorded trajectory.
const POSE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub success: f64,
    pub progress: f64,
    pub found: usize,
    pub agent_path: f64,
    pub shortest_full: f64,
    pub shortest_progress: f64,
    pub spl: f64,
    pub ppl: f64,
}

/// Poses visited (`actions.len() + 1` entries) and the actions between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub episode_id: u64,
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
}

impl Trajectory {
    pub fn new(start: Pose, episode_id: u64) -> Trajectory {
        Trajectory { episode_id, poses: vec![start], actions: Vec::new() }
    }

    pub fn push(&mut self, action: Action, pose: Pose) {
        self.actions.push(action);
        self.poses.push(pose);
    }
}

/// Geodesic lengths of the chained legs start -> g1 -> g2 -> ...
pub fn chained_legs(spec: &EpisodeSpec, fields: &[&GeodesicField]) -> Vec<f64> {
    let mut legs = Vec::with_capacity(spec.goals.len());
    let (mut x, mut y) = (spec.start.x, spec.start.y);
    for (g, f) in spec.goals.iter().zip(fields) {
        legs.push(f.at(x, y));
        (x, y) = (g.x, g.y);
    }
    legs
}

/// Combines the counts of one episode into a score.
pub fn score_parts(found: usize, n_goals: usize, agent_path: f64, legs: &[f64]) -> EpisodeScore {
    let shortest_full: f64 = legs.iter().sum();
    let shortest_progress: f64 = legs[..found.min(legs.len())].iter().sum();
    let success = if found == n_goals { 1.0 } else { 0.0 };
    let progress = found as f64 / n_goals as f64;
    let ratio = |short: f64| if short <= 0.0 && agent_path <= 0.0 { 1.0 } else { short / short.max(agent_path) };
    EpisodeScore {
        success,
        progress,
        found,
        agent_path,
        shortest_full,
        shortest_progress,
        spl: if success > 0.0 { ratio(shortest_full) } else { 0.0 },
        ppl: if found > 0 { progress * ratio(shortest_progress) } else { 0.0 },
    }
}

/// Scores a finished (or truncated) simulator episode from its state.
pub fn score_simulator(sim: &Simulator) -> EpisodeScore {
    let spec = sim.spec();
    let fields: Vec<&GeodesicField> = (0..spec.goals.len()).map(|k| sim.goal_field(k)).collect();
    let legs = chained_legs(spec, &fields);
    let st = sim.state();
    score_parts(st.goal_index, spec.goals.len(), st.path_length, &legs)
}

/// Scores a recorded trajectory against its episode, re-deriving goal
/// arrivals from the poses. Rejects trajectories whose consecutive poses are
/// not reachable by the recorded action.
pub fn score_episode(map: &WorldMap, spec: &EpisodeSpec, cfg: &SimConfig, traj: &Trajectory) -> Result<EpisodeScore> {
    if traj.poses.len() != traj.actions.len() + 1 {
        return Err(Error::Trajectory(format!("{} poses for {} actions", traj.poses.len(), traj.actions.len())));
    }
    let start = traj.poses[0];
    if (start.x - spec.start.x).abs() > POSE_TOL || (start.y - spec.start.y).abs() > POSE_TOL || start.heading != spec.start.heading {
        return Err(Error::Trajectory("trajectory does not begin at the episode start".into()));
    }
    let fields = spec
        .goals
        .iter()
        .map(|g| geodesic_field(map, (g.x, g.y)))
        .collect::<Result<Vec<_>>>()?;
    let n_goals = spec.goals.len();
    let mut found = 0;
    let mut moves = 0u64;
    let mut ended = false;
    for (t, &action) in traj.actions.iter().enumerate() {
        if ended {
            return Err(Error::Trajectory(format!("action at step {t} after the episode ended")));
        }
        let (a, b) = (traj.poses[t], traj.poses[t + 1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let jump = (dx * dx + dy * dy).sqrt();
        if jump > cfg.forward_step + POSE_TOL {
            return Err(Error::Trajectory(format!("step {t}: pose jumps {jump:.4} m, more than the step length {}", cfg.forward_step)));
        }
        let expected_heading = match action {
            Action::TurnLeft => a.turned(1).heading,
            Action::TurnRight => a.turned(-1).heading,
            _ => a.heading,
        };
        if b.heading != expected_heading {
            return Err(Error::Trajectory(format!("step {t}: heading {} after {action:?} from {}", b.heading, a.heading)));
        }
        match action {
            Action::Forward => {
                if jump > POSE_TOL {
                    let (c, s) = a.direction();
                    let (ex, ey) = (a.x + cfg.forward_step * c, a.y + cfg.forward_step * s);
                    if (b.x - ex).abs() > POSE_TOL || (b.y - ey).abs() > POSE_TOL || !map.is_free_point(b.x, b.y) {
                        return Err(Error::Trajectory(format!("step {t}: forward move lands off the heading line or in an obstacle")));
                    }
                    moves += 1;
                }
            }
            _ if jump > POSE_TOL => {
                return Err(Error::Trajectory(format!("step {t}: {action:?} moved the agent")));
            }
            Action::Found => {
                if fields[found].at(a.x, a.y) <= cfg.reward.success_radius {
                    found += 1;
                    ended = found == n_goals;
                } else {
                    ended = true;
                }
            }
            _ => {}
        }
    }
    let refs: Vec<&GeodesicField> = fields.iter().collect();
    let legs = chained_legs(spec, &refs);
    Ok(score_parts(found, n_goals, moves as f64 * cfg.forward_step, &legs))
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

/// Success, Progress, SPL and PPL summarized as mean and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub label: String,
    /// Number of per-episode scores (single run) or runs (multi-seed).
    pub count: usize,
    pub success: Stat,
    pub progress: Stat,
    pub spl: Stat,
    pub ppl: Stat,
}

impl Report {
    /// Mean ± std over episodes.
    pub fn from_scores(label: &str, scores: &[EpisodeScore]) -> Report {
        let col = |f: fn(&EpisodeScore) -> f64| Stat::of(&scores.iter().map(f).collect::<Vec<_>>());
        Report {
            label: label.to_string(),
            count: scores.len(),
            success: col(|s| s.success),
            progress: col(|s| s.progress),
            spl: col(|s| s.spl),
            ppl: col(|s| s.ppl),
        }
    }

    /// Mean ± std across runs of the per-run means.
    pub fn across_runs(label: &str, runs: &[Report]) -> Report {
        let col = |f: fn(&Report) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        Report {
            label: label.to_string(),
            count: runs.len(),
            success: col(|r| r.success.mean),
            progress: col(|r| r.progress.mean),
            spl: col(|r| r.spl.mean),
            ppl: col(|r| r.ppl.mean),
        }
    }
}

/// Aligned table with percentages, one row per report.
pub fn format_table(reports: &[Report]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>5}  {:>13}  {:>13}  {:>13}  {:>13}", "agent", "n", "Success", "Progress", "SPL", "PPL");
    for r in reports {
        let cell = |s: Stat| format!("{:5.1} ± {:4.1}", 100.0 * s.mean, 100.0 * s.std);
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>13}  {:>13}  {:>13}  {:>13}",
            r.label,
            r.count,
            cell(r.success),
            cell(r.progress),
            cell(r.spl),
            cell(r.ppl)
        );
    }
    out
}

/// Comma-separated rows with raw fractions.
pub fn format_csv(reports: &[Report]) -> String {
    let mut out = String::from("agent,n,success_mean,success_std,progress_mean,progress_std,spl_mean,spl_std,ppl_mean,ppl_std\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.label, r.count, r.success.mean, r.success.std, r.progress.mean, r.progress.std, r.spl.mean, r.spl.std, r.ppl.mean, r.ppl.std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_definitions() {
        let s = score_parts(2, 2, 20.0, &[4.0, 6.0]);
        assert_eq!((s.success, s.spl), (1.0, 0.5));
        let zero = score_parts(0, 3, 7.5, &[1.0, 2.0, 3.0]);
        assert_eq!((zero.success, zero.progress, zero.spl, zero.ppl), (0.0, 0.0, 0.0, 0.0));
        let part = score_parts(1, 3, 2.0, &[4.0, 2.0, 3.0]);
        assert!((part.progress - 1.0 / 3.0).abs() < 1e-15);
        assert!((part.ppl - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(part.spl, 0.0);
    }

    #[test]
    fn stat_is_population() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
