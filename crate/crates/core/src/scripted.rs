//! A privileged scripted agent that follows geodesic waypoints to each goal
//! in turn. It reads the true map and goal positions, so it serves as a
//! near-optimal reference for the path-length metrics.

use std::f64::consts::PI;

use crate::error::Result;
use crate::metrics::Trajectory;
use crate::simulator::{Action, Pose, Simulator, N_HEADINGS};
use crate::world::{GeodesicField, WorldMap, NEIGHBORS_8};

/// How far down the descent chain a waypoint may lie, in cells.
const LOOKAHEAD: usize = 48;

/// Cells visited by steepest descent on `field` from `(cx, cy)`, ending at
/// the source cell or after `limit` cells.
fn descent_chain(map: &WorldMap, field: &GeodesicField, cx: usize, cy: usize, limit: usize) -> Vec<(usize, usize)> {
    let mut chain = Vec::with_capacity(limit);
    let (mut x, mut y) = (cx, cy);
    while chain.len() < limit {
        let here = field.at_cell(x, y);
        let mut best = (x, y, here);
        for (dx, dy) in NEIGHBORS_8 {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if !map.is_free(nx, ny) {
                continue;
            }
            let d = field.at_cell(nx as usize, ny as usize);
            if d < best.2 {
                best = (nx as usize, ny as usize, d);
            }
        }
        if (best.0, best.1) == (x, y) {
            break;
        }
        (x, y) = (best.0, best.1);
        chain.push((x, y));
    }
    chain
}

/// Whether the straight segment stays in free space, sampled finely.
fn clear_line(map: &WorldMap, a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    let n = (len / (map.resolution() / 8.0)).ceil().max(1.0) as usize;
    (0..=n).all(|k| {
        let t = k as f64 / n as f64;
        map.is_free_point(a.0 + t * dx, a.1 + t * dy)
    })
}

/// Signed heading difference `to - from` in steps, in `-6..=6`.
fn heading_delta(from: u8, to: u8) -> i32 {
    let n = N_HEADINGS as i32;
    let mut d = (i32::from(to) - i32::from(from)).rem_euclid(n);
    if d > n / 2 {
        d -= n;
    }
    d
}

/// Next action of the scripted agent in the current simulator state.
pub fn scripted_action(sim: &Simulator) -> Action {
    let map = sim.map();
    let st = sim.state();
    let pose = st.pose;
    let field = sim.goal_field(sim.current_goal());
    if field.at(pose.x, pose.y) <= sim.config().reward.success_radius {
        return Action::Found;
    }
    let Some((cx, cy)) = map.cell_of(pose.x, pose.y) else {
        return Action::Found;
    };
    let chain = descent_chain(map, field, cx, cy, LOOKAHEAD);
    let target = chain
        .iter()
        .rev()
        .map(|&(x, y)| map.cell_center(x, y))
        .find(|&c| clear_line(map, (pose.x, pose.y), c))
        .or_else(|| chain.first().map(|&(x, y)| map.cell_center(x, y)))
        .unwrap_or_else(|| map.cell_center(cx, cy));
    let bearing = (target.1 - pose.y).atan2(target.0 - pose.x).rem_euclid(2.0 * PI);
    let step = sim.config().forward_step;
    // Headings ordered by angular distance to the bearing; take the closest
    // one whose next forward step is free.
    let mut order: Vec<u8> = (0..N_HEADINGS).collect();
    let ang = |h: u8| {
        let d = (f64::from(h) * PI / 6.0 - bearing).rem_euclid(2.0 * PI);
        d.min(2.0 * PI - d)
    };
    order.sort_by(|&a, &b| ang(a).total_cmp(&ang(b)));
    let want = order
        .into_iter()
        .find(|&h| {
            let (c, s) = Pose { heading: h, ..pose }.direction();
            map.is_free_point(pose.x + step * c, pose.y + step * s)
        })
        .unwrap_or(pose.heading);
    match heading_delta(pose.heading, want) {
        0 => Action::Forward,
        d if d > 0 => Action::TurnLeft,
        _ => Action::TurnRight,
    }
}

/// Runs the scripted agent to the end of the episode and records its
/// trajectory.
pub fn run_scripted(sim: &mut Simulator) -> Result<Trajectory> {
    let mut traj = Trajectory::new(sim.state().pose, sim.spec().episode_id);
    while !sim.state().done {
        let a = scripted_action(sim);
        sim.step(a)?;
        traj.push(a, sim.state().pose);
    }
    Ok(traj)
}
