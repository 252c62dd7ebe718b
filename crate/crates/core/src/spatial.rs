//! Map-structured inputs and auxiliary ground truth.
//!
//! The egocentric frame is measured in cells with the agent at
//! `(EGO_CENTER, EGO_CENTER)`, its heading along `+y` and its right-hand side
//! along `+x`. Ego cell `(i, j)` is centered at ego coordinates `(i, j)` and
//! stored at index `j * EGO_SIDE + i`.

use serde::{Deserialize, Serialize};

use crate::simulator::{HitClass, Pose, Ray, SimState};
use crate::world::{Cell, ObjectPlacement, WorldMap};

pub const EGO_SIDE: usize = 50;
pub const EGO_CENTER: f64 = 25.0;
pub const EGO_CELLS: usize = EGO_SIDE * EGO_SIDE;
pub const DIR_BINS: usize = 12;
pub const DIST_BINS: usize = 36;
/// Feature width of one neural-map cell.
pub const NM_FEATURES: usize = 16;
/// One-hot hit categories written to the neural map: obstacle, then 8 classes.
pub const NM_HIT_CATEGORIES: usize = 9;
pub const N_CLASSES: usize = 8;

pub const OCC_UNKNOWN: u8 = 0;
pub const OCC_FREE: u8 = 1;
pub const OCC_OBSTACLE: u8 = 2;
pub const OCC_CATEGORIES: usize = 3;
pub const OBJ_UNKNOWN: u8 = 0;
pub const OBJ_NONE: u8 = 1;
/// Object categories are `OBJ_CLASS_BASE + class_id`.
pub const OBJ_CLASS_BASE: u8 = 2;
pub const OBJ_CATEGORIES: usize = 2 + N_CLASSES;

/// Tolerance, in bin units, that snaps angles lying on a bin edge up to the
/// edge's own (left-closed) bin despite rounding in the rigid transform.
const BIN_EDGE_SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EgoMode {
    /// Occupancy and objects everywhere.
    OracleMap,
    /// Objects only where revealed, `Unknown` occupancy everywhere.
    OracleEgoMap,
}

/// Categorical egocentric planes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EgoGrid {
    pub occupancy: Vec<u8>,
    pub objects: Vec<u8>,
}

/// Rotation taking world offsets into the ego frame, as `(sin h, cos h)`.
fn heading_sc(pose: &Pose) -> (f64, f64) {
    let (c, s) = pose.direction();
    (s, c)
}

/// Continuous ego coordinates (cells) of a world point.
pub fn world_to_ego(pose: &Pose, resolution: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = heading_sc(pose);
    let (dx, dy) = ((x - pose.x) / resolution, (y - pose.y) / resolution);
    (EGO_CENTER + dx * s - dy * c, EGO_CENTER + dx * c + dy * s)
}

/// World point at continuous ego coordinates `(u, v)`.
pub fn ego_to_world(pose: &Pose, resolution: f64, u: f64, v: f64) -> (f64, f64) {
    let (s, c) = heading_sc(pose);
    let (a, b) = (u - EGO_CENTER, v - EGO_CENTER);
    (pose.x + resolution * (a * s + b * c), pose.y + resolution * (-a * c + b * s))
}

/// World cell sampled by each ego cell (nearest-cell resampling), or `None`
/// outside the map.
pub fn ego_sample_cells(map: &WorldMap, pose: &Pose) -> Vec<Option<(usize, usize)>> {
    let mut out = Vec::with_capacity(EGO_CELLS);
    for j in 0..EGO_SIDE {
        for i in 0..EGO_SIDE {
            let (x, y) = ego_to_world(pose, map.resolution(), i as f64, j as f64);
            out.push(map.cell_of(x, y));
        }
    }
    out
}

/// Per-world-cell object category (`OBJ_NONE` or a class category).
fn object_layer(map: &WorldMap, objects: &[ObjectPlacement]) -> Vec<u8> {
    let mut layer = vec![OBJ_NONE; map.width() * map.height()];
    for o in objects {
        if let Some((cx, cy)) = map.cell_of(o.x, o.y) {
            layer[map.index(cx, cy)] = OBJ_CLASS_BASE + o.class_id as u8;
        }
    }
    layer
}

/// Renders the categorical ego planes for the oracle variants.
pub fn to_egocentric(map: &WorldMap, objects: &[ObjectPlacement], revealed: &RevealedMask, pose: &Pose, mode: EgoMode) -> EgoGrid {
    let layer = object_layer(map, objects);
    let mut grid = EgoGrid { occupancy: vec![OCC_UNKNOWN; EGO_CELLS], objects: vec![OBJ_UNKNOWN; EGO_CELLS] };
    for (k, cell) in ego_sample_cells(map, pose).into_iter().enumerate() {
        let Some((cx, cy)) = cell else { continue };
        let wi = map.index(cx, cy);
        match mode {
            EgoMode::OracleMap => {
                grid.occupancy[k] = if map.cell(cx, cy) == Cell::Free { OCC_FREE } else { OCC_OBSTACLE };
                grid.objects[k] = layer[wi];
            }
            EgoMode::OracleEgoMap => {
                if revealed.is_revealed(wi) {
                    grid.objects[k] = layer[wi];
                }
            }
        }
    }
    grid
}

/// World-frame cells the agent has observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealedMask {
    width: usize,
    mask: Vec<bool>,
    count: usize,
}

impl RevealedMask {
    pub fn new(map: &WorldMap) -> RevealedMask {
        RevealedMask { width: map.width(), mask: vec![false; map.width() * map.height()], count: 0 }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_revealed(&self, index: usize) -> bool {
        self.mask[index]
    }

    pub fn get(&self, cx: usize, cy: usize) -> bool {
        self.mask[cy * self.width + cx]
    }

    fn mark(&mut self, index: usize) {
        if !self.mask[index] {
            self.mask[index] = true;
            self.count += 1;
        }
    }

    /// Marks the agent's cell, every cell a ray passes through before its hit
    /// point, and the cell of every object a ray hits.
    pub fn update(&mut self, map: &WorldMap, objects: &[ObjectPlacement], rays: &[Ray], pose: &Pose) {
        if let Some((cx, cy)) = map.cell_of(pose.x, pose.y) {
            self.mark(map.index(cx, cy));
        }
        let step = map.resolution() / 4.0;
        let heading = pose.heading_rad();
        for r in rays {
            let (s, c) = (heading + r.offset).sin_cos();
            let mut k = 1usize;
            loop {
                let t = k as f64 * step;
                if t >= r.depth {
                    break;
                }
                if let Some((cx, cy)) = map.cell_of(pose.x + t * c, pose.y + t * s) {
                    self.mark(map.index(cx, cy));
                }
                k += 1;
            }
            if let HitClass::Object { index, .. } = r.hit {
                if let Some((cx, cy)) = objects.get(index).and_then(|o| map.cell_of(o.x, o.y)) {
                    self.mark(map.index(cx, cy));
                }
            }
        }
    }
}

/// World-frame feature grid with running-average writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralMap {
    width: usize,
    features: Vec<f32>,
    counts: Vec<u32>,
}

/// Feature written for one ray hit: one-hot hit category then a depth code.
pub fn hit_features(hit: HitClass, depth: f64, max_range: f64) -> Option<[f32; NM_FEATURES]> {
    let cat = match hit {
        HitClass::Obstacle => 0,
        HitClass::Object { class_id, .. } => 1 + class_id,
        HitClass::MaxRange => return None,
    };
    let mut f = [0f32; NM_FEATURES];
    f[cat] = 1.0;
    let rel = depth / max_range;
    f[NM_HIT_CATEGORIES] = rel as f32;
    for j in 0..NM_FEATURES - NM_HIT_CATEGORIES - 1 {
        let center = j as f64 / 5.0;
        let z = (rel - center) * 5.0;
        f[NM_HIT_CATEGORIES + 1 + j] = (-z * z).exp() as f32;
    }
    Some(f)
}

/// Sparse ego read of the neural map: `(ego index, features)` for every ego
/// cell whose world cell has been written.
pub type SparseEgo = Vec<(u16, [f32; NM_FEATURES])>;

impl NeuralMap {
    pub fn new(map: &WorldMap) -> NeuralMap {
        let n = map.width() * map.height();
        NeuralMap { width: map.width(), features: vec![0.0; n * NM_FEATURES], counts: vec![0; n] }
    }

    pub fn count(&self, cx: usize, cy: usize) -> u32 {
        self.counts[cy * self.width + cx]
    }

    pub fn feature(&self, cx: usize, cy: usize) -> &[f32] {
        let i = cy * self.width + cx;
        &self.features[i * NM_FEATURES..(i + 1) * NM_FEATURES]
    }

    /// `f <- (c*f + x) / (c + 1)` at one cell.
    pub fn write_cell(&mut self, cx: usize, cy: usize, x: &[f32; NM_FEATURES]) {
        let i = cy * self.width + cx;
        let c = self.counts[i] as f32;
        for (f, &v) in self.features[i * NM_FEATURES..(i + 1) * NM_FEATURES].iter_mut().zip(x) {
            *f = (c * *f + v) / (c + 1.0);
        }
        self.counts[i] += 1;
    }

    /// Writes every ray hit at the cell containing its hit point.
    pub fn write(&mut self, map: &WorldMap, rays: &[Ray], pose: &Pose, max_range: f64) {
        let heading = pose.heading_rad();
        for r in rays {
            let Some(x) = hit_features(r.hit, r.depth, max_range) else { continue };
            let (s, c) = (heading + r.offset).sin_cos();
            if let Some((cx, cy)) = map.cell_of(pose.x + r.depth * c, pose.y + r.depth * s) {
                self.write_cell(cx, cy, &x);
            }
        }
    }

    pub fn read_ego(&self, map: &WorldMap, pose: &Pose) -> SparseEgo {
        let mut out = Vec::new();
        for (k, cell) in ego_sample_cells(map, pose).into_iter().enumerate() {
            let Some((cx, cy)) = cell else { continue };
            if self.count(cx, cy) > 0 {
                let mut f = [0f32; NM_FEATURES];
                f.copy_from_slice(self.feature(cx, cy));
                out.push((k as u16, f));
            }
        }
        out
    }
}

fn mean_point(targets: &[(f64, f64)]) -> (f64, f64) {
    let n = targets.len().max(1) as f64;
    let (sx, sy) = targets.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    (sx / n, sy / n)
}

/// Bearing of the mean target point, counter-clockwise from straight ahead,
/// in `[0, 2pi)`, and its 30 degree bin. A target at the agent gives 0.
pub fn direction_label(targets: &[(f64, f64)]) -> (f64, usize) {
    let (ox, oy) = mean_point(targets);
    let (dx, dy) = (ox - EGO_CENTER, oy - EGO_CENTER);
    if dx == 0.0 && dy == 0.0 {
        return (0.0, 0);
    }
    let tau = std::f64::consts::TAU;
    let mut phi = -dx.atan2(dy);
    if phi < 0.0 {
        phi += tau;
    }
    if phi >= tau {
        phi -= tau;
    }
    let width = tau / DIR_BINS as f64;
    let bin = ((phi / width + BIN_EDGE_SNAP).floor() as usize) % DIR_BINS;
    (phi, bin)
}

/// Euclidean distance (cells) of the mean target point and its unit bin,
/// clamped into the last bin.
pub fn distance_label(targets: &[(f64, f64)]) -> (f64, usize) {
    let (ox, oy) = mean_point(targets);
    let d = (ox - EGO_CENTER).hypot(oy - EGO_CENTER);
    (d, (d.floor() as usize).min(DIST_BINS - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxLabels {
    pub indicator: bool,
    pub direction: Option<usize>,
    pub distance: Option<usize>,
    pub raw_phi: f64,
    pub raw_d: f64,
}

impl AuxLabels {
    pub fn absent() -> AuxLabels {
        AuxLabels { indicator: false, direction: None, distance: None, raw_phi: 0.0, raw_d: 0.0 }
    }
}

/// Labels for the current goal from its exact (unclipped) ego coordinates,
/// present only once the goal has been seen.
pub fn make_aux_labels(state: &SimState, goal_index: usize, goal: &ObjectPlacement, resolution: f64) -> AuxLabels {
    let o = world_to_ego(&state.pose, resolution, goal.x, goal.y);
    let (raw_phi, phi) = direction_label(&[o]);
    let (raw_d, d) = distance_label(&[o]);
    let indicator = state.seen.get(goal_index).copied().unwrap_or(false);
    AuxLabels {
        indicator,
        direction: indicator.then_some(phi),
        distance: indicator.then_some(d),
        raw_phi,
        raw_d,
    }
}

/// Ego-frame point for a `(direction, distance)` bin pair, at the bin centers.
pub fn bin_point(direction: usize, distance: usize) -> (f64, f64) {
    let width = std::f64::consts::TAU / DIR_BINS as f64;
    let phi = (direction as f64 + 0.5) * width;
    let d = distance as f64 + 0.5;
    (EGO_CENTER - d * phi.sin(), EGO_CENTER + d * phi.cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(dx: f64, dy: f64) -> [(f64, f64); 1] {
        [(EGO_CENTER + dx, EGO_CENTER + dy)]
    }

    #[test]
    fn direction_examples() {
        assert_eq!(direction_label(&at(0.0, 5.0)), (0.0, 0));
        let (phi, k) = direction_label(&at(5.0, 0.0));
        assert!((phi - 1.5 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(k, 9);
        let (phi, k) = direction_label(&[(27.0, 27.0), (28.0, 28.0)]);
        assert!((phi - 1.75 * std::f64::consts::PI).abs() < 1e-12);
        assert_eq!(k, 10);
        assert_eq!(direction_label(&at(0.0, 0.0)), (0.0, 0));
        assert_eq!(direction_label(&at(-1.0, 0.0)).1, 3);
        assert_eq!(direction_label(&at(0.0, -3.0)).1, 6);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance_label(&at(3.0, 4.0)), (5.0, 5));
        assert_eq!(distance_label(&at(0.0, 0.0)), (0.0, 0));
        let (d, k) = distance_label(&[(0.0, 0.0)]);
        assert!((d - 25.0 * 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(k, 35);
        assert_eq!(distance_label(&at(100.0, 0.0)).1, 35);
    }

    #[test]
    fn ego_transform_round_trips() {
        for h in 0..12 {
            let pose = Pose::new(3.1, 2.7, h);
            let (u, v) = world_to_ego(&pose, 0.25, 4.0, 1.5);
            let (x, y) = ego_to_world(&pose, 0.25, u, v);
            assert!((x - 4.0).abs() < 1e-12 && (y - 1.5).abs() < 1e-12);
        }
        let east = world_to_ego(&Pose::new(2.0, 2.0, 0), 0.25, 2.0 + 5.0 * 0.25, 2.0);
        assert_eq!(east, (25.0, 30.0));
    }

    #[test]
    fn neural_map_running_average() {
        let map = crate::world::generate_map(1, &crate::world::GenConfig::default()).unwrap();
        let mut nm = NeuralMap::new(&map);
        let a = hit_features(HitClass::Obstacle, 1.0, 5.0).unwrap();
        let b = hit_features(HitClass::Object { class_id: 3, index: 0 }, 2.0, 5.0).unwrap();
        nm.write_cell(2, 2, &a);
        assert_eq!(nm.feature(2, 2), &a[..]);
        nm.write_cell(2, 2, &a);
        assert_eq!(nm.feature(2, 2), &a[..]);
        assert_eq!(nm.count(2, 2), 2);
        let mut m1 = NeuralMap::new(&map);
        let mut m2 = NeuralMap::new(&map);
        m1.write_cell(1, 1, &a);
        m1.write_cell(3, 4, &b);
        m2.write_cell(3, 4, &b);
        m2.write_cell(1, 1, &a);
        assert_eq!(m1, m2);
        assert_eq!(nm.count(5, 5), 0);
        assert!(nm.feature(5, 5).iter().all(|&v| v == 0.0));
        assert!(hit_features(HitClass::MaxRange, 5.0, 5.0).is_none());
    }

    #[test]
    fn bin_point_lands_in_its_bins() {
        for k in 0..DIR_BINS {
            for d in 0..DIST_BINS {
                let p = bin_point(k, d);
                assert_eq!(direction_label(&[p]).1, k);
                assert_eq!(distance_label(&[p]).1, d);
            }
        }
    }
}
