//! Static environments: procedural occupancy maps, object placement and
//! geodesic distance fields.
//!
//! World coordinates are meters with `x` to the east and `y` to the north.
//! Cell `(cx, cy)` covers `[cx*res, (cx+1)*res) x [cy*res, (cy+1)*res)`.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAP_MAGIC: &str = "MULTIONLAB-MAP";
pub const MAP_VERSION: u32 = 1;

/// Seeds per split; split `s` owns `[s*SPLIT_SEED_SPAN, (s+1)*SPLIT_SEED_SPAN)`.
pub const SPLIT_SEED_SPAN: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Free,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    /// Map seed for the `i`-th map of this split.
    pub fn map_seed(self, i: u64) -> u64 {
        self.index() * SPLIT_SEED_SPAN + (i % SPLIT_SEED_SPAN)
    }

    pub fn of_seed(seed: u64) -> Split {
        match seed / SPLIT_SEED_SPAN {
            0 => Split::Train,
            1 => Split::Val,
            _ => Split::Test,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse { line: 0, msg: format!("unknown split `{other}`") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    width: usize,
    height: usize,
    resolution: f64,
    cells: Vec<Cell>,
    map_id: String,
    split: Split,
}

impl WorldMap {
    /// Validates the closed-world and single-component invariants.
    pub fn new(width: usize, height: usize, resolution: f64, cells: Vec<Cell>, map_id: String, split: Split) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidMap(format!("resolution must be positive, got {resolution}")));
        }
        if width < 3 || height < 3 || cells.len() != width * height {
            return Err(Error::InvalidMap(format!("{width}x{height} map with {} cells", cells.len())));
        }
        let map = WorldMap { width, height, resolution, cells, map_id, split };
        for cx in 0..width {
            for cy in [0, height - 1] {
                if map.cell(cx, cy) != Cell::Obstacle {
                    return Err(Error::InvalidMap(format!("border cell ({cx}, {cy}) is free")));
                }
            }
        }
        for cy in 0..height {
            for cx in [0, width - 1] {
                if map.cell(cx, cy) != Cell::Obstacle {
                    return Err(Error::InvalidMap(format!("border cell ({cx}, {cy}) is free")));
                }
            }
        }
        let free = map.free_cells();
        let Some(&first) = free.first() else {
            return Err(Error::InvalidMap("no free cells".into()));
        };
        let reached = map.flood_fill(first);
        if reached != free.len() {
            return Err(Error::InvalidMap(format!("free space has {} cells but only {reached} are connected", free.len())));
        }
        Ok(map)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn map_id(&self) -> &str {
        &self.map_id
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn index(&self, cx: usize, cy: usize) -> usize {
        cy * self.width + cx
    }

    pub fn cell(&self, cx: usize, cy: usize) -> Cell {
        self.cells[self.index(cx, cy)]
    }

    pub fn is_free(&self, cx: i64, cy: i64) -> bool {
        cx >= 0
            && cy >= 0
            && (cx as usize) < self.width
            && (cy as usize) < self.height
            && self.cell(cx as usize, cy as usize) == Cell::Free
    }

    /// Cell containing a world point, if inside the map bounds.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let cx = (x / self.resolution).floor();
        let cy = (y / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return None;
        }
        Some((cx as usize, cy as usize))
    }

    pub fn is_free_point(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|(cx, cy)| self.cell(cx, cy) == Cell::Free)
    }

    pub fn cell_center(&self, cx: usize, cy: usize) -> (f64, f64) {
        ((cx as f64 + 0.5) * self.resolution, (cy as f64 + 0.5) * self.resolution)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for cy in 0..self.height {
            for cx in 0..self.width {
                if self.cell(cx, cy) == Cell::Free {
                    out.push((cx, cy));
                }
            }
        }
        out
    }

    /// Number of free cells 8-connected to `start` (including it).
    pub fn flood_fill(&self, start: (usize, usize)) -> usize {
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([start]);
        seen[self.index(start.0, start.1)] = true;
        let mut count = 0;
        while let Some((cx, cy)) = queue.pop_front() {
            count += 1;
            for (dx, dy) in NEIGHBORS_8 {
                let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                if self.is_free(nx, ny) {
                    let i = self.index(nx as usize, ny as usize);
                    if !seen[i] {
                        seen[i] = true;
                        queue.push_back((nx as usize, ny as usize));
                    }
                }
            }
        }
        count
    }

    /// Copy with one extra obstacle cell, bypassing connectivity validation.
    pub fn with_obstacle(&self, cx: usize, cy: usize) -> WorldMap {
        let mut m = self.clone();
        let i = m.index(cx, cy);
        m.cells[i] = Cell::Obstacle;
        m
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MAP_MAGIC} {MAP_VERSION}\nid {}\nsplit {}\nsize {} {}\nresolution {}\n",
            self.map_id, self.split, self.width, self.height, self.resolution
        );
        for cy in 0..self.height {
            for cx in 0..self.width {
                s.push(if self.cell(cx, cy) == Cell::Free { '.' } else { '#' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<WorldMap> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .map(|(i, l)| (i + 1, l))
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("missing {what}") })
        };
        let perr = |line: usize, msg: String| Error::Parse { line, msg };

        let (ln, header) = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAP_MAGIC) {
            return Err(perr(ln, format!("expected `{MAP_MAGIC}`")));
        }
        let version: u32 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| perr(ln, "missing version".into()))?;
        if version != MAP_VERSION {
            return Err(perr(ln, format!("unsupported map version {version}")));
        }
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (ln, l) = next(key)?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(|r| (ln, r.trim().to_string()))
                .ok_or_else(|| perr(ln, format!("expected `{key} ...`")))
        };
        let (_, map_id) = field("id")?;
        let (ln, split) = field("split")?;
        let split: Split = split.parse().map_err(|_| perr(ln, format!("bad split `{split}`")))?;
        let (ln, size) = field("size")?;
        let dims: Vec<usize> = size.split_whitespace().map(|v| v.parse()).collect::<std::result::Result<_, _>>().map_err(|_| perr(ln, "bad size".into()))?;
        if dims.len() != 2 {
            return Err(perr(ln, "size needs width and height".into()));
        }
        let (width, height) = (dims[0], dims[1]);
        let (ln, res) = field("resolution")?;
        let resolution: f64 = res.parse().map_err(|_| perr(ln, format!("bad resolution `{res}`")))?;
        let mut cells = Vec::with_capacity(width * height);
        for row in 0..height {
            let (ln, l) = next("occupancy row")?;
            if l.chars().count() != width {
                return Err(perr(ln, format!("row {row} has {} cells, expected {width}", l.chars().count())));
            }
            for ch in l.chars() {
                cells.push(match ch {
                    '.' => Cell::Free,
                    '#' => Cell::Obstacle,
                    c => return Err(perr(ln, format!("unexpected cell character `{c}`"))),
                });
            }
        }
        WorldMap::new(width, height, resolution, cells, map_id, split)
    }
}

pub const NEIGHBORS_8: [(i64, i64); 8] = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub width: usize,
    pub height: usize,
    pub rooms: usize,
    pub min_room: usize,
    pub max_room: usize,
    pub corridor_width: usize,
    pub resolution: f64,
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { width: 32, height: 32, rooms: 4, min_room: 4, max_room: 10, corridor_width: 2, resolution: 0.25, max_retries: 64 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Room {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Room {
    fn overlaps(&self, o: &Room) -> bool {
        // one wall cell of margin between rooms
        self.x <= o.x + o.w && o.x <= self.x + self.w && self.y <= o.y + o.h && o.y <= self.y + self.h
    }

    fn center(&self) -> (usize, usize) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }
}

/// Rooms-and-corridors map, a pure function of `(seed, cfg)`.
pub fn generate_map(seed: u64, cfg: &GenConfig) -> Result<WorldMap> {
    if cfg.width < 16 || cfg.height < 16 {
        return Err(Error::Config(format!("map must be at least 16x16 cells, got {}x{}", cfg.width, cfg.height)));
    }
    if cfg.rooms == 0 || cfg.min_room < 2 || cfg.min_room > cfg.max_room || cfg.corridor_width == 0 {
        return Err(Error::Config(format!("degenerate room parameters {cfg:?}")));
    }
    if !(cfg.resolution > 0.0) {
        return Err(Error::Config(format!("resolution must be positive, got {}", cfg.resolution)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_room = cfg.max_room.min(cfg.width - 2).min(cfg.height - 2);
    for _ in 0..cfg.max_retries.max(1) {
        let mut rooms: Vec<Room> = Vec::new();
        for _ in 0..cfg.rooms * 50 {
            if rooms.len() == cfg.rooms {
                break;
            }
            if cfg.min_room > max_room {
                break;
            }
            let w = rng.gen_range(cfg.min_room..=max_room);
            let h = rng.gen_range(cfg.min_room..=max_room);
            let x = rng.gen_range(1..=cfg.width - 1 - w);
            let y = rng.gen_range(1..=cfg.height - 1 - h);
            let r = Room { x, y, w, h };
            if rooms.iter().all(|o| !r.overlaps(o)) {
                rooms.push(r);
            }
        }
        if rooms.len() < cfg.rooms {
            continue;
        }
        let mut cells = vec![Cell::Obstacle; cfg.width * cfg.height];
        let mut carve = |cx: usize, cy: usize| {
            if cx >= 1 && cy >= 1 && cx < cfg.width - 1 && cy < cfg.height - 1 {
                cells[cy * cfg.width + cx] = Cell::Free;
            }
        };
        for r in &rooms {
            for cy in r.y..r.y + r.h {
                for cx in r.x..r.x + r.w {
                    carve(cx, cy);
                }
            }
        }
        for pair in rooms.windows(2) {
            let (a, b) = (pair[0].center(), pair[1].center());
            let horizontal_first = rng.gen_bool(0.5);
            let corner = if horizontal_first { (b.0, a.1) } else { (a.0, b.1) };
            for (p, q) in [(a, corner), (corner, b)] {
                let (x0, x1) = (p.0.min(q.0), p.0.max(q.0));
                let (y0, y1) = (p.1.min(q.1), p.1.max(q.1));
                for cy in y0..=y1 + cfg.corridor_width - 1 {
                    for cx in x0..=x1 + cfg.corridor_width - 1 {
                        let on_h = p.1 == q.1 && cy < y0 + cfg.corridor_width;
                        let on_v = p.0 == q.0 && cx < x0 + cfg.corridor_width;
                        if on_h || on_v {
                            carve(cx, cy);
                        }
                    }
                }
            }
        }
        let split = Split::of_seed(seed);
        match WorldMap::new(cfg.width, cfg.height, cfg.resolution, cells, format!("map-{seed}"), split) {
            Ok(m) => return Ok(m),
            Err(_) => continue,
        }
    }
    Err(Error::Generation(format!("no valid map after {} attempts for seed {seed}", cfg.max_retries)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPlacement {
    pub class_id: usize,
    pub x: f64,
    pub y: f64,
}

/// Shortest 8-connected path lengths (meters) from one source cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicField {
    pub source: (f64, f64),
    pub source_cell: (usize, usize),
    width: usize,
    height: usize,
    resolution: f64,
    distances: Vec<f64>,
}

impl GeodesicField {
    pub fn at_cell(&self, cx: usize, cy: usize) -> f64 {
        if cx >= self.width || cy >= self.height {
            return f64::INFINITY;
        }
        self.distances[cy * self.width + cx]
    }

    /// Distance at the cell containing `(x, y)`; infinite outside the map.
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let cx = (x / self.resolution).floor();
        let cy = (y / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 {
            return f64::INFINITY;
        }
        self.at_cell(cx as usize, cy as usize)
    }

    pub fn distances(&self) -> &[f64] {
        &self.distances
    }
}

#[derive(PartialEq)]
struct Frontier(f64, usize);

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over free cells with edge costs `res` (orthogonal) and
/// `res * sqrt(2)` (diagonal).
pub fn geodesic_field(map: &WorldMap, source: (f64, f64)) -> Result<GeodesicField> {
    let Some((sx, sy)) = map.cell_of(source.0, source.1).filter(|&(cx, cy)| map.cell(cx, cy) == Cell::Free) else {
        return Err(Error::Blocked(format!("geodesic source ({:.3}, {:.3}) is not in free space", source.0, source.1)));
    };
    let (w, h, res) = (map.width(), map.height(), map.resolution());
    let diag = res * std::f64::consts::SQRT_2;
    let mut dist = vec![f64::INFINITY; w * h];
    let start = sy * w + sx;
    dist[start] = 0.0;
    let mut heap = BinaryHeap::from([Frontier(0.0, start)]);
    while let Some(Frontier(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        let (cx, cy) = ((i % w) as i64, (i / w) as i64);
        for (dx, dy) in NEIGHBORS_8 {
            let (nx, ny) = (cx + dx, cy + dy);
            if !map.is_free(nx, ny) {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            let nd = d + if dx != 0 && dy != 0 { diag } else { res };
            if nd < dist[j] {
                dist[j] = nd;
                heap.push(Frontier(nd, j));
            }
        }
    }
    Ok(GeodesicField { source, source_cell: (sx, sy), width: w, height: h, resolution: res, distances: dist })
}

/// `n` objects with distinct classes at free cell centers, pairwise geodesic
/// separation at least `min_sep` meters.
pub fn sample_objects(map: &WorldMap, seed: u64, n: usize, n_classes: usize, min_sep: f64) -> Result<Vec<ObjectPlacement>> {
    if n > n_classes {
        return Err(Error::Config(format!("{n} objects cannot have distinct classes out of {n_classes}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let free = map.free_cells();
    let mut classes: Vec<usize> = (0..n_classes).collect();
    classes.shuffle(&mut rng);
    for _restart in 0..20 {
        let mut placed: Vec<ObjectPlacement> = Vec::new();
        let mut fields: Vec<GeodesicField> = Vec::new();
        for k in 0..n {
            let mut ok = false;
            for _ in 0..500 {
                let (cx, cy) = free[rng.gen_range(0..free.len())];
                let (x, y) = map.cell_center(cx, cy);
                if fields.iter().all(|f| f.at_cell(cx, cy) >= min_sep) {
                    fields.push(geodesic_field(map, (x, y))?);
                    placed.push(ObjectPlacement { class_id: classes[k], x, y });
                    ok = true;
                    break;
                }
            }
            if !ok {
                break;
            }
        }
        if placed.len() == n {
            return Ok(placed);
        }
    }
    Err(Error::Generation(format!("could not place {n} objects {min_sep} m apart on {}", map.map_id())))
}
