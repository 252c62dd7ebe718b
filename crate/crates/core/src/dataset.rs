//! Episode sampling and the episode-dataset file.
//!
//! A dataset file is JSON lines: a header record carrying the generator
//! configuration, then one record per episode. Maps are referenced by seed
//! and regenerated on load; the stored `map_id` is checked against the
//! regenerated map.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::simulator::{EpisodeSpec, Pose, N_HEADINGS};
use crate::world::{generate_map, geodesic_field, sample_objects, GenConfig, Split, WorldMap};

pub const DATASET_FORMAT: &str = "MULTIONLAB-EPISODES";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub map: GenConfig,
    pub n_goals: usize,
    pub n_classes: usize,
    pub min_sep: f64,
    pub distractors: usize,
    /// Number of distinct maps drawn from each split's seed range.
    pub maps_per_split: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { map: GenConfig::default(), n_goals: 3, n_classes: 8, min_sep: 2.0, distractors: 0, maps_per_split: 1000 }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_goals == 0 || self.n_goals + self.distractors > self.n_classes {
            return Err(Error::Config(format!(
                "{} goals and {} distractors need distinct classes out of {}",
                self.n_goals, self.distractors, self.n_classes
            )));
        }
        if self.n_classes > crate::spatial::N_CLASSES {
            return Err(Error::Config(format!("at most {} object classes are supported", crate::spatial::N_CLASSES)));
        }
        if self.maps_per_split == 0 {
            return Err(Error::Config("maps_per_split must be positive".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent seeds from `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One episode on `map`: objects by rejection sampling, then a start cell
/// and heading outside the success radius of the first goal.
pub fn sample_episode(map: &WorldMap, map_seed: u64, episode_id: u64, seed: u64, cfg: &WorldConfig, success_radius: f64) -> Result<EpisodeSpec> {
    let objects = sample_objects(map, seed, cfg.n_goals + cfg.distractors, cfg.n_classes, cfg.min_sep)?;
    let (goals, distractors) = objects.split_at(cfg.n_goals);
    let field = geodesic_field(map, (goals[0].x, goals[0].y))?;
    let candidates: Vec<(usize, usize)> = map
        .free_cells()
        .into_iter()
        .filter(|&(cx, cy)| {
            let d = field.at_cell(cx, cy);
            d.is_finite() && d > success_radius
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::Generation(format!("no start cell farther than {success_radius} m from the first goal on {}", map.map_id())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let (cx, cy) = candidates[rng.gen_range(0..candidates.len())];
    let (x, y) = map.cell_center(cx, cy);
    Ok(EpisodeSpec {
        episode_id,
        map_id: map.map_id().to_string(),
        map_seed,
        start: Pose::new(x, y, rng.gen_range(0..N_HEADINGS)),
        goals: goals.to_vec(),
        distractors: distractors.to_vec(),
        seed,
    })
}

/// Lazily generated maps keyed by seed.
#[derive(Debug, Default)]
pub struct MapCache {
    cfg: GenConfig,
    maps: HashMap<u64, Arc<WorldMap>>,
}

impl MapCache {
    pub fn new(cfg: GenConfig) -> MapCache {
        MapCache { cfg, maps: HashMap::new() }
    }

    pub fn get(&mut self, seed: u64) -> Result<Arc<WorldMap>> {
        if let Some(m) = self.maps.get(&seed) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(generate_map(seed, &self.cfg)?);
        self.maps.insert(seed, Arc::clone(&m));
        Ok(m)
    }
}

/// Maps tried per episode before giving up; a map can be too cramped for
/// the requested objects.
const MAP_ATTEMPTS: u64 = 16;

/// Episode `index` of the stream `(split, seed)`; map choice and episode
/// content depend only on these arguments. Maps on which the episode cannot
/// be placed are skipped in favor of another draw from the split.
pub fn stream_episode(cache: &mut MapCache, split: Split, seed: u64, index: u64, cfg: &WorldConfig, success_radius: f64) -> Result<(Arc<WorldMap>, EpisodeSpec)> {
    let ep_seed = derive_seed(seed, index);
    let mut last = None;
    for attempt in 0..MAP_ATTEMPTS {
        let map_seed = split.map_seed(derive_seed(ep_seed, 7 + attempt) % cfg.maps_per_split);
        let placed = cache.get(map_seed).and_then(|map| Ok((Arc::clone(&map), sample_episode(&map, map_seed, index, ep_seed, cfg, success_radius)?)));
        match placed {
            Ok(found) => return Ok(found),
            Err(e @ Error::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub split: Split,
    pub seed: u64,
    pub success_radius: f64,
    pub world: WorldConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeSpec>,
}

impl Dataset {
    pub fn generate(split: Split, count: usize, seed: u64, world: &WorldConfig, success_radius: f64) -> Result<Dataset> {
        world.validate()?;
        let mut cache = MapCache::new(world.map.clone());
        let episodes = (0..count as u64)
            .map(|i| stream_episode(&mut cache, split, seed, i, world, success_radius).map(|(_, s)| s))
            .collect::<Result<Vec<_>>>()?;
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            split,
            seed,
            success_radius,
            world: world.clone(),
        };
        Ok(Dataset { header, episodes })
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        for e in &self.episodes {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty dataset".into() })?;
        let header: DatasetHeader = serde_json::from_str(first).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Parse { line: 1, msg: format!("unsupported dataset {} v{}", header.format, header.version) });
        }
        let episodes = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() }))
            .collect::<Result<Vec<EpisodeSpec>>>()?;
        Ok(Dataset { header, episodes })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_text(&text)
    }

    /// SHA-256 of the serialized dataset, as lowercase hex.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex_digest(self.to_text()?.as_bytes()))
    }

    /// Regenerates the map of an episode and checks its identity.
    pub fn map_for(&self, cache: &mut MapCache, spec: &EpisodeSpec) -> Result<Arc<WorldMap>> {
        let map = cache.get(spec.map_seed)?;
        if map.map_id() != spec.map_id {
            return Err(Error::InvalidMap(format!("episode {} expects {} but seed gives {}", spec.episode_id, spec.map_id, map.map_id())));
        }
        Ok(map)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash identifying the training episode streams of several workers: the
/// content hash of a dataset holding the first `per_stream` episodes of each
/// stream, in stream order.
pub fn streams_hash(seeds: &[u64], per_stream: u64, world: &WorldConfig, success_radius: f64) -> Result<String> {
    let mut cache = MapCache::new(world.map.clone());
    let mut text = String::new();
    for &seed in seeds {
        for i in 0..per_stream {
            let (_, spec) = stream_episode(&mut cache, Split::Train, seed, i, world, success_radius)?;
            text.push_str(&serde_json::to_string(&spec)?);
            text.push('\n');
        }
    }
    Ok(hex_digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig { map: GenConfig { width: 24, height: 24, rooms: 3, ..Default::default() }, n_goals: 2, maps_per_split: 20, ..Default::default() }
    }

    #[test]
    fn dataset_round_trips_and_is_deterministic() {
        let a = Dataset::generate(Split::Val, 5, 3, &small(), 1.5).unwrap();
        let b = Dataset::generate(Split::Val, 5, 3, &small(), 1.5).unwrap();
        assert_eq!(a.to_text().unwrap(), b.to_text().unwrap());
        let back = Dataset::from_text(&a.to_text().unwrap()).unwrap();
        assert_eq!(back, a);
        for e in &a.episodes {
            assert_eq!(Split::of_seed(e.map_seed), Split::Val);
            assert_eq!(e.goals.len(), 2);
        }
    }

    #[test]
    fn start_is_outside_success_radius() {
        let d = Dataset::generate(Split::Train, 20, 9, &small(), 1.5).unwrap();
        let mut cache = MapCache::new(small().map);
        for e in &d.episodes {
            let map = d.map_for(&mut cache, e).unwrap();
            let f = geodesic_field(&map, (e.goals[0].x, e.goals[0].y)).unwrap();
            assert!(f.at(e.start.x, e.start.y) > 1.5);
        }
    }

    #[test]
    fn bad_records_report_their_line() {
        let d = Dataset::generate(Split::Test, 2, 1, &small(), 1.5).unwrap();
        let text = d.to_text().unwrap();
        let broken: String = text.lines().enumerate().map(|(i, l)| if i == 2 { "{oops}\n".to_string() } else { format!("{l}\n") }).collect();
        match Dataset::from_text(&broken) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn derived_seeds_differ_per_stream() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}
