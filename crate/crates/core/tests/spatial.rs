use std::sync::Arc;
use std::time::Instant;

use multionlab::dataset::{stream_episode, MapCache, WorldConfig};
use multionlab::env::NavEnv;
use multionlab::policy::Variant;
use multionlab::simulator::{Action, Pose, SimConfig};
use multionlab::spatial::{
    bin_point, direction_label, distance_label, ego_to_world, to_egocentric, world_to_ego, EgoMode, EGO_CENTER, OBJ_UNKNOWN, OCC_UNKNOWN,
};
use multionlab::verify::{check_labels, oracle_direction_bin, oracle_distance_bin, Mutation};
use multionlab::world::Split;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_ego_offsets_match_oracles() {
    let start = Instant::now();
    check_labels(Mutation::None).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn mirrored_labels_are_caught() {
    let err = check_labels(Mutation::LabelSignFlip).unwrap_err();
    assert!(err.contains("oracle"), "{err}");
}

#[test]
fn cardinal_directions() {
    let at = |dx: f64, dy: f64| direction_label(&[(EGO_CENTER + dx, EGO_CENTER + dy)]).1;
    assert_eq!(at(0.0, 3.0), 0, "ahead");
    assert_eq!(at(-3.0, 0.0), 3, "left");
    assert_eq!(at(0.0, -3.0), 6, "behind");
    assert_eq!(at(3.0, 0.0), 9, "right");
}

#[test]
fn every_bin_center_maps_back_to_its_bins() {
    for dir in 0..12 {
        for dist in 0..36 {
            let p = bin_point(dir, dist);
            assert_eq!((direction_label(&[p]).1, distance_label(&[p]).1), (dir, dist));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn integer_offsets_agree_with_oracles_beyond_the_grid(dx in -60i64..60, dy in -60i64..60) {
        prop_assume!(dx != 0 || dy != 0);
        let p = [(EGO_CENTER + dx as f64, EGO_CENTER + dy as f64)];
        prop_assert_eq!(direction_label(&p).1, oracle_direction_bin(dx, dy));
        prop_assert_eq!(distance_label(&p).1, oracle_distance_bin(dx, dy));
    }

    #[test]
    fn ego_transform_round_trips(x in 0.0f64..10.0, y in 0.0f64..10.0, h in 0u8..12, px in -5.0f64..15.0, py in -5.0f64..15.0) {
        let pose = Pose::new(x, y, h);
        let (u, v) = world_to_ego(&pose, 0.25, px, py);
        let (bx, by) = ego_to_world(&pose, 0.25, u, v);
        prop_assert!((bx - px).abs() < 1e-9 && (by - py).abs() < 1e-9);
        let d = ((px - x).hypot(py - y)) / 0.25;
        prop_assert!(((u - EGO_CENTER).hypot(v - EGO_CENTER) - d).abs() < 1e-9);
    }

    /// Rotating the whole world by a multiple of the heading step and
    /// turning the agent by the same amount leaves the labels unchanged, as
    /// does translating the world.
    #[test]
    fn labels_are_rotation_and_translation_equivariant(
        x in 0.0f64..10.0, y in 0.0f64..10.0, h in 0u8..12, k in 0i32..12,
        gx in 0.0f64..10.0, gy in 0.0f64..10.0, tx in -5.0f64..5.0, ty in -5.0f64..5.0,
    ) {
        let pose = Pose::new(x, y, h);
        let labels = |pose: &Pose, gx: f64, gy: f64| {
            let o = world_to_ego(pose, 0.25, gx, gy);
            (direction_label(&[o]), distance_label(&[o]))
        };
        let ((phi, dir), (d, dist)) = labels(&pose, gx, gy);
        let turned = pose.turned(k);
        let theta = turned.heading_rad() - pose.heading_rad();
        let (s, c) = theta.sin_cos();
        let rot = |px: f64, py: f64| (px * c - py * s, px * s + py * c);
        let (rx, ry) = rot(x, y);
        let (rgx, rgy) = rot(gx, gy);
        let ((phi2, dir2), (d2, dist2)) = labels(&Pose { x: rx, y: ry, ..turned }, rgx, rgy);
        prop_assert!((d - d2).abs() < 1e-9);
        let dphi = (phi - phi2).abs();
        prop_assert!(dphi.min(std::f64::consts::TAU - dphi) < 1e-9);
        // Bins can only differ where the angle sits on a bin edge.
        let width = std::f64::consts::TAU / 12.0;
        let near_edge = ((phi / width).round() - phi / width).abs() < 1e-7;
        prop_assert!(dir == dir2 || near_edge);
        prop_assert!(dist == dist2 || (d - d.round()).abs() < 1e-7);
        let ((phi3, _), (d3, _)) = labels(&Pose { x: x + tx, y: y + ty, ..pose }, gx + tx, gy + ty);
        prop_assert!((phi - phi3).abs() < 1e-9 || (std::f64::consts::TAU - (phi - phi3).abs()) < 1e-9);
        prop_assert!((d - d3).abs() < 1e-9);
    }
}

/// OracleEgoMap shows a subset of what OracleMap shows, and only where the
/// agent has looked.
#[test]
fn revealed_view_is_a_subset_of_the_full_view() {
    let world = WorldConfig::default();
    let cfg = SimConfig { max_steps: 60, ..SimConfig::default() };
    let mut cache = MapCache::new(world.map.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..40 {
        let (map, spec) = stream_episode(&mut cache, Split::Train, 12, i, &world, cfg.reward.success_radius).unwrap();
        let mut env = NavEnv::new(Arc::clone(&map), spec.clone(), cfg.clone(), Variant::OracleEgoMap).unwrap();
        let objects = spec.objects();
        while !env.done() {
            let pose = env.sim().state().pose;
            let full = to_egocentric(&map, &objects, env.revealed(), &pose, EgoMode::OracleMap);
            let partial = to_egocentric(&map, &objects, env.revealed(), &pose, EgoMode::OracleEgoMap);
            assert!(partial.occupancy.iter().all(|&o| o == OCC_UNKNOWN));
            for (p, f) in partial.objects.iter().zip(&full.objects) {
                assert!(*p == OBJ_UNKNOWN || p == f);
            }
            let a = [Action::Forward, Action::Forward, Action::TurnLeft, Action::TurnRight][rng.gen_range(0..4)];
            env.step(a).unwrap();
        }
        assert!(env.revealed().count() > 0);
    }
}
