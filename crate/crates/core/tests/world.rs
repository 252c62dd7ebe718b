use multionlab::world::{generate_map, geodesic_field, Cell, GenConfig, Split, WorldMap};
use proptest::prelude::*;

/// All-pairs shortest paths by Floyd-Warshall over free cells.
fn floyd_warshall(map: &WorldMap) -> Vec<Vec<f64>> {
    let (w, h, res) = (map.width(), map.height(), map.resolution());
    let n = w * h;
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for cy in 0..h {
        for cx in 0..w {
            if map.cell(cx, cy) != Cell::Free {
                continue;
            }
            let i = cy * w + cx;
            d[i][i] = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy) == (0, 0) {
                        continue;
                    }
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if map.is_free(nx, ny) {
                        let cost = if dx != 0 && dy != 0 { res * 2f64.sqrt() } else { res };
                        let j = ny as usize * w + nx as usize;
                        d[i][j] = d[i][j].min(cost);
                    }
                }
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            if d[i][k].is_infinite() {
                continue;
            }
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

fn wall_with_door() -> WorldMap {
    let (w, h) = (12, 12);
    let mut cells = vec![Cell::Obstacle; w * h];
    for cy in 1..h - 1 {
        for cx in 1..w - 1 {
            cells[cy * w + cx] = Cell::Free;
        }
    }
    for cy in 1..h - 1 {
        if cy != 9 {
            cells[cy * w + 6] = Cell::Obstacle;
        }
    }
    WorldMap::new(w, h, 0.25, cells, "door".into(), Split::Test).unwrap()
}

#[test]
fn door_detour_matches_all_pairs_oracle() {
    let m = wall_with_door();
    let oracle = floyd_warshall(&m);
    let src = (3, 2);
    let f = geodesic_field(&m, m.cell_center(src.0, src.1)).unwrap();
    let target = (9, 2);
    let expect = oracle[src.1 * m.width() + src.0][target.1 * m.width() + target.0];
    assert!((f.at_cell(target.0, target.1) - expect).abs() < 1e-12);
    // the detour is strictly longer than the straight line through the wall
    assert!(expect > 6.0 * 0.25 + 1e-9);
}

#[test]
fn exhaustive_source_sweep_on_small_maps() {
    let cfg = GenConfig { width: 16, height: 16, rooms: 3, min_room: 3, max_room: 6, ..Default::default() };
    let mut maps = vec![wall_with_door()];
    for seed in 0..4 {
        maps.push(generate_map(seed, &cfg).unwrap());
    }
    for m in &maps {
        let oracle = floyd_warshall(m);
        for (sx, sy) in m.free_cells() {
            let f = geodesic_field(m, m.cell_center(sx, sy)).unwrap();
            let row = &oracle[sy * m.width() + sx];
            for (i, (&a, &b)) in f.distances().iter().zip(row).enumerate() {
                assert!(a == b || (a - b).abs() < 1e-9, "{} source ({sx},{sy}) cell {i}: {a} vs {b}", m.map_id());
            }
        }
    }
}

#[test]
fn field_satisfies_edge_triangle_inequality() {
    let m = generate_map(21, &GenConfig::default()).unwrap();
    let (sx, sy) = m.free_cells()[5];
    let f = geodesic_field(&m, m.cell_center(sx, sy)).unwrap();
    assert_eq!(f.at_cell(sx, sy), 0.0);
    for (cx, cy) in m.free_cells() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                if (dx, dy) != (0, 0) && m.is_free(nx, ny) {
                    let cost = if dx != 0 && dy != 0 { 0.25 * 2f64.sqrt() } else { 0.25 };
                    assert!(f.at_cell(nx as usize, ny as usize) <= f.at_cell(cx, cy) + cost + 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adding_an_obstacle_never_shortens_paths(seed in 0u64..1000, pick in 0usize..10_000, src in 0usize..10_000) {
        let cfg = GenConfig { width: 20, height: 20, rooms: 3, min_room: 3, max_room: 7, ..Default::default() };
        let m = generate_map(seed, &cfg).unwrap();
        let free = m.free_cells();
        let s = free[src % free.len()];
        let blocked = free[pick % free.len()];
        prop_assume!(s != blocked);
        let before = geodesic_field(&m, m.cell_center(s.0, s.1)).unwrap();
        let worse = m.with_obstacle(blocked.0, blocked.1);
        let after = geodesic_field(&worse, m.cell_center(s.0, s.1)).unwrap();
        for (a, b) in after.distances().iter().zip(before.distances()) {
            prop_assert!(*a >= *b);
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_seed(seed in any::<u64>()) {
        let cfg = GenConfig { width: 24, height: 24, rooms: 3, ..Default::default() };
        let a = generate_map(seed, &cfg).unwrap();
        let b = generate_map(seed, &cfg).unwrap();
        prop_assert_eq!(a.to_text(), b.to_text());
        prop_assert_eq!(a.split(), Split::of_seed(seed));
    }
}
