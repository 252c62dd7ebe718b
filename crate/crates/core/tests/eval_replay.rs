use multionlab::dataset::Dataset;
use multionlab::eval::{evaluate, report, EvalOptions, PolicyMode};
use multionlab::policy::{PolicyParams, Variant};
use multionlab::replay::{check_export, export, export_csv, export_text, point_bins, Supervision, TrajectoryLog};
use multionlab::spatial::bin_point;
use multionlab::verify::tiny_run;
use multionlab::world::Split;

fn setup(variant: Variant) -> (multionlab::config::RunConfig, PolicyParams<f32>, Dataset) {
    let cfg = tiny_run(variant, 1);
    let params = PolicyParams::<f32>::init(&cfg.agent, cfg.sim.n_rays, 5).unwrap();
    let ds = Dataset::generate(Split::Val, 20, 4, &cfg.world, cfg.sim.reward.success_radius).unwrap();
    (cfg, params, ds)
}

#[test]
fn evaluation_is_independent_of_threads_and_repeatable() {
    let (cfg, params, ds) = setup(Variant::ProjNeural);
    for mode in [PolicyMode::Greedy, PolicyMode::Sample] {
        let one = evaluate(&params, &cfg.sim, &ds, &EvalOptions { mode, seed: 2, threads: 1 }).unwrap();
        let two = evaluate(&params, &cfg.sim, &ds, &EvalOptions { mode, seed: 2, threads: 2 }).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.len(), 20);
        for (e, spec) in one.iter().zip(&ds.episodes) {
            assert_eq!(e.episode_id, spec.episode_id);
            assert_eq!(e.predictions.len(), e.trajectory.actions.len());
            assert!(e.score.spl <= e.score.success && e.score.ppl <= e.score.progress);
        }
    }
    let r = report("x", &evaluate(&params, &cfg.sim, &ds, &EvalOptions { mode: PolicyMode::Sample, seed: 2, threads: 1 }).unwrap());
    assert_eq!(r.count, 20);
}

#[test]
fn mismatched_success_radius_is_rejected() {
    let (mut cfg, params, ds) = setup(Variant::NoMap);
    cfg.sim.reward.success_radius += 0.5;
    assert!(evaluate(&params, &cfg.sim, &ds, &EvalOptions { mode: PolicyMode::Greedy, seed: 0, threads: 1 }).is_err());
}

#[test]
fn replay_export_round_trips_and_flags_supervision() {
    let (cfg, params, ds) = setup(Variant::OracleEgoMap);
    let evals = evaluate(&params, &cfg.sim, &ds, &EvalOptions { mode: PolicyMode::Sample, seed: 3, threads: 1 }).unwrap();
    let (mut supervised, mut unsupervised) = (0, 0);
    for (e, spec) in evals.iter().zip(&ds.episodes) {
        let log = TrajectoryLog::from_eval(e, spec, cfg.agent.variant, &cfg.sim, &ds.header.world.map);
        let line = serde_json::to_string(&log).unwrap();
        let parsed = TrajectoryLog::parse_all(&line).unwrap();
        assert_eq!(parsed, vec![log.clone()]);

        let (header, steps) = export(&log).unwrap();
        assert_eq!(steps.len(), e.trajectory.actions.len());
        for (k, s) in steps.iter().enumerate() {
            let pose = e.trajectory.poses[k];
            assert_eq!((s.x, s.y, s.heading), (pose.x, pose.y, pose.heading));
            match s.supervision {
                Supervision::Supervised => {
                    supervised += 1;
                    // A head that predicts the labels exactly places its point
                    // in the target's direction and distance bins.
                    let (dir, dist) = (s.label_direction.unwrap(), s.label_distance.unwrap());
                    assert_eq!(point_bins(bin_point(dir, dist)), (dir, dist));
                    assert_eq!(point_bins(s.target_ego), (dir, dist));
                }
                Supervision::Unsupervised => {
                    unsupervised += 1;
                    assert!(s.label_direction.is_none() && s.label_distance.is_none());
                }
            }
        }
        let text = export_text(&header, &steps).unwrap();
        assert_eq!(check_export(&text).unwrap(), steps.len());
        assert_eq!(export_csv(&steps).lines().count(), steps.len() + 1);
    }
    assert!(supervised > 0 && unsupervised > 0);
}

#[test]
fn corrupted_exports_are_rejected() {
    let (cfg, params, ds) = setup(Variant::NoMap);
    let evals = evaluate(&params, &cfg.sim, &ds, &EvalOptions { mode: PolicyMode::Greedy, seed: 0, threads: 1 }).unwrap();
    let log = TrajectoryLog::from_eval(&evals[0], &ds.episodes[0], cfg.agent.variant, &cfg.sim, &ds.header.world.map);
    let (header, steps) = export(&log).unwrap();
    let text = export_text(&header, &steps).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let truncated = lines[..lines.len() - 1].join("\n");
    assert!(check_export(&truncated).is_err());

    let mut row: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    let d = row["pred_direction"].as_u64().unwrap();
    row["pred_direction"] = serde_json::json!((d + 1) % 12);
    let mut edited: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    edited[1] = serde_json::to_string(&row).unwrap();
    let err = check_export(&edited.join("\n")).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");

    let mut bad_log = log.clone();
    bad_log.spec.map_id = "map-0".into();
    assert!(export(&bad_log).is_err());
}
