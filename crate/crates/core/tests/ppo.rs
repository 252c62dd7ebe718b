use multionlab::policy::{Bound, Variant};
use multionlab::ppo::{aux_loss, clipped_objective, compute_gae, minibatch_loss, surrogate, AuxConfig, AuxNorm, Minibatch, PpoConfig};
use multionlab::verify::{check_aux_losses, check_ppo_algebra, gae_oracle, synthetic_rollout, LabelPattern, Mutation};
use multionlab_autodiff::{Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gae_matches_explicit_sum(
        steps in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0, prop::bool::weighted(0.25)), 1..12),
        last in -3.0f64..3.0,
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = compute_gae(&r, &v, &d, last, gamma, lambda);
        let oracle = gae_oracle(&r, &v, &d, last, gamma, lambda);
        for t in 0..r.len() {
            prop_assert!((adv[t] - oracle[t]).abs() < 1e-10);
            prop_assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_objective_is_a_pessimistic_bound(r in 0.0f64..3.0, a in -5.0f64..5.0, eps in 0.01f64..0.5) {
        let c = clipped_objective(r, a, eps);
        prop_assert!(c <= r * a + 1e-12);
        if (1.0 - eps..=1.0 + eps).contains(&r) {
            prop_assert_eq!(c, r * a);
        }
        prop_assert_eq!(clipped_objective(1.0, a, eps), a);
    }
}

#[test]
fn suite_checks_pass() {
    check_ppo_algebra(Mutation::None).unwrap();
    check_aux_losses().unwrap();
}

#[test]
fn wrong_clip_bound_is_detected() {
    assert!(check_ppo_algebra(Mutation::WrongClipBound).is_err());
}

#[test]
fn clipped_side_passes_no_gradient() {
    // r = 1.5 with a positive advantage sits on the flat clipped branch; r = 1.1 does not.
    for (r, a, flat) in [(1.5f64, 1.0, true), (1.1, 1.0, false), (0.5, -1.0, true), (0.5, 1.0, false)] {
        let mut tape = Tape::<f64>::new();
        let logp = tape.param(Tensor::column(vec![r.ln()]));
        let (s, _) = surrogate(&mut tape, logp, &[0.0], &[a], 0.2).unwrap();
        let g = tape.backward(s).unwrap();
        let d = g.get_or_zeros(logp).item();
        if flat {
            assert_eq!(d, 0.0, "r={r} A={a}");
        } else {
            assert!((d - r * a).abs() < 1e-12, "r={r} A={a}: {d}");
        }
    }
}

#[test]
fn advantage_normalization_standardizes_the_batch() {
    let (_, mut batch) = synthetic_rollout(Variant::NoMap, 4, LabelPattern::None, 2).unwrap();
    for (i, e) in batch.envs.iter_mut().enumerate() {
        for (t, s) in e.steps.iter_mut().enumerate() {
            s.reward = (i * 4 + t) as f64 * 0.3 - 1.0;
            s.done = t == 2;
        }
    }
    batch.compute_advantages(0.99, 0.95, true);
    let all: Vec<f64> = batch.envs.iter().flat_map(|e| e.advantages.clone()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
    assert!(mean.abs() < 1e-12);
    assert!((var.sqrt() - 1.0).abs() < 1e-6);
}

#[test]
fn aux_loss_normalization_choices() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.param(Tensor::zeros(&[4, 12]));
    let targets = [Some(3), None, Some(7), None];
    let batch = aux_loss(&mut tape, logits, &targets, 4.0).unwrap();
    let labeled = aux_loss(&mut tape, logits, &targets, 2.0).unwrap();
    let none = aux_loss(&mut tape, logits, &[None; 4], 4.0).unwrap();
    let ln12 = 12f64.ln();
    assert!((tape.value(batch).item() - ln12 / 2.0).abs() < 1e-12);
    assert!((tape.value(labeled).item() - ln12).abs() < 1e-12);
    assert_eq!(tape.value(none).item(), 0.0);
}

#[test]
fn labeled_normalization_ignores_unlabeled_steps() {
    let (mut p, batch) = synthetic_rollout(Variant::NoMap, 4, LabelPattern::FirstHalf, 6).unwrap();
    let names = p.names().to_vec();
    for (n, t) in names.iter().zip(p.tensors_mut()) {
        if n.starts_with("dir2.") {
            *t = Tensor::zeros(t.shape());
        }
    }
    let mb = Minibatch::<f64>::from_rollout(&batch, &[0, 1]).unwrap();
    let aux = AuxConfig { normalization: AuxNorm::Labeled, ..AuxConfig::default() };
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, false);
    let bound = Bound::new(&p, &vars);
    let l = minibatch_loss(&mut tape, &bound, &p, &mb, &PpoConfig::default(), &aux).unwrap();
    assert!((tape.value(l.dir).item() - 12f64.ln()).abs() < 1e-9);
}

#[test]
fn ablation_arms_select_loss_terms() {
    let (p, batch) = synthetic_rollout(Variant::ProjNeural, 3, LabelPattern::All, 9).unwrap();
    let mb = Minibatch::<f64>::from_rollout(&batch, &[0, 1]).unwrap();
    let total = |arm: &str| {
        let aux = AuxConfig::default().with_arm(arm).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, false);
        let bound = Bound::new(&p, &vars);
        let l = minibatch_loss(&mut tape, &bound, &p, &mb, &PpoConfig::default(), &aux).unwrap();
        (tape.value(l.total).item(), tape.value(l.dir).item(), tape.value(l.dist).item())
    };
    let (none, dir, dist) = total("none");
    let (with_dir, _, _) = total("dir");
    let (both, _, _) = total("dir+dist");
    assert!((with_dir - none - 0.25 * dir).abs() < 1e-12);
    assert!((both - with_dir - 0.25 * dist).abs() < 1e-12);
    assert!(AuxConfig::default().with_arm("dist-only").is_err());
}
