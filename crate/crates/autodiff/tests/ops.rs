use multionlab_autodiff::{
    adam_step, clip_grad_norm, grad_check, AdamConfig, AdamState, AutodiffError, Checkpoint, Result, Tape, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor<f64> {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Reduces a matrix to a scalar with fixed random weights so every output
/// element carries a distinct gradient.
fn weighted_sum(t: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(x).dims2();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, r, c, 1.0).map(|v| if v >= 0.0 { 0.5 + v } else { v - 0.5 });
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    t.sum(p)
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(0.0));
    let y = t.sigmoid(x).unwrap();
    let g = t.backward(y).unwrap();
    assert_eq!(t.value(y).item(), 0.5);
    assert_eq!(g.get(x).unwrap().item(), 0.25);
}

#[test]
fn mean_gradient_is_one_over_n() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::matrix(2, 5, (0..10).map(|i| i as f64).collect()).unwrap());
    let m = t.mean(x).unwrap();
    let g = t.backward(m).unwrap().get(x).unwrap();
    assert!(g.data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
}

#[test]
fn clipped_surrogate_has_zero_gradient_when_clip_branch_is_active() {
    let mut t = Tape::<f64>::new();
    let r = t.param(Tensor::scalar(2.0));
    let adv = t.constant(Tensor::scalar(1.0));
    let unclipped = t.mul(r, adv).unwrap();
    let c = t.clip(r, 0.8, 1.2).unwrap();
    let clipped = t.mul(c, adv).unwrap();
    let s = t.min(unclipped, clipped).unwrap();
    assert_eq!(t.value(s).item(), 1.2);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get_or_zeros(r).item(), 0.0);
}

#[test]
fn clip_boundary_passes_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::row(vec![0.8, 1.2, 0.5, 1.5]));
    let c = t.clip(x, 0.8, 1.2).unwrap();
    let s = t.sum(c).unwrap();
    let g = t.backward(s).unwrap().get(x).unwrap();
    assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn quadratic_grad_check_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_tensor(&mut rng, 4, 6, 1.0).map(|v| if v >= 0.0 { 0.5 + v } else { v - 0.5 });
    let rep = grad_check(
        |t, p| {
            let sq = t.square(p[0])?;
            t.sum(sq)
        },
        &[w],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-9, "{rep:?}");
}

#[test]
fn relu_grad_check_away_from_kink() {
    // probe points chosen with |x| >= 0.1 so +-eps never crosses zero
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::matrix(
        3,
        7,
        (0..21)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..2.0);
                if rng.gen_bool(0.5) { v } else { -v }
            })
            .collect(),
    )
    .unwrap();
    let rep = grad_check(
        |t, p| {
            let y = t.relu(p[0])?;
            weighted_sum(t, y, 3)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn softmax_sums_to_one_and_uniform_cross_entropy_is_ln_k() {
    for k in [2usize, 12, 36] {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[3, k]));
        let s = t.softmax(x).unwrap();
        for r in 0..3 {
            let sum: f64 = (0..k).map(|c| t.value(s).get2(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let ce = t.softmax_cross_entropy(x, &[0, 1, k - 1], &[1.0, 1.0, 1.0]).unwrap();
        for r in 0..3 {
            assert!((t.value(ce).get2(r, 0) - (k as f64).ln()).abs() < 1e-6);
        }
    }
}

#[test]
fn cross_entropy_zero_weight_rows_are_inert() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap());
    let ce = t.softmax_cross_entropy(x, &[0, 2], &[0.0, 1.0]).unwrap();
    assert_eq!(t.value(ce).get2(0, 0), 0.0);
    let s = t.sum(ce).unwrap();
    let g = t.backward(s).unwrap().get(x).unwrap();
    assert_eq!(&g.data()[0..3], &[0.0, 0.0, 0.0]);
    assert!(g.data()[3..].iter().any(|&v| v != 0.0));
}

#[test]
fn cross_entropy_floors_probability() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::row(vec![0.0, 100.0]));
    let ce = t.softmax_cross_entropy(x, &[0], &[1.0]).unwrap();
    assert!((t.value(ce).item() + (1e-12f64).ln()).abs() < 1e-9);
    let g = t.backward(ce).unwrap();
    assert!(g.get_or_zeros(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_twice_is_an_error() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.square(x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.backward(y).err(), Some(AutodiffError::BackwardTwice));
    t.reset();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.square(x).unwrap();
    assert!(t.backward(y).is_ok());
}

#[test]
fn foreign_var_and_shape_errors() {
    let mut a = Tape::<f64>::new();
    let mut b = Tape::<f64>::new();
    let x = a.param(Tensor::scalar(1.0));
    assert_eq!(b.sum(x).err(), Some(AutodiffError::ForeignVar));
    let p = a.constant(Tensor::zeros(&[2, 3]));
    let q = a.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(a.matmul(p, q), Err(AutodiffError::Shape { .. })));
    assert!(matches!(a.add(p, x), Err(AutodiffError::Shape { .. })));
    let big = a.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(a.backward(big), Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn checked_mode_rejects_non_finite() {
    let mut t = Tape::<f64>::checked();
    let x = t.constant(Tensor::scalar(0.0));
    assert_eq!(t.log(x).err(), Some(AutodiffError::NonFinite("log")));
    let mut u = Tape::<f64>::new();
    let x = u.constant(Tensor::scalar(0.0));
    assert!(u.log(x).is_ok());
}

#[test]
fn forward_is_bit_deterministic_and_row_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, 7, 33, 1.0).cast::<f32>();
    let b = rand_tensor(&mut rng, 33, 17, 1.0).cast::<f32>();
    let run = |a: &Tensor<f32>| {
        let mut t = Tape::<f32>::new();
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        let z = t.matmul(x, y).unwrap();
        t.value(z).clone()
    };
    let full = run(&a);
    assert_eq!(full, run(&a));
    let row3 = Tensor::matrix(1, 33, a.data()[3 * 33..4 * 33].to_vec()).unwrap();
    assert_eq!(run(&row3).data(), &full.data()[3 * 17..4 * 17]);
}

#[test]
fn adam_zero_gradient_from_fresh_state_keeps_params() {
    let p0 = Tensor::row(vec![1.0f64, -2.0, 3.0]);
    let mut params = vec![p0.clone()];
    let mut st = AdamState::new(&params);
    adam_step(&mut params, &[Tensor::zeros(&[1, 3])], &mut st, &AdamConfig::default()).unwrap();
    assert_eq!(params[0], p0);
    // moments decay under zero gradient
    let mut st = AdamState::new(&params);
    adam_step(&mut params, &[Tensor::row(vec![1.0, 1.0, 1.0])], &mut st, &AdamConfig::default()).unwrap();
    let m_before = st.m[0].data()[0];
    adam_step(&mut params, &[Tensor::zeros(&[1, 3])], &mut st, &AdamConfig::default()).unwrap();
    assert!((st.m[0].data()[0] - 0.9 * m_before).abs() < 1e-15);
}

#[test]
fn adam_first_step_magnitude_is_lr() {
    let cfg = AdamConfig { lr: 0.01, ..Default::default() };
    let mut params = vec![Tensor::row(vec![0.0f64, 0.0, 0.0])];
    let g = Tensor::row(vec![0.5, -3.0, 1e-3]);
    let mut st = AdamState::new(&params);
    adam_step(&mut params, &[g.clone()], &mut st, &cfg).unwrap();
    for (p, gv) in params[0].data().iter().zip(g.data()) {
        let expected = -cfg.lr * gv / (gv.abs() + cfg.eps);
        assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
    }
}

#[test]
fn adam_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = vec![rand_tensor(&mut rng, 3, 4, 1.0)];
    let g = vec![rand_tensor(&mut rng, 3, 4, 1.0)];
    let (mut p1, mut p2) = (p.clone(), p.clone());
    let (mut s1, mut s2) = (AdamState::new(&p), AdamState::new(&p));
    adam_step(&mut p1, &g, &mut s1, &AdamConfig::default()).unwrap();
    adam_step(&mut p2, &g, &mut s2, &AdamConfig::default()).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
}

#[test]
fn grad_norm_clipping() {
    let mut g = vec![Tensor::row(vec![3.0f64, 4.0])];
    let n = clip_grad_norm(&mut g, 1.0);
    assert_eq!(n, 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut c = Checkpoint::new();
    c.push("w", Tensor::row(vec![1.0f32, 2.0]));
    let bytes = c.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert_eq!(&bytes[..16], b"MULTIONLAB-CKPT\n");
}

type UnaryCase = fn(&mut Tape<f64>, Var) -> Result<Var>;

fn unary_cases() -> Vec<(&'static str, UnaryCase)> {
    vec![
        ("sigmoid", |t, x| t.sigmoid(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("exp", |t, x| t.exp(x)),
        ("square", |t, x| t.square(x)),
        ("softmax", |t, x| t.softmax(x)),
        ("log_softmax", |t, x| t.log_softmax(x)),
        ("sum_cols", |t, x| t.sum_cols(x)),
        ("mean", |t, x| t.mean(x)),
        ("log", |t, x| {
            let e = t.exp(x)?;
            t.log(e)
        }),
        ("scale", |t, x| t.scale(x, -1.7)),
        ("slice_cols", |t, x| {
            let n = t.value(x).cols();
            t.slice_cols(x, n / 3, n)
        }),
        ("slice_rows", |t, x| {
            let m = t.value(x).rows();
            t.slice_rows(x, 0, m.div_ceil(2))
        }),
        ("select_rows", |t, x| {
            let m = t.value(x).rows();
            t.select_rows(x, &[m - 1, 0, m - 1])
        }),
        ("gather_cols", |t, x| {
            let (m, n) = t.value(x).dims2();
            let idx: Vec<usize> = (0..m).map(|i| (i * 7) % n).collect();
            t.gather_cols(x, &idx)
        }),
        ("cross_entropy", |t, x| {
            let (m, n) = t.value(x).dims2();
            let idx: Vec<usize> = (0..m).map(|i| (i * 5) % n).collect();
            let w: Vec<f64> = (0..m).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
            t.softmax_cross_entropy(x, &idx, &w)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn unary_ops_pass_grad_check(rows in 1usize..24, cols in 1usize..24, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, rows, cols, 1.5);
        for (name, op) in unary_cases() {
            let rep = grad_check(|t, p| { let y = op(t, p[0])?; weighted_sum(t, y, seed) }, &[x.clone()], 1e-5).unwrap();
            prop_assert!(rep.max_rel_error < 1e-6, "{name}: {rep:?}");
        }
    }

    #[test]
    fn binary_ops_pass_grad_check(m in 1usize..20, k in 1usize..20, n in 1usize..20, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, m, k, 1.0);
        let b = rand_tensor(&mut rng, k, n, 1.0);
        let c = rand_tensor(&mut rng, m, k, 1.0);
        let bias = rand_tensor(&mut rng, 1, k, 1.0);
        let col = rand_tensor(&mut rng, m, 1, 1.0);
        let rep = grad_check(|t, p| { let y = t.matmul(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a.clone(), b.clone()], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "matmul {rep:?}");
        for (name, op) in [
            ("add", (|t: &mut Tape<f64>, x, y| t.add(x, y)) as fn(&mut Tape<f64>, Var, Var) -> Result<Var>),
            ("sub", |t, x, y| t.sub(x, y)),
            ("mul", |t, x, y| t.mul(x, y)),
            ("concat_cols", |t, x, y| t.concat_cols(&[x, y, x])),
            ("concat_rows", |t, x, y| t.concat_rows(&[y, x])),
        ] {
            let rep = grad_check(|t, p| { let y = op(t, p[0], p[1])?; weighted_sum(t, y, seed) }, &[a.clone(), c.clone()], 1e-5).unwrap();
            prop_assert!(rep.max_rel_error < 1e-6, "{name}: {rep:?}");
        }
        let rep = grad_check(|t, p| { let y = t.add_row(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a.clone(), bias], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "add_row {rep:?}");
        let rep = grad_check(|t, p| { let y = t.mul_rows(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a.clone(), col], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "mul_rows {rep:?}");
    }

    #[test]
    fn min_max_clip_pass_grad_check_away_from_kinks(m in 1usize..16, n in 1usize..16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // separated inputs keep +-eps perturbations on one side of every kink
        let a = rand_tensor(&mut rng, m, n, 1.0);
        let b = a.map(|v| if v > 0.0 { v - 0.3 } else { v + 0.3 });
        let x = Tensor::matrix(m, n, (0..m * n).map(|_| { let v: f64 = rng.gen_range(0.05..0.45); if rng.gen_bool(0.5) { v } else { 1.0 + v } }).collect()).unwrap();
        let rep = grad_check(|t, p| { let y = t.min(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a.clone(), b.clone()], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "min {rep:?}");
        let rep = grad_check(|t, p| { let y = t.max(p[0], p[1])?; weighted_sum(t, y, seed) }, &[a, b], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "max {rep:?}");
        let rep = grad_check(|t, p| { let y = t.clip(p[0], 0.5, 1.0)?; weighted_sum(t, y, seed) }, &[x], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "clip {rep:?}");
    }

    #[test]
    fn embedding_and_patchify_pass_grad_check(batch in 1usize..3, k in 1usize..4, cells in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = k * cells;
        let w = k * (cells + 1);
        let x = rand_tensor(&mut rng, batch * h * w, c, 1.0);
        let rep = grad_check(|t, p| { let y = t.patchify(p[0], batch, h, w, k)?; weighted_sum(t, y, seed) }, &[x], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "patchify {rep:?}");
        let table = rand_tensor(&mut rng, 5, c + 2, 1.0);
        let rep = grad_check(|t, p| { let y = t.embedding(p[0], &[4, 0, 4, 2])?; weighted_sum(t, y, seed) }, &[table], 1e-5).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "embedding {rep:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in 0u64..1000, name in "[a-z.]{1,12}") {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Checkpoint::new();
        c.push(name.clone(), rand_tensor(&mut rng, rows, cols, 1e3).cast::<f32>());
        c.push(format!("{name}.64"), rand_tensor(&mut rng, cols, rows + 1, 1e-3));
        c.push("nan", Tensor::row(vec![f64::NAN, -0.0, f64::INFINITY]));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.get::<f32>(&name), c.get::<f32>(&name));
    }
}

#[test]
fn large_matmul_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_tensor(&mut rng, 64, 64, 1.0);
    let b = rand_tensor(&mut rng, 64, 8, 1.0);
    let rep = grad_check(
        |t, p| {
            let y = t.matmul(p[0], p[1])?;
            let y = t.tanh(y)?;
            weighted_sum(t, y, 4)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}
