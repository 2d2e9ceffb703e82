use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tubeseg_autodiff::{
    batched_attention, finite_difference_check, scaled_dot_attention, AutodiffError, Tape, Tensor,
    Var, DEFAULT_STEP,
};

type Res<T> = Result<T, AutodiffError>;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Random values bounded away from zero, for primitives with a kink or pole there.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
    .unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.2..2.0)).unwrap()
}

/// Reduces any output to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Res<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = tape.shape(y).to_vec();
    let w = random(&mut rng, &shape);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(params: &[Tensor], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Res<Var>) -> f64 {
    finite_difference_check::<AutodiffError, _>(
        |tape, vars| {
            let y = build(tape, vars)?;
            weighted_sum(tape, y, seed)
        },
        params,
        DEFAULT_STEP,
    )
    .unwrap()
    .max_rel_error
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut tape = Tape::new();
    let i3 = tape.constant(Tensor::eye(3).unwrap());
    let a = t(&[3, 2], &[1.0, -2.0, 3.5, 0.0, 4.0, 5.0]);
    let av = tape.constant(a.clone());
    let out = tape.matmul(i3, av).unwrap();
    assert_eq!(tape.value(out), &a);

    let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let z = tape.matmul(x, y).unwrap();
    assert_eq!(tape.value(z).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
    assert!(matches!(
        tape.matmul(a, b),
        Err(AutodiffError::ShapeMismatch { .. })
    ));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = [random(&mut rng, &[4, 3]), random(&mut rng, &[3, 5])];
    let err = check(&params, 1, |tape, v| tape.matmul(v[0], v[1]));
    assert!(err < 1e-6, "matmul rel error {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![4]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_along_middle_axis() {
    let mut tape = Tape::new();
    let x =
        tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| (i as f64 * 0.37).sin() * 3.0).unwrap());
    let y = tape.softmax(x, 1).unwrap();
    let v = tape.value(y);
    for a in 0..2 {
        for c in 0..4 {
            let s: f64 = (0..3).map(|b| v.get(&[a, b, c]).unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_single_key_returns_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let q = tape.constant(random(&mut rng, &[5, 4]));
    let k = tape.constant(random(&mut rng, &[1, 4]));
    let vrow = random(&mut rng, &[1, 4]);
    let v = tape.constant(vrow.clone());
    let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
    for r in 0..5 {
        for c in 0..4 {
            assert_eq!(tape.value(out).get(&[r, c]), vrow.get(&[0, c]));
        }
    }
}

#[test]
fn attention_one_hot_keys_select_matching_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let onehot = Tensor::from_fn(vec![3, 3], |i| if i / 3 == i % 3 { 100.0 } else { 0.0 }).unwrap();
    let q = tape.constant(onehot.clone());
    let k = tape.constant(onehot);
    let values = random(&mut rng, &[3, 2]);
    let v = tape.constant(values.clone());
    let out = scaled_dot_attention(&mut tape, q, k, v).unwrap();
    assert!(tape.value(out).max_abs_diff(&values) < 1e-3);
}

#[test]
fn attention_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = [
        random(&mut rng, &[3, 4]),
        random(&mut rng, &[5, 4]),
        random(&mut rng, &[5, 2]),
    ];
    let err = check(&params, 5, |tape, v| {
        scaled_dot_attention(tape, v[0], v[1], v[2])
    });
    assert!(err < 1e-5, "attention rel error {err}");

    let params = [
        random(&mut rng, &[2, 3, 4]),
        random(&mut rng, &[2, 5, 4]),
        random(&mut rng, &[2, 5, 3]),
    ];
    let err = check(&params, 6, |tape, v| {
        batched_attention(tape, v[0], v[1], v[2])
    });
    assert!(err < 1e-5, "batched attention rel error {err}");
}

#[test]
fn attention_rejects_feature_mismatch() {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
    let k = tape.constant(Tensor::zeros(vec![2, 4]).unwrap());
    let v = tape.constant(Tensor::zeros(vec![2, 4]).unwrap());
    assert!(scaled_dot_attention(&mut tape, q, k, v).is_err());
}

#[test]
fn conv_identity_and_box_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::new();
    let input = random(&mut rng, &[1, 5, 4]);
    let x = tape.constant(input.clone());
    let mut ident = Tensor::zeros(vec![1, 1, 3, 3]).unwrap();
    ident.data_mut()[4] = 1.0;
    let k = tape.constant(ident);
    let y = tape.conv2d_3x3(x, k).unwrap();
    assert_eq!(tape.value(y), &input);

    let ones = tape.constant(Tensor::full(vec![1, 4, 4], 1.0).unwrap());
    let k = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0).unwrap());
    let y = tape.conv2d_3x3(ones, k).unwrap();
    let v = tape.value(y);
    for h in 1..3 {
        for w in 1..3 {
            assert_eq!(v.get(&[0, h, w]), Some(9.0));
        }
    }
    assert_eq!(v.get(&[0, 0, 0]), Some(4.0));
    assert_eq!(v.get(&[0, 0, 1]), Some(6.0));
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(vec![2, 4, 4]).unwrap());
    let k = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]).unwrap());
    assert!(tape.conv2d_3x3(x, k).is_err());
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = [
        random(&mut rng, &[1, 4, 4]),
        random(&mut rng, &[2, 1, 3, 3]),
    ];
    let err = check(&params, 8, |tape, v| tape.conv2d_3x3(v[0], v[1]));
    assert!(err < 1e-6, "conv rel error {err}");
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gain = tape.constant(Tensor::full(vec![3], 1.0).unwrap());
    let bias = tape.constant(Tensor::zeros(vec![3]).unwrap());
    let x = tape.constant(Tensor::full(vec![2, 3], 4.2).unwrap());
    let y = tape.layer_norm(x, gain, bias).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let gain = tape.constant(Tensor::full(vec![2], 1.0).unwrap());
    let bias = tape.constant(Tensor::zeros(vec![2]).unwrap());
    let x = tape.constant(t(&[2], &[1.0, 3.0]));
    let y = tape.layer_norm(x, gain, bias).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-4 && (d[1] - 1.0).abs() < 1e-4);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = [
        random(&mut rng, &[3, 5]),
        random(&mut rng, &[5]),
        random(&mut rng, &[5]),
    ];
    let err = check(&params, 9, |tape, v| tape.layer_norm(v[0], v[1], v[2]));
    assert!(err < 1e-5, "layer_norm rel error {err}");
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 5.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.square(x);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), Some(6.0));
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(vec![2]).unwrap());
    assert!(matches!(
        tape.backward(x),
        Err(AutodiffError::NonScalarLoss(_))
    ));
}

#[test]
fn detached_values_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[2.0, 3.0]));
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    // d(x·sg(x))/dx = sg(x)
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 3.0]);
    assert!(g.get(d).is_none());
}

#[test]
fn gradients_accumulate_over_reuse() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(2.0));
    let a = tape.mul(x, x).unwrap();
    let b = tape.mul(a, x).unwrap();
    let g = tape.backward(b).unwrap();
    assert_eq!(g.get(x).unwrap().item(), Some(12.0));
}

/// Soft Dice between a constant binary mask and a soft mask.
fn dice(tape: &mut Tape, mask: &[f64], soft: Var) -> Res<Var> {
    let m = tape.constant(t(&[mask.len()], mask));
    let inter = tape.mul(m, soft)?;
    let inter = tape.sum(inter);
    let num = tape.scale(inter, 2.0);
    let soft_sum = tape.sum(soft);
    let den = tape.add_scalar(soft_sum, mask.iter().sum::<f64>() + 1e-8);
    tape.div(num, den)
}

#[test]
fn composed_pipeline_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // image 2×4×4, conv to 3 channels, attention of 2 queries over 16 pixels,
    // softmax over queries per pixel, dice against a fixed mask.
    let params = [
        random(&mut rng, &[2, 4, 4]),
        random(&mut rng, &[3, 2, 3, 3]),
        random(&mut rng, &[2, 3]),
    ];
    let mask: Vec<f64> = (0..16)
        .map(|i| if i % 3 == 0 { 1.0 } else { 0.0 })
        .collect();
    let report = finite_difference_check::<AutodiffError, _>(
        |tape, v| {
            let feat = tape.conv2d_3x3(v[0], v[1])?;
            let feat = tape.reshape(feat, vec![3, 16])?;
            let pix = tape.transpose(feat)?;
            let mem = scaled_dot_attention(tape, v[2], pix, pix)?;
            let memt = tape.transpose(mem)?;
            let logits = tape.matmul(pix, memt)?;
            let probs = tape.softmax(logits, 1)?;
            let first = tape.transpose(probs)?;
            let first = tape.slice(first, 0, 0, 1)?;
            let first = tape.reshape(first, vec![16])?;
            let d = dice(tape, &mask, first)?;
            Ok(tape.affine(d, -1.0, 1.0))
        },
        &params,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn finite_difference_check_on_square() {
    for x in [-3.0, -0.5, 0.7, 12.0] {
        let report = finite_difference_check::<AutodiffError, _>(
            |tape, v| tape.mul(v[0], v[0]),
            &[Tensor::scalar(x)],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "x={x}: {report:?}");
    }
}

#[test]
fn softmax_cross_entropy_closed_form() {
    let logits = t(&[4], &[0.3, -1.2, 2.0, 0.5]);
    let target = 2;
    let mut tape = Tape::new();
    let x = tape.param(logits.clone());
    let lp = tape.log_softmax(x, 0).unwrap();
    let picked = tape.select(lp, vec![target]).unwrap();
    let loss = tape.scale(picked, -1.0);
    let loss = tape.sum(loss);
    let g = tape.backward(loss).unwrap();
    let p = tape.softmax(x, 0).unwrap();
    for (j, (&gj, &pj)) in g
        .get(x)
        .unwrap()
        .data()
        .iter()
        .zip(tape.value(p).data())
        .enumerate()
    {
        let expected = pj - if j == target { 1.0 } else { 0.0 };
        assert!((gj - expected).abs() < 1e-15);
    }
    let report = finite_difference_check::<AutodiffError, _>(
        |tape, v| {
            let lp = tape.log_softmax(v[0], 0)?;
            let picked = tape.select(lp, vec![target])?;
            let s = tape.sum(picked);
            Ok(tape.scale(s, -1.0))
        },
        &[logits],
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-7, "{report:?}");
}

#[test]
fn finite_difference_check_reports_non_finite() {
    let result = finite_difference_check::<AutodiffError, _>(
        |tape, v| {
            let l = tape.log(v[0]);
            Ok(tape.sum(l))
        },
        &[t(&[2], &[1.0, 0.0])],
        DEFAULT_STEP,
    );
    assert!(matches!(result, Err(AutodiffError::NonFinite(_))));
    let bad_step = finite_difference_check::<AutodiffError, _>(
        |tape, v| Ok(tape.sum(v[0])),
        &[Tensor::scalar(1.0)],
        0.0,
    );
    assert!(matches!(bad_step, Err(AutodiffError::InvalidStep(_))));
}

#[test]
fn every_primitive_passes_randomized_gradient_checks() {
    type Build = fn(&mut Tape, &[Var]) -> Res<Var>;
    type Gen = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
    let cases: Vec<(&str, Gen, Build)> = vec![
        (
            "matmul",
            |r| vec![random(r, &[3, 4]), random(r, &[4, 2])],
            |t, v| t.matmul(v[0], v[1]),
        ),
        (
            "batch_matmul",
            |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])],
            |t, v| t.batch_matmul(v[0], v[1]),
        ),
        (
            "add",
            |r| vec![random(r, &[3, 2]), random(r, &[3, 2])],
            |t, v| t.add(v[0], v[1]),
        ),
        (
            "sub",
            |r| vec![random(r, &[3, 2]), random(r, &[3, 2])],
            |t, v| t.sub(v[0], v[1]),
        ),
        (
            "mul",
            |r| vec![random(r, &[3, 2]), random(r, &[3, 2])],
            |t, v| t.mul(v[0], v[1]),
        ),
        (
            "div",
            |r| vec![random(r, &[3, 2]), random_away_from_zero(r, &[3, 2])],
            |t, v| t.div(v[0], v[1]),
        ),
        (
            "add_along",
            |r| vec![random(r, &[2, 3, 2]), random(r, &[3])],
            |t, v| t.add_along(v[0], v[1], 1),
        ),
        (
            "mul_along",
            |r| vec![random(r, &[2, 3, 2]), random(r, &[2])],
            |t, v| t.mul_along(v[0], v[1], 2),
        ),
        (
            "affine",
            |r| vec![random(r, &[4])],
            |t, v| Ok(t.affine(v[0], -1.7, 0.3)),
        ),
        (
            "relu",
            |r| vec![random_away_from_zero(r, &[6])],
            |t, v| Ok(t.relu(v[0])),
        ),
        (
            "sigmoid",
            |r| vec![random(r, &[6])],
            |t, v| Ok(t.sigmoid(v[0])),
        ),
        ("exp", |r| vec![random(r, &[6])], |t, v| Ok(t.exp(v[0]))),
        ("log", |r| vec![positive(r, &[6])], |t, v| Ok(t.log(v[0]))),
        (
            "abs",
            |r| vec![random_away_from_zero(r, &[6])],
            |t, v| Ok(t.abs(v[0])),
        ),
        (
            "powf",
            |r| vec![positive(r, &[6])],
            |t, v| Ok(t.powf(v[0], -0.5)),
        ),
        (
            "softmax",
            |r| vec![random(r, &[3, 4])],
            |t, v| t.softmax(v[0], 0),
        ),
        (
            "log_softmax",
            |r| vec![random(r, &[3, 4])],
            |t, v| t.log_softmax(v[0], 1),
        ),
        (
            "sum_axis",
            |r| vec![random(r, &[2, 3, 2])],
            |t, v| t.sum_axis(v[0], 1),
        ),
        (
            "reshape",
            |r| vec![random(r, &[2, 3])],
            |t, v| t.reshape(v[0], vec![3, 2]),
        ),
        (
            "permute",
            |r| vec![random(r, &[2, 3, 4])],
            |t, v| t.permute(v[0], &[2, 0, 1]),
        ),
        (
            "slice",
            |r| vec![random(r, &[2, 5, 2])],
            |t, v| t.slice(v[0], 1, 1, 3),
        ),
        (
            "gather",
            |r| vec![random(r, &[5])],
            |t, v| t.select(v[0], vec![4, 0, 4, 2]),
        ),
        (
            "concat",
            |r| vec![random(r, &[2, 1, 3]), random(r, &[2, 2, 3])],
            |t, v| t.concat(&[v[0], v[1]], 1),
        ),
        (
            "conv2d_3x3",
            |r| vec![random(r, &[2, 3, 4]), random(r, &[2, 2, 3, 3])],
            |t, v| t.conv2d_3x3(v[0], v[1]),
        ),
        (
            "layer_norm",
            |r| vec![random(r, &[2, 4]), random(r, &[4]), random(r, &[4])],
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        ),
        (
            "attention",
            |r| vec![random(r, &[2, 3]), random(r, &[4, 3]), random(r, &[4, 2])],
            |t, v| scaled_dot_attention(t, v[0], v[1], v[2]),
        ),
    ];
    for (name, gen, build) in cases {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + 7);
            let params = gen(&mut rng);
            let err = check(&params, seed, build);
            assert!(err < 1e-4, "{name} seed {seed}: rel error {err}");
        }
    }
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let x = tape.param(random(&mut rng, &[1, 5, 5]));
        let k = tape.param(random(&mut rng, &[2, 1, 3, 3]));
        let y = tape.conv2d_3x3(x, k).unwrap();
        let y = tape.softmax(y, 0).unwrap();
        let y = tape.log(y);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        (tape.scalar(s).unwrap().to_bits(), g.get(k).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga
        .data()
        .iter()
        .zip(gb.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn tapes_run_on_independent_threads() {
    let handles: Vec<_> = (0..3)
        .map(|i| {
            std::thread::spawn(move || {
                let mut tape = Tape::new();
                let x = tape.param(Tensor::scalar(i as f64));
                let y = tape.square(x);
                tape.backward(y).unwrap().get(x).unwrap().item().unwrap()
            })
        })
        .collect();
    let got: Vec<f64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert_eq!(got, vec![0.0, 2.0, 4.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..24)) {
        let n = values.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], values).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-9);
        prop_assert!(tape.value(y).data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(
        values in prop::collection::vec(-20.0f64..20.0, 1..16),
        shift in -30.0f64..30.0,
    ) {
        let n = values.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![n], values).unwrap());
        let xs = tape.add_scalar(x, shift);
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(xs, 0).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }
}
