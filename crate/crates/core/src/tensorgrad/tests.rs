use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn masked_softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(1, 2, &[0.0, 0.0]).unwrap());
    let y = tape.softmax_rows_masked(x, Some(&[true, true])).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn masked_entries_are_exactly_zero_and_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand_tensor(&mut rng, 3, 4));
    let mask = [
        true, false, true, false, //
        false, false, false, true, //
        true, true, true, true,
    ];
    let y = tape.softmax_rows_masked(x, Some(&mask)).unwrap();
    let y = tape.value(y);
    for r in 0..3 {
        let s: f64 = y.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        for c in 0..4 {
            if !mask[r * 4 + c] {
                assert_eq!(y.at(r, c), 0.0);
            }
        }
    }
}

#[test]
fn fully_masked_row_is_an_error() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    let err = tape
        .softmax_rows_masked(x, Some(&[true, false, false, false]))
        .unwrap_err();
    assert!(matches!(err, Error::FullyMasked { row: 1, .. }));
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, 3, 5);
    let mut tape = Tape::<f64>::new();
    let i = tape.constant(Tensor::identity(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b).unwrap_err() {
        Error::Shape { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::from_f64(1, 3, &[0.3, -2.0, 5.0]).unwrap());
    let c = tape.cosine(v, v).unwrap();
    assert!((tape.value(c).item() - 1.0).abs() < 1e-15);
}

#[test]
fn cosine_rejects_zero_vector() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::from_f64(2, 2, &[1.0, 0.0, 0.0, 0.0]).unwrap());
    let b = tape.constant(Tensor::from_f64(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap());
    assert!(matches!(
        tape.cosine(a, b).unwrap_err(),
        Error::ZeroNorm { row: 1, .. }
    ));
}

#[test]
fn second_backward_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap());
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::BackwardTwice)));
}

#[test]
fn backward_requires_scalar_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap());
    assert!(matches!(tape.backward(x), Err(Error::NonScalar(_))));
}

#[test]
fn every_leaf_gets_a_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::from_f64(1, 2, &[3.0, 4.0]).unwrap());
    let unused = tape.leaf(Tensor::from_f64(1, 1, &[3.0]).unwrap());
    let c = tape.constant(Tensor::from_f64(1, 2, &[1.0, 1.0]).unwrap());
    let p = tape.mul(a, b).unwrap();
    let q = tape.add(p, c).unwrap();
    let s = tape.sum(q).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    assert!(tape.grad(c).is_none());
    assert!(tape.grad(unused).is_none());
}

#[test]
fn sum_of_squares_gradient_matches_central_differences() {
    let x = Tensor::from_f64(1, 2, &[1.0, 2.0]).unwrap();
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    };
    let grads = analytic_grads(&f, std::slice::from_ref(&x)).unwrap();
    assert_eq!(grads[0].data(), &[2.0, 4.0]);
    assert!(grad_check(f, &[x], 1e-5).unwrap() < 1e-6);
}

/// Largest `|analytic - numeric|` over all entries.
fn max_abs_gap(f: impl ScalarFn, inputs: &[Tensor<f64>], eps: f64) -> f64 {
    let analytic = analytic_grads(&f, inputs).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += eps;
            let mut tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars).unwrap();
            let plus = tape.value(out).item();
            probe[i].data_mut()[j] -= 2.0 * eps;
            let mut tape = Tape::new();
            let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&mut tape, &vars).unwrap();
            let minus = tape.value(out).item();
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((analytic[i].data()[j] - numeric).abs());
        }
    }
    worst
}

#[test]
fn softmax_sum_gradient_check() {
    // Row sums are identically one: the analytic gradient is zero and the
    // central difference is rounding noise of order 1e-16 / 2e-5, which the
    // 1e-8 relative floor cannot absorb. Agreement is asserted absolutely.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = rand_tensor(&mut rng, 3, 4);
    let f = |t: &mut Tape<f64>, v: &[Var]| {
        let s = t.softmax_rows_masked(v[0], None)?;
        t.sum(s)
    };
    let grads = analytic_grads(&f, std::slice::from_ref(&w)).unwrap();
    assert!(grads[0].data().iter().all(|g| g.abs() < 1e-15));
    assert!(max_abs_gap(f, &[w.clone()], 1e-5) < 1e-9);

    // Weighted row sums have a non-degenerate gradient.
    let weights = rand_tensor(&mut rng, 3, 4);
    let g = move |t: &mut Tape<f64>, v: &[Var]| {
        let s = t.softmax_rows_masked(v[0], None)?;
        let r = t.constant(weights.clone());
        let p = t.mul(s, r)?;
        t.sum(p)
    };
    let err = grad_check(g, &[w], 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn cosine_gradient_at_its_maximum() {
    let c = Tensor::from_f64(1, 3, &[0.5, -1.0, 2.0]).unwrap();
    let fixed = c.clone();
    let f = move |t: &mut Tape<f64>, v: &[Var]| {
        let k = t.constant(fixed.clone());
        let cos = t.cosine(v[0], k)?;
        t.sum(cos)
    };
    let grads = analytic_grads(&f, std::slice::from_ref(&c)).unwrap();
    let dot: f64 = grads[0].data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    assert!(dot.abs() < 1e-12, "gradient not orthogonal to c: {dot}");
    // x = c is a maximum, so both gradients vanish; see softmax_sum_gradient_check.
    assert!(max_abs_gap(f.clone(), &[c.clone()], 1e-5) < 1e-9);

    let off = Tensor::from_f64(1, 3, &[0.7, -0.2, 1.1]).unwrap();
    let err = grad_check(f, &[off], 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}
