use std::sync::Arc;

use proptest::prelude::*;

use super::check::{check_gradients, relative_error};
use super::*;
use crate::error::SifmError;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_inner_product() {
    let mut tape = Tape::new();
    let i = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.leaf(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
    let y = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(y), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
    let c = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
    let y = tape.matmul(a, c).unwrap();
    assert_eq!(tape.value(y), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(&Tensor::zeros(&[2, 3]).unwrap());
    let b = tape.leaf(&Tensor::zeros(&[2, 3]).unwrap());
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
}

#[test]
fn matmul_sum_gradient_is_ones_times_b_transpose() {
    // d/dA sum(A B) = 1 * B^T; checked against central differences.
    let a = t(&[4, 5], &(0..20).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
    let b = t(&[5, 3], &(0..15).map(|i| (i as f64 * 0.91).cos()).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let av = tape.leaf(&a.clone().with_grad());
    let bv = tape.leaf(&b);
    let y = tape.matmul(av, bv).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    let g = tape.grad(av).unwrap();
    for r in 0..4 {
        for k in 0..5 {
            let expected: f64 = (0..3).map(|j| b.data()[k * 3 + j]).sum();
            assert!((g[r * 5 + k] - expected).abs() < 1e-12);
        }
    }
    let checks = check_gradients(
        &[a, b],
        |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            Ok(tp.sum(y))
        },
        None,
        1,
        None,
    )
    .unwrap();
    assert!(checks.iter().all(|c| c.rel_err < 1e-6));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let ones = tape.leaf(&t(&[3], &[1.0, 1.0, 1.0]));
    let g3 = tape.leaf(&t(&[3], &[1.0; 3]));
    let b3 = tape.leaf(&t(&[3], &[0.0; 3]));
    let y = tape.layer_norm(ones, g3, b3, 1e-5).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

    let x = tape.leaf(&t(&[2], &[1.0, 3.0]));
    let g2 = tape.leaf(&t(&[2], &[1.0; 2]));
    let b2 = tape.leaf(&t(&[2], &[0.0; 2]));
    let y = tape.layer_norm(x, g2, b2, 0.0).unwrap();
    assert_eq!(tape.value(y), &[-1.0, 1.0]);

    let bad = tape.leaf(&t(&[2], &[0.0; 2]));
    assert!(matches!(tape.layer_norm(x, g3, bad, 1e-5), Err(SifmError::Dimension(_))));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, None).unwrap();
    for &p in tape.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.leaf(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let y = tape.softmax(x, None).unwrap();
    for (p, e) in tape.value(y).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((p - e).abs() < 1e-15);
    }

    let mask = SoftmaxMask { data: Arc::from(vec![0.0, MASK_SENTINEL, 0.0]), windows: 1, heads: 1, rows: 1 };
    let x = tape.leaf(&t(&[1, 3], &[0.3, 5.0, -0.2]));
    let y = tape.softmax(x, Some(&mask)).unwrap();
    assert_eq!(tape.value(y)[1], 0.0);
    assert!((tape.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let all = SoftmaxMask { data: Arc::from(vec![MASK_SENTINEL; 3]), windows: 1, heads: 1, rows: 1 };
    let err = tape.softmax(x, Some(&all)).unwrap_err().to_string();
    assert!(err.contains("fully masked row"), "{err}");
}

#[test]
fn gelu_fixes_zero_and_reshape_round_trips() {
    let mut tape = Tape::new();
    let z = tape.leaf(&t(&[1], &[0.0]));
    let y = tape.gelu(z);
    assert_eq!(tape.value(y), &[0.0]);

    let data: Vec<f64> = (0..60).map(f64::from).collect();
    let x = tape.leaf(&t(&[3, 4, 5], &data));
    let r = tape.reshape(x, &[12, 5]).unwrap();
    let back = tape.reshape(r, &[3, 4, 5]).unwrap();
    assert_eq!(tape.value(back), data.as_slice());
    assert!(tape.reshape(x, &[7, 9]).is_err());
}

#[test]
fn concat_and_slice_are_inverse() {
    let mut tape = Tape::new();
    let a = tape.leaf(&t(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>()));
    let b = tape.leaf(&t(&[2, 1, 3], &(100..106).map(f64::from).collect::<Vec<_>>()));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 3]);
    let a2 = tape.slice(c, 1, 0, 2).unwrap();
    let b2 = tape.slice(c, 1, 2, 1).unwrap();
    assert_eq!(tape.value(a2), tape.value(a));
    assert_eq!(tape.value(b2), tape.value(b));
    assert!(tape.concat(&[a, b], 2).is_err());
}

#[test]
fn backward_of_sum_and_square() {
    let x = t(&[2, 3], &[0.5, -1.0, 2.0, 3.0, 0.0, -4.5]);
    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_grad());
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_grad());
    let sq = tape.mul(v, v).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let expected: Vec<f64> = x.data().iter().map(|a| 2.0 * a).collect();
    assert_eq!(tape.grad(v).unwrap(), expected.as_slice());

    assert!(matches!(tape.backward(sq), Err(SifmError::Contract(_))));
}

#[test]
fn gradient_accumulation_is_linear() {
    let x = t(&[4], &[0.1, -0.7, 1.3, 2.2]);
    let build = |tape: &mut Tape<f64>, v: Var, which: u8| -> Var {
        let g = tape.gelu(v);
        match which {
            0 => tape.sum(g),
            _ => {
                let sq = tape.mul(g, v).unwrap();
                tape.mean(sq)
            }
        }
    };
    let mut separate = Tensor::zeros(&[4]).unwrap();
    for which in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_grad());
        let l = build(&mut tape, v, which);
        tape.backward(l).unwrap();
        separate.accumulate_grad(tape.grad(v).unwrap()).unwrap();
    }
    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_grad());
    let l0 = build(&mut tape, v, 0);
    let l1 = build(&mut tape, v, 1);
    let total = tape.add(l0, l1).unwrap();
    tape.backward(total).unwrap();
    for (a, b) in separate.grad.unwrap().iter().zip(tape.grad(v).unwrap()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn params_share_one_leaf_per_tape() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
    store.zero_grad();
    let mut tape = Tape::new();
    let a = tape.param(&store, "w").unwrap();
    let b = tape.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    let l = tape.sum(p);
    tape.backward(l).unwrap();
    store.accumulate_grads(&tape).unwrap();
    store.accumulate_grads(&tape).unwrap();
    assert_eq!(store.get("w").unwrap().grad.as_deref(), Some(&[4.0, 8.0][..]));
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut tape = Tape::inference();
    let v = tape.leaf(&t(&[2], &[1.0, 2.0]).with_grad());
    let s = tape.sum(v);
    tape.backward(s).unwrap();
    assert!(tape.grad(v).is_none());
}

#[test]
fn relative_error_handles_exact_match() {
    assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, n in 1usize..9, seed in any::<u64>()) {
        let mut x = Vec::with_capacity(rows * n);
        let mut s = seed;
        for _ in 0..rows * n {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            x.push(((s >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 40.0);
        }
        let mut tape = Tape::<f32>::new();
        let v = tape.leaf(&Tensor::new(&[rows, n], x.iter().map(|&a| a as f32).collect()).unwrap());
        let y = tape.softmax(v, None).unwrap();
        for row in tape.value(y).chunks(n) {
            prop_assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn transpose_round_trip_is_bitwise(a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        let data: Vec<f32> = (0..a * b * c).map(|i| (i as f32).sqrt() * 0.37).collect();
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new(&[a, b, c], data.clone()).unwrap());
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(tape.shape(back), &[a, b, c][..]);
        prop_assert_eq!(tape.value(back), data.as_slice());
    }
}
