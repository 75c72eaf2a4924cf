mod common;

use common::{fd_rel_err, randn, registered_ops, FD_STEP};
use condvid::tensor::rtd;
use condvid::{Error, Tape, Tensor, Var};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn elementwise_examples() {
    let a = t(&[2], &[1.0, 2.0]);
    let b = t(&[2], &[3.0, 4.0]);
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    let x = common::randn32(1, &[3, 4]);
    assert_eq!(x.mul(&x.ones_like()).unwrap(), x);
    let err = Tensor::<f32>::zeros([2, 3]).unwrap().add(&Tensor::zeros([4]).unwrap());
    assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_examples() {
    let eye = Tensor::<f32>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
    let v = t(&[3, 1], &[1.5, -2.0, 0.25]);
    assert_eq!(eye.matmul(&v).unwrap(), v);
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(a.matmul(&t(&[2, 1], &[1.0, 1.0])).unwrap().data(), &[3.0, 7.0]);
    assert!(a.matmul(&t(&[3, 1], &[1.0, 1.0, 1.0])).is_err());
}

#[test]
fn matmul_grad_is_ones_times_b_transpose() {
    let a = randn(2, &[3, 4]);
    let b = randn(3, &[4, 5]);
    let tape = Tape::new();
    let av = tape.leaf(a).unwrap();
    let loss = av.matmul(&Var::constant(b.clone())).unwrap().sum_all().unwrap();
    let g = tape.backward(&loss).unwrap().get(&av).unwrap().clone();
    let expect = Tensor::<f64>::ones([3, 5]).unwrap().matmul(&b.permute(&[1, 0]).unwrap()).unwrap();
    assert!(g.max_abs_diff(&expect).unwrap() < 1e-12);
    let err = fd_rel_err(&randn(4, &[3, 4]), 4, FD_STEP, |x| x.matmul(&Var::constant(b.clone())));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let loss = x.square().unwrap().sum_all().unwrap();
    assert_eq!(tape.backward(&loss).unwrap().get(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert!(tape.is_consumed());
    assert!(matches!(tape.backward(&loss), Err(Error::TapeConsumed)));

    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
    let loss = x.stop_gradient().mul(&x).unwrap().sum_all().unwrap();
    assert_eq!(tape.backward(&loss).unwrap().get(&x).unwrap().data(), &[1.0, -2.0, 0.5]);

    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss(_))));
    let tape = Tape::<f32>::new();
    let c = Var::constant(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(&c), Err(Error::DetachedLoss)));
}

#[test]
fn stop_gradient_is_transparent_and_opaque() {
    let x0 = t(&[4], &[0.5, -1.0, 2.0, 3.0]);
    let tape = Tape::new();
    let x = tape.leaf(x0.clone()).unwrap();
    assert_eq!(x.stop_gradient().value(), &x0);

    let loss = x.stop_gradient().sum_all().unwrap().add(&x.mul_scalar(0.0).unwrap().sum_all().unwrap()).unwrap();
    let g = tape.backward(&loss).unwrap().get(&x).unwrap().clone();
    assert!(g.data().iter().all(|&v| v == 0.0));

    let tape = Tape::new();
    let x = tape.leaf(x0).unwrap();
    let loss = x.sub(&x.stop_gradient()).unwrap().sum_all().unwrap();
    let g = tape.backward(&loss).unwrap().get(&x).unwrap().clone();
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn softmax_examples() {
    assert_eq!(t(&[2], &[0.0, 0.0]).softmax(0).unwrap().data(), &[0.5, 0.5]);
    assert_eq!(t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap().data(), &[0.5, 0.5]);
    let s = common::randn32(5, &[3, 7]).scale(10.0).softmax(1).unwrap();
    for row in s.data().chunks(7) {
        assert!(row.iter().all(|&v| v > 0.0));
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gradient_accumulates_across_uses() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
    let loss = x.add(&x).unwrap().add(&x).unwrap().sum_all().unwrap();
    assert_eq!(tape.backward(&loss).unwrap().get(&x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, op, shape) in registered_ops() {
        for seed in 0..20u64 {
            let x = randn(seed * 31 + 7, &shape);
            let err = fd_rel_err(&x, seed, FD_STEP, |v| op(v, seed));
            assert!(err < 1e-4, "{name} seed {seed}: rel err {err:.3e}");
        }
    }
}

#[test]
fn two_layer_composition_matches_finite_differences() {
    for seed in 0..20u64 {
        let w1 = Var::constant(randn(seed + 100, &[4, 6]));
        let w2 = Var::constant(randn(seed + 200, &[6, 3]));
        let x = randn(seed, &[5, 4]);
        let err = fd_rel_err(&x, seed, FD_STEP, |v| v.matmul(&w1)?.silu()?.matmul(&w2)?.softmax(1));
        assert!(err < 1e-4, "seed {seed}: {err:.3e}");
    }
}

#[test]
fn tape_replay_is_bitwise_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(common::randn32(9, &[4, 8])).unwrap();
        let w = Var::constant(common::randn32(10, &[8, 8]));
        let loss = x.matmul(&w).unwrap().softmax(1).unwrap().square().unwrap().sum_all().unwrap();
        tape.backward(&loss).unwrap().get(&x).unwrap().clone()
    };
    let (a, b) = (run(), run());
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn rtd_round_trip_and_layout() {
    let x = common::randn32(3, &[2, 3, 4]);
    let bytes = rtd::encode(&x);
    assert_eq!(&bytes[..8], b"RTDUMP01");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
    assert_eq!(bytes.len(), 8 + 4 + 3 * 4 + 24 * 4);
    assert_eq!(rtd::decode::<f32>(&bytes).unwrap(), x);
    assert!(rtd::decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.rtd");
    rtd::write(&path, &x).unwrap();
    assert_eq!(rtd::read::<f32>(&path).unwrap(), x);
}

#[test]
fn non_finite_values_surface_as_errors() {
    condvid::tensor::set_finite_checks(true);
    let x = t(&[2], &[1.0, 0.0]);
    let err = x.div(&t(&[2], &[1.0, 0.0]));
    assert!(matches!(err, Err(Error::NonFinite { .. })), "{err:?}");
}

/// Index of `a`'s element `i` inside a trailing-aligned broadcast operand.
fn broadcast_index(a: &[usize], b: &[usize], i: usize) -> usize {
    let mut rem = i;
    let mut coords = vec![0; a.len()];
    for d in (0..a.len()).rev() {
        coords[d] = rem % a[d];
        rem /= a[d];
    }
    let off = a.len() - b.len();
    b.iter().enumerate().fold(0, |acc, (k, &bd)| acc * bd + if bd == 1 { 0 } else { coords[off + k] })
}

fn shapes() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec(1usize..4, 1..=5).prop_flat_map(|a| {
        let n = a.len();
        (Just(a.clone()), 1..=n, prop::collection::vec(any::<bool>(), n)).prop_map(move |(a, keep, ones)| {
            let b = a[n - keep..]
                .iter()
                .zip(&ones[n - keep..])
                .map(|(&d, &one)| if one { 1 } else { d })
                .collect();
            (a, b)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn broadcast_matches_scalar_loops((sa, sb) in shapes(), seed in 0u64..1000) {
        let a = common::randn32(seed, &sa);
        let b = common::randn32(seed + 1, &sb);
        let sum = a.add(&b).unwrap();
        let prod = a.mul(&b).unwrap();
        prop_assert_eq!(sum.shape(), a.shape());
        for i in 0..a.numel() {
            let bv = b.data()[broadcast_index(&sa, &sb, i)];
            prop_assert_eq!(sum.data()[i], a.data()[i] + bv);
            prop_assert_eq!(prod.data()[i], a.data()[i] * bv);
        }
    }

    #[test]
    fn shape_and_data_agree(shape in prop::collection::vec(1usize..5, 1..4)) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::<f32>::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::<f32>::new(shape, vec![0.0; n + 1]).is_err());
    }

    #[test]
    fn gradient_has_leaf_shape(rows in 1usize..5, cols in 1usize..5, seed in 0u64..100) {
        let tape = Tape::new();
        let x = tape.leaf(common::randn32(seed, &[rows, cols])).unwrap();
        let loss = x.softmax(1).unwrap().square().unwrap().sum_all().unwrap();
        let g = tape.backward(&loss).unwrap();
        prop_assert_eq!(g.get(&x).unwrap().shape(), &[rows, cols]);
    }
}
