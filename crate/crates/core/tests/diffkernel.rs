use std::sync::Arc;

use gadt3::diffkernel::{grad_check, Matrix, Segments, Tape, Var};
use gadt3::Result;
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Contracts the output of `op` with fixed random weights so every output
/// entry contributes to the checked scalar.
fn check_op(point: &Matrix, seed: u64, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let f = |tape: &mut Tape, x: Var| -> Result<Var> {
        let y = op(tape, x)?;
        let (r, c) = tape.shape(y);
        let mut rng = gadt3::rng_from_seed(seed);
        let w = tape.constant(random(r, c, &mut rng));
        let prod = tape.mul(y, w)?;
        tape.sum(prod)
    };
    let report = grad_check(f, point, STEP, TOL).unwrap();
    assert!(report.passed, "{report:?}");
}

fn segments(offsets: &[usize], cols: &[usize]) -> Segments {
    Segments {
        offsets: offsets.into(),
        cols: cols.into(),
    }
}

#[test]
fn forward_examples() {
    let mut t = Tape::new();
    let s = t.constant(Matrix::from_rows(&[vec![5.0, 5.0], vec![9.0, 3.0]]));
    let p = t.masked_row_softmax(s, &[true, true, false, true]).unwrap();
    assert_eq!(t.value(p).row(0), &[0.5, 0.5]);
    assert_eq!(t.value(p).row(1), &[0.0, 1.0]);

    let a = t.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]));
    let b = t.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let c = t.cosine_rows(a, b).unwrap();
    assert_eq!(t.value(c).as_slice(), &[1.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let w = t.param(random(3, 2, &mut gadt3::rng_from_seed(1)));
    let s = t.sum(w).unwrap();
    assert_eq!(t.backward(s).unwrap().get(w), Matrix::filled(3, 2, 1.0));

    let mut t = Tape::new();
    let x = t.param(Matrix::from_rows(&[vec![-1.0, 2.0]]));
    let r = t.relu(x).unwrap();
    let s = t.sum(r).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).as_slice(), &[0.0, 1.0]);

    // relu'(0) = 0
    let mut t = Tape::new();
    let x = t.param(Matrix::from_rows(&[vec![0.0]]));
    let r = t.relu(x).unwrap();
    let s = t.sum(r).unwrap();
    assert_eq!(t.backward(s).unwrap().get(x).as_slice(), &[0.0]);
}

#[test]
fn zero_norm_rows_have_zero_cosine_and_finite_gradient() {
    let mut t = Tape::new();
    let a = t.param(Matrix::from_rows(&[vec![0.0, 0.0]]));
    let b = t.constant(Matrix::from_rows(&[vec![1.0, 2.0]]));
    let c = t.cosine_rows(a, b).unwrap();
    assert_eq!(t.value(c).item(), 0.0);
    let s = t.sum(c).unwrap();
    assert!(t.backward(s).unwrap().get(a).is_finite());
}

#[test]
fn elementwise_and_dense_ops_match_finite_differences() {
    let mut rng = gadt3::rng_from_seed(11);
    for seed in 0..5 {
        let x = random(4, 3, &mut rng);
        let other = random(4, 3, &mut rng);
        let right = random(3, 5, &mut rng);
        let left = random(2, 4, &mut rng);
        let row = random(1, 3, &mut rng);
        check_op(&x, seed, |t, x| {
            let m = t.constant(right.clone());
            t.matmul(x, m)
        });
        check_op(&x, seed, |t, x| {
            let m = t.constant(left.clone());
            t.matmul(m, x)
        });
        check_op(&x, seed, |t, x| {
            let o = t.constant(other.clone());
            t.matmul_nt(x, o)
        });
        check_op(&x, seed, |t, x| t.matmul_nt(x, x));
        check_op(&x, seed, |t, x| {
            let o = t.constant(other.clone());
            t.add(x, o)
        });
        check_op(&row, seed, |t, b| {
            let o = t.constant(other.clone());
            t.add_row(o, b)
        });
        check_op(&x, seed, |t, x| {
            let o = t.constant(other.clone());
            t.concat_cols(o, x)
        });
        check_op(&x, seed, |t, x| t.relu(x));
        check_op(&x, seed, |t, x| t.sigmoid(x));
        check_op(&x, seed, |t, x| t.mul(x, x));
        check_op(&x, seed, |t, x| t.row_mean(x));
        check_op(&x, seed, |t, x| t.neg(x));
        check_op(&x, seed, |t, x| t.scalar_mul(x, -2.5));
        check_op(&x, seed, |t, x| t.dropout_with_scale(x, (0..12).map(|i| (i % 3) as f64).collect()));
        check_op(&x, seed, |t, x| {
            let o = t.constant(other.clone());
            t.cosine_rows(x, o)
        });
    }
}

#[test]
fn sparse_ops_match_finite_differences() {
    let mut rng = gadt3::rng_from_seed(12);
    // rows: 0 -> {1, 2}, 1 -> {0}, 2 -> {0, 3}, 3 -> {2}, 4 -> {}
    let seg = segments(&[0, 2, 3, 5, 6, 6], &[1, 2, 0, 0, 3, 2]);
    let partner: Arc<[usize]> = vec![2, 3, 0, 5, 1, 4].into();
    for seed in 0..5 {
        let values = random(6, 1, &mut rng);
        let h = random(5, 3, &mut rng);
        let probs = Matrix::column((0..6).map(|_| rng.random_range(0.05..0.95)).collect());
        check_op(&values, seed, |t, v| t.segment_softmax(v, &seg));
        check_op(&values, seed, |t, v| t.segment_mean(v, &seg));
        check_op(&values, seed, |t, v| t.sym_min(v, partner.clone()));
        check_op(&values, seed, |t, v| {
            let hv = t.constant(h.clone());
            t.spmm(v, &seg, hv)
        });
        check_op(&h, seed, |t, hv| {
            let v = t.constant(values.clone());
            t.spmm(v, &seg, hv)
        });
        check_op(&values, seed, |t, v| t.weighted_sum(v, vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25].into()));
        check_op(&probs, seed, |t, p| t.binary_cross_entropy(p, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0].into()));
        let left: Arc<[usize]> = vec![0, 1, 4, 2, 2].into();
        let right: Arc<[usize]> = vec![3, 1, 0, 4, 2].into();
        check_op(&h, seed, |t, a| t.cosine_pairs(a, a, left.clone(), right.clone()));
        check_op(&h, seed, |t, a| t.pair_dot(a, a, left.clone(), right.clone()));
        let scores = random(5, 4, &mut rng);
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1).collect();
        check_op(&scores, seed, |t, s| t.masked_row_softmax(s, &mask));
    }
}

#[test]
fn masked_entries_receive_exactly_zero_gradient() {
    let mut rng = gadt3::rng_from_seed(5);
    for _ in 0..50 {
        let scores = random(6, 6, &mut rng);
        let mask: Vec<bool> = (0..36).map(|_| rng.random_bool(0.5)).collect();
        let mut t = Tape::new();
        let s = t.param(scores);
        let p = t.masked_row_softmax(s, &mask).unwrap();
        let w = t.constant(random(6, 6, &mut rng));
        let prod = t.mul(p, w).unwrap();
        let loss = t.sum(prod).unwrap();
        let g = t.backward(loss).unwrap().get(s);
        let out = t.value(p);
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(g.as_slice()[i], 0.0);
                assert_eq!(out.as_slice()[i], 0.0);
            }
        }
    }
}

#[test]
fn tape_is_single_use() {
    let mut t = Tape::new();
    let x = t.param(Matrix::scalar(2.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert!(t.backward(y).is_err());
}

proptest! {
    #[test]
    fn masked_softmax_rows_sum_to_one(
        data in prop::collection::vec(-50.0f64..50.0, 24),
        mask in prop::collection::vec(any::<bool>(), 24),
    ) {
        let mut t = Tape::new();
        let s = t.constant(Matrix::from_vec(4, 6, data).unwrap());
        let p = t.masked_row_softmax(s, &mask).unwrap();
        for r in 0..4 {
            let allowed = mask[r * 6..(r + 1) * 6].iter().any(|&m| m);
            let sum: f64 = t.value(p).row(r).iter().sum();
            if allowed {
                prop_assert!((sum - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(sum, 0.0);
            }
        }
    }

    #[test]
    fn segment_mean_and_spmm_agree_with_loops(
        h in prop::collection::vec(-3.0f64..3.0, 15),
        w in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let seg = segments(&[0, 2, 3, 5, 6, 6], &[1, 2, 0, 0, 3, 2]);
        let mut t = Tape::new();
        let hv = t.constant(Matrix::from_vec(5, 3, h.clone()).unwrap());
        let wv = t.constant(Matrix::column(w.clone()));
        let out = t.spmm(wv, &seg, hv).unwrap();
        let mean = t.segment_mean(wv, &seg).unwrap();
        for r in 0..5 {
            let range = seg.offsets[r]..seg.offsets[r + 1];
            for c in 0..3 {
                let expect: f64 = range.clone().map(|e| w[e] * h[seg.cols[e] * 3 + c]).sum();
                prop_assert!((t.value(out).get(r, c) - expect).abs() < 1e-12);
            }
            let m = if range.is_empty() { 0.0 } else { range.clone().map(|e| w[e]).sum::<f64>() / range.len() as f64 };
            prop_assert!((t.value(mean).get(r, 0) - m).abs() < 1e-12);
        }
    }
}
