use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_inputs;
use super::*;
use crate::error::Error;

const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, seed: u64) -> (usize, usize, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_values() {
    let mut t = Tape::new();
    let a = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let i = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let p = t.matmul(a, i).unwrap();
    assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
    let m = t.constant(3, 3, (0..9).map(f64::from).collect()).unwrap();
    let i3 = t.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let q = t.matmul(i3, m).unwrap();
    assert_eq!(t.value(q), t.value(m));
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
    let b = t.constant(2, 3, vec![0.0; 6]).unwrap();
    match t.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}", other = other.map(|v| v.index())),
    }
}

#[test]
fn grad_of_sum_matmul_is_ones_times_b_transpose() {
    let a = random(2, 3, 1);
    let b = random(3, 4, 2);
    let mut t = Tape::new();
    let va = t.variable(a.0, a.1, a.2.clone()).unwrap();
    let vb = t.constant(b.0, b.1, b.2.clone()).unwrap();
    let p = t.matmul(va, vb).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    let mut expect = vec![0.0; 6];
    for i in 0..2 {
        for k in 0..3 {
            expect[i * 3 + k] = (0..4).map(|j| b.2[k * 4 + j]).sum();
        }
    }
    assert_close(g.get(va).unwrap(), &expect, 1e-12);
    assert!(g.get(vb).is_none());
    let fd = check_inputs(&[a, b], |t, v| {
        let p = t.matmul(v[0], v[1])?;
        Ok(t.sum(p))
    })
    .unwrap();
    assert!(fd.max_rel_err < TOL, "{fd:?}");
}

#[test]
fn elementwise_definitions() {
    let mut t = Tape::new();
    let x = t.constant(1, 3, vec![0.0, -2.5, 3.0]).unwrap();
    let s = t.sigmoid(x);
    assert_eq!(t.value(s)[0], 0.5);
    let r = t.relu(x);
    assert_eq!(t.value(r), &[0.0, 0.0, 3.0]);
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut t = Tape::new();
    let x = t.variable(1, 1, vec![0.0]).unwrap();
    let s = t.sigmoid(x);
    let g = t.backward(s).unwrap();
    assert!((g.get(x).unwrap()[0] - 0.25).abs() < 1e-12);
    let fd = check_inputs(&[(1, 1, vec![0.0])], |t, v| Ok(t.sigmoid(v[0]))).unwrap();
    assert!(fd.max_rel_err < 1e-9);
}

#[test]
fn mask_blocks_gradient() {
    let mut t = Tape::new();
    let x = t.variable(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let m = t.mask(x, &[1.0, 0.0, 1.0]).unwrap();
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 1.0]);
    assert!(t.mask(x, &[0.5, 0.0, 1.0]).is_err());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let a = t.constant(1, 3, vec![0.0; 3]).unwrap();
    let s = t.softmax_rows(a, None).unwrap();
    assert_close(t.value(s), &[1.0 / 3.0; 3], 1e-15);
    let x = 0.7;
    let b = t.constant(1, 2, vec![x, x + 2f64.ln()]).unwrap();
    let s = t.softmax_rows(b, None).unwrap();
    assert_close(t.value(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-12);
    let c = t.constant(1, 1, vec![-4.0]).unwrap();
    let s = t.softmax_rows(c, None).unwrap();
    assert_eq!(t.value(s), &[1.0]);
}

#[test]
fn fully_masked_row_is_degenerate() {
    let mut t = Tape::new();
    let a = t.constant(2, 2, vec![0.0; 4]).unwrap();
    let err = t.softmax_rows(a, Some(&[0.0, MASK_NEG, MASK_NEG, MASK_NEG])).err();
    assert!(matches!(err, Some(Error::DegenerateRow { row: 1 })));
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let g = t.constant(1, 2, vec![1.0, 1.0]).unwrap();
    let b = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
    let c = t.constant(1, 2, vec![3.0, 3.0]).unwrap();
    let y = t.layer_norm(c, g, b).unwrap();
    assert_eq!(t.value(y), &[0.0, 0.0]);
    let r = t.constant(1, 2, vec![1.0, -1.0]).unwrap();
    let y = t.layer_norm(r, g, b).unwrap();
    let scale = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
    assert_close(t.value(y), &[scale, -scale], 1e-15);
    let one = t.constant(1, 1, vec![1.0]).unwrap();
    assert!(t.layer_norm(one, one, one).is_err());
}

#[test]
fn layer_norm_gradient_check() {
    let fd = check_inputs(&[random(4, 8, 3), random(1, 8, 4), random(1, 8, 5), random(4, 8, 6)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2])?;
        let w = t.mul(y, v[3])?;
        Ok(t.sum(w))
    })
    .unwrap();
    assert!(fd.max_rel_err < TOL, "{fd:?}");
}

#[test]
fn gather_examples() {
    let table: Vec<f64> = (0..12).map(f64::from).collect();
    let mut t = Tape::new();
    let tb = t.variable(4, 3, table).unwrap();
    let one = t.gather(tb, &[Some(2)]).unwrap();
    assert_eq!(t.value(one), &[6.0, 7.0, 8.0]);
    let rep = t.gather(tb, &[Some(1), Some(1), None]).unwrap();
    assert_eq!(&t.value(rep)[6..], &[0.0, 0.0, 0.0]);
    let s = t.sum(rep);
    let g = t.backward(s).unwrap();
    let g = g.get(tb).unwrap();
    assert_eq!(&g[3..6], &[2.0, 2.0, 2.0]);
    assert!(g[..3].iter().chain(&g[6..]).all(|&x| x == 0.0));
    assert!(matches!(t.gather(tb, &[Some(4)]), Err(Error::Index { id: 4, bound: 4 })));
}

#[test]
fn backward_requires_scalar() {
    let mut t = Tape::new();
    let x = t.variable(1, 2, vec![1.0, 2.0]).unwrap();
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn backward_trivial_cases() {
    let mut t = Tape::new();
    let x = t.variable(1, 3, vec![1.0, -2.0, 5.0]).unwrap();
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::new();
    let x = t.variable(1, 2, vec![1.0, 2.0]).unwrap();
    let q = t.matmul_t(x, x).unwrap();
    let g = t.backward(q).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn gradients_only_for_tracking_ancestors() {
    let frozen = Tensor::filled(vec![1, 2], 0.5).unwrap();
    let mut live = Tensor::filled(vec![1, 2], 2.0).unwrap();
    live.set_requires_grad(true);
    let mut t = Tape::new();
    let f = t.leaf(&frozen);
    let l = t.leaf(&live);
    let unrelated = t.variable(1, 1, vec![3.0]).unwrap();
    let m = t.mul(f, l).unwrap();
    let s = t.sum(m);
    let g = t.backward(s).unwrap();
    assert!(g.get(f).is_none());
    assert!(g.get(unrelated).is_none());
    assert_eq!(g.get(l).unwrap(), &[0.5, 0.5]);
}

#[test]
fn random_mlp_gradient_check() {
    // 3 -> 4 -> 1 with biases: 12 + 4 + 4 + 1 = 21 parameters.
    let inputs = [random(5, 3, 10), random(3, 4, 11), random(1, 4, 12), random(4, 1, 13), random(1, 1, 14)];
    let fd = check_inputs(&inputs, |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_row(h, v[2])?;
        let h = t.sigmoid(h);
        let o = t.matmul(h, v[3])?;
        let o = t.add_row(o, v[4])?;
        let o = t.softplus(o);
        Ok(t.mean(o))
    })
    .unwrap();
    assert_eq!(fd.coordinates, 15 + 21);
    assert!(fd.max_rel_err < TOL, "{fd:?}");
}

#[test]
fn composite_op_set_gradient_check() {
    let inputs = [random(3, 4, 20), random(3, 4, 21), random(2, 4, 22)];
    let fd = check_inputs(&inputs, |t, v| {
        let a = t.sub(v[0], v[1])?;
        let a = t.scale(a, 0.7);
        let m = t.mask(a, &[1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0])?;
        let att = t.matmul_t(m, v[2])?;
        let sm = t.softmax_rows(att, Some(&[0.0, MASK_NEG, 0.0, 0.0, MASK_NEG, 0.0]))?;
        let ls = t.log_softmax_rows(att);
        let both = t.concat_cols(&[sm, ls])?;
        let sl = t.slice_cols(both, 1, 3)?;
        let r = t.relu(v[0]);
        let stacked = t.concat_rows(&[r, v[1]])?;
        let top = t.slice_rows(stacked, 2, 3)?;
        let n = t.normalize_rows(top)?;
        let rs = t.reshape(n, 4, 3)?;
        let rowsum = t.row_sum(rs);
        let gathered = t.gather(v[2], &[Some(1), None, Some(0)])?;
        let d = t.row_dot(gathered, v[0])?;
        let picked = t.pick(sl, &[(0, 0), (2, 2), (1, 1)])?;
        let x = t.mul(d, picked)?;
        let s1 = t.sum(x);
        let s2 = t.mean(rowsum);
        let tot = t.add(s1, s2)?;
        Ok(tot)
    })
    .unwrap();
    assert!(fd.max_rel_err < TOL, "{fd:?}");
}

#[test]
fn dropout_zero_rate_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = Tape::new();
    let x = t.variable(1, 2, vec![1.0, 2.0]).unwrap();
    let y = t.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(x, y);
    let z = t.dropout(x, 0.5, &mut rng).unwrap();
    assert!(t.value(z).iter().zip(t.value(x)).all(|(a, b)| *a == 0.0 || *a == 2.0 * b));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut mask: Vec<f64> = (0..rows * cols).map(|_| if rng.gen_bool(0.4) { MASK_NEG } else { 0.0 }).collect();
        for r in 0..rows {
            mask[r * cols + rng.gen_range(0..cols)] = 0.0;
        }
        let mut t = Tape::new();
        let a = t.constant(rows, cols, data).unwrap();
        let s = t.softmax_rows(a, Some(&mask)).unwrap();
        for r in 0..rows {
            let row = &t.value(s)[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for c in 0..cols {
                if mask[r * cols + c] != 0.0 {
                    prop_assert!(row[c] <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_ops_are_bit_identical(seed in any::<u64>()) {
        let run = || {
            let (r, c, d) = random(3, 5, seed);
            let mut t = Tape::new();
            let x = t.variable(r, c, d).unwrap();
            let y = t.matmul_t(x, x).unwrap();
            let y = t.softmax_rows(y, None).unwrap();
            let s = t.sum(y);
            let g = t.backward(s).unwrap();
            (t.scalar(s).to_bits(), g.get(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }
}
