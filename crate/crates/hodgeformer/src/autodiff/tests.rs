use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mesh::incidence::IncidenceOperators;
use crate::mesh::Mesh;
use crate::sparsity;

fn tetrahedron_ops() -> IncidenceOperators {
    let mesh = Mesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ],
        vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
    )
    .unwrap();
    IncidenceOperators::build(&mesh)
}

fn ring_adjacency(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| {
            let mut v = vec![(i + n - 1) % n, (i + 1) % n];
            v.sort_unstable();
            v
        })
        .collect()
}

/// Contracts a matrix output to a scalar with fixed, distinct row/column
/// weights so the pulled-back gradient differs per entry.
fn scalarize(tape: &mut Tape<f64>, t: Tensor) -> Tensor {
    if (t.rows, t.cols) == (1, 1) {
        return t;
    }
    let wcol: Vec<f64> = (0..t.cols).map(|i| (0.7 * i as f64 + 0.3).sin() + 1.2).collect();
    let wrow: Vec<f64> = (0..t.rows).map(|i| (0.4 * i as f64).cos() + 1.5).collect();
    let wcol = tape.leaf(t.cols, 1, wcol, false);
    let wrow = tape.leaf(t.rows, 1, wrow, false);
    let a = tape.matmul(t, wcol);
    tape.matmul_atb(wrow, a)
}

/// Central-difference gradient check for a graph builder over leaf tensors.
/// Inputs avoid the interval (-0.1, 0.1) so kinked activations (relu) are
/// never differentiated at their kink.
fn fd_check(shapes: &[(usize, usize)], seed: u64, build: &dyn Fn(&mut Tape<f64>, &[Tensor]) -> Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .map(|&(r, c)| {
            (0..r * c)
                .map(|_| {
                    let mag: f64 = rng.random_range(0.1..1.0);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect()
        })
        .collect();

    let run = |inputs: &[Vec<f64>], want_grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::<f64>::new();
        let leaves: Vec<Tensor> = shapes
            .iter()
            .zip(inputs)
            .map(|(&(r, c), vals)| tape.leaf(r, c, vals.clone(), true))
            .collect();
        let out = build(&mut tape, &leaves);
        let loss = scalarize(&mut tape, out);
        let loss_val = tape.values(loss)[0];
        let gvals = if want_grads {
            let grads = tape.backward(loss);
            leaves
                .iter()
                .map(|&l| {
                    grads
                        .get(l)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; l.len()])
                })
                .collect()
        } else {
            Vec::new()
        };
        (loss_val, gvals)
    };

    let (_, analytic) = run(&inputs, true);
    let eps = 1e-5;
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[ti][j] += eps;
            let mut minus = inputs.clone();
            minus[ti][j] -= eps;
            let (fp, _) = run(&plus, false);
            let (fm, _) = run(&minus, false);
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti][j];
            let denom = a.abs().max(numeric.abs()).max(1.0);
            assert!(
                (a - numeric).abs() / denom <= 1e-6,
                "leaf {ti}[{j}]: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn grad_matmul() {
    fd_check(&[(3, 4), (4, 5)], 1, &|t, l| t.matmul(l[0], l[1]));
}

#[test]
fn grad_matmul_bt() {
    fd_check(&[(3, 4), (5, 4)], 2, &|t, l| t.matmul_bt(l[0], l[1]));
}

#[test]
fn grad_matmul_atb() {
    fd_check(&[(4, 3), (4, 5)], 3, &|t, l| t.matmul_atb(l[0], l[1]));
}

#[test]
fn grad_add_scale_bias() {
    fd_check(&[(3, 4), (3, 4), (1, 4)], 4, &|t, l| {
        let s = t.add(l[0], l[1]);
        let s = t.scale(s, -1.7);
        t.add_bias(s, l[2])
    });
}

#[test]
fn grad_relu_chain() {
    fd_check(&[(4, 6), (6, 3)], 5, &|t, l| {
        let h = t.matmul(l[0], l[1]);
        t.relu(h)
    });
}

#[test]
fn grad_elu_plus_one() {
    fd_check(&[(4, 6)], 6, &|t, l| t.elu_plus_one(l[0]));
}

#[test]
fn grad_layer_norm() {
    fd_check(&[(4, 8)], 7, &|t, l| t.layer_norm(l[0]));
}

#[test]
fn grad_layer_norm_composed() {
    fd_check(&[(3, 6), (6, 6)], 8, &|t, l| {
        let h = t.matmul(l[0], l[1]);
        let h = t.layer_norm(h);
        t.relu(h)
    });
}

#[test]
fn grad_dropout_fixed_mask() {
    fd_check(&[(5, 6)], 9, &|t, l| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        t.dropout(l[0], 0.4, &mut rng)
    });
}

#[test]
fn grad_signed_apply() {
    let ops = tetrahedron_ops();
    let d0 = Arc::new(ops.d0.clone());
    let d0t = Arc::new(ops.d0t.clone());
    fd_check(&[(4, 3)], 10, &|t, l| t.signed_apply(l[0], &d0, &d0t));
}

#[test]
fn grad_row_mix() {
    let mat = Arc::new(PoolingMatrix::from_rows(
        &[
            vec![(0, 1.0 / 3.0), (1, 1.0 / 3.0), (2, 1.0 / 3.0)],
            vec![(1, 0.5), (3, 0.5)],
            vec![(0, 1.0)],
        ],
        4,
    ));
    fd_check(&[(4, 5)], 11, &|t, l| t.row_mix(l[0], &mat));
}

#[test]
fn grad_sparse_attention() {
    let pattern = Arc::new(sparsity::build_pattern(&ring_adjacency(12), None, 3));
    fd_check(&[(12, 5), (12, 5), (12, 5)], 12, &|t, l| {
        t.sparse_attention(l[0], l[1], l[2], &pattern)
    });
}

#[test]
fn grad_concat_cols() {
    fd_check(&[(3, 2), (3, 4), (3, 1)], 13, &|t, l| {
        t.concat_cols(&[l[0], l[1], l[2]])
    });
}

#[test]
fn grad_sum_and_mean_rows() {
    fd_check(&[(6, 4)], 14, &|t, l| t.sum_rows(l[0]));
    fd_check(&[(6, 4)], 15, &|t, l| t.mean_rows(l[0]));
}

#[test]
fn grad_div_col_vec() {
    fd_check(&[(4, 3), (4, 1)], 16, &|t, l| t.div_col_vec(l[0], l[1]));
}

#[test]
fn grad_cross_entropy() {
    let targets = [0usize, 2, 1, 2, 0];
    let weights = [1.0, 2.0, 0.5];
    fd_check(&[(5, 3)], 17, &|t, l| {
        t.cross_entropy(l[0], &targets, &weights, 0.1)
    });
}

#[test]
fn grad_linear_attention_composite() {
    // out_i = phi(q_i) S / (phi(q_i) . z), S = phi(K)^T V, z = sum phi(K).
    fd_check(&[(5, 3), (5, 3), (5, 4)], 18, &|t, l| {
        let fq = t.elu_plus_one(l[0]);
        let fk = t.elu_plus_one(l[1]);
        let s = t.matmul_atb(fk, l[2]);
        let num = t.matmul(fq, s);
        let z = t.sum_rows(fk);
        let den = t.matmul_bt(fq, z);
        t.div_col_vec(num, den)
    });
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::<f64>::new();
    let vals: Vec<f64> = (0..6 * 64).map(|_| rng.random_range(-3.0..3.0)).collect();
    let x = tape.leaf(6, 64, vals, false);
    let y = tape.layer_norm(x);
    for row in tape.values(y).chunks(64) {
        let mean: f64 = row.iter().sum::<f64>() / 64.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12, "mean {mean}");
        // Variance is var/(var+eps), slightly below 1.
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
}

#[test]
fn elu_plus_one_is_positive_and_continuous() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(1, 5, vec![-30.0, -1e-9, 0.0, 1e-9, 3.0], false);
    let y = tape.elu_plus_one(x);
    let v = tape.values(y);
    assert!(v.iter().all(|&x| x > 0.0));
    assert!((v[1] - 1.0).abs() < 1e-8);
    assert!((v[2] - 1.0).abs() < 1e-15);
    assert!((v[3] - 1.0).abs() < 1e-8);
    assert!((v[4] - 4.0).abs() < 1e-15);
}

#[test]
fn cross_entropy_uniform_logits_is_log_c() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(4, 3, vec![0.7; 12], false);
    let targets = [0, 1, 2, 1];
    let l0 = tape.cross_entropy(logits, &targets, &[1.0, 1.0, 1.0], 0.0);
    let l1 = tape.cross_entropy(logits, &targets, &[1.0, 1.0, 1.0], 0.4);
    let want = 3.0f64.ln();
    assert!((tape.values(l0)[0] - want).abs() < 1e-12);
    // Uniform logits make the loss independent of smoothing.
    assert!((tape.values(l1)[0] - want).abs() < 1e-12);
}

#[test]
fn cross_entropy_weighted_mean_matches_manual() {
    let mut tape = Tape::<f64>::new();
    let vals = vec![1.0, -0.5, 0.2, 0.0, 2.0, -1.0];
    let logits = tape.leaf(2, 3, vals.clone(), false);
    let targets = [2usize, 0];
    let weights = [3.0, 1.0, 0.5];
    let loss = tape.cross_entropy(logits, &targets, &weights, 0.0);
    let manual: f64 = {
        let per_row: Vec<f64> = (0..2)
            .map(|i| {
                let row = &vals[i * 3..(i + 1) * 3];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - row[targets[i]]
            })
            .collect();
        let w = [weights[targets[0]], weights[targets[1]]];
        (w[0] * per_row[0] + w[1] * per_row[1]) / (w[0] + w[1])
    };
    assert!((tape.values(loss)[0] - manual).abs() < 1e-12);
}

#[test]
fn cross_entropy_gradient_rows_sum_to_zero() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vals: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let logits = tape.leaf(5, 4, vals, true);
    let loss = tape.cross_entropy(logits, &[0, 3, 1, 2, 2], &[1.0, 0.5, 2.0, 1.5], 0.2);
    let grads = tape.backward(loss);
    for row in grads.get(logits).unwrap().chunks(4) {
        let s: f64 = row.iter().sum();
        assert!(s.abs() < 1e-14, "row sum {s}");
    }
}

#[test]
fn sparse_attention_rows_are_stochastic() {
    let pattern = Arc::new(sparsity::build_pattern(&ring_adjacency(30), None, 5));
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mk = |tape: &mut Tape<f64>, rng: &mut ChaCha8Rng| {
        let vals: Vec<f64> = (0..30 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        tape.leaf(30, 6, vals, false)
    };
    let q = mk(&mut tape, &mut rng);
    let k = mk(&mut tape, &mut rng);
    let v = mk(&mut tape, &mut rng);
    tape.sparse_attention(q, k, v, &pattern);
    let sums = tape.attention_row_sums();
    assert_eq!(sums.len(), 1);
    assert_eq!(sums[0].len(), 30);
    for s in &sums[0] {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn sparse_attention_with_dense_pattern_matches_dense_softmax() {
    let n = 9;
    let d = 4;
    let pattern = Arc::new(sparsity::dense_pattern(&ring_adjacency(n), 0));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let qv: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let kv: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let vv: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();

    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(n, d, qv.clone(), false);
    let k = tape.leaf(n, d, kv.clone(), false);
    let v = tape.leaf(n, d, vv.clone(), false);
    let out = tape.sparse_attention(q, k, v, &pattern);

    // Dense oracle.
    let scale = 1.0 / (d as f64).sqrt();
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for t in 0..n {
            let mut dot = 0.0;
            for c in 0..d {
                dot += qv[i * d + c] * kv[t * d + c];
            }
            logits[t] = dot * scale;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for c in 0..d {
            let mut want = 0.0;
            for t in 0..n {
                want += (logits[t] - max).exp() / denom * vv[t * d + c];
            }
            let got = tape.values(out)[i * d + c];
            assert!((got - want).abs() < 1e-12, "({i},{c}): {got} vs {want}");
        }
    }
}

#[test]
fn linear_attention_single_row_returns_value() {
    let mut tape = Tape::<f64>::new();
    let q = tape.leaf(1, 3, vec![0.3, -0.4, 2.0], false);
    let k = tape.leaf(1, 3, vec![-1.0, 0.5, 0.7], false);
    let v = tape.leaf(1, 4, vec![1.0, 2.0, 3.0, 4.0], false);
    let fq = tape.elu_plus_one(q);
    let fk = tape.elu_plus_one(k);
    let s = tape.matmul_atb(fk, v);
    let num = tape.matmul(fq, s);
    let z = tape.sum_rows(fk);
    let den = tape.matmul_bt(fq, z);
    let out = tape.div_col_vec(num, den);
    for (got, want) in tape.values(out).iter().zip(&[1.0, 2.0, 3.0, 4.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn linear_attention_equal_keys_averages_values() {
    let n = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::<f64>::new();
    let qv: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let krow = [0.2, -0.7, 1.1];
    let kv: Vec<f64> = (0..n).flat_map(|_| krow).collect();
    let vv: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q = tape.leaf(n, 3, qv, false);
    let k = tape.leaf(n, 3, kv, false);
    let v = tape.leaf(n, 2, vv.clone(), false);
    let fq = tape.elu_plus_one(q);
    let fk = tape.elu_plus_one(k);
    let s = tape.matmul_atb(fk, v);
    let num = tape.matmul(fq, s);
    let z = tape.sum_rows(fk);
    let den = tape.matmul_bt(fq, z);
    let out = tape.div_col_vec(num, den);
    let mean = [
        (0..n).map(|i| vv[i * 2]).sum::<f64>() / n as f64,
        (0..n).map(|i| vv[i * 2 + 1]).sum::<f64>() / n as f64,
    ];
    for row in tape.values(out).chunks(2) {
        assert!((row[0] - mean[0]).abs() < 1e-12);
        assert!((row[1] - mean[1]).abs() < 1e-12);
    }
}

#[test]
fn signed_apply_ones_gradient_is_exact_integer_column_sum() {
    let ops = tetrahedron_ops();
    let d0 = Arc::new(ops.d0.clone());
    let d0t = Arc::new(ops.d0t.clone());
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(4, 1, vec![0.25, -1.5, 3.0, 2.0], true);
    let y = tape.signed_apply(x, &d0, &d0t);
    let s = tape.sum_rows(y);
    let ones = tape.leaf(1, 1, vec![1.0], false);
    let loss = tape.matmul_bt(s, ones);
    let grads = tape.backward(loss);
    let gx = grads.get(x).unwrap();
    for (g, want) in gx.iter().zip(ops.d0.signed_column_sums()) {
        assert_eq!(*g, want as f64, "gradient must be the exact signed count");
    }
}

#[test]
fn constant_leaves_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0], true);
    let b = tape.leaf(2, 2, vec![0.5; 4], false);
    let c = tape.matmul(a, b);
    let loss = scalarize(&mut tape, c);
    let grads = tape.backward(loss);
    assert!(grads.get(a).is_some());
    assert!(grads.get(b).is_none());
}

#[test]
fn dropout_zero_probability_is_identity() {
    let mut tape = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = tape.leaf(2, 2, vec![1.0, -2.0, 3.0, -4.0], false);
    let b = tape.dropout(a, 0.0, &mut rng);
    assert_eq!(a, b);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || -> (u32, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::<f32>::new();
        let vals: Vec<f32> = (0..16 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.leaf(16, 8, vals, true);
        let wt = tape.leaf(8, 8, w, true);
        let h = tape.matmul(x, wt);
        let h = tape.layer_norm(h);
        let h = tape.relu(h);
        let pooled = tape.mean_rows(h);
        let loss = tape.cross_entropy(pooled, &[3], &[1.0; 8], 0.1);
        let grads = tape.backward(loss);
        (
            tape.values(loss)[0].to_bits(),
            grads.get(wt).unwrap().iter().map(|g| g.to_bits()).collect(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_and_f64_towers_agree() {
    fn build<T: Scalar>() -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::<T>::new();
        let vals: Vec<f64> = (0..10 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..6 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.leaf_from_f64(10, 6, &vals, true);
        let wt = tape.leaf_from_f64(6, 4, &w, true);
        let h = tape.matmul(x, wt);
        let h = tape.layer_norm(h);
        let pooled = tape.mean_rows(h);
        let loss = tape.cross_entropy(pooled, &[1], &[1.0; 4], 0.0);
        tape.values(loss)[0].to_f64()
    }
    let a = build::<f32>();
    let b = build::<f64>();
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
}
