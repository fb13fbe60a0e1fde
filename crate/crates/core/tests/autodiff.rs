use std::rc::Rc;

use dnsd::gradcheck;
use dnsd::rng::SplitMix64;
use dnsd::tensor::{EdgeList, Tape, Tensor, Var};
use dnsd::Error;
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_by_hand() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(2));
    let b = tape.constant(Tensor::matrix(&[&[2.0, 3.0], &[4.0, 5.0]]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);

    let r = tape.constant(Tensor::matrix(&[&[1.0, 2.0]]));
    let col = tape.constant(Tensor::matrix(&[&[3.0], &[4.0]]));
    let p = tape.matmul(r, col).unwrap();
    assert_eq!(tape.value(p).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = SplitMix64::new(1);
    let a = random(&[4, 3], &mut rng);
    let b = random(&[3, 5], &mut rng);
    let mut expect = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            for l in 0..3 {
                expect[i * 5 + j] += a.data()[i * 3 + l] * b.data()[l * 5 + j];
            }
        }
    }
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb).unwrap();
    assert_close(tape.value(c).data(), &expect, 1e-12);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
}

#[test]
fn elementwise_fixed_points() {
    let mut tape = Tape::new();
    let z = tape.param(Tensor::scalar(0.0));
    let t = tape.tanh(z).unwrap();
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(t).data(), &[0.0]);
    assert_eq!(tape.value(s).data(), &[0.5]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(-1.5));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0]);
    let g = tape.backward(r);
    // relu output is constant zero here but still connected to x
    assert_eq!(g.unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn broadcasting_is_scalar_or_equal_only() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
    let s = tape.constant(Tensor::scalar(2.0));
    let out = tape.add(a, s).unwrap();
    assert_eq!(tape.value(out).data(), &[2.0; 6]);
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(1.0));
    let z = tape.constant(Tensor::scalar(0.0));
    assert!(matches!(tape.div(a, z), Err(Error::NonFinite(_))));
}

#[test]
fn segment_sum_by_hand() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap());
    let out = tape.segment_sum(m, Rc::from(vec![0, 0]), 2).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 0.0]);

    let empty = tape.constant(Tensor::zeros(&[0, 2, 3]));
    let out = tape.segment_sum(empty, Rc::from(Vec::new()), 4).unwrap();
    assert_eq!(tape.value(out).shape(), &[4, 2, 3]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn segment_sum_matches_per_node_loop() {
    let mut rng = SplitMix64::new(5);
    let (e, n, d, f) = (50, 10, 2, 3);
    let msgs = random(&[e, d, f], &mut rng);
    let targets: Vec<usize> = (0..e).map(|_| rng.below(n as u64) as usize).collect();
    let mut expect = vec![0.0; n * d * f];
    for v in 0..n {
        for (row, _) in targets.iter().enumerate().filter(|(_, &t)| t == v) {
            for k in 0..d * f {
                expect[v * d * f + k] += msgs.data()[row * d * f + k];
            }
        }
    }
    let mut tape = Tape::new();
    let m = tape.constant(msgs);
    let out = tape.segment_sum(m, Rc::from(targets), n).unwrap();
    assert_close(tape.value(out).data(), &expect, 1e-12);
}

#[test]
fn segment_sum_rejects_bad_index() {
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::zeros(&[1, 1]));
    assert!(matches!(
        tape.segment_sum(m, Rc::from(vec![3]), 2),
        Err(Error::Index { .. })
    ));
}

#[test]
fn reductions() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = tape.row_mean(x).unwrap();
    assert_eq!(tape.value(m).data(), &[2.0]);

    let c = tape.constant(Tensor::full(&[1, 4], 7.0));
    let s = tape.row_std(c, 1e-5).unwrap();
    assert!((tape.value(s).data()[0] - 1e-5f64.sqrt()).abs() < 1e-15);

    let empty = tape.constant(Tensor::zeros(&[2, 0]));
    assert!(tape.row_mean(empty).is_err());
}

#[test]
fn row_std_matches_two_pass_variance() {
    let mut rng = SplitMix64::new(9);
    let x = random(&[4, 7], &mut rng);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.row_std(v, 0.0).unwrap();
    for r in 0..4 {
        let row = &x.data()[r * 7..(r + 1) * 7];
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 7.0;
        assert!((tape.value(s).data()[r] - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::from_fn(&[2, 2], |i| i as f64));
    let s = tape.sum(w).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_error_paths() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::ones(&[2]));
    let t = tape.tanh(w).unwrap();
    assert!(matches!(tape.backward(t), Err(Error::Backward(_))));
    let s = tape.sum(t).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));

    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let s = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Backward(_))));
}

#[test]
fn tanh_of_product_matches_finite_differences() {
    let mut rng = SplitMix64::new(2);
    let w = random(&[3, 4], &mut rng);
    let x = random(&[4, 2], &mut rng);
    let report = gradcheck::check(&[w, x], 1e-6, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        let h = t.tanh(p)?;
        t.sum(h)
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

fn check_op(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> dnsd::Result<Var>) {
    // Positive weights keep every output element in play without letting
    // gradients cancel down to the finite-difference noise floor.
    let report = gradcheck::check(&inputs, 1e-6, |t, v| {
        let out = f(t, v)?;
        let shape = t.value(out).shape().to_vec();
        let w = t.constant(Tensor::from_fn(&shape, |i| 1.0 + 0.5 * ((i as f64) * 0.7 + 0.3).sin()));
        let p = t.mul(out, w)?;
        t.sum(p)
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

#[test]
fn every_op_passes_finite_differences() {
    let mut rng = SplitMix64::new(3);
    let mut r = |s: &[usize]| random(s, &mut rng);

    check_op(vec![r(&[3, 4])], |t, v| t.tanh(v[0]));
    check_op(vec![r(&[3, 4])], |t, v| t.sigmoid(v[0]));
    check_op(vec![r(&[3, 4])], |t, v| t.relu(v[0]));
    check_op(vec![r(&[3, 4])], |t, v| t.scale(v[0], -1.7));
    check_op(vec![r(&[3, 4]), r(&[3, 4])], |t, v| t.add(v[0], v[1]));
    check_op(vec![r(&[3, 4]), r(&[])], |t, v| t.sub(v[0], v[1]));
    check_op(vec![r(&[]), r(&[3, 4])], |t, v| t.mul(v[0], v[1]));
    check_op(vec![r(&[3, 4]), r(&[3, 4]).map(|x| x.abs() + 1.0)], |t, v| {
        t.div(v[0], v[1])
    });
    check_op(vec![r(&[3, 4]), r(&[4, 2])], |t, v| t.matmul(v[0], v[1]));
    check_op(vec![r(&[5, 2, 3]), r(&[5, 3, 4])], |t, v| {
        t.batch_matmul(v[0], v[1], false)
    });
    check_op(vec![r(&[5, 3, 2]), r(&[5, 3, 4])], |t, v| {
        t.batch_matmul(v[0], v[1], true)
    });
    check_op(vec![r(&[3, 3]), r(&[4, 3, 2])], |t, v| t.stalk_mix(v[0], v[1]));
    check_op(vec![r(&[4, 3])], |t, v| t.diag_embed(v[0]));
    check_op(vec![r(&[3, 4])], |t, v| t.mean(v[0]));
    check_op(vec![r(&[2, 3, 4])], |t, v| t.row_mean(v[0]));
    check_op(vec![r(&[2, 3, 4])], |t, v| t.row_std(v[0], 1e-5));
    check_op(vec![r(&[2, 3, 1])], |t, v| t.expand_last(v[0], 4));
    check_op(vec![r(&[2, 3])], |t, v| t.repeat_outer(v[0], 3));
    check_op(vec![r(&[2, 6])], |t, v| t.reshape(v[0], &[3, 4]));
    check_op(vec![r(&[2, 3, 2]), r(&[2, 3, 4])], |t, v| t.concat_last(v[0], v[1]));
    check_op(vec![r(&[5, 2])], |t, v| t.slice_rows(v[0], 1, 4));
    check_op(vec![r(&[4, 2])], |t, v| t.gather_rows(v[0], Rc::from(vec![3, 0, 3, 1])));
    check_op(vec![r(&[5, 2])], |t, v| {
        t.segment_sum(v[0], Rc::from(vec![1, 0, 1, 2, 1]), 3)
    });
    check_op(vec![r(&[3, 2])], |t, v| {
        t.row_scale(v[0], Rc::from(vec![0.5, -2.0, 3.0]))
    });
}

#[test]
fn qr_factor_passes_finite_differences() {
    let mut rng = SplitMix64::new(4);
    let a = Tensor::from_fn(&[3, 3, 3], |i| rng.normal() + if i % 13 == 0 { 2.0 } else { 0.0 });
    let mut tape = Tape::new();
    let v = tape.constant(a.clone());
    let q = tape.qr_q(v).unwrap();
    let qv = tape.value(q);
    for b in 0..3 {
        let blk = &qv.data()[b * 9..(b + 1) * 9];
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| blk[k * 3 + i] * blk[k * 3 + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((dot - target).abs() < 1e-10);
            }
        }
    }
    check_op(vec![a], |t, v| t.qr_q(v[0]));
}

#[test]
fn qr_regularizes_rank_deficient_input() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::zeros(&[1, 2, 2]));
    let q = tape.qr_q(v).unwrap();
    assert_eq!(tape.qr_regularized(), 1);
    assert!(tape.value(q).is_finite());
}

fn random_edges(n: usize, e: usize, rng: &mut SplitMix64) -> EdgeList {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    while src.len() < e {
        let u = rng.below(n as u64) as usize;
        let v = rng.below(n as u64) as usize;
        if u != v {
            src.push(u);
            tgt.push(v);
        }
    }
    let coef: Vec<f64> = (0..e).map(|_| 0.2 + rng.uniform()).collect();
    EdgeList {
        src: Rc::from(src),
        tgt: Rc::from(tgt),
        coef: Rc::from(coef),
    }
}

fn composed_aggregate(
    t: &mut Tape,
    x: Var,
    fs: Var,
    ft: Var,
    edges: &EdgeList,
    n: usize,
    adjacency: bool,
) -> dnsd::Result<Var> {
    let xv = t.gather_rows(x, edges.tgt.clone())?;
    let target = t.batch_matmul(ft, xv, false)?;
    let delta = if adjacency {
        target
    } else {
        let xu = t.gather_rows(x, edges.src.clone())?;
        let source = t.batch_matmul(fs, xu, false)?;
        t.sub(source, target)?
    };
    let back = t.batch_matmul(fs, delta, true)?;
    let scaled = t.row_scale(back, edges.coef.clone())?;
    t.segment_sum(scaled, edges.src.clone(), n)
}

#[test]
fn fused_aggregate_matches_composed_ops() {
    let mut rng = SplitMix64::new(6);
    let (n, d, f, e) = (6, 3, 2, 14);
    let edges = random_edges(n, e, &mut rng);
    let inputs = [
        random(&[n, d, f], &mut rng),
        random(&[e, d, d], &mut rng),
        random(&[e, d, d], &mut rng),
    ];
    let weight = random(&[n, d, f], &mut rng);
    for adjacency in [false, true] {
        let mut results = Vec::new();
        for fused in [true, false] {
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
            let out = if fused {
                t.sheaf_aggregate(v[0], v[1], v[2], &edges, adjacency).unwrap()
            } else {
                composed_aggregate(&mut t, v[0], v[1], v[2], &edges, n, adjacency).unwrap()
            };
            let w = t.constant(weight.clone());
            let p = t.mul(out, w).unwrap();
            let s = t.sum(p).unwrap();
            let value = t.value(out).clone();
            let g = t.backward(s).unwrap();
            let grads: Vec<Tensor> = v.iter().map(|&x| g.get(x).unwrap().clone()).collect();
            results.push((value, grads));
        }
        assert_close(results[0].0.data(), results[1].0.data(), 1e-12);
        for (a, b) in results[0].1.iter().zip(&results[1].1) {
            assert_close(a.data(), b.data(), 1e-12);
        }
        check_op(inputs.to_vec(), |t, v| {
            t.sheaf_aggregate(v[0], v[1], v[2], &edges, adjacency)
        });
    }
}

/// Value and input gradients of `sum(out ⊙ weight)` for two formulations
/// of the same function.
fn assert_same_function(
    inputs: &[Tensor],
    a: impl Fn(&mut Tape, &[Var]) -> dnsd::Result<Var>,
    b: impl Fn(&mut Tape, &[Var]) -> dnsd::Result<Var>,
) {
    let mut results = Vec::new();
    for f in [&a as &dyn Fn(&mut Tape, &[Var]) -> dnsd::Result<Var>, &b] {
        let mut t = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let out = f(&mut t, &v).unwrap();
        let shape = t.value(out).shape().to_vec();
        let w = t.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 1.3).cos()));
        let p = t.mul(out, w).unwrap();
        let s = t.sum(p).unwrap();
        let value = t.value(out).clone();
        let g = t.backward(s).unwrap();
        let grads: Vec<Tensor> = v.iter().map(|&x| g.get(x).unwrap().clone()).collect();
        results.push((value, grads));
    }
    assert_eq!(results[0].0.shape(), results[1].0.shape());
    assert_close(results[0].0.data(), results[1].0.data(), 1e-12);
    for (x, y) in results[0].1.iter().zip(&results[1].1) {
        assert_close(x.data(), y.data(), 1e-12);
    }
}

#[test]
fn diagonal_aggregate_matches_embedded_maps() {
    let mut rng = SplitMix64::new(61);
    let (n, d, f, e) = (5, 3, 4, 12);
    let edges = random_edges(n, e, &mut rng);
    let inputs = [
        random(&[n, d, f], &mut rng),
        random(&[e, d], &mut rng),
        random(&[e, d], &mut rng),
    ];
    for adjacency in [false, true] {
        assert_same_function(
            &inputs,
            |t, v| t.sheaf_aggregate(v[0], v[1], v[2], &edges, adjacency),
            |t, v| {
                let fs = t.diag_embed(v[1])?;
                let ft = t.diag_embed(v[2])?;
                t.sheaf_aggregate(v[0], fs, ft, &edges, adjacency)
            },
        );
    }
}

#[test]
fn edge_affine_matches_composed_ops() {
    let mut rng = SplitMix64::new(62);
    let (n, c, k, e) = (6, 4, 3, 15);
    let edges = random_edges(n, e, &mut rng);
    let inputs = [
        random(&[n, c], &mut rng),
        random(&[2 * c, k], &mut rng),
        random(&[k], &mut rng),
    ];
    assert_same_function(
        &inputs,
        |t, v| t.edge_affine(v[0], v[1], v[2], &edges),
        |t, v| {
            let top = t.slice_rows(v[1], 0, c)?;
            let bottom = t.slice_rows(v[1], c, 2 * c)?;
            let p = t.matmul(v[0], top)?;
            let q = t.matmul(v[0], bottom)?;
            let a = t.gather_rows(p, edges.src.clone())?;
            let b = t.gather_rows(q, edges.tgt.clone())?;
            let sum = t.add(a, b)?;
            let bias = t.repeat_outer(v[2], e)?;
            t.add(sum, bias)
        },
    );
}

#[test]
fn edge_affine_rejects_bad_shapes() {
    let mut rng = SplitMix64::new(63);
    let edges = random_edges(4, 5, &mut rng);
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[4, 3]));
    let w = t.constant(Tensor::zeros(&[5, 2]));
    let b = t.constant(Tensor::zeros(&[2]));
    assert!(matches!(t.edge_affine(x, w, b, &edges), Err(Error::Shape { .. })));
    let small = t.constant(Tensor::zeros(&[2, 3]));
    let w = t.constant(Tensor::zeros(&[6, 2]));
    assert!(t.edge_affine(small, w, b, &edges).is_err());
}

#[test]
fn row_norm_matches_composed_ops() {
    let mut rng = SplitMix64::new(64);
    let (n, d, f) = (4, 3, 5);
    let inputs = [
        random(&[n, d, f], &mut rng),
        random(&[d, f], &mut rng),
        random(&[d, f], &mut rng),
    ];
    let eps = 1e-5;
    assert_same_function(
        &inputs,
        |t, v| t.row_norm(v[0], v[1], v[2], eps),
        |t, v| {
            let mean = t.row_mean(v[0])?;
            let mean = t.expand_last(mean, f)?;
            let centered = t.sub(v[0], mean)?;
            let std = t.row_std(v[0], eps)?;
            let std = t.expand_last(std, f)?;
            let normed = t.div(centered, std)?;
            let g = t.repeat_outer(v[1], n)?;
            let b = t.repeat_outer(v[2], n)?;
            let scaled = t.mul(normed, g)?;
            t.add(scaled, b)
        },
    );
    check_op(inputs.to_vec(), |t, v| t.row_norm(v[0], v[1], v[2], eps));
}

#[test]
fn cross_entropy_matches_finite_differences() {
    let mut rng = SplitMix64::new(8);
    let logits = random(&[5, 3], &mut rng);
    let labels: Rc<[usize]> = Rc::from(vec![0, 2, 1, 1, 0]);
    let mask: Rc<[usize]> = Rc::from(vec![0, 1, 3, 4]);
    let report = gradcheck::check(&[logits], 1e-6, |t, v| {
        t.cross_entropy(v[0], labels.clone(), mask.clone())
    })
    .unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}

/// `loss = c · tanh(W x)`, differentiated by multiplying the three local
/// Jacobians explicitly.
#[test]
fn chain_rule_matches_explicit_jacobian_product() {
    let mut rng = SplitMix64::new(12);
    let (m, k) = (3, 4);
    let w = random(&[m, k], &mut rng);
    let x = random(&[k, 1], &mut rng);
    let c = random(&[m, 1], &mut rng);

    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let xv = tape.constant(x.clone());
    let cv = tape.constant(c.clone());
    let y1 = tape.matmul(wv, xv).unwrap();
    let y2 = tape.tanh(y1).unwrap();
    let y3 = tape.mul(y2, cv).unwrap();
    let loss = tape.sum(y3).unwrap();
    let y2_val = tape.value(y2).clone();
    let g = tape.backward(loss).unwrap();

    // J1: dy1/dvec(W), m × (m·k)
    let mut j1 = vec![0.0; m * m * k];
    for i in 0..m {
        for l in 0..k {
            j1[i * (m * k) + i * k + l] = x.data()[l];
        }
    }
    // J2 = diag(1 - tanh²), J3 = cᵀ
    let j32: Vec<f64> = (0..m).map(|i| c.data()[i] * (1.0 - y2_val.data()[i].powi(2))).collect();
    let mut expect = vec![0.0; m * k];
    for (col, e) in expect.iter_mut().enumerate() {
        *e = (0..m).map(|i| j32[i] * j1[i * m * k + col]).sum();
    }
    assert_close(g.get(wv).unwrap().data(), &expect, 1e-14);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = SplitMix64::new(21);
        let edges = random_edges(5, 9, &mut rng);
        let mut t = Tape::new();
        let x = t.param(random(&[5, 2, 3], &mut rng));
        let fs = t.param(random(&[9, 2, 2], &mut rng));
        let ft = t.param(random(&[9, 2, 2], &mut rng));
        let a = t.sheaf_aggregate(x, fs, ft, &edges, false).unwrap();
        let h = t.tanh(a).unwrap();
        let s = t.sum(h).unwrap();
        let value = t.value(s).data()[0];
        let g = t.backward(s).unwrap();
        (value, g.get(fs).unwrap().clone())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);
}

proptest! {
    #[test]
    fn gather_and_segment_sum_are_adjoint(
        seed in any::<u64>(),
        n in 1usize..8,
        e in 0usize..20,
    ) {
        let mut rng = SplitMix64::new(seed);
        let index: Vec<usize> = (0..e).map(|_| rng.below(n as u64) as usize).collect();
        let x = random(&[n, 2], &mut rng);
        let y = random(&[e, 2], &mut rng);
        let mut t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let yv = t.constant(y.clone());
        let gx = t.gather_rows(xv, Rc::from(index.clone())).unwrap();
        let sy = t.segment_sum(yv, Rc::from(index), n).unwrap();
        let lhs: f64 = t.value(gx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(t.value(sy).data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(x in -1e3f64..1e3) {
        let mut t = Tape::no_grad();
        let v = t.constant(Tensor::scalar(x));
        let s = t.sigmoid(v).unwrap();
        let y = t.value(s).data()[0];
        prop_assert!((0.0..=1.0).contains(&y));
    }
}
