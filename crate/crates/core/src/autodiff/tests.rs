use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn vec1(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::Dimension(_))));
    assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
    assert_eq!(Tensor::scalar(3.0).matrix_dims(), (1, 1));
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(mat(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = g.matmul(id, b).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let r = g.constant(mat(&[&[1.0, 2.0]]));
    let col = g.constant(mat(&[&[3.0], &[4.0]]));
    let dot = g.matmul(r, col).unwrap();
    assert_eq!(g.value(dot).shape(), &[1, 1]);
    assert_eq!(g.value(dot).data(), &[11.0]);

    let z = g.constant(Tensor::zeros(&[3, 2]));
    let zb = g.matmul(z, b).unwrap();
    assert!(g.value(zb).data().iter().all(|&v| v == 0.0));

    let bad = g.matmul(r, b);
    assert!(bad.is_ok());
    assert!(matches!(g.matmul(b, r), Err(Error::Dimension(_))));
}

#[test]
fn matmul_t_matches_explicit_transpose() {
    let mut g = Graph::new();
    let a = g.constant(mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
    let b = g.constant(mat(&[&[1.0, 0.0, 1.0], &[0.0, 2.0, 0.0]]));
    let c = g.matmul_t(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 4.0, 10.0, 10.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(mat(&[&[0.0, 0.0], &[1f64.ln(), 3f64.ln()], &[1000.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let d = g.value(y).data();
    assert_eq!(&d[0..2], &[0.5, 0.5]);
    assert!((d[2] - 0.25).abs() < 1e-15 && (d[3] - 0.75).abs() < 1e-15);
    assert!((d[4] - 1.0).abs() < 1e-15 && d[5] >= 0.0 && d[5] < 1e-300);
    for row in d.chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new();
    let x = g.constant(vec1(&[0.0, f64::NAN]));
    assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite(_))));
    assert!(matches!(g.log_softmax_rows(x), Err(Error::NonFinite(_))));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(vec1(&[1.0, 1.0, 1.0]));
    let zeros = g.constant(vec1(&[0.0, 0.0, 0.0]));
    let y = g.layer_norm(ones, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let x = g.constant(vec1(&[0.0, 2.0]));
    let gamma = g.constant(vec1(&[1.0, 1.0]));
    let beta = g.constant(vec1(&[0.0, 0.0]));
    let y = g.layer_norm(x, gamma, beta, 1e-14).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);

    let gamma0 = g.constant(vec1(&[0.0, 0.0]));
    let beta5 = g.constant(vec1(&[5.0, 5.0]));
    let y = g.layer_norm(x, gamma0, beta5, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[5.0, 5.0]);

    assert!(matches!(g.layer_norm(x, gamma, beta, 0.0), Err(Error::Contract(_))));
}

#[test]
fn layer_norm_centers_every_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[7, 13]));
    let gamma = g.constant(Tensor::full(&[13], 1.0));
    let beta = g.constant(Tensor::zeros(&[13]));
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    for row in g.value(y).data().chunks(13) {
        let mean = row.iter().sum::<f64>() / 13.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 13.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let p = g.param("p", vec1(&[1.0, 2.0]));
    let unused = g.param("unused", vec1(&[4.0]));
    let _ = unused;
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[1.0, 1.0]);
    assert!(!grads.contains("unused"));

    let mut g = Graph::new();
    let p = g.param("p", vec1(&[1.0, 2.0]));
    let sq = g.mul(p, p).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get("p").unwrap().data(), &[2.0, 4.0]);
    assert_eq!(grads.get("p").unwrap().shape(), &[2]);

    assert!(matches!(g.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_examples() {
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), vec1(&[0.3, -1.2, 2.0]));
    let quad = |g: &mut Graph, p: &BoundParams| {
        let sq = g.mul(p["w"], p["w"])?;
        let s = g.scale(sq, 1.5);
        Ok(g.sum(s))
    };
    assert!(finite_diff_check(quad, &params, 1e-5).unwrap() < 1e-6);

    let constant = |g: &mut Graph, _: &BoundParams| Ok(g.constant(Tensor::scalar(2.0)));
    assert_eq!(finite_diff_check(constant, &params, 1e-5).unwrap(), 0.0);

    assert!(matches!(finite_diff_check(quad, &params, 1e-2), Err(Error::Contract(_))));
}

/// Every op against central differences on ten random shapes each.
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    type Build = fn(&mut Graph, &BoundParams, &[usize]) -> crate::Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |g, p, _| {
            let c = g.matmul(p["a"], p["b"])?;
            let w = g.mul(c, c)?;
            Ok(g.sum(w))
        }),
        ("matmul_t", |g, p, _| {
            let c = g.matmul_t(p["a"], p["bt"])?;
            let w = g.mul(c, c)?;
            Ok(g.sum(w))
        }),
        ("add_row_relu", |g, p, _| {
            let c = g.add_row(p["a"], p["row"])?;
            let r = g.relu(c);
            let w = g.mul(r, r)?;
            Ok(g.sum(w))
        }),
        ("softmax", |g, p, _| {
            let s = g.softmax_rows(p["a"])?;
            let w = g.mul(s, p["a2"])?;
            Ok(g.sum(w))
        }),
        ("log_softmax_pick", |g, p, ids| {
            let s = g.log_softmax_rows(p["a"])?;
            let picked = g.pick(s, ids)?;
            let m = g.row_mean(s);
            let a = g.sum(picked);
            let b = g.sum(m);
            let t = g.add(a, b)?;
            Ok(g.scale(t, -1.0))
        }),
        ("layer_norm", |g, p, _| {
            let y = g.layer_norm(p["a"], p["row"], p["row2"], 1e-5)?;
            let w = g.mul(y, p["a2"])?;
            Ok(g.sum(w))
        }),
        ("gather", |g, p, ids| {
            let rows = g.gather_rows(p["b"], ids)?;
            let w = g.mul(rows, rows)?;
            Ok(g.sum(w))
        }),
        ("exp_log_one_minus", |g, p, ids| {
            let s = g.softmax_rows(p["a"])?;
            let picked = g.pick(s, ids)?;
            let e = g.exp(picked);
            let shrunk = g.scale(e, 0.3);
            let l = g.log_one_minus(shrunk, 1e-9);
            let weights = (0..g.value(l).numel()).map(|i| 1.0 + i as f64).collect();
            g.weighted_sum(l, weights)
        }),
    ];
    for (name, build) in cases {
        for _ in 0..10 {
            let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
            let mut params = BTreeMap::new();
            params.insert("a".to_string(), random(&mut rng, &[m, k]));
            params.insert("a2".to_string(), random(&mut rng, &[m, k]));
            params.insert("b".to_string(), random(&mut rng, &[k, n]));
            params.insert("bt".to_string(), random(&mut rng, &[n, k]));
            params.insert("row".to_string(), random(&mut rng, &[k]));
            params.insert("row2".to_string(), random(&mut rng, &[k]));
            let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            let f = |g: &mut Graph, p: &BoundParams| build(g, p, &ids);
            let err = finite_diff_check(f, &params, 1e-5).unwrap();
            assert!(err < 1e-4, "{name} ({m}x{k}x{n}): rel error {err}");
        }
    }
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10 {
        let batch = rng.random_range(1..3);
        let heads = rng.random_range(1..3);
        let d = heads * rng.random_range(1..4);
        let causal = case % 2 == 0;
        let tq = rng.random_range(1..5);
        let tk = if causal { tq } else { rng.random_range(1..5) };
        let mut key_mask: Vec<bool> = (0..batch * tk).map(|_| rng.random_bool(0.8)).collect();
        for b in 0..batch {
            key_mask[b * tk] = true;
        }
        let mut params = BTreeMap::new();
        params.insert("q".to_string(), random(&mut rng, &[batch * tq, d]));
        params.insert("k".to_string(), random(&mut rng, &[batch * tk, d]));
        params.insert("v".to_string(), random(&mut rng, &[batch * tk, d]));
        params.insert("w".to_string(), random(&mut rng, &[batch * tq, d]));
        let layout = AttentionLayout {
            batch,
            query_len: tq,
            key_len: tk,
            heads,
            causal,
            key_mask,
        };
        let f = |g: &mut Graph, p: &BoundParams| {
            let o = g.attention(p["q"], p["k"], p["v"], layout.clone())?;
            let w = g.mul(o, p["w"])?;
            Ok(g.sum(w))
        };
        let err = finite_diff_check(f, &params, 1e-5).unwrap();
        assert!(err < 1e-4, "case {case}: rel error {err}");
    }
}

#[test]
fn attention_respects_causality_and_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = random(&mut rng, &[3, 4]);
    let k = random(&mut rng, &[3, 4]);
    let v = random(&mut rng, &[3, 4]);
    let run = |v: Tensor, mask: Vec<bool>| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v));
        let layout = AttentionLayout {
            batch: 1,
            query_len: 3,
            key_len: 3,
            heads: 2,
            causal: true,
            key_mask: mask,
        };
        let o = g.attention(qv, kv, vv, layout).unwrap();
        g.value(o).clone()
    };
    let base = run(v.clone(), vec![true; 3]);
    let mut v2 = v.clone();
    v2.data_mut()[8..12].iter_mut().for_each(|x| *x += 10.0);
    let later = run(v2.clone(), vec![true; 3]);
    assert_eq!(&base.data()[..8], &later.data()[..8]);
    assert_ne!(&base.data()[8..], &later.data()[8..]);
    let masked = run(v2, vec![true, true, false]);
    let masked_base = run(v, vec![true, true, false]);
    assert_eq!(masked.data(), masked_base.data());
}

#[test]
fn forward_passes_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[6, 8]);
    let b = random(&mut rng, &[8, 5]);
    let run = || {
        let mut g = Graph::new();
        let (av, bv) = (g.param("a", a.clone()), g.param("b", b.clone()));
        let c = g.matmul(av, bv).unwrap();
        let s = g.log_softmax_rows(c).unwrap();
        let t = g.sum(s);
        (g.value(s).clone(), g.backward(t).unwrap())
    };
    assert_eq!(run(), run());
}
