//! Finite-difference checks for every differentiable tape op. Each case
//! returns its worst relative error.

use scar_core::graph::Unary;
use scar_core::Tensor;

use super::{max_grad_error, uniform};

pub fn matmul() -> f64 {
    let a = uniform(1, &[3, 4], -2.0, 2.0);
    let b = uniform(2, &[4, 2], -2.0, 2.0);
    let w = uniform(3, &[3, 2], -2.0, 2.0);
    max_grad_error(&[a, b], |t, ids| {
        let p = t.matmul(ids[0], ids[1])?;
        // weight the output so every entry has a distinct sensitivity
        let wc = t.constant(w.clone());
        let q = t.mul(p, wc)?;
        Ok(t.sum(q))
    })
    .unwrap()
}

pub fn unary() -> f64 {
    let mut worst: f64 = 0.0;
    for (k, op) in [Unary::Sigmoid, Unary::Exp, Unary::Tanh, Unary::Relu, Unary::Log]
        .into_iter()
        .enumerate()
    {
        let (lo, hi) = if op == Unary::Log { (0.2, 2.0) } else { (-2.0, 2.0) };
        let x = uniform(10 + k as u64, &[2, 5], lo, hi);
        let w = uniform(20 + k as u64, &[2, 5], -2.0, 2.0);
        let err = max_grad_error(&[x], |t, ids| {
            let y = t.unary(op, ids[0])?;
            let wc = t.constant(w.clone());
            let z = t.mul(y, wc)?;
            Ok(t.sum(z))
        })
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

pub fn binary() -> f64 {
    let a = uniform(30, &[3, 3], -2.0, 2.0);
    let b = uniform(31, &[3, 3], -2.0, 2.0);
    let s = uniform(32, &[], -2.0, 2.0);
    max_grad_error(&[a, b, s], |t, ids| {
        let p = t.mul(ids[0], ids[1])?;
        let q = t.sub(p, ids[2])?;
        let r = t.add(ids[2], q)?;
        let r = t.mul(r, ids[2])?;
        let r = t.scale(r, 0.7);
        let r = t.add_const(r, 3.0);
        let r = t.tanh(r);
        Ok(t.mean(r))
    })
    .unwrap()
}

pub fn rows() -> f64 {
    let x = uniform(40, &[4, 3], -2.0, 2.0);
    let bias = uniform(41, &[3], -2.0, 2.0);
    let w = uniform(42, &[4], -2.0, 2.0);
    max_grad_error(&[x, bias, w], |t, ids| {
        let y = t.add_bias(ids[0], ids[1])?;
        let y = t.scale_rows(y, ids[2])?;
        let y = t.tanh(y);
        let m = t.row_means(y)?;
        let m = t.mul(m, m)?;
        Ok(t.sum(m))
    })
    .unwrap()
}

pub fn pool() -> f64 {
    let scores = uniform(50, &[2, 3], -2.0, 2.0);
    let x = uniform(51, &[6, 4], -2.0, 2.0);
    let u = uniform(52, &[2, 4], -2.0, 2.0);
    let active = [true, false, true, true, true, false];
    max_grad_error(&[scores, x, u], |t, ids| {
        let a = t.softmax_over_set(ids[0], &active)?;
        let z = t.segment_pool(a, ids[1])?;
        let zn = t.normalize_rows(z)?;
        let un = t.normalize_rows(ids[2])?;
        let ut = t.transpose(un)?;
        let logits = t.matmul(zn, ut)?;
        let logits = t.scale(logits, 1.0 / 0.3);
        t.softmax_cross_entropy(logits, &[0, 1])
    })
    .unwrap()
}

pub fn cosine_bce() -> f64 {
    let a = uniform(60, &[5], -2.0, 2.0);
    let b = uniform(61, &[5], -2.0, 2.0);
    let m1 = uniform(62, &[3, 4], -2.0, 2.0);
    let m2 = uniform(63, &[3, 4], -2.0, 2.0);
    let targets = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect())
        .unwrap();
    max_grad_error(&[a, b, m1, m2], |t, ids| {
        let c = t.cosine_sim(ids[0], ids[1])?;
        let rows = t.cosine_sim(ids[2], ids[3])?;
        let rs = t.sum(rows);
        let bce = t.bce_with_logits(ids[2], &targets)?;
        let s = t.add(c, rs)?;
        t.add(s, bce)
    })
    .unwrap()
}

pub fn reshape() -> f64 {
    let x = uniform(70, &[2, 3], -2.0, 2.0);
    let w = uniform(71, &[6], -2.0, 2.0);
    max_grad_error(&[x], |t, ids| {
        let r = t.reshape(ids[0], &[6])?;
        let wc = t.constant(w.clone());
        let r = t.mul(r, wc)?;
        let r = t.tanh(r);
        Ok(t.sum(r))
    })
    .unwrap()
}

/// A labelled check returning its worst relative error.
pub type Case = (&'static str, fn() -> f64);

/// Every case with its label.
pub const ALL: [Case; 7] = [
    ("matmul", matmul),
    ("unary", unary),
    ("binary and broadcast", binary),
    ("row-structured", rows),
    ("softmax pool and normalisation", pool),
    ("cosine and bce", cosine_bce),
    ("reshape", reshape),
];
