//! Finite-difference checks of every differentiable op.

use super::{grad_check, Graph, Group, NodeId, ParamStore, Tensor};
use crate::error::Result;
use crate::rng::Rng;

/// Builds a scalar loss from two `[3, 4]` parameters, a `[3, 4]` weight
/// tensor and a length-3 vector.
pub type OpLoss = fn(&mut Graph, NodeId, NodeId, &Tensor, &Tensor) -> NodeId;

/// One loss per differentiable op, each contracted with a random weight
/// tensor so that every output entry matters.
pub fn op_losses() -> Vec<(&'static str, OpLoss)> {
    fn contract(g: &mut Graph, y: NodeId, w: &Tensor) -> NodeId {
        let wn = g.constant(w.clone());
        let p = g.mul(y, wn).unwrap();
        g.sum(p)
    }
    vec![
        ("add", |g, a, b, w, _| {
            let y = g.add(a, b).unwrap();
            contract(g, y, w)
        }),
        ("sub", |g, a, b, w, _| {
            let y = g.sub(a, b).unwrap();
            contract(g, y, w)
        }),
        ("mul", |g, a, b, w, _| {
            let y = g.mul(a, b).unwrap();
            contract(g, y, w)
        }),
        ("tanh", |g, a, _, w, _| {
            let y = g.tanh(a);
            contract(g, y, w)
        }),
        ("leaky_relu", |g, a, _, w, _| {
            let y = g.leaky_relu(a, 0.02);
            contract(g, y, w)
        }),
        ("exp", |g, a, _, w, _| {
            let y = g.exp(a);
            contract(g, y, w)
        }),
        ("log", |g, a, _, w, _| {
            let e = g.exp(a);
            let s = g.add_scalar(e, 0.5);
            let y = g.log(s).unwrap();
            contract(g, y, w)
        }),
        ("square", |g, a, _, w, _| {
            let y = g.square(a);
            contract(g, y, w)
        }),
        ("scale_mean", |g, a, _, w, _| {
            let s = g.scale(a, -1.7);
            let y = contract(g, s, w);
            let m = g.mean(a);
            g.add(y, m).unwrap()
        }),
        ("matmul", |g, a, b, w, _| {
            let bt = g.slice_rows(b, 0, 3).unwrap();
            let bt = g.slice_cols(bt, 0, 3).unwrap();
            let y = g.matmul(bt, a).unwrap();
            contract(g, y, w)
        }),
        ("linear_bias", |g, a, b, w, bias| {
            let bn = g.constant(bias.clone());
            let y = g.linear(a, b, bn).unwrap();
            let wn = g.constant(w.slice_rows(0, 3));
            let wn = g.slice_cols(wn, 0, 3).unwrap();
            let p = g.mul(y, wn).unwrap();
            g.sum(p)
        }),
        ("row_bias", |g, a, b, w, _| {
            let row = g.slice_rows(b, 0, 1).unwrap();
            let bias = g.scale(row, 1.0);
            let flat = g.concat_cols(&[bias]).unwrap();
            let y = g.add_row_bias(a, flat).unwrap();
            contract(g, y, w)
        }),
        ("softmax_rows", |g, a, _, w, _| {
            let y = g.softmax_rows(a).unwrap();
            contract(g, y, w)
        }),
        ("log_softmax_rows", |g, a, _, w, _| {
            let y = g.log_softmax_rows(a).unwrap();
            contract(g, y, w)
        }),
        ("logsumexp_cols", |g, a, _, w, _| {
            let y = g.logsumexp_cols(a, &[true, false, true, true]).unwrap();
            let wn = g.constant(w.slice_rows(0, 3));
            let wn = g.slice_cols(wn, 0, 1).unwrap();
            let p = g.mul(y, wn).unwrap();
            g.sum(p)
        }),
        ("concat_rows_cols", |g, a, b, w, _| {
            let c = g.concat_cols(&[a, b]).unwrap();
            let r = g.concat_rows(&[c, c]).unwrap();
            let y = g.slice_rows(r, 2, 5).unwrap();
            let y = g.slice_cols(y, 2, 6).unwrap();
            contract(g, y, w)
        }),
        ("select", |g, a, b, w, _| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
            let y = g.select(&mask, a, b).unwrap();
            contract(g, y, w)
        }),
        ("clamp", |g, a, _, w, _| {
            let y = g.clamp(a, -0.5, 0.7);
            contract(g, y, w)
        }),
        ("spectral_norm", |g, a, _, w, bias| {
            let mut u = bias.clone();
            let n = u.norm_sq().sqrt();
            u.data_mut().iter_mut().for_each(|x| *x /= n);
            let y = g.spectral_norm(a, &u).unwrap();
            contract(g, y, w)
        }),
    ]
}

/// Worst relative error of one named check.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_error: f64,
}

/// Runs every op loss on `seeds` random draws and keeps the worst error
/// per op.
pub fn op_suite(seeds: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for (name, build) in op_losses() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = Rng::new(1000 + seed);
            let mut store = ParamStore::new();
            let a = store.add("a", Group::Other, rng.normal_tensor(&[3, 4]))?;
            let b = store.add("b", Group::Other, rng.normal_tensor(&[3, 4]))?;
            let w = rng.normal_tensor(&[3, 4]);
            let bias = rng.normal_tensor(&[3]);
            let fd = grad_check(&mut store, &[Group::Other], 1e-5, |g, s| {
                let an = g.param(s, a);
                let bn = g.param(s, b);
                Ok(build(g, an, bn, &w, &bias))
            })?;
            worst = worst.max(fd.max_rel_error);
        }
        out.push(SuiteResult {
            name: name.to_string(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
