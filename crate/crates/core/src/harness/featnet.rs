//! Training the bars8 feature network used by `gali_pt` and the feature
//! metrics.

use std::path::Path;

use super::checkpoint::Checkpoint;
use super::train::stream;
use crate::autodiff::{Graph, Group, ParamStore, Tensor};
use crate::datasets::Bars8;
use crate::error::{Error, Result};
use crate::nets::{FeatureNet, FeatureNetConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;

pub const MIN_ACCURACY: f64 = 0.95;

#[derive(Clone, Debug)]
pub struct FeatnetReport {
    /// Accuracy on a fixed labelled set drawn from the training
    /// distribution.
    pub accuracy: f64,
    pub steps: usize,
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (r, &l) in labels.iter().enumerate() {
        t.set(r, l, 1.0);
    }
    t
}

pub fn accuracy(net: &FeatureNet, store: &ParamStore, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::inference();
    let xn = g.constant(x.clone());
    let l = net.logits(&mut g, store, xn)?;
    let logits = g.value(l);
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == labels[r]
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Trains with Adam (lr 1e-3, batch 128) on cross-entropy until the
/// accuracy check (every 50 steps, 2000 samples) reaches 0.99 or
/// `max_steps` is spent. Fails below [`MIN_ACCURACY`].
pub fn train_featnet(seed: u64, max_steps: usize) -> Result<(ParamStore, FeatnetReport)> {
    let cfg = FeatureNetConfig::bars8();
    let mut store = ParamStore::new();
    let net = FeatureNet::new(&mut store, &cfg, false, &mut Rng::stream(seed, stream::INIT))?;
    let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, 1e-3, &[Group::Other])?;
    let mut data = Rng::stream(seed, stream::DATA);
    let (hx, hl) = Bars8.sample(&mut Rng::stream(seed, stream::EVAL), 2000);
    let mut steps = 0;
    while steps < max_steps {
        if steps % 50 == 0 && accuracy(&net, &store, &hx, &hl)? >= 0.99 {
            break;
        }
        let (x, labels) = Bars8.sample(&mut data, 128);
        store.zero_grad();
        let mut g = Graph::new(&[Group::Other]);
        let xn = g.constant(x);
        let logits = net.logits(&mut g, &store, xn)?;
        let lp = g.log_softmax_rows(logits)?;
        let oh = g.constant(one_hot(&labels, cfg.n_labels));
        let picked = g.mul(lp, oh)?;
        let total = g.sum(picked);
        let loss = g.scale(total, -1.0 / labels.len() as f64);
        g.backward(loss, &mut store)?;
        opt.step(&mut store);
        steps += 1;
    }
    let acc = accuracy(&net, &store, &hx, &hl)?;
    if acc < MIN_ACCURACY {
        return Err(Error::Numerical(format!(
            "feature network reached only {acc:.3} accuracy after {steps} steps"
        )));
    }
    Ok((store, FeatnetReport { accuracy: acc, steps }))
}

pub fn run_featnet(seed: u64, max_steps: usize, out: &Path) -> Result<FeatnetReport> {
    let (store, report) = train_featnet(seed, max_steps)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Checkpoint::from_store(&store).save(out)?;
    Ok(report)
}
