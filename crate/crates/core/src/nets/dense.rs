use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{spectral_scale, Graph, Group, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Slope of the leaky ReLU used in every hidden layer.
pub const LEAKY_SLOPE: f64 = 0.02;

/// Fully connected layer `y = x·Wᵀ + b`, optionally spectrally normalised.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    /// Power-iteration state; present iff spectral normalisation is on.
    pub sn_u: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Weights `N(0, 1/fan_in)`, zero bias, random unit `u`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: Group,
        in_dim: usize,
        out_dim: usize,
        spectral: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = rng.normal_tensor(&[out_dim, in_dim]).scale(std);
        let w = store.add(format!("{name}.w"), group, w)?;
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[out_dim]))?;
        let sn_u = if spectral {
            let mut u = rng.normal_tensor(&[out_dim]);
            let n = u.norm_sq().sqrt().max(1e-12);
            u.data_mut().iter_mut().for_each(|x| *x /= n);
            Some(store.add(format!("{name}.sn_u"), Group::Buffer, u)?)
        } else {
            None
        };
        Ok(DenseLayer {
            w,
            b,
            sn_u,
            in_dim,
            out_dim,
        })
    }

    pub fn sn_enabled(&self) -> bool {
        self.sn_u.is_some()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut w = g.param(store, self.w);
        if let Some(u) = self.sn_u {
            w = g.spectral_norm(w, store.value(u))?;
        }
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    /// Runs `n_iters` power iterations on the stored `u`. No-op without
    /// spectral normalisation.
    pub fn power_iterate(&self, store: &mut ParamStore, n_iters: usize) {
        let Some(uid) = self.sn_u else { return };
        let w = store.value(self.w).clone();
        let mut u = store.value(uid).data().to_vec();
        for _ in 0..n_iters {
            let mut v = vec![0.0; w.cols()];
            for (i, ui) in u.iter().enumerate() {
                for (vj, wij) in v.iter_mut().zip(w.row(i)) {
                    *vj += wij * ui;
                }
            }
            normalize(&mut v);
            for (i, ui) in u.iter_mut().enumerate() {
                *ui = w.row(i).iter().zip(&v).map(|(a, b)| a * b).sum();
            }
            if !normalize(&mut u) {
                // W v = 0: keep the previous direction.
                u.copy_from_slice(store.value(uid).data());
                break;
            }
        }
        store.value_mut(uid).data_mut().copy_from_slice(&u);
    }

    /// `n_iters` power iterations from the stored `u`, keeping every iterate
    /// and replacing `u` by the best unit vector in their span (Rayleigh–Ritz
    /// on `W Wᵀ`). Never worse than the last plain power iterate.
    pub fn ritz_iterate(&self, store: &mut ParamStore, n_iters: usize) {
        let Some(uid) = self.sn_u else { return };
        let w = store.value(self.w).clone();
        let (r, c) = (w.rows(), w.cols());
        let wt_times = |q: &[f64]| {
            let mut out = vec![0.0; c];
            for (i, qi) in q.iter().enumerate() {
                for (o, wij) in out.iter_mut().zip(w.row(i)) {
                    *o += wij * qi;
                }
            }
            out
        };
        let w_times = |v: &[f64]| -> Vec<f64> {
            (0..r)
                .map(|i| w.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mut images: Vec<Vec<f64>> = Vec::new();
        let mut q = store.value(uid).data().to_vec();
        if !normalize(&mut q) {
            return;
        }
        for step in 0..=n_iters {
            let wq = wt_times(&q);
            let next = w_times(&wq);
            basis.push(q);
            images.push(wq);
            if step == n_iters || basis.len() == r {
                break;
            }
            let mut cand = next;
            // Two passes of Gram–Schmidt.
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = cand.iter().zip(b).map(|(x, y)| x * y).sum();
                    cand.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let scale = images[0].iter().map(|x| x * x).sum::<f64>().max(1e-300);
            if cand.iter().map(|x| x * x).sum::<f64>() < 1e-24 * scale || !normalize(&mut cand) {
                break;
            }
            q = cand;
        }
        // Projected operator T = (WᵀQ)ᵀ (WᵀQ).
        let k = basis.len();
        let t = DMatrix::from_fn(k, k, |i, j| {
            images[i].iter().zip(&images[j]).map(|(a, b)| a * b).sum::<f64>()
        });
        let eig = SymmetricEigen::new(t);
        let top = eig.eigenvalues.imax();
        let coeffs = eig.eigenvectors.column(top);
        let mut u = vec![0.0; r];
        for (b, &a) in basis.iter().zip(coeffs.iter()) {
            u.iter_mut().zip(b).for_each(|(x, y)| *x += a * y);
        }
        if normalize(&mut u) {
            store.value_mut(uid).data_mut().copy_from_slice(&u);
        }
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-300 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Runs `n_iters` power iterations on `layer` and returns the effective
/// weight `W/σ̂` together with the estimate `σ̂`. A zero matrix yields
/// `σ̂ = 1e-12` and a zero weight.
pub fn spectral_normalize(
    layer: &DenseLayer,
    store: &mut ParamStore,
    n_iters: usize,
) -> Result<(Tensor, f64)> {
    if n_iters == 0 {
        return Err(Error::Contract("spectral_normalize needs n_iters >= 1".into()));
    }
    let uid = layer
        .sn_u
        .ok_or_else(|| Error::Config("layer has no spectral normalisation state".into()))?;
    layer.ritz_iterate(store, n_iters);
    let (wn, _, sigma, _) = spectral_scale(store.value(layer.w), store.value(uid).data());
    Ok((wn, sigma))
}

/// Chain of dense layers with a leaky ReLU after each one.
pub(crate) fn leaky_stack(
    layers: &[DenseLayer],
    g: &mut Graph,
    store: &ParamStore,
    mut x: NodeId,
) -> Result<NodeId> {
    for l in layers {
        let y = l.forward(g, store, x)?;
        x = g.leaky_relu(y, LEAKY_SLOPE);
    }
    Ok(x)
}

/// Builds consecutive layers `dims[0] → dims[1] → …`.
pub(crate) fn build_stack(
    store: &mut ParamStore,
    prefix: &str,
    group: Group,
    dims: &[usize],
    spectral: bool,
    rng: &mut Rng,
) -> Result<Vec<DenseLayer>> {
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| DenseLayer::new(store, &format!("{prefix}{i}"), group, w[0], w[1], spectral, rng))
        .collect()
}
