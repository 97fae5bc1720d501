//! Reconstruction, representation and sample-quality metrics.

use crate::autodiff::{ParamStore, Tensor};
use crate::chains::{mask_bits, ImageGeometry, Mask};
use crate::error::{Error, Result};
use crate::nets::FeatureNet;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || !a.is_matrix() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean of `(x − recon)²` over batch and pixels.
pub fn pixel_mse(x: &Tensor, recon: &Tensor) -> Result<f64> {
    same_shape("pixel_mse", x, recon)?;
    Ok(x.data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64)
}

/// Mean squared difference of frozen feature-network outputs.
pub fn feature_mse(net: &FeatureNet, store: &ParamStore, x: &Tensor, recon: &Tensor) -> Result<f64> {
    same_shape("feature_mse", x, recon)?;
    let fa = net.eval_features(store, x)?;
    let fb = net.eval_features(store, recon)?;
    pixel_mse(&fa, &fb)
}

/// Squared error averaged over masked pixels only.
pub fn inpaint_mse(x: &Tensor, inpainted: &Tensor, masks: &[Mask], geom: ImageGeometry) -> Result<f64> {
    same_shape("inpaint_mse", x, inpainted)?;
    let bits = mask_bits(masks, x.rows(), geom)?;
    if bits.len() != x.len() {
        return Err(Error::shape("inpaint_mse", "geometry does not match the images"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((a, b), inside) in x.data().iter().zip(inpainted.data()).zip(bits) {
        if inside {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Feature-space inpainting error over whole images.
pub fn inpaint_feature_mse(net: &FeatureNet, store: &ParamStore, x: &Tensor, inpainted: &Tensor) -> Result<f64> {
    feature_mse(net, store, x, inpainted)
}

/// Settings of the linear softmax probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Leading fraction of the rows used for training.
    pub train_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_fraction: 0.75,
            epochs: 300,
            lr: 0.5,
        }
    }
}

/// Trained probe weights (`[classes, f+1]`, bias last) and test error.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub weights: Vec<f64>,
    pub error: f64,
}

/// Linear softmax classifier trained by full-batch gradient descent from
/// zero on standardised features; returns the test-split error rate.
pub fn linear_probe(features: &Tensor, labels: &[usize], cfg: ProbeConfig) -> Result<ProbeResult> {
    if !features.is_matrix() || features.rows() != labels.len() {
        return Err(Error::shape("linear_probe", "one label per feature row"));
    }
    let n = labels.len();
    let n_train = ((n as f64) * cfg.train_fraction).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Config(format!("probe split leaves no train or test rows ({n_train}/{n})")));
    }
    let f = features.cols();
    let k = labels.iter().max().map_or(0, |m| m + 1).max(2);
    // Standardise with train statistics.
    let mut mu = vec![0.0; f];
    let mut sd = vec![0.0; f];
    for r in 0..n_train {
        for (m, v) in mu.iter_mut().zip(features.row(r)) {
            *m += v / n_train as f64;
        }
    }
    for r in 0..n_train {
        for ((s, v), m) in sd.iter_mut().zip(features.row(r)).zip(&mu) {
            *s += (v - m) * (v - m) / n_train as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    let row = |r: usize| -> Vec<f64> {
        let mut v: Vec<f64> = features.row(r).iter().zip(&mu).zip(&sd).map(|((x, m), s)| (x - m) / s).collect();
        v.push(1.0);
        v
    };
    let train: Vec<Vec<f64>> = (0..n_train).map(row).collect();
    let width = f + 1;
    let mut w = vec![0.0; k * width];
    let mut grad = vec![0.0; k * width];
    let mut probs = vec![0.0; k];
    for _ in 0..cfg.epochs {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (xr, &y) in train.iter().zip(labels) {
            softmax_into(&w, xr, &mut probs);
            for c in 0..k {
                let d = probs[c] - f64::from(u8::from(c == y));
                for (g, xv) in grad[c * width..(c + 1) * width].iter_mut().zip(xr) {
                    *g += d * xv;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.lr * gi / n_train as f64;
        }
    }
    let mut wrong = 0;
    for r in n_train..n {
        softmax_into(&w, &row(r), &mut probs);
        let pred = argmax(&probs);
        if pred != labels[r] {
            wrong += 1;
        }
    }
    Ok(ProbeResult {
        weights: w,
        error: wrong as f64 / (n - n_train) as f64,
    })
}

fn softmax_into(w: &[f64], x: &[f64], out: &mut [f64]) {
    let width = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = w[c * width..(c + 1) * width].iter().zip(x).map(|(a, b)| a * b).sum();
    }
    let m = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// First index of the maximum (ties resolve to the lowest class).
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, f) = (x.rows(), x.cols());
    let mut mu = vec![0.0; f];
    for r in 0..n {
        mu.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; f];
    for r in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mu) {
            *s += (v - m) * (v - m);
        }
    }
    (mu, var.into_iter().map(|v| (v / n as f64).sqrt()).collect())
}

/// Diagonal-Gaussian Fréchet distance `Σ_k (μ_a−μ_b)² + (σ_a−σ_b)²` with
/// population standard deviations.
pub fn frechet_toy(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::shape("frechet_toy", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ma, sa) = moments(a);
    let (mb, sb) = moments(b);
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
        + sa.iter().zip(&sb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

fn mean_pair_dist(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            s += a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖` over all pairs (diagonal included).
pub fn energy_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if !a.is_matrix() || !b.is_matrix() || a.cols() != b.cols() {
        return Err(Error::shape("energy_distance", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let v = 2.0 * mean_pair_dist(a, b) - mean_pair_dist(a, a) - mean_pair_dist(b, b);
    // Tiny negative values are rounding.
    Ok(v.max(0.0))
}

/// One row of `metrics.csv`. Metrics that do not apply are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_d: Option<f64>,
    pub loss_ge: Option<f64>,
    pub pixel_mse: Option<f64>,
    pub feature_mse: Option<f64>,
    pub inpaint_pixel_mse: Option<f64>,
    pub frechet_toy: Option<f64>,
    pub probe_error: Option<f64>,
    pub energy_dist: Option<f64>,
    pub grad_ratio: Option<f64>,
    pub sigma_t: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 11] = [
        "step",
        "loss_d",
        "loss_ge",
        "pixel_mse",
        "feature_mse",
        "inpaint_pixel_mse",
        "frechet_toy",
        "probe_error",
        "energy_dist",
        "grad_ratio",
        "sigma_t",
    ];

    pub fn fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        vec![
            self.step.to_string(),
            f(self.loss_d),
            f(self.loss_ge),
            f(self.pixel_mse),
            f(self.feature_mse),
            f(self.inpaint_pixel_mse),
            f(self.frechet_toy),
            f(self.probe_error),
            f(self.energy_dist),
            f(self.grad_ratio),
            f(self.sigma_t),
        ]
    }

    /// Present values are finite and the error metrics non-negative.
    pub fn check(&self) -> Result<()> {
        let all = [
            self.loss_d,
            self.loss_ge,
            self.pixel_mse,
            self.feature_mse,
            self.inpaint_pixel_mse,
            self.frechet_toy,
            self.probe_error,
            self.energy_dist,
            self.grad_ratio,
            self.sigma_t,
        ];
        if all.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite metric at step {}", self.step)));
        }
        let nonneg = [self.pixel_mse, self.feature_mse, self.inpaint_pixel_mse, self.frechet_toy, self.energy_dist];
        if nonneg.iter().flatten().any(|&v| v < 0.0) {
            return Err(Error::Numerical(format!("negative error metric at step {}", self.step)));
        }
        Ok(())
    }
}
