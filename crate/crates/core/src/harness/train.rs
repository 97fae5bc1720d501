//! Training loop, evaluation and the artifacts a run leaves on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::pgm::write_montage;
use crate::autodiff::{Graph, Group, ParamStore, Tensor};
use crate::chains::{apply_mask, mix, sample_mask, ChainKind, Mask};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{
    energy_distance, feature_mse, frechet_toy, inpaint_feature_mse, inpaint_mse, linear_probe, pixel_mse, MetricsRow,
    ProbeConfig,
};
use crate::nets::{ArchConfig, FeatureNet, FeatureNetConfig, ModelBundle, NoiseSchedule};
use crate::objectives::{d_objective, ge_objective, ChainSpec};
use crate::optim::Optimizer;
use crate::rng::Rng;

/// Independent random streams derived from the run seed.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const DATA: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const EVAL: u64 = 3;
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.gali";
pub const REPORT_FILE: &str = "report.txt";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";

/// A trained feature network with its own parameter store.
#[derive(Clone, Debug)]
pub struct LoadedFeatnet {
    pub cfg: FeatureNetConfig,
    pub net: FeatureNet,
    pub store: ParamStore,
}

impl LoadedFeatnet {
    pub fn from_checkpoint(ck: &Checkpoint, cfg: FeatureNetConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = FeatureNet::new(&mut store, &cfg, true, &mut Rng::new(0))?;
        ck.apply(&mut store)?;
        Ok(LoadedFeatnet { cfg, net, store })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, FeatureNetConfig::bars8())
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.net.eval_features(&self.store, x)
    }
}

pub fn arch_for(cfg: &TrainConfig) -> ArchConfig {
    let mut arch = ArchConfig::new(cfg.dataset.d_x(), cfg.d_z, cfg.chain.slot_kinds(), cfg.chain.n_classes())
        .with_width(cfg.width);
    arch.spectral_norm = cfg.spectral_norm;
    if cfg.chain == ChainKind::GaliPt {
        arch.feature_dim = Some(FeatureNetConfig::bars8().feature_dim());
    }
    arch
}

/// Fresh bundle for `cfg`; `featnet` supplies the frozen feature network
/// values when the chain needs one.
pub fn build_bundle(cfg: &TrainConfig, featnet: Option<&ParamStore>) -> Result<ModelBundle> {
    let mut b = ModelBundle::new(arch_for(cfg), &mut Rng::stream(cfg.seed, stream::INIT))?;
    if cfg.chain == ChainKind::GaliPt {
        let src = featnet.ok_or_else(|| Error::Config("chain gali_pt needs a feature network".into()))?;
        b.attach_featnet(&FeatureNetConfig::bars8(), src)?;
    }
    Ok(b)
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    Checkpoint::from_store(&bundle.store).save(path)
}

/// Rebuilds the bundle described by `cfg` and fills it from `path`.
pub fn load_bundle(cfg: &TrainConfig, path: &Path) -> Result<ModelBundle> {
    let ck = Checkpoint::load(path)?;
    let src = ck.to_store()?;
    let mut b = build_bundle(cfg, Some(&src))?;
    ck.apply(&mut b.store)?;
    Ok(b)
}

fn load_eval_featnet(cfg: &TrainConfig) -> Result<Option<LoadedFeatnet>> {
    match &cfg.featnet {
        Some(p) if cfg.dataset == Dataset::Bars8 => LoadedFeatnet::load(p).map(Some).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("feature network {}: {m}", p.display())),
            other => other,
        }),
        _ => Ok(None),
    }
}

/// Everything [`evaluate`] measures; `row` carries the CSV subset.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub row: MetricsRow,
    pub inpaint_feature_mse: Option<f64>,
}

/// Held-out evaluation on data drawn from the evaluation stream, so every
/// evaluation of a run (and of runs sharing a seed) sees the same samples.
/// Reconstructions and probe features use the encoder mean.
pub fn evaluate(bundle: &ModelBundle, cfg: &TrainConfig, featnet: Option<&LoadedFeatnet>) -> Result<Evaluation> {
    let mut rng = Rng::stream(cfg.seed, stream::EVAL);
    let n = cfg.eval_size;
    let (x, labels) = cfg.dataset.sample(&mut rng, n);
    let z = rng.normal_tensor(&[n, cfg.d_z]);
    let store = &bundle.store;

    let mut g = Graph::inference();
    let xn = g.constant(x.clone());
    let h = bundle.encoder.hidden(&mut g, store, xn)?;
    let (mu, _) = bundle.encoder.moments(&mut g, store, xn)?;
    let rn = bundle.generator.generate(&mut g, store, mu)?;
    let zn = g.constant(z);
    let gn = bundle.generator.generate(&mut g, store, zn)?;
    let recon = g.value(rn).clone();
    let generated = g.value(gn).clone();
    let probe_feats = Tensor::concat_cols(&[g.value(h), g.value(mu)])?;

    let mut ev = Evaluation::default();
    ev.row.pixel_mse = Some(pixel_mse(&x, &recon)?);
    ev.row.probe_error = Some(linear_probe(&probe_feats, &labels, ProbeConfig::default())?.error);
    match cfg.dataset {
        Dataset::Grid2d(_) => {
            ev.row.frechet_toy = Some(frechet_toy(&x, &generated)?);
            ev.row.energy_dist = Some(energy_distance(&x, &generated)?);
        }
        Dataset::Bars8 => {
            ev.row.frechet_toy = Some(match featnet {
                Some(f) => frechet_toy(&f.features(&x)?, &f.features(&generated)?)?,
                None => frechet_toy(&x, &generated)?,
            });
        }
    }
    if let Some(f) = featnet {
        ev.row.feature_mse = Some(feature_mse(&f.net, &f.store, &x, &recon)?);
    }
    if let Some(geom) = cfg.dataset.geometry() {
        let masks: Vec<Mask> = (0..n).map(|_| sample_mask(geom.side, &mut rng)).collect();
        let inp = inpaint(bundle, &x, &masks, cfg)?;
        ev.row.inpaint_pixel_mse = Some(inpaint_mse(&x, &inp.inpainted, &masks, geom)?);
        if let Some(f) = featnet {
            ev.inpaint_feature_mse = Some(inpaint_feature_mse(&f.net, &f.store, &x, &inp.inpainted)?);
        }
    }
    Ok(ev)
}

/// Masked inputs and their inpainted versions.
pub struct Inpainting {
    pub masked: Tensor,
    /// Reconstruction of the masked input inside the mask, original outside.
    pub inpainted: Tensor,
}

pub fn inpaint(bundle: &ModelBundle, x: &Tensor, masks: &[Mask], cfg: &TrainConfig) -> Result<Inpainting> {
    let geom = cfg
        .dataset
        .geometry()
        .ok_or_else(|| Error::Config("inpainting needs an image dataset".into()))?;
    let masked = apply_mask(x, masks, geom)?;
    let mut g = Graph::inference();
    let mn = g.constant(masked.clone());
    let (mu, _) = bundle.encoder.moments(&mut g, &bundle.store, mn)?;
    let rn = bundle.generator.generate(&mut g, &bundle.store, mu)?;
    let inpainted = mix(x, g.value(rn), masks, geom)?;
    Ok(Inpainting { masked, inpainted })
}

/// Losses and gradient norms of one training step.
#[derive(Clone, Copy, Debug)]
pub struct StepStats {
    pub loss_d: f64,
    pub loss_ge: f64,
    pub grad_norm_d: f64,
    pub grad_norm_ge: f64,
    pub sigma: f64,
}

impl StepStats {
    /// GE gradient norm over the last discriminator gradient norm.
    pub fn grad_ratio(&self) -> f64 {
        self.grad_norm_ge / self.grad_norm_d
    }
}

/// Model, optimisers and random streams of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    pub featnet: Option<LoadedFeatnet>,
    pub step: u64,
    opt_d: Optimizer,
    opt_ge: Optimizer,
    data_rng: Rng,
    noise_rng: Rng,
    schedule: NoiseSchedule,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let featnet = load_eval_featnet(&cfg)?;
        let bundle = build_bundle(&cfg, featnet.as_ref().map(|f| &f.store))?;
        let opt_d = Optimizer::new(cfg.optimizer, cfg.lr, &[Group::Discriminator])?;
        let opt_ge = Optimizer::new(cfg.optimizer, cfg.lr, &[Group::Encoder, Group::Generator])?;
        let schedule = NoiseSchedule::new(cfg.sigma0, cfg.tau())?;
        Ok(Trainer {
            data_rng: Rng::stream(cfg.seed, stream::DATA),
            noise_rng: Rng::stream(cfg.seed, stream::NOISE),
            cfg,
            bundle,
            featnet,
            step: 0,
            opt_d,
            opt_ge,
            schedule,
        })
    }

    fn chain_spec(&self) -> ChainSpec {
        ChainSpec {
            kind: self.cfg.chain,
            pt_class4: self.cfg.pt_class4,
            geometry: self.cfg.dataset.geometry(),
        }
    }

    fn fresh_batch(&mut self) -> (Tensor, Tensor) {
        let (x, _) = self.cfg.dataset.sample(&mut self.data_rng, self.cfg.batch);
        let z = self.data_rng.normal_tensor(&[self.cfg.batch, self.cfg.d_z]);
        (x, z)
    }

    /// `n_dis` discriminator updates, each on a fresh batch after one power
    /// iteration, then one generator-encoder update.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let sigma = self.schedule.sigma(self.step);
        let spec = self.chain_spec();
        let (mut loss_d, mut grad_norm_d) = (f64::NAN, f64::NAN);
        for _ in 0..self.cfg.n_dis {
            self.bundle.disc.power_iterate(&mut self.bundle.store, 1);
            let (x, z) = self.fresh_batch();
            self.bundle.store.zero_grad();
            let mut g = Graph::new(&[Group::Discriminator]);
            let (xn, zn) = (g.constant(x), g.constant(z));
            let loss = d_objective(&mut g, &self.bundle, spec, xn, zn, sigma, &mut self.noise_rng)?;
            loss_d = g.value(loss).item();
            self.guard("loss_d", loss_d)?;
            g.backward(loss, &mut self.bundle.store)?;
            grad_norm_d = self.bundle.store.grad_norm(&[Group::Discriminator]);
            self.opt_d.step(&mut self.bundle.store);
        }
        let (x, z) = self.fresh_batch();
        self.bundle.store.zero_grad();
        let mut g = Graph::new(&[Group::Encoder, Group::Generator]);
        let (xn, zn) = (g.constant(x), g.constant(z));
        let loss = ge_objective(&mut g, &self.bundle, spec, self.cfg.objective, xn, zn, sigma, &mut self.noise_rng)?;
        let loss_ge = g.value(loss).item();
        self.guard("loss_ge", loss_ge)?;
        g.backward(loss, &mut self.bundle.store)?;
        let grad_norm_ge = self.bundle.store.grad_norm(&[Group::Encoder, Group::Generator]);
        self.opt_ge.step(&mut self.bundle.store);
        self.bundle.store.zero_grad();
        self.step += 1;
        Ok(StepStats {
            loss_d,
            loss_ge,
            grad_norm_d,
            grad_norm_ge,
            sigma,
        })
    }

    fn guard(&self, what: &str, v: f64) -> Result<()> {
        if v.is_finite() {
            return Ok(());
        }
        let path = self.cfg.out_dir.join(NAN_DUMP_FILE);
        let mut s = format!("step = {}\n{what} = {v}\n", self.step);
        for (_, p) in self.bundle.store.iter() {
            let _ = writeln!(
                s,
                "{} finite={} norm={:.6e} grad_norm={:.6e}",
                p.name,
                p.value.all_finite(),
                p.value.norm_sq().sqrt(),
                p.grad.norm_sq().sqrt()
            );
        }
        let _ = fs::create_dir_all(&self.cfg.out_dir).and_then(|_| fs::write(&path, s));
        Err(Error::Numerical(format!(
            "{what} is {v} at step {}; diagnostics in {}",
            self.step,
            path.display()
        )))
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate(&self.bundle, &self.cfg, self.featnet.as_ref())
    }
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub last: Evaluation,
    pub out_dir: PathBuf,
}

/// Trains for `cfg.steps` steps, writing `metrics.csv` (a row after step
/// `t` whenever `t % eval_every == 0`, and after the last step),
/// `model.gali`, `report.txt` and, for image data, sample montages.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut tr = Trainer::new(cfg.clone())?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut csv = csv::Writer::from_path(cfg.out_dir.join(METRICS_FILE))?;
    csv.write_record(MetricsRow::HEADER)?;
    let mut rows = Vec::new();
    let mut last = Evaluation::default();
    for t in 0..cfg.steps {
        let stats = tr.train_step()?;
        if t % cfg.eval_every == 0 || t + 1 == cfg.steps {
            let mut ev = tr.evaluate()?;
            ev.row.step = t;
            ev.row.loss_d = Some(stats.loss_d);
            ev.row.loss_ge = Some(stats.loss_ge);
            ev.row.grad_ratio = Some(stats.grad_ratio());
            ev.row.sigma_t = Some(stats.sigma);
            ev.row.check()?;
            csv.write_record(ev.row.fields())?;
            csv.flush()?;
            rows.push(ev.row.clone());
            last = ev;
        }
    }
    save_bundle(&tr.bundle, &cfg.out_dir.join(MODEL_FILE))?;
    fs::write(cfg.out_dir.join(REPORT_FILE), report_text(cfg, &last))?;
    if cfg.dataset == Dataset::Bars8 {
        write_sample_images(&tr.bundle, cfg)?;
    }
    Ok(TrainOutcome {
        rows,
        last,
        out_dir: cfg.out_dir.clone(),
    })
}

pub fn report_text(cfg: &TrainConfig, ev: &Evaluation) -> String {
    let mut s = String::from("# configuration\n");
    s.push_str(&cfg.to_text());
    s.push_str("\n# final metrics\n");
    for (k, v) in MetricsRow::HEADER.iter().zip(ev.row.fields()) {
        let _ = writeln!(s, "{k} = {v}");
    }
    let f = ev.inpaint_feature_mse.map(|v| format!("{v:.9e}")).unwrap_or_default();
    let _ = writeln!(s, "inpaint_feature_mse = {f}");
    s
}

fn write_sample_images(bundle: &ModelBundle, cfg: &TrainConfig) -> Result<()> {
    let side = cfg.dataset.geometry().expect("image dataset").side;
    let mut rng = Rng::stream(cfg.seed, stream::EVAL);
    let (x, _) = cfg.dataset.sample(&mut rng, 8);
    let z = rng.normal_tensor(&[64, cfg.d_z]);
    let mut g = Graph::inference();
    let zn = g.constant(z);
    let gn = bundle.generator.generate(&mut g, &bundle.store, zn)?;
    let samples = g.value(gn).clone();
    let rows: Vec<&[f64]> = (0..64).map(|r| samples.row(r)).collect();
    write_montage(&cfg.out_dir.join("samples.pgm"), &rows, side, 8)?;
    let xn = g.constant(x.clone());
    let (mu, _) = bundle.encoder.moments(&mut g, &bundle.store, xn)?;
    let rn = bundle.generator.generate(&mut g, &bundle.store, mu)?;
    let recon = g.value(rn).clone();
    let pairs: Vec<&[f64]> = (0..8).map(|r| x.row(r)).chain((0..8).map(|r| recon.row(r))).collect();
    write_montage(&cfg.out_dir.join("recon.pgm"), &pairs, side, 8)
}

/// Re-evaluates a checkpoint on fresh data.
pub fn run_eval(ckpt: &Path, cfg: &TrainConfig) -> Result<Evaluation> {
    let bundle = load_bundle(cfg, ckpt)?;
    let featnet = load_eval_featnet(cfg)?;
    let mut ev = evaluate(&bundle, cfg, featnet.as_ref())?;
    ev.row.step = cfg.steps.saturating_sub(1);
    ev.row.check()?;
    Ok(ev)
}

#[derive(Clone, Debug)]
pub struct InpaintReport {
    pub pixel_mse: f64,
    pub feature_mse: Option<f64>,
    pub triptych: PathBuf,
}

/// Inpaints 16 held-out images under random masks and writes
/// `triptych.pgm` (original, masked and inpainted rows) to `out_dir`.
/// The errors are measured over `eval_size` images.
pub fn run_inpaint(ckpt: &Path, cfg: &TrainConfig, out_dir: &Path) -> Result<InpaintReport> {
    let geom = cfg
        .dataset
        .geometry()
        .ok_or_else(|| Error::Config("inpaint needs dataset bars8".into()))?;
    let bundle = load_bundle(cfg, ckpt)?;
    let featnet = load_eval_featnet(cfg)?;
    let ev = evaluate(&bundle, cfg, featnet.as_ref())?;
    let mut rng = Rng::stream(cfg.seed, stream::EVAL);
    let (x, _) = cfg.dataset.sample(&mut rng, 16);
    let masks: Vec<Mask> = (0..16).map(|_| sample_mask(geom.side, &mut rng)).collect();
    let inp = inpaint(&bundle, &x, &masks, cfg)?;
    let images: Vec<&[f64]> = (0..16)
        .map(|r| x.row(r))
        .chain((0..16).map(|r| inp.masked.row(r)))
        .chain((0..16).map(|r| inp.inpainted.row(r)))
        .collect();
    fs::create_dir_all(out_dir)?;
    let triptych = out_dir.join("triptych.pgm");
    write_montage(&triptych, &images, geom.side, 16)?;
    Ok(InpaintReport {
        pixel_mse: ev.row.inpaint_pixel_mse.expect("image dataset"),
        feature_mse: ev.inpaint_feature_mse,
        triptych,
    })
}
