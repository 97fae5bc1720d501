//! Encoder, generator, multi-class discriminator and frozen feature
//! network, all as small MLPs.

mod dense;

pub use dense::{spectral_normalize, DenseLayer, LEAKY_SLOPE};

use dense::{build_stack, leaky_stack};

use crate::autodiff::{Graph, Group, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Bounds applied to the encoder's log-variance before exponentiation.
pub const LOGVAR_MIN: f64 = -60.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// What a tuple slot carries; selects the discriminator trunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Image,
    Latent,
    Feature,
}

/// Layer widths and tuple layout of one model bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub d_x: usize,
    pub d_z: usize,
    pub enc_hidden: Vec<usize>,
    pub gen_hidden: Vec<usize>,
    pub disc_trunk: Vec<usize>,
    pub disc_head: Vec<usize>,
    pub slots: Vec<SlotKind>,
    pub n_classes: usize,
    /// Width of the feature slot input, when the tuple has one.
    pub feature_dim: Option<usize>,
    pub spectral_norm: bool,
}

impl ArchConfig {
    /// Default widths for a given data/latent size and tuple layout.
    pub fn new(d_x: usize, d_z: usize, slots: Vec<SlotKind>, n_classes: usize) -> Self {
        ArchConfig {
            d_x,
            d_z,
            enc_hidden: vec![128, 128],
            gen_hidden: vec![128, 128],
            disc_trunk: vec![128, 128],
            disc_head: vec![256],
            slots,
            n_classes,
            feature_dim: None,
            spectral_norm: true,
        }
    }

    /// Same architecture with every hidden layer set to `width` (head gets
    /// twice that).
    pub fn with_width(mut self, width: usize) -> Self {
        self.enc_hidden = vec![width; 2];
        self.gen_hidden = vec![width; 2];
        self.disc_trunk = vec![width; 2];
        self.disc_head = vec![2 * width];
        self
    }
}

/// Stochastic encoder `z = μ(x) + exp(½·logvar(x)) ⊙ ε`.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub trunk: Vec<DenseLayer>,
    pub head_mu: DenseLayer,
    pub head_logvar: DenseLayer,
}

impl EncoderNet {
    pub fn new(store: &mut ParamStore, d_x: usize, hidden: &[usize], d_z: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![d_x];
        dims.extend_from_slice(hidden);
        let trunk = build_stack(store, "enc.trunk", Group::Encoder, &dims, false, rng)?;
        let last = *dims.last().unwrap();
        Ok(EncoderNet {
            trunk,
            head_mu: DenseLayer::new(store, "enc.mu", Group::Encoder, last, d_z, false, rng)?,
            head_logvar: DenseLayer::new(store, "enc.logvar", Group::Encoder, last, d_z, false, rng)?,
        })
    }

    pub fn d_z(&self) -> usize {
        self.head_mu.out_dim
    }

    /// Last hidden layer activations.
    pub fn hidden(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.input_dim() {
            return Err(Error::shape("encode", format!("input {:?}", g.value(x).shape())));
        }
        leaky_stack(&self.trunk, g, store, x)
    }

    fn input_dim(&self) -> usize {
        self.trunk.first().map_or(self.head_mu.in_dim, |l| l.in_dim)
    }

    /// `(μ, clamped logvar)`.
    pub fn moments(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, NodeId)> {
        let h = self.hidden(g, store, x)?;
        let mu = self.head_mu.forward(g, store, h)?;
        let lv = self.head_logvar.forward(g, store, h)?;
        Ok((mu, g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
    }

    /// Reparameterised sample; `eps` is supplied by the caller.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: NodeId, eps: NodeId) -> Result<NodeId> {
        let (mu, lv) = self.moments(g, store, x)?;
        if g.value(eps).shape() != g.value(mu).shape() {
            return Err(Error::shape(
                "encode",
                format!("eps {:?} vs latent {:?}", g.value(eps).shape(), g.value(mu).shape()),
            ));
        }
        let half = g.scale(lv, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul(sigma, eps)?;
        g.add(mu, noise)
    }
}

/// Deterministic generator with a tanh output layer.
#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub layers: Vec<DenseLayer>,
}

impl GeneratorNet {
    pub fn new(store: &mut ParamStore, d_z: usize, hidden: &[usize], d_x: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![d_z];
        dims.extend_from_slice(hidden);
        dims.push(d_x);
        Ok(GeneratorNet {
            layers: build_stack(store, "gen.layer", Group::Generator, &dims, false, rng)?,
        })
    }

    pub fn generate(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let (last, hidden) = self.layers.split_last().expect("generator has layers");
        if g.value(z).cols() != self.layers[0].in_dim {
            return Err(Error::shape("generate", format!("latent {:?}", g.value(z).shape())));
        }
        let h = leaky_stack(hidden, g, store, z)?;
        let y = last.forward(g, store, h)?;
        Ok(g.tanh(y))
    }
}

/// Multi-class discriminator over tuples. Each slot goes through the trunk
/// of its kind (shared across slots of that kind); trunk features are
/// concatenated in slot order and mapped to `n_classes` logits.
#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub slots: Vec<SlotKind>,
    pub trunk_x: Vec<DenseLayer>,
    pub trunk_z: Vec<DenseLayer>,
    pub trunk_m: Option<Vec<DenseLayer>>,
    pub head: Vec<DenseLayer>,
    pub n_classes: usize,
}

impl DiscriminatorNet {
    pub fn new(store: &mut ParamStore, arch: &ArchConfig, rng: &mut Rng) -> Result<Self> {
        if arch.n_classes < 2 {
            return Err(Error::Config("discriminator needs at least two classes".into()));
        }
        let sn = arch.spectral_norm;
        let trunk = |store: &mut ParamStore, prefix: &str, d_in: usize, rng: &mut Rng| {
            let mut dims = vec![d_in];
            dims.extend_from_slice(&arch.disc_trunk);
            build_stack(store, prefix, Group::Discriminator, &dims, sn, rng)
        };
        let trunk_x = trunk(store, "disc.x", arch.d_x, rng)?;
        let trunk_z = trunk(store, "disc.z", arch.d_z, rng)?;
        let trunk_m = if arch.slots.contains(&SlotKind::Feature) {
            let d_m = arch
                .feature_dim
                .ok_or_else(|| Error::Config("feature slot without feature_dim".into()))?;
            Some(trunk(store, "disc.m", d_m, rng)?)
        } else {
            None
        };
        let feat_w = arch.disc_trunk.last().copied().unwrap_or(0);
        let mut dims = vec![feat_w * arch.slots.len()];
        dims.extend_from_slice(&arch.disc_head);
        dims.push(arch.n_classes);
        let head = build_stack(store, "disc.head", Group::Discriminator, &dims, sn, rng)?;
        Ok(DiscriminatorNet {
            slots: arch.slots.clone(),
            trunk_x,
            trunk_z,
            trunk_m,
            head,
            n_classes: arch.n_classes,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.trunk_x
            .iter()
            .chain(&self.trunk_z)
            .chain(self.trunk_m.iter().flatten())
            .chain(&self.head)
    }

    pub fn power_iterate(&self, store: &mut ParamStore, n_iters: usize) {
        for l in self.layers() {
            l.power_iterate(store, n_iters);
        }
    }

    /// Logits `[batch, n_classes]` for one tuple. Image slots are perturbed
    /// as `x + noise_sigma·eps` (one `eps` per image slot, in slot order).
    pub fn discriminate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tuple: &[NodeId],
        noise_sigma: f64,
        eps_imgs: &[NodeId],
    ) -> Result<NodeId> {
        if tuple.len() != self.slots.len() {
            return Err(Error::Config(format!(
                "discriminator expects {} slots, got {}",
                self.slots.len(),
                tuple.len()
            )));
        }
        let n_img = self.slots.iter().filter(|k| **k == SlotKind::Image).count();
        if noise_sigma > 0.0 && eps_imgs.len() != n_img {
            return Err(Error::Config(format!(
                "{n_img} image slots but {} noise tensors",
                eps_imgs.len()
            )));
        }
        let mut feats = Vec::with_capacity(tuple.len());
        let mut img_idx = 0;
        for (&slot, &kind) in tuple.iter().zip(&self.slots) {
            let f = match kind {
                SlotKind::Image => {
                    let mut x = slot;
                    if noise_sigma > 0.0 {
                        let n = g.scale(eps_imgs[img_idx], noise_sigma);
                        x = g.add(x, n)?;
                    }
                    img_idx += 1;
                    leaky_stack(&self.trunk_x, g, store, x)?
                }
                SlotKind::Latent => leaky_stack(&self.trunk_z, g, store, slot)?,
                SlotKind::Feature => {
                    let trunk = self
                        .trunk_m
                        .as_ref()
                        .ok_or_else(|| Error::Config("no feature trunk".into()))?;
                    leaky_stack(trunk, g, store, slot)?
                }
            };
            feats.push(f);
        }
        let mut h = g.concat_cols(&feats)?;
        let (last, hidden) = self.head.split_last().expect("head has layers");
        h = leaky_stack(hidden, g, store, h)?;
        last.forward(g, store, h)
    }
}

/// Feature extractor `M(·)`: an MLP classifier whose last hidden layer is
/// the feature output. Frozen when its parameters live in `Group::Feature`.
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub layers: Vec<DenseLayer>,
    pub classifier: DenseLayer,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetConfig {
    pub d_x: usize,
    pub hidden: Vec<usize>,
    pub n_labels: usize,
}

impl FeatureNetConfig {
    pub fn bars8() -> Self {
        FeatureNetConfig {
            d_x: 64,
            hidden: vec![64, 32],
            n_labels: 3,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.d_x)
    }
}

impl FeatureNet {
    pub fn new(store: &mut ParamStore, cfg: &FeatureNetConfig, frozen: bool, rng: &mut Rng) -> Result<Self> {
        let group = if frozen { Group::Feature } else { Group::Other };
        let mut dims = vec![cfg.d_x];
        dims.extend_from_slice(&cfg.hidden);
        let layers = build_stack(store, "feat.layer", group, &dims, false, rng)?;
        let classifier = DenseLayer::new(store, "feat.cls", group, cfg.feature_dim(), cfg.n_labels, false, rng)?;
        Ok(FeatureNet {
            layers,
            classifier,
            frozen,
        })
    }

    pub fn features(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        leaky_stack(&self.layers, g, store, x)
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let f = self.features(g, store, x)?;
        self.classifier.forward(g, store, f)
    }

    /// Feature values without building a persistent graph.
    pub fn eval_features(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xn = g.constant(x.clone());
        let f = self.features(&mut g, store, xn)?;
        Ok(g.value(f).clone())
    }
}

/// Exponentially decaying discriminator input noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub tau: f64,
}

impl NoiseSchedule {
    pub fn new(sigma0: f64, tau: f64) -> Result<Self> {
        if !(sigma0 >= 0.0) || !(tau > 0.0) {
            return Err(Error::Config(format!("noise schedule sigma0={sigma0}, tau={tau}")));
        }
        Ok(NoiseSchedule { sigma0, tau })
    }

    pub fn sigma(&self, step: u64) -> f64 {
        self.sigma0 * (-(step as f64) / self.tau).exp()
    }
}

/// Encoder, generator, discriminator and optional frozen feature network,
/// sharing one parameter store.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub encoder: EncoderNet,
    pub generator: GeneratorNet,
    pub disc: DiscriminatorNet,
    pub featnet: Option<FeatureNet>,
    pub featnet_cfg: Option<FeatureNetConfig>,
}

impl ModelBundle {
    pub fn new(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = EncoderNet::new(&mut store, arch.d_x, &arch.enc_hidden, arch.d_z, rng)?;
        let generator = GeneratorNet::new(&mut store, arch.d_z, &arch.gen_hidden, arch.d_x, rng)?;
        let disc = DiscriminatorNet::new(&mut store, &arch, rng)?;
        Ok(ModelBundle {
            arch,
            store,
            encoder,
            generator,
            disc,
            featnet: None,
            featnet_cfg: None,
        })
    }

    /// Installs a frozen copy of a trained feature network. `source` holds
    /// the trained values under the usual `feat.*` names.
    pub fn attach_featnet(&mut self, cfg: &FeatureNetConfig, source: &ParamStore) -> Result<()> {
        if self.featnet.is_some() {
            return Err(Error::Config("feature network already attached".into()));
        }
        if cfg.d_x != self.arch.d_x {
            return Err(Error::Config("feature network input width differs from d_x".into()));
        }
        let mut scratch = Rng::new(0);
        let net = FeatureNet::new(&mut self.store, cfg, true, &mut scratch)?;
        for (_, p) in self.store.iter().filter(|(_, p)| p.group == Group::Feature).collect::<Vec<_>>() {
            let src = source
                .id(&p.name)
                .ok_or_else(|| Error::Config(format!("feature network lacks {}", p.name)))?;
            if source.value(src).shape() != p.value.shape() {
                return Err(Error::Config(format!("feature network shape mismatch at {}", p.name)));
            }
        }
        let names: Vec<_> = self
            .store
            .iter()
            .filter(|(_, p)| p.group == Group::Feature)
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in names {
            let v = source.value(source.id(&name).unwrap()).clone();
            *self.store.value_mut(id) = v;
        }
        self.featnet = Some(net);
        self.featnet_cfg = Some(cfg.clone());
        Ok(())
    }

    pub fn featnet(&self) -> Result<&FeatureNet> {
        self.featnet
            .as_ref()
            .ok_or_else(|| Error::Config("this model has no feature network".into()))
    }
}
