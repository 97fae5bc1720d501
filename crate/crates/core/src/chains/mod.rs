//! Class-labelled tuple batches for every model variant.
//!
//! Each variant is a list of [`TupleRecipe`]s: symbolic expressions over the
//! real image `x`, the prior latent `z`, the encoder `E`, the generator `G`,
//! the frozen feature map `M`, random masks and mixed images. A
//! [`ChainContext`] evaluates recipes on a graph, memoising shared
//! subexpressions so that e.g. `E(Mask1(x))` is computed once per batch and
//! reused across classes. Every distinct encoder application draws its own
//! fresh `ε`.

mod mask;

pub use mask::{
    apply_mask, mask_bits, mix, sample_mask, sample_mask_origin, ImageGeometry, Mask, MASK_FILL,
};

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nets::{ModelBundle, SlotKind};
use crate::rng::Rng;

/// Symbolic tuple-slot expression.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Expr {
    X,
    Z,
    Enc(Box<Expr>),
    Gen(Box<Expr>),
    Feat(Box<Expr>),
    /// Image with mask number `k` blacked out.
    Masked(u8, Box<Expr>),
    /// Image whose mask-`k` region is replaced by `G(E(Masked(k, image)))`.
    Mix(Box<Expr>, u8),
}

pub fn x() -> Expr {
    Expr::X
}
pub fn z() -> Expr {
    Expr::Z
}
pub fn enc(e: Expr) -> Expr {
    Expr::Enc(Box::new(e))
}
pub fn gen(e: Expr) -> Expr {
    Expr::Gen(Box::new(e))
}
pub fn feat(e: Expr) -> Expr {
    Expr::Feat(Box::new(e))
}
pub fn masked(k: u8, e: Expr) -> Expr {
    Expr::Masked(k, Box::new(e))
}
pub fn mixed(e: Expr, k: u8) -> Expr {
    Expr::Mix(Box::new(e), k)
}

impl Expr {
    pub fn kind(&self) -> SlotKind {
        match self {
            Expr::X | Expr::Gen(_) | Expr::Masked(..) | Expr::Mix(..) => SlotKind::Image,
            Expr::Z | Expr::Enc(_) => SlotKind::Latent,
            Expr::Feat(_) => SlotKind::Feature,
        }
    }

    /// Leaves reachable from this expression (always a subset of `{X, Z}`).
    pub fn leaves(&self) -> BTreeSet<&'static str> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| match e {
            Expr::X => {
                out.insert("x");
            }
            Expr::Z => {
                out.insert("z");
            }
            _ => {}
        });
        out
    }

    pub fn masks(&self) -> BTreeSet<u8> {
        let mut out = BTreeSet::new();
        self.visit(&mut |e| {
            if let Expr::Masked(k, _) | Expr::Mix(_, k) = e {
                out.insert(*k);
            }
        });
        out
    }

    fn visit(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match self {
            Expr::X | Expr::Z => {}
            Expr::Enc(e) | Expr::Gen(e) | Expr::Feat(e) | Expr::Masked(_, e) | Expr::Mix(e, _) => {
                e.visit(f)
            }
        }
    }

    /// Whether the expression is well typed: `E`, `M` and masks take images,
    /// `G` takes latents.
    pub fn is_well_typed(&self) -> bool {
        match self {
            Expr::X | Expr::Z => true,
            Expr::Enc(e) | Expr::Feat(e) | Expr::Masked(_, e) | Expr::Mix(e, _) => {
                e.kind() == SlotKind::Image && e.is_well_typed()
            }
            Expr::Gen(e) => e.kind() == SlotKind::Latent && e.is_well_typed(),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::X => write!(f, "x"),
            Expr::Z => write!(f, "z"),
            Expr::Enc(e) => write!(f, "E({e})"),
            Expr::Gen(e) => write!(f, "G({e})"),
            Expr::Feat(e) => write!(f, "M({e})"),
            Expr::Masked(k, e) => write!(f, "Mask{k}({e})"),
            Expr::Mix(e, k) => write!(f, "Mix({e},Mask{k})"),
        }
    }
}

/// One tuple class: its id (0-based) and ordered slot expressions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleRecipe {
    pub class_id: usize,
    pub slots: Vec<Expr>,
}

impl TupleRecipe {
    pub fn kinds(&self) -> Vec<SlotKind> {
        self.slots.iter().map(Expr::kind).collect()
    }

    /// The sample distribution depends only on data, prior, fresh noise and
    /// model parameters: every leaf is `x` or `z` and every slot is well typed.
    pub fn depends_only_on_model(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.is_well_typed() && s.leaves().iter().all(|l| *l == "x" || *l == "z"))
    }
}

impl fmt::Display for TupleRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.slots.iter().map(ToString::to_string).collect();
        write!(f, "{}: ({})", self.class_id + 1, parts.join(", "))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChainKind {
    Ali2,
    Gali4,
    Gali8,
    GaliMix,
    GaliPt,
}

impl ChainKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ali2" => ChainKind::Ali2,
            "gali4" => ChainKind::Gali4,
            "gali8" => ChainKind::Gali8,
            "gali_mix" => ChainKind::GaliMix,
            "gali_pt" => ChainKind::GaliPt,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ChainKind::Ali2 => "ali2",
            ChainKind::Gali4 => "gali4",
            ChainKind::Gali8 => "gali8",
            ChainKind::GaliMix => "gali_mix",
            ChainKind::GaliPt => "gali_pt",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            ChainKind::Ali2 => 2,
            ChainKind::Gali4 | ChainKind::GaliPt => 4,
            ChainKind::Gali8 | ChainKind::GaliMix => 8,
        }
    }

    pub fn slot_kinds(self) -> Vec<SlotKind> {
        use SlotKind::*;
        match self {
            ChainKind::Ali2 | ChainKind::Gali4 | ChainKind::GaliMix => vec![Image, Latent],
            ChainKind::Gali8 => vec![Image, Latent, Image, Latent],
            ChainKind::GaliPt => vec![Image, Latent, Feature],
        }
    }

    /// Distinct encoder applications per batch; each consumes
    /// `batch · d_z` standard normal draws.
    pub fn encoder_applications(self) -> usize {
        match self {
            ChainKind::Ali2 => 1,
            ChainKind::Gali4 | ChainKind::Gali8 | ChainKind::GaliPt => 3,
            ChainKind::GaliMix => 4,
        }
    }
}

/// Which feature argument the fourth knowledge-augmented class uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PtClass4 {
    /// `M(G(z))`, as the tuple list is written.
    #[default]
    Literal,
    /// `M(G(E(G(z))))`, the feature of the class's own image.
    OwnImage,
}

/// Slot permutations applied to both four-slot base chains, in class order.
pub const GALI8_PERMUTATIONS: [[usize; 4]; 4] = [
    [0, 1, 2, 3], // identity
    [2, 1, 0, 3], // swap images
    [0, 3, 2, 1], // swap latents
    [2, 3, 0, 1], // swap both
];

pub fn permute(slots: &[Expr], perm: &[usize; 4]) -> Vec<Expr> {
    perm.iter().map(|&i| slots[i].clone()).collect()
}

/// Class recipes of a variant, in class order.
pub fn recipes(kind: ChainKind, pt_class4: PtClass4) -> Vec<TupleRecipe> {
    let ex = || enc(x());
    let gz = || gen(z());
    let cycle_x = || enc(gen(ex()));
    let cycle_z = || gen(enc(gz()));
    let classes: Vec<Vec<Expr>> = match kind {
        ChainKind::Ali2 => vec![vec![x(), ex()], vec![gz(), z()]],
        ChainKind::Gali4 => vec![
            vec![x(), ex()],
            vec![gz(), z()],
            vec![x(), cycle_x()],
            vec![cycle_z(), z()],
        ],
        ChainKind::Gali8 => {
            let a = vec![x(), ex(), gen(ex()), cycle_x()];
            let b = vec![gz(), z(), cycle_z(), enc(gz())];
            let mut out = Vec::new();
            for base in [&a, &b] {
                for p in &GALI8_PERMUTATIONS {
                    out.push(permute(base, p));
                }
            }
            out
        }
        ChainKind::GaliMix => {
            let e1 = || enc(masked(1, x()));
            let e2 = || enc(masked(2, gen(e1())));
            let e4 = || enc(masked(4, mixed(x(), 1)));
            vec![
                vec![x(), e1()],
                vec![gz(), z()],
                vec![x(), e2()],
                vec![gen(enc(masked(3, gz()))), z()],
                vec![mixed(x(), 1), e1()],
                vec![mixed(x(), 1), e2()],
                vec![x(), e4()],
                vec![gen(e1()), e4()],
            ]
        }
        ChainKind::GaliPt => {
            let class4_feat = match pt_class4 {
                PtClass4::Literal => feat(gz()),
                PtClass4::OwnImage => feat(cycle_z()),
            };
            vec![
                vec![x(), ex(), feat(x())],
                vec![gz(), z(), feat(gz())],
                vec![x(), cycle_x(), feat(gen(ex()))],
                vec![cycle_z(), z(), class4_feat],
            ]
        }
    };
    classes
        .into_iter()
        .enumerate()
        .map(|(class_id, slots)| TupleRecipe { class_id, slots })
        .collect()
}

/// Evaluated tuple class.
#[derive(Clone, Debug)]
pub struct TupleBatch {
    pub class_id: usize,
    pub slots: Vec<NodeId>,
    pub kinds: Vec<SlotKind>,
}

/// Evaluates recipes on a graph with memoisation.
pub struct ChainContext<'a> {
    pub bundle: &'a ModelBundle,
    pub graph: &'a mut Graph,
    pub rng: &'a mut Rng,
    x: NodeId,
    z: NodeId,
    geometry: Option<ImageGeometry>,
    cache: HashMap<Expr, NodeId>,
    masks: HashMap<u8, Vec<Mask>>,
    normal_draws: usize,
}

impl<'a> ChainContext<'a> {
    pub fn new(
        bundle: &'a ModelBundle,
        graph: &'a mut Graph,
        rng: &'a mut Rng,
        x: NodeId,
        z: NodeId,
        geometry: Option<ImageGeometry>,
    ) -> Result<Self> {
        let (xs, zs) = (graph.value(x).shape().to_vec(), graph.value(z).shape().to_vec());
        if xs.len() != 2 || zs.len() != 2 || xs[0] != zs[0] {
            return Err(Error::shape("chain", format!("x {xs:?} and z {zs:?}")));
        }
        if xs[1] != bundle.arch.d_x || zs[1] != bundle.arch.d_z {
            return Err(Error::shape(
                "chain",
                format!("x {xs:?}, z {zs:?} vs d_x={}, d_z={}", bundle.arch.d_x, bundle.arch.d_z),
            ));
        }
        Ok(ChainContext {
            bundle,
            graph,
            rng,
            x,
            z,
            geometry,
            cache: HashMap::new(),
            masks: HashMap::new(),
            normal_draws: 0,
        })
    }

    pub fn batch(&self) -> usize {
        self.graph.value(self.x).rows()
    }

    /// Standard normal draws consumed so far.
    pub fn normal_draws(&self) -> usize {
        self.normal_draws
    }

    /// Per-row masks drawn for mask number `k`, if it has been used.
    pub fn masks(&self, k: u8) -> Option<&[Mask]> {
        self.masks.get(&k).map(Vec::as_slice)
    }

    fn mask_bits_for(&mut self, k: u8) -> Result<Vec<bool>> {
        let geom = self
            .geometry
            .ok_or_else(|| Error::Config("masked chains need square image data".into()))?;
        let batch = self.batch();
        if !self.masks.contains_key(&k) {
            let drawn = (0..batch).map(|_| sample_mask(geom.side, self.rng)).collect();
            self.masks.insert(k, drawn);
        }
        mask_bits(&self.masks[&k], batch, geom)
    }

    pub fn eval(&mut self, e: &Expr) -> Result<NodeId> {
        if let Some(&n) = self.cache.get(e) {
            return Ok(n);
        }
        let store = &self.bundle.store;
        let node = match e {
            Expr::X => self.x,
            Expr::Z => self.z,
            Expr::Enc(inner) => {
                let input = self.eval(inner)?;
                let shape = [self.batch(), self.bundle.arch.d_z];
                let eps = self.rng.normal_tensor(&shape);
                self.normal_draws += eps.len();
                let eps = self.graph.constant(eps);
                self.bundle.encoder.encode(self.graph, store, input, eps)?
            }
            Expr::Gen(inner) => {
                let input = self.eval(inner)?;
                self.bundle.generator.generate(self.graph, store, input)?
            }
            Expr::Feat(inner) => {
                let input = self.eval(inner)?;
                self.bundle.featnet()?.features(self.graph, store, input)?
            }
            Expr::Masked(k, inner) => {
                let input = self.eval(inner)?;
                let bits = self.mask_bits_for(*k)?;
                let fill = Tensor::full(self.graph.value(input).shape(), MASK_FILL);
                let fill = self.graph.constant(fill);
                self.graph.select(&bits, fill, input)?
            }
            Expr::Mix(inner, k) => {
                let base = self.eval(inner)?;
                let recon = self.eval(&gen(enc(masked(*k, (**inner).clone()))))?;
                let bits = self.mask_bits_for(*k)?;
                self.graph.select(&bits, recon, base)?
            }
        };
        self.cache.insert(e.clone(), node);
        Ok(node)
    }

    pub fn build_recipes(&mut self, recipes: &[TupleRecipe]) -> Result<Vec<TupleBatch>> {
        recipes
            .iter()
            .map(|r| {
                let slots = r.slots.iter().map(|s| self.eval(s)).collect::<Result<Vec<_>>>()?;
                Ok(TupleBatch {
                    class_id: r.class_id,
                    slots,
                    kinds: r.kinds(),
                })
            })
            .collect()
    }

    pub fn build(&mut self, kind: ChainKind, pt_class4: PtClass4) -> Result<Vec<TupleBatch>> {
        if kind == ChainKind::GaliPt && self.bundle.featnet.is_none() {
            return Err(Error::Config("gali_pt needs a feature network".into()));
        }
        self.build_recipes(&recipes(kind, pt_class4))
    }
}

fn build_with(
    kind: ChainKind,
    bundle: &ModelBundle,
    g: &mut Graph,
    x: NodeId,
    z: NodeId,
    rng: &mut Rng,
    geometry: Option<ImageGeometry>,
    pt: PtClass4,
) -> Result<Vec<TupleBatch>> {
    ChainContext::new(bundle, g, rng, x, z, geometry)?.build(kind, pt)
}

/// Four classes: `(x,E(x))`, `(G(z),z)`, `(x,E(G(E(x))))`, `(G(E(G(z))),z)`.
pub fn build_gali4(bundle: &ModelBundle, g: &mut Graph, x: NodeId, z: NodeId, rng: &mut Rng) -> Result<Vec<TupleBatch>> {
    build_with(ChainKind::Gali4, bundle, g, x, z, rng, None, PtClass4::Literal)
}

/// Eight four-slot classes from the two base chains under
/// [`GALI8_PERMUTATIONS`].
pub fn build_gali8(bundle: &ModelBundle, g: &mut Graph, x: NodeId, z: NodeId, rng: &mut Rng) -> Result<Vec<TupleBatch>> {
    build_with(ChainKind::Gali8, bundle, g, x, z, rng, None, PtClass4::Literal)
}

/// The four masked classes plus four mixed-image classes.
pub fn build_gali_mix(
    bundle: &ModelBundle,
    g: &mut Graph,
    x: NodeId,
    z: NodeId,
    rng: &mut Rng,
    geometry: ImageGeometry,
) -> Result<Vec<TupleBatch>> {
    build_with(ChainKind::GaliMix, bundle, g, x, z, rng, Some(geometry), PtClass4::Literal)
}

/// Four classes augmented with frozen features of the class image.
pub fn build_gali_pt(
    bundle: &ModelBundle,
    g: &mut Graph,
    x: NodeId,
    z: NodeId,
    rng: &mut Rng,
    pt: PtClass4,
) -> Result<Vec<TupleBatch>> {
    build_with(ChainKind::GaliPt, bundle, g, x, z, rng, None, pt)
}
