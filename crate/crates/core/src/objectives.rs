//! Discriminator and generator-encoder losses over per-class logits.
//!
//! Every loss takes the logits `[rows_i, n]` of each class batch `i`, as
//! produced by [`class_logits`]. Log-probabilities are clamped to
//! `[ln 1e-12, ln(1 − 1e-12)]` before they enter a sum.

use crate::autodiff::{grad_check, Graph, Group, NodeId, SuiteResult, Tensor};
use crate::chains::{enc, gen, x as x_expr, ChainContext, ChainKind, ImageGeometry, PtClass4, TupleBatch};
use crate::error::{Error, Result};
use crate::nets::{ArchConfig, ModelBundle, SlotKind};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::Rng;

pub const PROB_FLOOR: f64 = 1e-12;

fn log_lo() -> f64 {
    PROB_FLOOR.ln()
}

fn log_hi() -> f64 {
    (-PROB_FLOOR).ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectiveKind {
    Minimax,
    Misclassification,
    ProductOfTerms,
    AliBaseline,
    AliceL2(f64),
}

impl ObjectiveKind {
    pub fn parse(name: &str, lambda: f64) -> Option<Self> {
        Some(match name {
            "minimax" => ObjectiveKind::Minimax,
            "misclass" => ObjectiveKind::Misclassification,
            "pot" => ObjectiveKind::ProductOfTerms,
            "ali" => ObjectiveKind::AliBaseline,
            "alice" => ObjectiveKind::AliceL2(lambda),
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Minimax => "minimax",
            ObjectiveKind::Misclassification => "misclass",
            ObjectiveKind::ProductOfTerms => "pot",
            ObjectiveKind::AliBaseline => "ali",
            ObjectiveKind::AliceL2(_) => "alice",
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            ObjectiveKind::AliceL2(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::Config(format!("alice lambda must be finite and >= 0, got {l}")))
            }
            _ => Ok(()),
        }
    }

    /// The two baselines are defined for the two-class pairing only.
    pub fn needs_two_classes(self) -> bool {
        matches!(self, ObjectiveKind::AliBaseline | ObjectiveKind::AliceL2(_))
    }
}

/// Weight of an objective with `m` log terms: `2/m`.
pub fn weight_rule(m: usize) -> f64 {
    assert!(m > 0, "an objective needs at least one log term");
    2.0 / m as f64
}

/// Losses and diagnostics of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss_d: f64,
    pub loss_ge: f64,
    /// Mean true-class probability of each class batch.
    pub true_class_prob: Vec<f64>,
    pub grad_norm_ge: f64,
}

/// Logits of every class batch from a single stacked discriminator pass.
/// With `sigma > 0` each image slot gets its own fresh `N(0, I)` noise
/// tensor over the stacked rows.
pub fn class_logits(
    g: &mut Graph,
    bundle: &ModelBundle,
    batches: &[TupleBatch],
    sigma: f64,
    rng: &mut Rng,
) -> Result<Vec<NodeId>> {
    let disc = &bundle.disc;
    if batches.len() != disc.n_classes {
        return Err(Error::Config(format!(
            "{} class batches for a {}-class discriminator",
            batches.len(),
            disc.n_classes
        )));
    }
    let n_slots = disc.slots.len();
    let mut sizes = Vec::with_capacity(batches.len());
    for tb in batches {
        if tb.slots.len() != n_slots || tb.kinds != disc.slots {
            return Err(Error::Config(format!(
                "class {} slot layout {:?} differs from discriminator {:?}",
                tb.class_id, tb.kinds, disc.slots
            )));
        }
        sizes.push(g.value(tb.slots[0]).rows());
    }
    let mut stacked = Vec::with_capacity(n_slots);
    for j in 0..n_slots {
        let parts: Vec<NodeId> = batches.iter().map(|tb| tb.slots[j]).collect();
        stacked.push(if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? });
    }
    let mut eps = Vec::new();
    if sigma > 0.0 {
        for (j, kind) in disc.slots.iter().enumerate() {
            if *kind == SlotKind::Image {
                let shape = g.value(stacked[j]).shape().to_vec();
                eps.push(g.constant(rng.normal_tensor(&shape)));
            }
        }
    }
    let logits = disc.discriminate(g, &bundle.store, &stacked, sigma, &eps)?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        out.push(g.slice_rows(logits, start, start + s)?);
        start += s;
    }
    Ok(out)
}

fn check_classes(g: &Graph, logits: &[NodeId]) -> Result<usize> {
    let n = logits.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least two classes, got {n}")));
    }
    for &l in logits {
        let v = g.value(l);
        if !v.is_matrix() || v.cols() != n {
            return Err(Error::Config(format!(
                "logits {:?} for {n} class batches",
                v.shape()
            )));
        }
    }
    Ok(n)
}

fn clamped_log_softmax(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let ls = g.log_softmax_rows(logits)?;
    Ok(g.clamp(ls, log_lo(), log_hi()))
}

fn column_mean(g: &mut Graph, a: NodeId, col: usize) -> Result<NodeId> {
    let c = g.slice_cols(a, col, col + 1)?;
    Ok(g.mean(c))
}

fn sum_nodes(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// `Σ_i mean log D_i(class-i batch)`, unweighted.
fn true_class_log_sum(g: &mut Graph, logits: &[NodeId]) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(logits.len());
    for (i, &l) in logits.iter().enumerate() {
        let ls = clamped_log_softmax(g, l)?;
        terms.push(column_mean(g, ls, i)?);
    }
    sum_nodes(g, &terms)
}

/// Cross-entropy of the class labels: `−(2/n)·Σ_i mean log D_i`.
pub fn discriminator_loss(g: &mut Graph, logits: &[NodeId]) -> Result<NodeId> {
    let n = check_classes(g, logits)?;
    let s = true_class_log_sum(g, logits)?;
    Ok(g.scale(s, -weight_rule(n)))
}

/// Direct minimax: the negative of [`discriminator_loss`].
pub fn ge_loss_minimax(g: &mut Graph, logits: &[NodeId]) -> Result<NodeId> {
    let n = check_classes(g, logits)?;
    let s = true_class_log_sum(g, logits)?;
    Ok(g.scale(s, weight_rule(n)))
}

/// Negated misclassification log-likelihood `−(2/n)·Σ_i mean log(1 − D_i)`,
/// with `log(1 − D_i) = lse_{k≠i} − lse_all`.
pub fn ge_loss_misclass(g: &mut Graph, logits: &[NodeId]) -> Result<NodeId> {
    let n = check_classes(g, logits)?;
    let all = vec![true; n];
    let mut terms = Vec::with_capacity(n);
    for (i, &l) in logits.iter().enumerate() {
        let mut others = vec![true; n];
        others[i] = false;
        let excl = g.logsumexp_cols(l, &others)?;
        let full = g.logsumexp_cols(l, &all)?;
        let diff = g.sub(excl, full)?;
        let diff = g.clamp(diff, log_lo(), log_hi());
        terms.push(g.mean(diff));
    }
    let s = sum_nodes(g, &terms)?;
    Ok(g.scale(s, -weight_rule(n)))
}

/// Negated product of terms `−(2/(n(n−1)))·Σ_i mean Σ_{k≠i} log D_k`.
pub fn ge_loss_pot(g: &mut Graph, logits: &[NodeId]) -> Result<NodeId> {
    let n = check_classes(g, logits)?;
    let mut terms = Vec::with_capacity(n * (n - 1));
    for (i, &l) in logits.iter().enumerate() {
        let ls = clamped_log_softmax(g, l)?;
        for k in (0..n).filter(|&k| k != i) {
            terms.push(column_mean(g, ls, k)?);
        }
    }
    let s = sum_nodes(g, &terms)?;
    Ok(g.scale(s, -weight_rule(n * (n - 1))))
}

/// `λ · mean (x − recon)²` over batch and pixels.
pub fn alice_l2_term(g: &mut Graph, x: NodeId, recon: NodeId, lambda: f64) -> Result<NodeId> {
    let d = g.sub(x, recon)?;
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.scale(m, lambda))
}

/// GE loss of `kind`. `recon` is `(x, G(E(x)))`, needed only by ALICE.
pub fn ge_loss(
    kind: ObjectiveKind,
    g: &mut Graph,
    logits: &[NodeId],
    recon: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    kind.validate()?;
    if kind.needs_two_classes() && logits.len() != 2 {
        return Err(Error::Config(format!(
            "{} is a two-class objective, got {} classes",
            kind.name(),
            logits.len()
        )));
    }
    match kind {
        ObjectiveKind::Minimax => ge_loss_minimax(g, logits),
        ObjectiveKind::Misclassification => ge_loss_misclass(g, logits),
        ObjectiveKind::ProductOfTerms | ObjectiveKind::AliBaseline => ge_loss_pot(g, logits),
        ObjectiveKind::AliceL2(lambda) => {
            let base = ge_loss_pot(g, logits)?;
            let (x, r) = recon.ok_or_else(|| Error::Contract("ALICE needs a reconstruction".into()))?;
            let l2 = alice_l2_term(g, x, r, lambda)?;
            g.add(base, l2)
        }
    }
}

/// Mean true-class probability per class batch.
pub fn true_class_probs(g: &Graph, logits: &[NodeId]) -> Result<Vec<f64>> {
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let p = crate::autodiff::softmax_rows(g.value(l))?;
            Ok((0..p.rows()).map(|r| p.at(r, i)).sum::<f64>() / p.rows() as f64)
        })
        .collect()
}

/// Smallest true-class probability over every row of every class batch.
pub fn min_true_class_prob(g: &Graph, logits: &[NodeId]) -> Result<f64> {
    let mut lo = f64::INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        let p: Tensor = crate::autodiff::softmax_rows(g.value(l))?;
        for r in 0..p.rows() {
            lo = lo.min(p.at(r, i));
        }
    }
    Ok(lo)
}

/// Chain layout used when building class batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainSpec {
    pub kind: ChainKind,
    pub pt_class4: PtClass4,
    pub geometry: Option<ImageGeometry>,
}

impl ChainSpec {
    pub fn new(kind: ChainKind) -> Self {
        ChainSpec {
            kind,
            pt_class4: PtClass4::Literal,
            geometry: None,
        }
    }
}

/// Per-class logits plus, if requested, the pair `(x, G(E(x)))`.
pub struct Forward {
    pub logits: Vec<NodeId>,
    pub recon: Option<(NodeId, NodeId)>,
}

/// Builds the class batches of `chain` for `(x, z)` and runs the stacked
/// discriminator pass. Chain noise is drawn before discriminator noise.
#[allow(clippy::too_many_arguments)]
pub fn forward_classes(
    g: &mut Graph,
    bundle: &ModelBundle,
    chain: ChainSpec,
    x: NodeId,
    z: NodeId,
    sigma: f64,
    want_recon: bool,
    rng: &mut Rng,
) -> Result<Forward> {
    let (batches, recon) = {
        let mut ctx = ChainContext::new(bundle, g, rng, x, z, chain.geometry)?;
        let batches = ctx.build(chain.kind, chain.pt_class4)?;
        let recon = if want_recon {
            Some((x, ctx.eval(&gen(enc(x_expr())))?))
        } else {
            None
        };
        (batches, recon)
    };
    let logits = class_logits(g, bundle, &batches, sigma, rng)?;
    Ok(Forward { logits, recon })
}

/// GE loss of `kind` for one batch, on a graph whose trainable groups the
/// caller chose.
#[allow(clippy::too_many_arguments)]
pub fn ge_objective(
    g: &mut Graph,
    bundle: &ModelBundle,
    chain: ChainSpec,
    kind: ObjectiveKind,
    x: NodeId,
    z: NodeId,
    sigma: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let want = matches!(kind, ObjectiveKind::AliceL2(_));
    let f = forward_classes(g, bundle, chain, x, z, sigma, want, rng)?;
    ge_loss(kind, g, &f.logits, f.recon)
}

/// Discriminator loss for one batch.
pub fn d_objective(
    g: &mut Graph,
    bundle: &ModelBundle,
    chain: ChainSpec,
    x: NodeId,
    z: NodeId,
    sigma: f64,
    rng: &mut Rng,
) -> Result<NodeId> {
    let f = forward_classes(g, bundle, chain, x, z, sigma, false, rng)?;
    discriminator_loss(g, &f.logits)
}

/// Outcome of [`saturated_discriminator_demo`].
#[derive(Clone, Debug)]
pub struct SaturationReport {
    /// Smallest true-class probability over all rows of all classes.
    pub min_true_prob: f64,
    pub minimax_grad_norm: f64,
    pub pot_grad_norm: f64,
    pub ratio: f64,
    /// Factor applied to the discriminator's output layer.
    pub output_scale: f64,
    pub d_train_steps: usize,
}

/// GE gradient norm of `kind` with every noise source fixed by `seed`.
fn ge_grad_norm(
    bundle: &mut ModelBundle,
    chain: ChainSpec,
    kind: ObjectiveKind,
    x: &Tensor,
    z: &Tensor,
    seed: u64,
) -> Result<f64> {
    bundle.store.zero_grad();
    let mut g = Graph::new(&[Group::Encoder, Group::Generator]);
    let xn = g.constant(x.clone());
    let zn = g.constant(z.clone());
    let mut rng = Rng::new(seed);
    let loss = ge_objective(&mut g, bundle, chain, kind, xn, zn, 0.0, &mut rng)?;
    g.backward(loss, &mut bundle.store)?;
    let n = bundle.store.grad_norm(&[Group::Encoder, Group::Generator]);
    bundle.store.zero_grad();
    Ok(n)
}

fn min_prob_on(bundle: &ModelBundle, chain: ChainSpec, x: &Tensor, z: &Tensor, seed: u64) -> Result<f64> {
    let mut g = Graph::inference();
    let xn = g.constant(x.clone());
    let zn = g.constant(z.clone());
    let mut rng = Rng::new(seed);
    let f = forward_classes(&mut g, bundle, chain, xn, zn, 0.0, false, &mut rng)?;
    min_true_class_prob(&g, &f.logits)
}

/// Drives a discriminator (spectral normalisation must be off) to a
/// near-perfect state on one fixed batch, then compares GE gradient norms
/// of the minimax and product-of-terms objectives there.
///
/// The discriminator is trained with Adam on the fixed batch until every row
/// is classified correctly; the output layer is then doubled until every
/// true-class probability reaches `target`. Scaling the last layer scales
/// all logits, so correctly classified rows only become more confident.
pub fn saturated_discriminator_demo(
    bundle: &mut ModelBundle,
    chain: ChainSpec,
    x: &Tensor,
    z: &Tensor,
    seed: u64,
    target: f64,
    max_steps: usize,
) -> Result<SaturationReport> {
    if bundle.disc.layers().any(|l| l.sn_enabled()) {
        return Err(Error::Config("saturation demo needs spectral normalisation off".into()));
    }
    let mut opt = Optimizer::new(OptimizerKind::adam(), 1e-2, &[Group::Discriminator])?;
    let mut steps = 0;
    while steps < max_steps {
        bundle.store.zero_grad();
        let mut g = Graph::new(&[Group::Discriminator]);
        let xn = g.constant(x.clone());
        let zn = g.constant(z.clone());
        let mut rng = Rng::new(seed);
        let f = forward_classes(&mut g, bundle, chain, xn, zn, 0.0, false, &mut rng)?;
        if min_true_class_prob(&g, &f.logits)? > 0.9 {
            break;
        }
        let loss = discriminator_loss(&mut g, &f.logits)?;
        g.backward(loss, &mut bundle.store)?;
        opt.step(&mut bundle.store);
        steps += 1;
    }
    bundle.store.zero_grad();
    let last = bundle.disc.head.last().expect("head has layers").clone();
    let mut scale = 1.0;
    while min_prob_on(bundle, chain, x, z, seed)? < target {
        if scale > 1e6 {
            return Err(Error::Numerical("discriminator did not separate the batch".into()));
        }
        let w = bundle.store.value(last.w).scale(2.0);
        let b = bundle.store.value(last.b).scale(2.0);
        *bundle.store.value_mut(last.w) = w;
        *bundle.store.value_mut(last.b) = b;
        scale *= 2.0;
    }
    let min_true_prob = min_prob_on(bundle, chain, x, z, seed)?;
    let minimax = ge_grad_norm(bundle, chain, ObjectiveKind::Minimax, x, z, seed)?;
    let pot = ge_grad_norm(bundle, chain, ObjectiveKind::ProductOfTerms, x, z, seed)?;
    Ok(SaturationReport {
        min_true_prob,
        minimax_grad_norm: minimax,
        pot_grad_norm: pot,
        ratio: minimax / pot,
        output_scale: scale,
        d_train_steps: steps,
    })
}

/// Finite-difference checks of all five GE objectives and the
/// discriminator loss on a tiny bundle with spectral normalisation and
/// input noise switched on.
pub fn objective_gradchecks() -> Result<Vec<SuiteResult>> {
    let cases = [
        (ChainKind::Gali4, ObjectiveKind::Minimax),
        (ChainKind::Gali4, ObjectiveKind::Misclassification),
        (ChainKind::Gali4, ObjectiveKind::ProductOfTerms),
        (ChainKind::Ali2, ObjectiveKind::AliBaseline),
        (ChainKind::Ali2, ObjectiveKind::AliceL2(0.5)),
    ];
    let tiny = |chain: ChainKind, seed: u64| -> Result<ModelBundle> {
        let mut arch = ArchConfig::new(6, 3, chain.slot_kinds(), chain.n_classes()).with_width(5);
        arch.disc_head = vec![7];
        let mut m = ModelBundle::new(arch, &mut Rng::new(seed))?;
        m.disc.power_iterate(&mut m.store, 3);
        Ok(m)
    };
    let data = |seed: u64| {
        let mut rng = Rng::new(seed);
        (rng.normal_tensor(&[4, 6]).map(f64::tanh), rng.normal_tensor(&[4, 3]))
    };
    let mut out = Vec::new();
    for (i, (chain, kind)) in cases.into_iter().enumerate() {
        let mut m = tiny(chain, 10 + i as u64)?;
        let (x, z) = data(20 + i as u64);
        let proto = m.clone();
        let r = grad_check(&mut m.store, &[Group::Encoder, Group::Generator], 1e-6, |g, store| {
            let mut b = proto.clone();
            b.store = store.clone();
            let xn = g.constant(x.clone());
            let zn = g.constant(z.clone());
            ge_objective(g, &b, ChainSpec::new(chain), kind, xn, zn, 0.1, &mut Rng::new(7))
        })?;
        out.push(SuiteResult {
            name: format!("ge {}", kind.name()),
            max_rel_error: r.max_rel_error,
        });
    }
    let mut m = tiny(ChainKind::Gali4, 30)?;
    let (x, z) = data(31);
    let proto = m.clone();
    let r = grad_check(&mut m.store, &[Group::Discriminator], 1e-6, |g, store| {
        let mut b = proto.clone();
        b.store = store.clone();
        let xn = g.constant(x.clone());
        let zn = g.constant(z.clone());
        d_objective(g, &b, ChainSpec::new(ChainKind::Gali4), xn, zn, 0.1, &mut Rng::new(3))
    })?;
    out.push(SuiteResult {
        name: "discriminator".into(),
        max_rel_error: r.max_rel_error,
    });
    Ok(out)
}
