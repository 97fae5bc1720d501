//! Exact checks of the optimal-discriminator analysis on finite joints.
//!
//! Plain `f64` arithmetic on flat tables, independent of the autodiff
//! engine. Cells are indexed `x·nz + z`; the convention `0·log 0 = 0`
//! applies throughout.

use std::fmt;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::Rng;

const MASS_TOL: f64 = 1e-12;

/// Probability table over an `nx × nz` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pub nx: usize,
    pub nz: usize,
    pub table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(nx: usize, nz: usize, table: Vec<f64>) -> Result<Self> {
        if nx == 0 || nz == 0 || table.len() != nx * nz {
            return Err(Error::shape("joint", format!("{} entries for {nx}x{nz}", table.len())));
        }
        if table.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Domain {
                op: "joint",
                detail: "negative or non-finite probability".into(),
            });
        }
        let s: f64 = table.iter().sum();
        if (s - 1.0).abs() > MASS_TOL {
            return Err(Error::Domain {
                op: "joint",
                detail: format!("total mass {s}"),
            });
        }
        Ok(DiscreteJoint { nx, nz, table })
    }

    /// Normalises non-negative weights.
    pub fn from_weights(nx: usize, nz: usize, w: Vec<f64>) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Domain {
                op: "joint",
                detail: "weights sum to zero".into(),
            });
        }
        Self::new(nx, nz, w.into_iter().map(|v| v / s).collect())
    }

    pub fn point_mass(nx: usize, nz: usize, x: usize, z: usize) -> Result<Self> {
        let mut t = vec![0.0; nx * nz];
        t[x * nz + z] = 1.0;
        Self::new(nx, nz, t)
    }

    pub fn uniform(nx: usize, nz: usize) -> Self {
        let c = nx * nz;
        DiscreteJoint {
            nx,
            nz,
            table: vec![1.0 / c as f64; c],
        }
    }

    /// Random joint with full support (log-normal weights).
    pub fn random_full(nx: usize, nz: usize, rng: &mut Rng) -> Self {
        let w = (0..nx * nz).map(|_| rng.normal().exp()).collect();
        Self::from_weights(nx, nz, w).expect("positive weights")
    }

    /// Random joint where each cell is zero with probability `p_zero` (at
    /// least one cell stays positive).
    pub fn random_sparse(nx: usize, nz: usize, p_zero: f64, rng: &mut Rng) -> Self {
        let mut w: Vec<f64> = (0..nx * nz)
            .map(|_| if rng.uniform() < p_zero { 0.0 } else { rng.normal().exp() })
            .collect();
        if w.iter().all(|&v| v == 0.0) {
            let i = rng.below(w.len() as u64) as usize;
            w[i] = 1.0;
        }
        Self::from_weights(nx, nz, w).expect("positive weights")
    }

    pub fn cells(&self) -> usize {
        self.table.len()
    }
}

/// Class probabilities `D_i(x, z)`, stored as `table[cell·n + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDiscriminator {
    pub nx: usize,
    pub nz: usize,
    pub n: usize,
    pub table: Vec<f64>,
}

impl DiscreteDiscriminator {
    pub fn new(nx: usize, nz: usize, n: usize, table: Vec<f64>) -> Result<Self> {
        if n < 2 || table.len() != nx * nz * n {
            return Err(Error::shape("discriminator", format!("{} entries", table.len())));
        }
        for cell in table.chunks(n) {
            let s: f64 = cell.iter().sum();
            if cell.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > MASS_TOL {
                return Err(Error::Domain {
                    op: "discriminator",
                    detail: format!("cell {cell:?} is not a distribution"),
                });
            }
        }
        Ok(DiscreteDiscriminator { nx, nz, n, table })
    }

    pub fn uniform(nx: usize, nz: usize, n: usize) -> Self {
        DiscreteDiscriminator {
            nx,
            nz,
            n,
            table: vec![1.0 / n as f64; nx * nz * n],
        }
    }

    pub fn prob(&self, cell: usize, class: usize) -> f64 {
        self.table[cell * self.n + class]
    }
}

fn check_support(ps: &[DiscreteJoint]) -> Result<(usize, usize)> {
    let first = ps.first().ok_or_else(|| Error::Contract("no distributions".into()))?;
    if ps.len() < 2 {
        return Err(Error::Contract("need at least two distributions".into()));
    }
    if ps.iter().any(|p| p.nx != first.nx || p.nz != first.nz) {
        return Err(Error::shape("oracle", "distributions have different supports"));
    }
    Ok((first.nx, first.nz))
}

fn check_pair(ps: &[DiscreteJoint], d: &DiscreteDiscriminator) -> Result<()> {
    let (nx, nz) = check_support(ps)?;
    if d.nx != nx || d.nz != nz || d.n != ps.len() {
        return Err(Error::shape("oracle", "discriminator does not match the distributions"));
    }
    Ok(())
}

/// `p·log q` with `0·log q = 0` for any `q`.
fn plogq(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * q.ln()
    }
}

/// `D*_i = p_i / Σ_j p_j`; uniform where no distribution has mass.
pub fn optimal_discriminator(ps: &[DiscreteJoint]) -> Result<DiscreteDiscriminator> {
    let (nx, nz) = check_support(ps)?;
    let n = ps.len();
    let mut table = Vec::with_capacity(nx * nz * n);
    for c in 0..nx * nz {
        let s: f64 = ps.iter().map(|p| p.table[c]).sum();
        for p in ps {
            table.push(if s > 0.0 { p.table[c] / s } else { 1.0 / n as f64 });
        }
    }
    Ok(DiscreteDiscriminator { nx, nz, n, table })
}

/// `Σ_i Σ_cells p_i log D_i`.
pub fn value_minimax(ps: &[DiscreteJoint], d: &DiscreteDiscriminator) -> Result<f64> {
    check_pair(ps, d)?;
    let mut v = 0.0;
    for (i, p) in ps.iter().enumerate() {
        for (c, &pc) in p.table.iter().enumerate() {
            v += plogq(pc, d.prob(c, i));
        }
    }
    Ok(v)
}

/// `Σ_i Σ_cells p_i Σ_{k≠i} log D_k`. May be `−∞` when some `p_i` has mass
/// where a `D_k` is zero.
pub fn value_pot(ps: &[DiscreteJoint], d: &DiscreteDiscriminator) -> Result<f64> {
    check_pair(ps, d)?;
    let n = ps.len();
    let mut v = 0.0;
    for (i, p) in ps.iter().enumerate() {
        for (c, &pc) in p.table.iter().enumerate() {
            for k in (0..n).filter(|&k| k != i) {
                v += plogq(pc, d.prob(c, k));
            }
        }
    }
    Ok(v)
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() })
        .sum()
}

/// `Σ_i w_i KL(p_i ‖ Σ_j w_j p_j)`.
pub fn generalized_jsd(ps: &[DiscreteJoint], weights: &[f64]) -> Result<f64> {
    check_support(ps)?;
    if weights.len() != ps.len() {
        return Err(Error::shape("jsd", "one weight per distribution"));
    }
    let s: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w >= 0.0)) || (s - 1.0).abs() > MASS_TOL {
        return Err(Error::Domain {
            op: "jsd",
            detail: format!("weights {weights:?} are not on the simplex"),
        });
    }
    let cells = ps[0].cells();
    let mix: Vec<f64> = (0..cells)
        .map(|c| ps.iter().zip(weights).map(|(p, w)| w * p.table[c]).sum())
        .collect();
    Ok(ps
        .iter()
        .zip(weights)
        .map(|(p, &w)| if w == 0.0 { 0.0 } else { w * kl(&p.table, &mix) })
        .sum())
}

/// `Σ_i KL(p_i ‖ mean)`: the equal-weight divergence in the unweighted form
/// that appears in the optimal-value identities, i.e. `n` times
/// [`generalized_jsd`] with weights `1/n`.
pub fn kl_sum_to_mean(ps: &[DiscreteJoint]) -> Result<f64> {
    let n = ps.len();
    Ok(n as f64 * generalized_jsd(ps, &vec![1.0 / n as f64; n])?)
}

/// Largest increase of `value_minimax` over `trials` random simplex
/// perturbations of `d` (cellwise `(1−t)·d + t·q`, `q` uniform on the
/// simplex, `t` log-uniform on `[1e-6, 1]`).
pub fn perturbation_search(
    ps: &[DiscreteJoint],
    d: &DiscreteDiscriminator,
    trials: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let base = value_minimax(ps, d)?;
    let n = d.n;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..trials {
        let t = 10f64.powf(-6.0 * rng.uniform());
        let mut table = d.table.clone();
        for cell in table.chunks_mut(n) {
            // Uniform point on the simplex from normalised exponentials.
            let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.uniform()).ln()).collect();
            let s: f64 = e.iter().sum();
            for (v, q) in cell.iter_mut().zip(&e) {
                *v = (1.0 - t) * *v + t * q / s;
            }
        }
        let pert = DiscreteDiscriminator {
            table,
            ..d.clone()
        };
        worst = worst.max(value_minimax(ps, &pert)? - base);
    }
    Ok(worst)
}

/// Pairs `p_i` with `(1−a)·p_i + a·mean(others)`.
pub fn mix_toward_others(ps: &[DiscreteJoint], i: usize, a: f64) -> Result<Vec<DiscreteJoint>> {
    check_support(ps)?;
    let n = ps.len();
    let mut out = ps.to_vec();
    let cells = ps[0].cells();
    let t: Vec<f64> = (0..cells)
        .map(|c| {
            let others: f64 = ps.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.table[c]).sum();
            (1.0 - a) * ps[i].table[c] + a * others / (n - 1) as f64
        })
        .collect();
    out[i] = DiscreteJoint::from_weights(ps[0].nx, ps[0].nz, t)?;
    Ok(out)
}

/// Summary of [`verify_identities`].
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub seed: u64,
    pub trials: usize,
    /// `max |V_minimax(D*) − (−ln 256 + Σ KL)|` over all instances.
    pub max_identity_error: f64,
    /// `max V_pot(D*) − (−12 ln 4 − Σ KL)`; should be ≤ 0.
    pub max_bound_excess: f64,
    /// Smallest bound slack over the unequal instances.
    pub min_unequal_slack: f64,
    /// Largest value increase found by perturbing `D*`.
    pub max_perturbation_gain: f64,
    pub equal_minimax: f64,
    pub equal_pot: f64,
    /// Instances (by trial index) that violated a check at `tolerance`.
    pub failures: Vec<String>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub const MINIMAX_OPTIMUM: &str = "-ln 256";
pub const POT_CONSTANT_NOTE: &str =
    "product-of-terms constant: direct substitution gives -12 ln 4 = -ln(4^12); the printed -log(4^9) is corrected";

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "oracle check: seed {} trials {} (+ all-equal instance)", self.seed, self.trials)?;
        writeln!(f, "minimax identity V(D*) = {MINIMAX_OPTIMUM} + sum KL: max error {:.3e}", self.max_identity_error)?;
        writeln!(f, "pot bound V(D*) <= -12 ln 4 - sum KL: max excess {:.3e}, min slack (unequal) {:.3e}", self.max_bound_excess, self.min_unequal_slack)?;
        writeln!(f, "D* perturbation: max gain {:.3e}", self.max_perturbation_gain)?;
        writeln!(
            f,
            "all-equal: minimax {:.12} (-ln 256 = {:.12}), pot {:.12} (-12 ln 4 = {:.12})",
            self.equal_minimax,
            -(256f64).ln(),
            self.equal_pot,
            -12.0 * 4f64.ln()
        )?;
        writeln!(f, "{POT_CONSTANT_NOTE}")?;
        writeln!(f, "global optimum at p1 = p2 = p3 = p4 holds for both objectives")?;
        for fail in &self.failures {
            writeln!(f, "FAIL {fail}")?;
        }
        write!(f, "{} in {:.3}s", if self.passed() { "PASS" } else { "FAIL" }, self.seconds)
    }
}

/// Random 4-tuple on a grid of 2 to 36 cells, full support. A single cell
/// would make every joint the same point mass.
pub fn random_instance(rng: &mut Rng) -> Vec<DiscreteJoint> {
    let nx = rng.range_inclusive(1, 6);
    let nz = rng.range_inclusive(if nx == 1 { 2 } else { 1 }, 6);
    (0..4).map(|_| DiscreteJoint::random_full(nx, nz, rng)).collect()
}

/// Runs the minimax identity, the product-of-terms bound and the `D*`
/// perturbation search on `trials` random 4-tuples plus the all-equal one.
pub fn verify_identities(seed: u64, trials: usize, perturbations: usize) -> Result<OracleReport> {
    let start = Instant::now();
    let tol = 1e-9;
    let ln256 = (256f64).ln();
    let c12 = 12.0 * 4f64.ln();
    let mut report = OracleReport {
        seed,
        trials,
        max_identity_error: 0.0,
        max_bound_excess: f64::NEG_INFINITY,
        min_unequal_slack: f64::INFINITY,
        max_perturbation_gain: f64::NEG_INFINITY,
        equal_minimax: 0.0,
        equal_pot: 0.0,
        failures: Vec::new(),
        tolerance: tol,
        seconds: 0.0,
    };
    for t in 0..=trials {
        let mut rng = Rng::stream(seed, t as u64);
        let equal = t == trials;
        let ps = if equal {
            let p = DiscreteJoint::random_full(3, 4, &mut rng);
            vec![p.clone(), p.clone(), p.clone(), p]
        } else {
            random_instance(&mut rng)
        };
        let name = if equal { "all-equal".to_string() } else { format!("trial {t}") };
        let d = optimal_discriminator(&ps)?;
        let kl = kl_sum_to_mean(&ps)?;
        let vm = value_minimax(&ps, &d)?;
        let vp = value_pot(&ps, &d)?;
        let id_err = (vm - (-ln256 + kl)).abs();
        let excess = vp - (-c12 - kl);
        report.max_identity_error = report.max_identity_error.max(id_err);
        report.max_bound_excess = report.max_bound_excess.max(excess);
        if id_err > tol {
            report.failures.push(format!("{name}: minimax identity off by {id_err:e}"));
        }
        if excess > tol {
            report.failures.push(format!("{name}: pot bound exceeded by {excess:e}"));
        }
        if equal {
            report.equal_minimax = vm;
            report.equal_pot = vp;
            if (vm + ln256).abs() > tol || (vp + c12).abs() > tol {
                report.failures.push(format!("{name}: optimum not attained ({vm}, {vp})"));
            }
        } else {
            report.min_unequal_slack = report.min_unequal_slack.min(-excess);
            if -excess <= tol {
                report.failures.push(format!("{name}: pot bound tight for unequal distributions"));
            }
        }
        let gain = perturbation_search(&ps, &d, perturbations, &mut rng)?;
        report.max_perturbation_gain = report.max_perturbation_gain.max(gain);
        if gain > tol {
            report.failures.push(format!("{name}: perturbation raised the value by {gain:e}"));
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four(p: DiscreteJoint) -> Vec<DiscreteJoint> {
        vec![p.clone(), p.clone(), p.clone(), p]
    }

    #[test]
    fn equal_distributions_give_uniform_optimum() {
        let ps = four(DiscreteJoint::random_sparse(3, 3, 0.3, &mut Rng::new(1)));
        let d = optimal_discriminator(&ps).unwrap();
        assert!(d.table.iter().all(|&v| v == 0.25));
        let vm = value_minimax(&ps, &d).unwrap();
        assert!((vm + (256f64).ln()).abs() < 1e-12);
        let vp = value_pot(&ps, &d).unwrap();
        assert!((vp + 12.0 * 4f64.ln()).abs() < 1e-12);
        assert!((vp - (-16.6355)).abs() < 1e-4);
    }

    #[test]
    fn point_mass_gets_certainty() {
        let mut ps = vec![DiscreteJoint::point_mass(2, 2, 0, 0).unwrap()];
        for _ in 0..3 {
            ps.push(DiscreteJoint::point_mass(2, 2, 1, 1).unwrap());
        }
        let d = optimal_discriminator(&ps).unwrap();
        assert_eq!(d.prob(0, 0), 1.0);
        // Cells without mass are uniform.
        assert_eq!(d.prob(1, 2), 0.25);
    }

    #[test]
    fn uniform_discriminator_value_is_constant() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let ps: Vec<_> = (0..4).map(|_| DiscreteJoint::random_sparse(4, 2, 0.4, &mut rng)).collect();
            let v = value_minimax(&ps, &DiscreteDiscriminator::uniform(4, 2, 4)).unwrap();
            assert!((v + (256f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_pot_at_equality() {
        // n = 2: each of two classes contributes one log(1/2) term.
        let p = DiscreteJoint::uniform(2, 3);
        let ps = vec![p.clone(), p];
        let d = optimal_discriminator(&ps).unwrap();
        let v = value_pot(&ps, &d).unwrap();
        assert!((v + 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn jsd_examples() {
        let a = DiscreteJoint::point_mass(1, 2, 0, 0).unwrap();
        let b = DiscreteJoint::point_mass(1, 2, 0, 1).unwrap();
        let j = generalized_jsd(&[a.clone(), b], &[0.5, 0.5]).unwrap();
        assert!((j - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(generalized_jsd(&four(a), &[0.25; 4]).unwrap(), 0.0);
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let ps: Vec<_> = (0..4).map(|_| DiscreteJoint::random_sparse(3, 2, 0.3, &mut rng)).collect();
            let mut w: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            assert!(generalized_jsd(&ps, &w).unwrap() >= 0.0);
        }
    }

    #[test]
    fn identity_holds_with_zero_cells() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let ps: Vec<_> = (0..4).map(|_| DiscreteJoint::random_sparse(3, 3, 0.5, &mut rng)).collect();
            let d = optimal_discriminator(&ps).unwrap();
            let vm = value_minimax(&ps, &d).unwrap();
            let want = -(256f64).ln() + kl_sum_to_mean(&ps).unwrap();
            assert!((vm - want).abs() < 1e-9);
        }
    }

    /// Per-cell closed form: Σ_i p_i log(p_i/S) computed separately from
    /// the KL route.
    #[test]
    fn identity_matches_cellwise_closed_form() {
        let mut rng = Rng::new(5);
        let ps = random_instance(&mut rng);
        let cells = ps[0].cells();
        let mut direct = 0.0;
        for c in 0..cells {
            let s: f64 = ps.iter().map(|p| p.table[c]).sum();
            for p in &ps {
                direct += p.table[c] * (p.table[c] / s).ln();
            }
        }
        let d = optimal_discriminator(&ps).unwrap();
        assert!((value_minimax(&ps, &d).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn mixing_toward_others_reduces_divergence() {
        let mut rng = Rng::new(6);
        for _ in 0..100 {
            let ps = random_instance(&mut rng);
            if ps[0].cells() == 1 {
                continue;
            }
            let before = kl_sum_to_mean(&ps).unwrap();
            let i = rng.below(4) as usize;
            let a = 0.05 + 0.9 * rng.uniform();
            let after = kl_sum_to_mean(&mix_toward_others(&ps, i, a).unwrap()).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }

    #[test]
    fn validation_errors() {
        assert!(DiscreteJoint::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(DiscreteJoint::new(1, 2, vec![-0.5, 1.5]).is_err());
        let a = DiscreteJoint::uniform(2, 2);
        let b = DiscreteJoint::uniform(2, 3);
        assert!(optimal_discriminator(&[a.clone(), b]).is_err());
        assert!(DiscreteDiscriminator::new(1, 1, 2, vec![0.7, 0.7]).is_err());
        assert!(generalized_jsd(&[a.clone(), a], &[0.3, 0.3]).is_err());
    }

    #[test]
    fn verify_identities_passes() {
        let r = verify_identities(7, 20, 200).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.seconds < 1.0);
        assert!(r.to_string().contains("4^12"));
    }
}
