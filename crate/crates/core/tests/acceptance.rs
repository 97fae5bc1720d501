//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs with a plain `main` so the report is always printed. Environment:
//! `GALI_ACCEPTANCE_ONLY=1,2,7` selects criteria; `GALI_ACCEPTANCE_STEPS`
//! shrinks the toy-training budget of criteria 8 and 9 (default 20000) for
//! quick local iterations, and the report line then says so.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use gali::autodiff::{Graph, Group, ParamStore, Tensor};
use gali::chains::{mix, sample_mask, ChainKind, ImageGeometry, Mask};
use gali::harness::checkpoint::Checkpoint;
use gali::harness::{load_bundle, run_gradcheck, run_oracle_check, run_train, save_bundle, TrainConfig, Trainer};
use gali::metrics::MetricsRow;
use gali::nets::{spectral_normalize, ArchConfig, DenseLayer, ModelBundle};
use gali::objectives::{ge_loss_misclass, saturated_discriminator_demo, ChainSpec};
use gali::rng::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const TOL: f64 = 1e-9;
const FULL_STEPS: u64 = 20_000;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

type Check = fn() -> Result<Outcome, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("GALI_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, Check); 10] = [
        (1, "oracle identity (minimax)", c1_minimax_identity),
        (2, "oracle bound (product of terms)", c2_pot_bound),
        (3, "optimal discriminator under perturbation", c3_dstar_optimal),
        (4, "gradient suite", c4_gradients),
        (5, "vanishing-gradient demonstration", c5_vanishing),
        (6, "spectral normalisation", c6_spectral),
        (7, "mask and mix exactness", c7_masks),
        (8, "toy training ordering (bars8)", c8_toy_training),
        (9, "pretrained-feature effect (bars8)", c9_pretrained),
        (10, "determinism and formats", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let out = check().unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        let tag = if out.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {} [{:.1}s]", out.detail, t.elapsed().as_secs_f64());
        if !out.pass {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}

fn oracle() -> &'static (gali::oracle::OracleReport, f64) {
    static R: OnceLock<(gali::oracle::OracleReport, f64)> = OnceLock::new();
    R.get_or_init(|| {
        let t = Instant::now();
        let r = run_oracle_check(2024, 20).expect("oracle check runs");
        (r, t.elapsed().as_secs_f64())
    })
}

fn c1_minimax_identity() -> Result<Outcome, String> {
    let (r, secs) = oracle();
    let eq = (r.equal_minimax + 256f64.ln()).abs();
    Ok(Outcome {
        pass: r.trials == 20 && r.max_identity_error <= TOL && eq <= TOL && *secs < 1.0,
        detail: format!(
            "20 random 4-tuples + all-equal; max |V(D*) - (-ln 256 + JSD)| = {:.2e}, all-equal gap {eq:.2e} (tol {TOL:e}), {secs:.3}s",
            r.max_identity_error
        ),
    })
}

fn c2_pot_bound() -> Result<Outcome, String> {
    let (r, secs) = oracle();
    let eq = (r.equal_pot + 12.0 * 4f64.ln()).abs();
    let text = r.to_string();
    let flagged = text.contains("4^12") && text.contains("4^9");
    Ok(Outcome {
        pass: r.max_bound_excess <= TOL && r.min_unequal_slack > TOL && eq <= TOL && flagged && *secs < 1.0,
        detail: format!(
            "max excess over -12 ln 4 - JSD {:.2e}, min slack on unequal instances {:.2e}, all-equal gap {eq:.2e}, 4^9 -> 4^12 correction flagged: {flagged}",
            r.max_bound_excess, r.min_unequal_slack
        ),
    })
}

fn c3_dstar_optimal() -> Result<Outcome, String> {
    let (r, _) = oracle();
    Ok(Outcome {
        pass: r.max_perturbation_gain <= TOL && r.failures.is_empty(),
        detail: format!(
            "200 simplex perturbations x 21 instances; max gain {:.2e} (tol {TOL:e})",
            r.max_perturbation_gain
        ),
    })
}

fn c4_gradients() -> Result<Outcome, String> {
    let t = Instant::now();
    let r = run_gradcheck().map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let objectives = r.results.iter().filter(|x| x.name.starts_with("objective ge")).count();
    Ok(Outcome {
        pass: r.passed() && objectives == 5 && secs < 30.0,
        detail: format!(
            "{} checks ({} ops, {objectives} objectives, D loss); worst relative error {:.2e} (tol 1e-4), {secs:.1}s",
            r.results.len(),
            r.results.len() - objectives - 1,
            r.worst()
        ),
    })
}

fn c5_vanishing() -> Result<Outcome, String> {
    // Saturated discriminators on three independent tiny bundles.
    let mut worst_ratio: f64 = 0.0;
    let mut min_prob: f64 = 1.0;
    for seed in 0..3u64 {
        let chain = ChainKind::Gali4;
        let mut arch = ArchConfig::new(6, 3, chain.slot_kinds(), chain.n_classes()).with_width(5);
        arch.disc_head = vec![7];
        arch.spectral_norm = false;
        let mut m = ModelBundle::new(arch, &mut Rng::new(100 + seed)).map_err(err)?;
        let mut rng = Rng::new(200 + seed);
        let x = rng.normal_tensor(&[4, 6]).map(f64::tanh);
        let z = rng.normal_tensor(&[4, 3]);
        let r = saturated_discriminator_demo(&mut m, ChainSpec::new(chain), &x, &z, seed, 1.0 - 1e-6, 5000)
            .map_err(err)?;
        worst_ratio = worst_ratio.max(r.ratio);
        min_prob = min_prob.min(r.min_true_prob);
    }
    // Misclassification: one wrong class dominates every row by a margin of
    // at least 15 nats; the remaining wrong classes must get no gradient.
    let mut rng = Rng::new(7);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..200 {
        let n = 4;
        let rows = 3;
        let mut store = ParamStore::new();
        let mut dominant = Vec::new();
        let mut ids = Vec::new();
        for i in 0..n {
            let mut t = Tensor::zeros(&[rows, n]);
            let mut dom = Vec::new();
            for r in 0..rows {
                let j = (i + 1 + rng.below(n as u64 - 1) as usize) % n;
                for k in 0..n {
                    t.set(r, k, 10.0 * rng.uniform() - 5.0);
                }
                t.set(r, j, 20.0 + 10.0 * rng.uniform());
                dom.push(j);
            }
            dominant.push(dom);
            ids.push(store.add(format!("l{i}"), Group::Other, t).map_err(err)?);
        }
        let mut g = Graph::new(&[Group::Other]);
        let nodes: Vec<_> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let loss = ge_loss_misclass(&mut g, &nodes).map_err(err)?;
        g.backward(loss, &mut store).map_err(err)?;
        for (i, &id) in ids.iter().enumerate() {
            let gr = store.grad(id);
            for r in 0..rows {
                for k in 0..n {
                    if k != i && k != dominant[i][r] {
                        worst_grad = worst_grad.max(gr.at(r, k).abs());
                    }
                }
            }
        }
    }
    Ok(Outcome {
        pass: min_prob >= 1.0 - 1e-6 && worst_ratio <= 1e-3 && worst_grad <= 1e-6,
        detail: format!(
            "min true-class prob {min_prob:.9}; max |grad minimax|/|grad pot| {worst_ratio:.2e} (<= 1e-3); misclassification max |grad| on non-dominant wrong classes {worst_grad:.2e} (<= 1e-6) over 200 random states"
        ),
    })
}

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
fn jacobi_top_eigenvalue(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

fn sigma_max(w: &Tensor) -> f64 {
    let c = w.cols();
    let gram = (0..c)
        .map(|i| (0..c).map(|j| (0..w.rows()).map(|k| w.at(k, i) * w.at(k, j)).sum()).collect())
        .collect();
    jacobi_top_eigenvalue(gram).max(0.0).sqrt()
}

fn c6_spectral() -> Result<Outcome, String> {
    let mut rng = Rng::new(66);
    let mut worst_unit: f64 = 0.0;
    let mut worst_est: f64 = 0.0;
    for _ in 0..100 {
        let r = rng.range_inclusive(1, 48);
        let c = rng.range_inclusive(1, 48);
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "w", Group::Discriminator, c, r, true, &mut rng).map_err(err)?;
        *store.value_mut(layer.w) = rng.normal_tensor(&[r, c]).scale(1.0 + 3.0 * rng.uniform());
        let exact = sigma_max(store.value(layer.w));
        let (wn, est) = spectral_normalize(&layer, &mut store, 30).map_err(err)?;
        worst_unit = worst_unit.max((sigma_max(&wn) - 1.0).abs());
        worst_est = worst_est.max((est - exact).abs() / exact);
    }
    Ok(Outcome {
        pass: worst_unit <= 1e-3,
        detail: format!(
            "100 random matrices up to 48x48, 30 iterations; max |sigma_max(W/sigma) - 1| = {worst_unit:.2e} (tol 1e-3) by Jacobi eigen-iteration; max relative estimate error {worst_est:.2e}"
        ),
    })
}

fn chi_square_p(obs: &[f64], expected: &[f64]) -> f64 {
    let stat: f64 = obs.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum();
    ChiSquared::new((obs.len() - 1) as f64).unwrap().sf(stat)
}

fn c7_masks() -> Result<Outcome, String> {
    let mut rng = Rng::new(77);
    let mut mismatches = 0usize;
    for _ in 0..10_000 {
        let geom = ImageGeometry {
            side: rng.range_inclusive(1, 10),
            channels: rng.range_inclusive(1, 3),
        };
        let batch = rng.range_inclusive(1, 3);
        let x = rng.normal_tensor(&[batch, geom.pixels()]);
        let recon = rng.normal_tensor(&[batch, geom.pixels()]);
        let masks: Vec<Mask> = (0..batch).map(|_| sample_mask(geom.side, &mut rng)).collect();
        let m = mix(&x, &recon, &masks, geom).map_err(err)?;
        for b in 0..batch {
            for row in 0..geom.side {
                for col in 0..geom.side {
                    let mk = &masks[b];
                    let inside = mk.x0 <= col && col < mk.x0 + mk.w && mk.y0 <= row && row < mk.y0 + mk.h;
                    for ch in 0..geom.channels {
                        let k = (row * geom.side + col) * geom.channels + ch;
                        let want = if inside { recon.at(b, k) } else { x.at(b, k) };
                        if m.at(b, k).to_bits() != want.to_bits() {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
    }
    // Marginals over 1e5 draws on the bars8 image side.
    let s = 8;
    let n = 100_000;
    let mut w = vec![0.0; s];
    let mut h = vec![0.0; s];
    let mut wx = vec![0.0; s * s];
    let mut hy = vec![0.0; s * s];
    for _ in 0..n {
        let m = sample_mask(s, &mut rng);
        w[m.w - 1] += 1.0;
        h[m.h - 1] += 1.0;
        wx[(m.w - 1) * s + m.x0] += 1.0;
        hy[(m.h - 1) * s + m.y0] += 1.0;
    }
    let uniform = vec![n as f64 / s as f64; s];
    let (mut jo, mut je, mut ko, mut ke) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for size in 1..=s {
        for o in 0..=s - size {
            let e = n as f64 / s as f64 / (s - size + 1) as f64;
            jo.push(wx[(size - 1) * s + o]);
            je.push(e);
            ko.push(hy[(size - 1) * s + o]);
            ke.push(e);
        }
    }
    let ps = [
        chi_square_p(&w, &uniform),
        chi_square_p(&h, &uniform),
        chi_square_p(&jo, &je),
        chi_square_p(&ko, &ke),
    ];
    let pmin = ps.iter().cloned().fold(1.0, f64::min);
    Ok(Outcome {
        pass: mismatches == 0 && pmin > 0.001,
        detail: format!(
            "10^4 random triples, {mismatches} non-bit-exact pixels; chi-square p-values w {:.3} h {:.3} (w,x0) {:.3} (h,y0) {:.3} (need > 0.001)",
            ps[0], ps[1], ps[2], ps[3]
        ),
    })
}

struct ToyRuns {
    steps: u64,
    /// `[model][seed]` final rows for ali, gali4, gali_mix, gali_pt.
    rows: Vec<Vec<MetricsRow>>,
    max_run_secs: f64,
}

const MODELS: [(&str, &str); 4] = [("ali2", "ali"), ("gali4", "pot"), ("gali_mix", "pot"), ("gali_pt", "pot")];

fn work_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("gali-acceptance-{}", std::process::id()));
    fs::create_dir_all(&d).expect("temp dir");
    d
}

fn toy_runs() -> &'static Result<ToyRuns, String> {
    static R: OnceLock<Result<ToyRuns, String>> = OnceLock::new();
    R.get_or_init(|| {
        let steps = std::env::var("GALI_ACCEPTANCE_STEPS")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(FULL_STEPS);
        let dir = work_dir();
        let featnet = dir.join("featnet.gali");
        gali::harness::run_featnet(0, 5000, &featnet).map_err(err)?;
        let mut rows = vec![Vec::new(); MODELS.len()];
        let mut max_run_secs: f64 = 0.0;
        for (mi, (chain, objective)) in MODELS.iter().enumerate() {
            for seed in SEEDS {
                let text = format!(
                    "dataset = bars8\nchain = {chain}\nobjective = {objective}\nbatch = 128\nsteps = {steps}\neval_every = {steps}\nseed = {seed}\nfeatnet = {}\nout_dir = {}\n",
                    featnet.display(),
                    dir.join(format!("{chain}-{seed}")).display()
                );
                let cfg = TrainConfig::from_text(&text, &[]).map_err(err)?;
                let t = Instant::now();
                let out = run_train(&cfg).map_err(err)?;
                let secs = t.elapsed().as_secs_f64();
                max_run_secs = max_run_secs.max(secs);
                let last = out.rows.last().cloned().ok_or("no metrics rows")?;
                println!(
                    "    {chain:<8} seed {seed}: pixel_mse {:.4} feature_mse {:.4} inpaint_pixel_mse {:.4} ({secs:.0}s)",
                    last.pixel_mse.unwrap_or(f64::NAN),
                    last.feature_mse.unwrap_or(f64::NAN),
                    last.inpaint_pixel_mse.unwrap_or(f64::NAN)
                );
                rows[mi].push(last);
            }
        }
        let _ = fs::remove_dir_all(&dir);
        Ok(ToyRuns {
            steps,
            rows,
            max_run_secs,
        })
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Seeds where `a ≤ b`, plus both medians.
fn ordering(a: &[MetricsRow], b: &[MetricsRow], f: fn(&MetricsRow) -> Option<f64>) -> (usize, f64, f64) {
    let va: Vec<f64> = a.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect();
    let vb: Vec<f64> = b.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect();
    let wins = va.iter().zip(&vb).filter(|(x, y)| x <= y).count();
    (wins, median(va), median(vb))
}

fn budget_note(steps: u64) -> String {
    if steps == FULL_STEPS {
        format!("{steps} steps x batch 128, 5 seeds")
    } else {
        format!("REDUCED budget {steps} steps (criterion specifies {FULL_STEPS}), 5 seeds")
    }
}

fn c8_toy_training() -> Result<Outcome, String> {
    let runs = toy_runs().as_ref().map_err(|e| e.clone())?;
    let (w1, m_g4, m_ali) = ordering(&runs.rows[1], &runs.rows[0], |r| r.pixel_mse);
    let (w2, m_mix, m_g4i) = ordering(&runs.rows[2], &runs.rows[1], |r| r.inpaint_pixel_mse);
    Ok(Outcome {
        pass: w1 >= 3 && w2 >= 3 && runs.steps == FULL_STEPS,
        detail: format!(
            "{}; pixel_mse GALI-4 <= ALI in {w1}/5 seeds (medians {m_g4:.4} vs {m_ali:.4}); inpaint_pixel_mse GALI-mix <= GALI-4 in {w2}/5 (medians {m_mix:.4} vs {m_g4i:.4}); slowest run {:.0}s",
            budget_note(runs.steps),
            runs.max_run_secs
        ),
    })
}

fn c9_pretrained() -> Result<Outcome, String> {
    let runs = toy_runs().as_ref().map_err(|e| e.clone())?;
    let (w, m_pt, m_g4) = ordering(&runs.rows[3], &runs.rows[1], |r| r.feature_mse);
    Ok(Outcome {
        pass: w >= 3 && m_pt <= m_g4 && runs.steps == FULL_STEPS,
        detail: format!(
            "{}; feature_mse GALI-PT <= GALI-4 in {w}/5 seeds (medians {m_pt:.4} vs {m_g4:.4})",
            budget_note(runs.steps)
        ),
    })
}

fn run_cli(args: &[&str], cwd: &Path) -> Result<std::process::Output, String> {
    Command::new(env!("CARGO_BIN_EXE_gali"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(err)
}

fn c10_determinism() -> Result<Outcome, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let cfg_text = "dataset = bars8\nchain = gali_mix\nwidth = 16\nd_z = 4\nbatch = 32\nsteps = 25\neval_every = 5\neval_size = 128\nseed = 11\n";
    fs::write(d.join("run.cfg"), cfg_text).map_err(err)?;
    for out in ["a", "b"] {
        let o = run_cli(&["train", "--config", "run.cfg", "--out", out], d)?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
    }
    let csv_a = fs::read(d.join("a/metrics.csv")).map_err(err)?;
    let identical = csv_a == fs::read(d.join("b/metrics.csv")).map_err(err)?;

    // Round trip through a checkpoint from an in-memory model.
    let mut cfg = TrainConfig::from_text(cfg_text, &[]).map_err(err)?;
    cfg.out_dir = d.join("mem");
    let mut tr = Trainer::new(cfg.clone()).map_err(err)?;
    for _ in 0..5 {
        tr.train_step().map_err(err)?;
    }
    let path = d.join("mem.gali");
    save_bundle(&tr.bundle, &path).map_err(err)?;
    let back = load_bundle(&cfg, &path).map_err(err)?;
    let mut exact = back.store.len() == tr.bundle.store.len();
    for ((_, p), (_, q)) in tr.bundle.store.iter().zip(back.store.iter()) {
        let want: Vec<f64> = p.value.data().iter().map(|&v| f64::from(v as f32)).collect();
        exact &= p.name == q.name && q.value.data() == &want[..];
    }
    let bytes = fs::read(&path).map_err(err)?;
    exact &= Checkpoint::from_store(&back.store).to_bytes() == bytes;

    let mut bad = bytes.clone();
    let mid = bad.len() / 3;
    bad[mid] ^= 0x40;
    fs::write(d.join("bad.gali"), &bad).map_err(err)?;
    let o = run_cli(&["eval", "--ckpt", "bad.gali", "--config", "run.cfg"], d)?;
    let code = o.status.code();
    Ok(Outcome {
        pass: identical && exact && code == Some(4),
        detail: format!(
            "metrics.csv byte-identical across runs: {identical} ({} bytes); checkpoint round trip bit-exact at f32: {exact}; corrupted checkpoint exit code {code:?}",
            csv_a.len()
        ),
    })
}
