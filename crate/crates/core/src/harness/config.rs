//! Training configuration: `key = value` lines with `#` comments, where
//! later assignments and command line overrides win.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::chains::{ChainKind, PtClass4};
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::objectives::ObjectiveKind;
use crate::optim::OptimizerKind;

/// Learning-rate grid selectable as `lr = grid0` … `lr = grid3`.
pub const LR_GRID: [f64; 4] = [2e-5, 4e-5, 1e-4, 2e-4];

const KEYS: &[&str] = &[
    "dataset",
    "chain",
    "objective",
    "d_z",
    "width",
    "lr",
    "batch",
    "steps",
    "n_dis",
    "seed",
    "sigma0",
    "tau",
    "lambda_alice",
    "eval_every",
    "eval_size",
    "out_dir",
    "optimizer",
    "spectral_norm",
    "featnet",
    "pt_class4",
];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: Dataset,
    pub chain: ChainKind,
    pub objective: ObjectiveKind,
    pub d_z: usize,
    /// Hidden width of every network (the discriminator head gets twice).
    pub width: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub n_dis: usize,
    pub seed: u64,
    pub sigma0: f64,
    /// Noise decay constant; `None` means `steps / 4`.
    pub tau: Option<f64>,
    pub lambda_alice: f64,
    pub eval_every: u64,
    /// Held-out samples used by every evaluation.
    pub eval_size: usize,
    pub out_dir: PathBuf,
    pub optimizer: OptimizerKind,
    pub spectral_norm: bool,
    /// Trained feature network checkpoint; required by `gali_pt` and used
    /// for the feature metrics whenever present.
    pub featnet: Option<PathBuf>,
    pub pt_class4: PtClass4,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: Dataset::Bars8,
            chain: ChainKind::Gali4,
            objective: ObjectiveKind::ProductOfTerms,
            d_z: 16,
            width: 64,
            lr: 2e-4,
            batch: 128,
            steps: 20_000,
            n_dis: 1,
            seed: 0,
            sigma0: 0.3,
            tau: None,
            lambda_alice: 1.0,
            eval_every: 1000,
            eval_size: 1000,
            out_dir: PathBuf::from("runs/default"),
            optimizer: OptimizerKind::adam(),
            spectral_norm: true,
            featnet: None,
            pt_class4: PtClass4::Literal,
        }
    }
}

/// Splits config text into ordered assignments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses one `key=value` command line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl TrainConfig {
    /// Applies assignments in order on top of the defaults, then validates.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
            map.insert(k.as_str(), v.as_str());
        }
        let mut c = TrainConfig::default();
        if let Some(v) = map.get("dataset") {
            c.dataset = Dataset::parse(v)?;
        }
        if let Some(v) = map.get("chain") {
            c.chain = ChainKind::parse(v).ok_or_else(|| Error::Config(format!("unknown chain '{v}'")))?;
        }
        if let Some(v) = map.get("lambda_alice") {
            c.lambda_alice = num("lambda_alice", v)?;
        }
        if let Some(v) = map.get("objective") {
            c.objective = ObjectiveKind::parse(v, c.lambda_alice)
                .ok_or_else(|| Error::Config(format!("unknown objective '{v}'")))?;
        }
        if let ObjectiveKind::AliceL2(_) = c.objective {
            c.objective = ObjectiveKind::AliceL2(c.lambda_alice);
        }
        if let Some(v) = map.get("d_z") {
            c.d_z = num("d_z", v)?;
        }
        if let Some(v) = map.get("width") {
            c.width = num("width", v)?;
        }
        if let Some(v) = map.get("lr") {
            c.lr = match v.strip_prefix("grid") {
                Some(i) => *LR_GRID
                    .get(num::<usize>("lr", i)?)
                    .ok_or_else(|| Error::Config(format!("lr preset '{v}' out of range")))?,
                None => num("lr", v)?,
            };
        }
        if let Some(v) = map.get("batch") {
            c.batch = num("batch", v)?;
        }
        if let Some(v) = map.get("steps") {
            c.steps = num("steps", v)?;
        }
        if let Some(v) = map.get("n_dis") {
            c.n_dis = num("n_dis", v)?;
        }
        if let Some(v) = map.get("seed") {
            c.seed = num("seed", v)?;
        }
        if let Some(v) = map.get("sigma0") {
            c.sigma0 = num("sigma0", v)?;
        }
        if let Some(v) = map.get("tau") {
            c.tau = Some(num("tau", v)?);
        }
        if let Some(v) = map.get("eval_every") {
            c.eval_every = num("eval_every", v)?;
        }
        if let Some(v) = map.get("eval_size") {
            c.eval_size = num("eval_size", v)?;
        }
        if let Some(v) = map.get("out_dir") {
            c.out_dir = PathBuf::from(v);
        }
        if let Some(v) = map.get("optimizer") {
            c.optimizer = match *v {
                "adam" => OptimizerKind::adam(),
                "sgd" => OptimizerKind::sgd(),
                other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
            };
        }
        if let Some(v) = map.get("spectral_norm") {
            c.spectral_norm = num("spectral_norm", v)?;
        }
        if let Some(v) = map.get("featnet") {
            c.featnet = (!v.is_empty()).then(|| PathBuf::from(v));
        }
        if let Some(v) = map.get("pt_class4") {
            c.pt_class4 = match *v {
                "literal" => PtClass4::Literal,
                "own_image" => PtClass4::OwnImage,
                other => return Err(Error::Config(format!("unknown pt_class4 '{other}'"))),
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.steps < 1 {
            return bad("steps must be >= 1");
        }
        if self.n_dis < 1 {
            return bad("n_dis must be >= 1");
        }
        if self.batch < 1 || self.d_z < 1 || self.width < 1 || self.eval_every < 1 {
            return bad("batch, d_z, width and eval_every must be >= 1");
        }
        if self.eval_size < 8 {
            return bad("eval_size must be >= 8");
        }
        if !(self.sigma0 >= 0.0) || self.tau.is_some_and(|t| !(t > 0.0)) {
            return bad("need sigma0 >= 0 and tau > 0");
        }
        self.objective.validate()?;
        if self.objective.needs_two_classes() && self.chain != ChainKind::Ali2 {
            return Err(Error::Config(format!(
                "objective {} needs chain ali2, got {}",
                self.objective.name(),
                self.chain.name()
            )));
        }
        if self.chain == ChainKind::GaliMix && self.dataset != Dataset::Bars8 {
            return bad("chain gali_mix requires dataset bars8");
        }
        if self.chain == ChainKind::GaliPt {
            if self.dataset != Dataset::Bars8 {
                return bad("chain gali_pt requires dataset bars8");
            }
            if self.featnet.is_none() {
                return bad("chain gali_pt requires a trained feature network (featnet = PATH)");
            }
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(self.steps as f64 / 4.0)
    }

    /// Canonical `key = value` form, parseable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = match self.optimizer {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::SgdMomentum { .. } => "sgd",
        };
        let pt = match self.pt_class4 {
            PtClass4::Literal => "literal",
            PtClass4::OwnImage => "own_image",
        };
        let lines: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.name().into()),
            ("chain", self.chain.name().into()),
            ("objective", self.objective.name().into()),
            ("d_z", self.d_z.to_string()),
            ("width", self.width.to_string()),
            ("lr", format!("{:e}", self.lr)),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("n_dis", self.n_dis.to_string()),
            ("seed", self.seed.to_string()),
            ("sigma0", self.sigma0.to_string()),
            ("tau", self.tau().to_string()),
            ("lambda_alice", self.lambda_alice.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("optimizer", opt.into()),
            ("spectral_norm", self.spectral_norm.to_string()),
            ("featnet", self.featnet.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("pt_class4", pt.into()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
