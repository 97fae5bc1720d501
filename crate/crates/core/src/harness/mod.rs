//! Experiment orchestration behind the `gali` binary.

pub mod checkpoint;
pub mod config;
pub mod featnet;
pub mod pgm;
pub mod train;

use std::fmt;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use featnet::{run_featnet, train_featnet, FeatnetReport};
pub use train::{
    build_bundle, evaluate, load_bundle, run_eval, run_inpaint, run_train, save_bundle, Evaluation, InpaintReport,
    LoadedFeatnet, TrainOutcome, Trainer,
};

use crate::autodiff::{op_suite, SuiteResult};
use crate::error::Result;
use crate::objectives::objective_gradchecks;
use crate::oracle::{verify_identities, OracleReport};

/// Relative error tolerated by the gradient suite.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub results: Vec<SuiteResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.max_rel_error < GRADCHECK_TOL)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            let tag = if r.max_rel_error < GRADCHECK_TOL { "ok  " } else { "FAIL" };
            writeln!(f, "{tag} {:<20} max rel error {:.3e}", r.name, r.max_rel_error)?;
        }
        write!(
            f,
            "{}: worst {:.3e} (tolerance {GRADCHECK_TOL:e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.worst()
        )
    }
}

/// Every op on ten random draws plus all objectives and the
/// discriminator loss on a tiny bundle.
pub fn run_gradcheck() -> Result<GradcheckReport> {
    let mut results = op_suite(10)?;
    for mut r in objective_gradchecks()? {
        r.name = format!("objective {}", r.name);
        results.push(r);
    }
    Ok(GradcheckReport { results })
}

pub fn run_oracle_check(seed: u64, trials: usize) -> Result<OracleReport> {
    verify_identities(seed, trials, 200)
}
