use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gali::harness::config::parse_override;
use gali::harness::{self, TrainConfig};
use gali::{Error, Result};

#[derive(Parser)]
#[command(name = "gali", version, about = "Multi-class adversarially learned inference at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics.csv, model.gali and report.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Recompute all metrics for a checkpoint on held-out data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check the optimal-discriminator identities on random discrete joints.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every op and objective.
    Gradcheck,
    /// Inpaint held-out images and write triptych.pgm.
    Inpaint {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train the bars8 feature network and save it as a checkpoint.
    Featnet {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        max_steps: usize,
    },
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter().map(|s| parse_override(s)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out, set } => {
            let mut ov = overrides(&set)?;
            if let Some(s) = seed {
                ov.push(("seed".into(), s.to_string()));
            }
            if let Some(o) = out {
                ov.push(("out_dir".into(), o.display().to_string()));
            }
            let cfg = TrainConfig::load(&config, &ov)?;
            let outcome = harness::run_train(&cfg)?;
            print!("{}", harness::train::report_text(&cfg, &outcome.last));
            println!("wrote {}", outcome.out_dir.display());
        }
        Cmd::Eval { ckpt, config, set } => {
            let cfg = TrainConfig::load(&config, &overrides(&set)?)?;
            let ev = harness::run_eval(&ckpt, &cfg)?;
            print!("{}", harness::train::report_text(&cfg, &ev));
        }
        Cmd::OracleCheck { trials, seed } => {
            let report = harness::run_oracle_check(seed, trials)?;
            println!("{report}");
            if !report.passed() {
                return Err(Error::Numerical("oracle identities violated".into()));
            }
        }
        Cmd::Gradcheck => {
            let report = harness::run_gradcheck()?;
            println!("{report}");
            if !report.passed() {
                return Err(Error::Numerical("gradient check failed".into()));
            }
        }
        Cmd::Inpaint { ckpt, config, out, set } => {
            let cfg = TrainConfig::load(&config, &overrides(&set)?)?;
            let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
            let r = harness::run_inpaint(&ckpt, &cfg, &dir)?;
            println!("inpaint_pixel_mse = {:.9e}", r.pixel_mse);
            if let Some(f) = r.feature_mse {
                println!("inpaint_feature_mse = {f:.9e}");
            }
            println!("wrote {}", r.triptych.display());
        }
        Cmd::Featnet { out, seed, max_steps } => {
            let r = harness::run_featnet(seed, max_steps, &out)?;
            println!("feature network accuracy {:.4} after {} steps", r.accuracy, r.steps);
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
