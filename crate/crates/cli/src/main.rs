use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use attnpost_cli::{cmd_eval, cmd_infer, cmd_rateplan, cmd_train, AppConfig};
use attnpost_core::codec::PlanOptions;

#[derive(Parser)]
#[command(name = "attnpost", version, about = "Attention-based post-processing for decoded images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Average the network over the four quarter-turn rotations.
    #[arg(long)]
    ensemble: bool,
}

impl Common {
    fn load(&self) -> Result<(AppConfig, PathBuf)> {
        let mut cfg = AppConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        cfg.ensemble |= self.ensemble;
        let out = cfg.output_dir(self.out.as_deref())?;
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset.
    Train(Common),
    /// Restore images with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Reject the checkpoint unless its model matches this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ensemble: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a checkpoint against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// File of `decoded target` path pairs; without it the manifest is
        /// coded at the configured qp.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Choose per-image qps that meet the bpp target.
    Rateplan {
        #[command(flatten)]
        common: Common,
        /// Overrides `target_bpp`.
        #[arg(long)]
        target_bpp: Option<f64>,
        /// Number of adjacent qps an assignment may mix (1 to 3).
        #[arg(long, default_value_t = 2)]
        mix_span: usize,
        /// Stop after the per-bit greedy pass.
        #[arg(long)]
        greedy_only: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = common.load()?;
            let report = cmd_train(&cfg, &out)?;
            let (b, p) = (&report.metrics.mean_baseline, &report.metrics.mean_post);
            println!(
                "trained {} iterations; validation psnr {:.4} -> {:.4} dB, ms-ssim {:.5} -> {:.5}",
                report.history.len(),
                b.psnr,
                p.psnr,
                b.ms_ssim,
                p.ms_ssim
            );
            println!("final checkpoint {}", report.final_checkpoint.display());
        }
        Command::Infer {
            checkpoint,
            out,
            config,
            ensemble,
            inputs,
        } => {
            let model = config.as_deref().map(AppConfig::load).transpose()?.map(|c| c.model);
            let written = cmd_infer(&checkpoint, &inputs, &out, model.as_ref(), ensemble)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            common,
            checkpoint,
            pairs,
        } => {
            let (cfg, out) = common.load()?;
            let table = cmd_eval(&cfg, &checkpoint, pairs.as_deref(), &out)?;
            print!("{}", table.to_csv());
        }
        Command::Rateplan {
            common,
            target_bpp,
            mix_span,
            greedy_only,
        } => {
            let (mut cfg, out) = common.load()?;
            if let Some(t) = target_bpp {
                cfg.target_bpp = t;
            }
            let plan = cmd_rateplan(&cfg, &out, &PlanOptions {
                mix_span,
                closest_fit: !greedy_only,
            })?;
            println!(
                "achieved {:.6} bpp for target {:.6}; plan in {}",
                plan.achieved_bpp,
                plan.target_bpp,
                Path::new(&out).join("rateplan.txt").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
