use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsi_detect_core::gradsuite::worst;
use hsi_detect_core::run::{
    cmd_eval, cmd_grad_check, cmd_gen_data, cmd_pretrain_hsr, cmd_reconstruct, cmd_train_detector, RunConfig,
};
use hsi_detect_core::{Error, Result};

/// Hyperspectral manipulation detection pipeline.
#[derive(Parser)]
#[command(name = "hsi-detect", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed (and so the run directory).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the paired dataset into the run directory.
    GenData(Common),
    /// Pretrain the RGB to spectral reconstruction network.
    PretrainHsr(Common),
    /// Train one detector per configured train kind.
    TrainDetector(Common),
    /// Cross-manipulation evaluation; writes report.csv and summary.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint to score instead of the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct a 31-band cube from an HS1 file.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Reconstruction checkpoint; defaults to the run's `hsr.ck`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// HS1 file with 3 (RGB) or 31 channels.
        #[arg(long)]
        input: PathBuf,
        /// Output HS1 path; defaults to the run's reports directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write one PGM image per band.
        #[arg(long)]
        dump_bands: bool,
    },
    /// Check tape gradients against finite differences.
    GradCheck {
        /// Optional; only the seed is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HSI_DETECT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("HSI_DETECT_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs one command; `Ok(false)` means it finished but did not pass.
fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c.config, c.seed)?;
            let s = cmd_gen_data(&cfg)?;
            println!("run directory: {}", s.run_dir.display());
            println!(
                "scene pairs: train {} val {} test {} ({} samples)",
                s.pairs[0], s.pairs[1], s.pairs[2], s.manifest_lines
            );
        }
        Command::PretrainHsr(c) => {
            let cfg = load(&c.config, c.seed)?;
            let s = cmd_pretrain_hsr(&cfg)?;
            println!("mrae: first step {:.4}, last step {:.4}", s.first_loss, s.last_loss);
            if let Some(v) = s.val_mrae {
                println!("validation mrae: {v:.4}");
            }
            println!("checkpoint: {}", s.checkpoint.display());
            println!("loss log: {}", s.log.display());
        }
        Command::TrainDetector(c) => {
            let cfg = load(&c.config, c.seed)?;
            for s in cmd_train_detector(&cfg)? {
                println!(
                    "{}: total loss {:.4} -> {:.4}, checkpoint {}",
                    s.kind,
                    s.first_total,
                    s.last_total,
                    s.checkpoint.display()
                );
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common.config, common.seed)?;
            let table = cmd_eval(&cfg, checkpoint.as_deref())?;
            print!("{}", table.render());
            println!("reports: {}", cfg.run_dir().reports().display());
        }
        Command::Reconstruct {
            common,
            checkpoint,
            input,
            output,
            dump_bands,
        } => {
            let cfg = load(&common.config, common.seed)?;
            let s = cmd_reconstruct(&cfg, checkpoint.as_deref(), &input, output.as_deref(), dump_bands)?;
            println!("wrote {}", s.output.display());
            if let Some(first) = s.bands.first() {
                println!("{} band images in {}", s.bands.len(), first.parent().unwrap_or(Path::new(".")).display());
            }
        }
        Command::GradCheck { config, seed } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let results = cmd_grad_check(&cfg)?;
            for r in &results {
                println!("{r}");
            }
            let passed = results.iter().all(|r| r.passed());
            if let Some(w) = worst(&results) {
                println!("worst: {w}");
            }
            println!("{}", if passed { "grad check passed" } else { "grad check FAILED" });
            return Ok(passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
