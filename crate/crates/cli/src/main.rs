//! `usegan` — dataset generation, training, sampling, evaluation and the
//! four-variant ablation.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use usegan_core::config::{resolve_output, EvalConfig, RunConfig};
use usegan_core::data::synthetic::generate_synthetic_dataset;
use usegan_core::metrics::extractor::{EXTERNAL_ID, TOY_ID};
use usegan_core::metrics::{MetricReport, DEFAULT_SPLITS, MIN_EVAL_SAMPLES};
use usegan_core::{plot, run, Error};

#[derive(Parser)]
#[command(name = "usegan", version, about = "USE/CMHSA GAN workbench")]
#[command(after_help = "Relative output directories are placed under $USEGAN_OUTPUT_ROOT when it is set.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic face dataset with its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the run's checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
        /// Print losses every this many steps (0 = silent).
        #[arg(long, default_value_t = 50)]
        log_every: u64,
    },
    /// Write an N-image sample grid from fixed latents.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID and IS of a checkpoint, or of precomputed activation files.
    Eval {
        #[arg(long, required_unless_present = "real_acts")]
        checkpoint: Option<PathBuf>,
        #[arg(long, required_unless_present = "real_acts")]
        data: Option<PathBuf>,
        #[arg(long, default_value = TOY_ID)]
        extractor: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_samples: usize,
        /// Cap on real reference images from the train split.
        #[arg(long)]
        n_real: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_SPLITS)]
        splits: usize,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Real-image activations (external extractor).
        #[arg(long, requires = "fake_acts")]
        real_acts: Option<PathBuf>,
        #[arg(long)]
        fake_acts: Option<PathBuf>,
        /// Class probabilities for the fakes; enables IS with the external extractor.
        #[arg(long)]
        fake_probs: Option<PathBuf>,
    },
    /// Train and evaluate all four variants over the configured seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a loss log to PNG.
    Plot {
        #[arg(long)]
        losses: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        smooth: usize,
    },
}

fn print_report(r: &MetricReport) {
    println!("extractor {} ({})", r.extractor, r.extractor_digest);
    println!("FID {}", r.fid);
    match (r.is_mean, r.is_std) {
        (Some(m), Some(s)) => println!("IS  {m:.6} ± {s:.6} ({} splits)", r.is_splits),
        _ => println!("IS  n/a (no class probabilities)"),
    }
    if let Some(f) = r.noise_floor {
        println!("real-vs-real FID {f}");
    }
    println!("real {}, fake {}", r.n_real, r.n_fake);
}

fn execute(command: Command) -> usegan_core::Result<()> {
    match command {
        Command::GenData { out, n, seed } => {
            let out = resolve_output(&out);
            let manifest = generate_synthetic_dataset(&out, n as usize, seed)?;
            println!("wrote {} images to {} (digest {})", n, out.display(), manifest.digest());
        }
        Command::Train { config, resume, log_every } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = run::train(&cfg, resume, |l| {
                if log_every > 0 && l.step % log_every == 0 {
                    eprintln!("step {:>6}  L_D {:.5}  L_G {:.5}", l.step, l.d.total, l.g.total);
                }
            })?;
            println!("trained to step {} in {}", outcome.state.step(), outcome.dir.display());
        }
        Command::Sample { checkpoint, n, seed, out } => {
            let path = run::sample(&checkpoint, n as usize, seed, &out)?;
            println!("{}", path.display());
        }
        Command::Eval {
            checkpoint,
            data,
            extractor,
            seed,
            n_samples,
            n_real,
            splits,
            out,
            real_acts,
            fake_acts,
            fake_probs,
        } => {
            let report = if extractor == EXTERNAL_ID {
                let (Some(real), Some(fake)) = (real_acts, fake_acts) else {
                    return Err(Error::InvalidArgument(format!(
                        "extractor {EXTERNAL_ID} needs --real-acts and --fake-acts"
                    )));
                };
                run::evaluate_external(&real, &fake, fake_probs.as_deref(), splits)?
            } else {
                if extractor != TOY_ID {
                    return Err(run::unknown_extractor(&extractor));
                }
                if n_samples < MIN_EVAL_SAMPLES {
                    return Err(Error::InvalidArgument(format!("--n-samples must be at least {MIN_EVAL_SAMPLES}")));
                }
                let (Some(checkpoint), Some(data)) = (checkpoint, data) else {
                    return Err(Error::InvalidArgument("--checkpoint and --data are required".into()));
                };
                let eval =
                    EvalConfig { extractor: extractor.clone(), n_samples, splits, n_real, ..EvalConfig::default() };
                run::evaluate_checkpoint(&checkpoint, &data, &extractor, &eval, seed, &out)?
            };
            print_report(&report);
        }
        Command::Ablate { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run::ablate(&cfg, |msg| eprintln!("{msg}"))?;
            print!("{}", report.to_text());
        }
        Command::Plot { losses, out, smooth } => {
            let rows = run::read_losses(&losses)?;
            let out = resolve_output(&out);
            plot::write_loss_plot(&rows, &out, smooth)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
