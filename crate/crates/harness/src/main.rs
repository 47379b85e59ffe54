use std::path::PathBuf;
use std::process::ExitCode;

use a2mamba::model::{build_model, param_count};
use a2mamba_harness::bench::{run_bench, Outcome, DEFAULT_BUDGET};
use a2mamba_harness::data::CLASSES;
use a2mamba_harness::erf::{average_erf, write_erf};
use a2mamba_harness::gradcheck::{csv, run_suites, select};
use a2mamba_harness::train::{train, write_outputs, TrainOptions};
use a2mamba_harness::{init_threads, load_config};
use clap::{Parser, Subcommand};

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Gradient checks, toy training, scaling benchmarks and receptive fields.
#[derive(Parser)]
#[command(name = "a2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare recorded gradients with central finite differences.
    Gradcheck {
        /// "all", a module name or an op name.
        #[arg(long, default_value = "all")]
        filter: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// CSV path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the synthetic grating task.
    Train {
        /// JSON config path or preset name.
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Stop at the first evaluation reaching this test accuracy.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Time forward passes of the model and its global-attention ablation.
    Bench {
        #[arg(long)]
        config: String,
        /// Comma-separated square resolutions, multiples of 32.
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        res: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Tensor payload budget; larger runs are reported as "oom".
        #[arg(long, default_value_t = DEFAULT_BUDGET >> 20)]
        mem_limit_mb: usize,
    },
    /// Average effective receptive field of the final stage's center.
    Erf {
        #[arg(long)]
        config: String,
        /// Checkpoint prefix written by `train`; random init when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Check(String),
    Usage(String),
}

impl From<a2mamba::Error> for Failure {
    fn from(e: a2mamba::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gradcheck {
            filter,
            seed,
            trials,
            out,
        } => {
            let suites = select(&filter).map_err(|e| Failure::Usage(e.to_string()))?;
            let rows = run_suites(&suites, seed, trials, |r| {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                eprintln!(
                    "{:<28} {:<14} {:.3e} {verdict}",
                    r.op, r.shape, r.max_rel_err
                );
            })?;
            let text = csv(&rows);
            match out {
                Some(p) => std::fs::write(p, &text).map_err(a2mamba::Error::from)?,
                None => print!("{text}"),
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
            if !failed.is_empty() {
                return Err(Failure::Check(format!(
                    "gradient mismatch in {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Train {
            config,
            steps,
            seed,
            out,
            batch,
            stop_at,
        } => {
            let cfg = load_config(&config)?;
            if cfg.num_classes != CLASSES {
                return Err(Failure::Usage(format!(
                    "the synthetic task has {CLASSES} classes, config has {}",
                    cfg.num_classes
                )));
            }
            if batch == 0 {
                return Err(Failure::Usage("batch must be positive".into()));
            }
            let opts = TrainOptions {
                batch,
                stop_at_accuracy: stop_at,
                ..TrainOptions::new(steps, seed)
            };
            let (model, report) = train(&cfg, &opts, |r| {
                eprintln!(
                    "step {:>5}  loss {:.4}  test acc {:.4}",
                    r.step, r.loss, r.test_accuracy
                );
            })?;
            write_outputs(&out, &model, &report)?;
            eprintln!("{} parameters; outputs in {}", report.params, out.display());
        }
        Command::Bench {
            config,
            res,
            batch,
            reps,
            out,
            mem_limit_mb,
        } => {
            let cfg = load_config(&config)?;
            if batch == 0 || reps == 0 {
                return Err(Failure::Usage("batch and reps must be positive".into()));
            }
            let report = run_bench(&cfg, &res, batch, reps, mem_limit_mb << 20, |r| {
                match &r.outcome {
                    Outcome::Ok {
                        mean_ms,
                        std_ms,
                        peak_bytes,
                    } => eprintln!(
                        "{:<17} {:>4}²  {:>8.2} ± {:<7.2} ms  peak {} B",
                        r.variant, r.resolution, mean_ms, std_ms, peak_bytes
                    ),
                    Outcome::Oom => eprintln!("{:<17} {:>4}²  oom", r.variant, r.resolution),
                }
            })?;
            report.append_to(&out)?;
            for v in ["mass", "global_attention"] {
                match report.slope(v) {
                    Some(s) => println!("{v} slope {s:.3}"),
                    None => println!("{v} slope n/a"),
                }
            }
        }
        Command::Erf {
            config,
            ckpt,
            samples,
            res,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut model = build_model(&cfg, seed)?;
            if let Some(p) = ckpt {
                model.store.load(&p)?;
            }
            eprintln!("{} parameters", param_count(&model));
            let report = average_erf(&model, samples, res, seed)?;
            let (pgm, csv) = write_erf(&out, &report)?;
            println!("support {:.4}", report.support);
            println!("reach bound {:.4}", report.reach);
            eprintln!("wrote {} and {}", pgm.display(), csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
