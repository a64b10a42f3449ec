use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contextrast::bane::{distance_transform, extract_edges, BinaryErrorMap};
use contextrast::feature_store::io::{read_pgm, write_grid, write_json, write_pgm};
use contextrast::feature_store::{FeatureGrid, LabelMap};
use contextrast::losses::LossReport;
use contextrast::metrics::{profile_csv, MetricsReport};
use contextrast::trainer::checkpoint::ModelKind;
use contextrast::trainer::train::log_jsonl;
use contextrast::trainer::{
    evaluate, grad_check, load_checkpoint, profile, save_checkpoint, train, Checkpoint,
    EvalOptions, Mode, TrainConfig, TrainError,
};
use contextrast::Error;
use serde::Serialize;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Contextual contrastive learning toolkit: training, evaluation and
/// diagnostics on the synthetic shapes benchmark.
#[derive(Parser, Debug)]
#[command(name = "contextrast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the reference encoder and write checkpoint, log and metrics.
    Train {
        /// Flat key = value run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Loss mode: ce_only, ce_pa or ce_pa_bane.
        #[arg(long)]
        mode: Mode,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on held-out shapes and print metrics JSON.
    Eval {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out images.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Boundary radii in pixels.
        #[arg(long, num_args = 1.., default_values_t = [5.0, 7.0, 10.0])]
        radius: Vec<f64>,
        /// Seed of the held-out image stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distance from each error pixel of a binary PGM mask to the region edge.
    Dt {
        /// Binary PGM; nonzero pixels form the error region.
        #[arg(long)]
        mask: PathBuf,
        /// Output CTXF grid (one channel, +inf off the region).
        #[arg(long)]
        out: PathBuf,
        /// Optional PGM rendering of the distances.
        #[arg(long)]
        vis: Option<PathBuf>,
    },
    /// Cosine similarity of error pixels to their class anchor by edge distance, as CSV.
    Profile {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Number of held-out images.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Seed of the held-out image stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the training gradients on a tiny batch.
    Gradcheck {
        /// Flat key = value run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the configured mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(m) => Failure::Numeric(m),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: Mode,
    iterations: usize,
    final_loss: &'a LossReport,
    eval: &'a MetricsReport,
}

#[derive(Serialize)]
struct NumericAbort<'a> {
    diagnostics: &'a contextrast::trainer::Diagnostics,
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(Error::from)?
    );
    Ok(())
}

fn run_train(config: &Path, mode: Mode, out: &Path) -> Result<(), Failure> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.mode = mode;
    std::fs::create_dir_all(out)?;
    let outcome = match train(&cfg, |r| {
        if r.iter % 100 == 0 {
            log::info!("iter {} total {:.4}", r.iter, r.total);
        }
    }) {
        Ok(o) => o,
        Err(TrainError::NonFinite { diagnostics, log }) => {
            std::fs::write(out.join("train_log.jsonl"), log_jsonl(&log)?)?;
            write_json(
                out.join("diagnostics.json"),
                &NumericAbort {
                    diagnostics: &diagnostics,
                },
            )?;
            return Err(Failure::Numeric(format!(
                "non-finite loss at iteration {}; diagnostics in {}",
                diagnostics.iter,
                out.join("diagnostics.json").display()
            )));
        }
        Err(TrainError::Other(e)) => return Err(e.into()),
    };
    save_checkpoint(
        out.join("checkpoint"),
        ModelKind::Encoder,
        &outcome.encoder,
        &cfg,
    )?;
    std::fs::write(out.join("train_log.jsonl"), log_jsonl(&outcome.log)?)?;
    let ck = Checkpoint {
        model: ModelKind::Encoder,
        config: cfg.clone(),
        encoder: outcome.encoder,
    };
    let eval = evaluate(&ck, &EvalOptions::new(0, cfg.eval_samples))?;
    let summary = TrainSummary {
        mode,
        iterations: cfg.iterations,
        final_loss: &outcome.last_report,
        eval: &eval,
    };
    write_json(out.join("metrics.json"), &summary)?;
    print_json(&summary)
}

fn run_dt(mask: &Path, out: &Path, vis: Option<&Path>) -> Result<(), Failure> {
    let m = read_pgm(mask)?;
    let (h, w) = m.dims();
    let bits: Vec<bool> = m.values().iter().map(|&v| v != 0).collect();
    if !bits.contains(&true) {
        return Err(Failure::Usage(
            "mask has no error pixels, so no edges".into(),
        ));
    }
    let map = BinaryErrorMap::from_bits(h, w, bits)?;
    let dist = distance_transform(&map, &extract_edges(&map))?;
    let d = dist.distances();
    write_grid(out, &FeatureGrid::new(0, h, w, 1, d.clone())?)?;
    if let Some(vis) = vis {
        let max = d
            .iter()
            .copied()
            .filter(|x| x.is_finite())
            .fold(0.0f32, f32::max)
            .max(1.0);
        let px = d
            .iter()
            .map(|&x| {
                if x.is_finite() {
                    (1.0 + 253.0 * x / max).round() as u8
                } else {
                    0
                }
            })
            .collect();
        write_pgm(vis, &LabelMap::new(h, w, px)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, mode, out } => run_train(&config, mode, &out),
        Command::Eval {
            checkpoint,
            samples,
            radius,
            seed,
            out,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut opts = EvalOptions::new(seed, samples);
            opts.radii = radius;
            let report = evaluate(&ck, &opts)?;
            if let Some(out) = out {
                write_json(out, &report)?;
            }
            print_json(&report)
        }
        Command::Dt { mask, out, vis } => run_dt(&mask, &out, vis.as_deref()),
        Command::Profile {
            checkpoint,
            out,
            samples,
            seed,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let csv = profile_csv(&profile(&ck, seed, samples)?);
            std::fs::write(out, csv)?;
            Ok(())
        }
        Command::Gradcheck {
            config,
            mode,
            tolerance,
        } => {
            let mut cfg = TrainConfig::load(config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let report = grad_check(&cfg, tolerance)?;
            print_json(&report)?;
            if report.passed {
                Ok(())
            } else {
                Err(Failure::Numeric(format!(
                    "max relative error {} exceeds {}",
                    report.max_rel_err, tolerance
                )))
            }
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("CTXR_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        Failure::Usage(format!(
            "CTXR_THREADS must be a non-negative integer, got {v:?}"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(2)
        }
    }
}
