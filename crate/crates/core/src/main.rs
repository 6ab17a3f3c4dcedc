use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use salt_core::calibration::{bin_predictions_with, read_predictions_csv, write_reliability_csv, Binning, DEFAULT_BINS};
use salt_core::harness::config::ExperimentConfig;
use salt_core::harness::experiment::run_experiment;
use salt_core::harness::gradcheck::run_gradcheck;
use salt_core::harness::sweep::{seed_bank, sweep, threads_from_env, SweepAxis};

#[derive(Parser)]
#[command(name = "salt", version, about = "Stackelberg adversarial regularization on small MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the Stackelberg gradient with finite differences and the
    /// forward Jacobian oracle on random small instances.
    Gradcheck {
        /// Unrolling steps; cycles through 1, 2, 3 when omitted.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Train once per (value, seed) and write sweep.csv to the config's output_dir.
    Sweep {
        /// k_steps, epsilon or norm.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        /// Explicit seed list; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Use this many consecutive seeds starting at the config seed.
        #[arg(long, conflicts_with = "seeds")]
        num_seeds: Option<usize>,
    },
    /// Reliability bins and ECE from a `confidence,correct` CSV.
    Calibrate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        equal_mass_bins: bool,
        /// Write the bins here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let record = run_experiment(&cfg)?;
            let last = record.last();
            println!(
                "epochs {} train_loss {:.6} val_loss {:.6} val_acc {} ece {}",
                last.epoch,
                last.train_loss,
                last.val_loss,
                last.val_acc.map_or("-".into(), |a| format!("{a:.4}")),
                last.ece.map_or("-".into(), |e| format!("{e:.4}")),
            );
            println!("wrote {}", cfg.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { k, seed, instances } => {
            if instances == 0 {
                bail!("--instances must be at least 1");
            }
            let reports = run_gradcheck(k, seed, instances)?;
            let mut out = std::io::stdout().lock();
            let mut worst = 0.0f64;
            for r in &reports {
                writeln!(
                    out,
                    "seed {} k {} norm {} params {} redraws {} total_rel_err {:.3e} leader_only_rel_err {:.3e} adjoint_exact_rel_err {:.3e} adjoint_fd_rel_err {:.3e}",
                    r.seed, r.k, r.norm, r.params, r.redraws, r.total_rel_err, r.leader_only_rel_err,
                    r.adjoint_exact_rel_err, r.adjoint_fd_rel_err
                )?;
                worst = worst.max(r.total_rel_err);
            }
            let ok = worst <= 1e-4;
            writeln!(out, "max total_rel_err {worst:.3e} {}", if ok { "PASS" } else { "FAIL" })?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Sweep {
            axis,
            values,
            config,
            seeds,
            num_seeds,
        } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let seeds = match (seeds, num_seeds) {
                (Some(s), _) => s,
                (None, Some(n)) => seed_bank(cfg.seed, n),
                (None, None) => vec![cfg.seed],
            };
            let rows = sweep(&cfg, axis, &values, &seeds, threads_from_env(), Some(&cfg.output_dir))?;
            println!("{} runs, wrote {}", rows.len(), cfg.output_dir.join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate {
            predictions,
            bins,
            equal_mass_bins,
            out,
        } => {
            let file = File::open(&predictions).with_context(|| format!("opening {}", predictions.display()))?;
            let (conf, correct) = read_predictions_csv(BufReader::new(file))?;
            let binning = if equal_mass_bins { Binning::EqualMass } else { Binning::EqualWidth };
            let report = bin_predictions_with(&conf, &correct, bins, binning)?;
            match out {
                Some(path) => {
                    write_reliability_csv(&report, BufWriter::new(File::create(&path)?))?;
                    println!("ece {:.6} n {} wrote {}", report.ece, report.n, path.display());
                }
                None => {
                    write_reliability_csv(&report, std::io::stdout().lock())?;
                    eprintln!("ece {:.6} n {}", report.ece, report.n);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
