use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use distaudit_cli::config::{self, ConfigError};
use distaudit_cli::{demo, experiment};

/// Distributed storage-audit simulator.
#[derive(Parser)]
#[command(name = "distaudit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a Sobol block sequence.
    GenSobol {
        /// Primitive polynomial, e.g. "x^3+x+1" or 0b1011.
        #[arg(long)]
        poly: String,
        /// Odd initial direction values m_1..m_d.
        #[arg(long, value_delimiter = ',', required = true)]
        init: Vec<u64>,
        /// Scaling constant (block count).
        #[arg(long)]
        constant: u64,
        /// Number of indices to emit.
        #[arg(long, default_value_t = 13)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        skip: u64,
        #[arg(long, default_value_t = 0)]
        leap: u64,
        /// Emit a JSON array instead of a comma-separated line.
        #[arg(long)]
        json: bool,
    },
    /// Test a polynomial over GF(q) and list its roots.
    GfRoots {
        #[arg(long)]
        q: u64,
        /// Coefficients, constant term first; negative values are reduced mod q.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, conflicts_with = "roots")]
        coeffs: Option<Vec<i64>>,
        /// Build the polynomial as ∏(Z − r) instead.
        #[arg(long, value_delimiter = ',')]
        roots: Option<Vec<u64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reconcile two bit strings, printing every intermediate table.
    ReconDemo {
        #[arg(long, default_value = "10010101")]
        a: String,
        #[arg(long, default_value = "101101001")]
        b: String,
        #[arg(long, default_value_t = 3)]
        mask_len: usize,
        /// Field modulus for the short encoding (the injective encoding picks
        /// the next prime above its value range).
        #[arg(long, default_value_t = 83)]
        q: u64,
        /// Bound on the symmetric difference.
        #[arg(long, default_value_t = 5)]
        m_bar: usize,
        /// Use the collision-free piece encoding instead of the short one.
        #[arg(long)]
        injective: bool,
    },
    /// Run a configured audit experiment.
    Audit {
        config: PathBuf,
        /// Output directory (overrides the config's `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute summary statistics and the fitted line from a report CSV.
    Analyze {
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSobol { poly, init, constant, count, skip, leap, json } => {
            let args = demo::SobolArgs { poly, init, constant, count, skip, leap, json };
            print!("{}", demo::gen_sobol(&args)?);
        }
        Command::GfRoots { q, coeffs, roots, seed } => {
            print!("{}", demo::gf_roots(q, coeffs.as_deref(), roots.as_deref(), seed)?);
        }
        Command::ReconDemo { a, b, mask_len, q, m_bar, injective } => {
            let args = demo::ReconArgs {
                a,
                b,
                mask_len,
                q: (!injective).then_some(q),
                m_bar,
                paper_encoding: !injective,
            };
            print!("{}", demo::recon_demo(&args)?);
        }
        Command::Audit { config, out } => {
            let exp = config::load(&config)?;
            let dir = out
                .or_else(|| exp.output_dir.clone())
                .ok_or_else(|| ConfigError(format!("{}: no output directory; pass --out", config.display())))?;
            let run = experiment::run_experiment(&exp, &dir)?;
            println!("trial  detected  corrupted  covered  signals  challenges");
            for t in &run.totals {
                println!(
                    "{:>5}  {:>8}  {:>9}  {:>7}  {:>7}  {:>10}",
                    t.trial, t.detected, t.corrupted, t.corrupted_covered, t.signals, t.challenges
                );
            }
            let mean = run.totals.iter().map(|t| t.detected as f64).sum::<f64>() / run.totals.len() as f64;
            println!("mean detected per trial: {mean:.2}");
            if let Ok(cov) = distaudit::analysis::mean_cov(&run.summary) {
                println!("CoV of SUBTPA means: {cov:.4}");
            }
            println!("outputs written to {}", dir.display());
        }
        Command::Analyze { report, out } => {
            let file = std::fs::File::open(&report).with_context(|| format!("cannot open {}", report.display()))?;
            let records = distaudit::audit::read_report_csv(file)?;
            let matrix = distaudit::analysis::TrialMatrix::from_records(&records)?;
            std::fs::create_dir_all(&out)?;
            let rows = experiment::write_analysis(&matrix, &out)?;
            println!("{} SUBTPAs over {} trials; outputs in {}", rows.len(), matrix.trials.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
