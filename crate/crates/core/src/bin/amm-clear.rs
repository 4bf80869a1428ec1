use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amm_clearing::cli::{report_json, run_clear, summary, verify_report, ClearOptions, EXIT_INVALID};
use amm_clearing::solver::Strategy;

/// Clear a batch of limit orders against AMMs at one uniform price vector.
#[derive(Parser)]
#[command(name = "amm-clear", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and settle a batch file.
    ///
    /// Exit status: 0 certified, 1 invalid input, 2 no equilibrium found,
    /// 3 settlement failed certification.
    Clear {
        batch: PathBuf,
        /// Report path; the report goes to standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// auto, bisection2, rho_iteration or simplicial.
        #[arg(long)]
        strategy: Option<Strategy>,
        /// Residual tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Token symbol to split the token graph at.
        #[arg(long)]
        hub_token: Option<String>,
        /// Refuse batches whose equilibrium is not guaranteed.
        #[arg(long)]
        strict_required: bool,
        /// Print a price and surplus table.
        #[arg(long)]
        summary: bool,
        /// Seed for the sampled admissibility check.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-check a report against its batch file. Exit status 0 iff every
    /// certificate holds.
    Verify { batch: PathBuf, report: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Clear {
            batch,
            out,
            strategy,
            tol,
            hub_token,
            strict_required,
            summary: show_summary,
            seed,
        } => {
            let to_stdout = out.is_none();
            let options = ClearOptions {
                out,
                strategy,
                tol,
                hub_token,
                strict_required,
                seed,
            };
            match run_clear(&batch, &options) {
                Ok(run) => {
                    if to_stdout {
                        print!("{}", report_json(&run.report));
                        if show_summary {
                            eprint!("{}", summary(&run.report));
                        }
                    } else if show_summary {
                        print!("{}", summary(&run.report));
                    }
                    run.exit_code
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    EXIT_INVALID
                }
            }
        }
        Command::Verify { batch, report } => match verify_report(&batch, &report) {
            Ok(outcome) => {
                match &outcome.failure {
                    None => println!("verified: {} checks passed", outcome.checks_passed),
                    Some(reason) => eprintln!("verification failed: {reason}"),
                }
                outcome.exit_code()
            }
            Err(err) => {
                eprintln!("error: {err}");
                EXIT_INVALID
            }
        },
    };
    ExitCode::from(code as u8)
}
