use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use narrec_cli::commands::{self, Outcome, RobustnessArgs, SensitivityArgs};
use narrec_cli::plan::{ExperimentPlan, PlanArgs};

/// Evaluate chat-completion models as narrative-driven movie recommenders.
///
/// Exit status: 0 on success, 1 on validation errors, 2 when outputs were
/// written but the run log holds failed cells.
#[derive(Parser)]
#[command(name = "narrec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the corpus and write manifest.json with exclusions and caps.
    Ingest(PlanArgs),
    /// Send every missing cell of the plan and append to the run log.
    Run(PlanArgs),
    /// Parse, match and score the run log (scores.csv, format_report.csv).
    Score(PlanArgs),
    /// Macro averages with intervals and repetition ANOVA (aggregate.csv, anova.csv).
    Stats(PlanArgs),
    /// Inter-list diversity and release-year histograms.
    Diversity(PlanArgs),
    /// All tables, plot-data files and report.md.
    Report(PlanArgs),
    /// Build a post-cutoff dataset from a raw forum dump.
    RobustnessBuild {
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        args: RobustnessArgs,
    },
    /// Collect ten movies from a fixed pool per request and score them.
    Sensitivity {
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        args: SensitivityArgs,
    },
}

fn partial(failed_rows: usize) -> Outcome {
    if failed_rows == 0 {
        Outcome::Success
    } else {
        Outcome::Partial(failed_rows)
    }
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Ingest(args) => {
            let plan = ExperimentPlan::resolve(&args)?;
            let m = commands::ingest(&plan)?;
            println!(
                "{} submissions loaded, {} admitted, {} excluded; attainable recall {:.4}, F1 {:.4}",
                m.n_loaded,
                m.n_admitted,
                m.exclusions.len(),
                m.caps.mean_recall_cap,
                m.caps.mean_f1_cap
            );
            Ok(Outcome::Success)
        }
        Command::Run(args) => {
            let plan = ExperimentPlan::resolve(&args)?;
            let backends = commands::http_backends(&plan);
            let (summary, outcome) = commands::run(&plan, &backends)?;
            println!(
                "{} cells: {} already logged, {} written, {} failed",
                summary.total_cells, summary.already_present, summary.written, summary.failures
            );
            Ok(outcome)
        }
        Command::Score(args) => {
            let plan = ExperimentPlan::resolve(&args)?;
            let a = commands::analyse(&plan)?;
            commands::write_scores(&plan, &a)?;
            Ok(partial(a.failed_rows))
        }
        Command::Stats(args) => {
            let plan = ExperimentPlan::resolve(&args)?;
            let a = commands::analyse(&plan)?;
            commands::write_stats(&plan, &a)?;
            Ok(partial(a.failed_rows))
        }
        Command::Diversity(args) => {
            let plan = ExperimentPlan::resolve(&args)?;
            let a = commands::analyse(&plan)?;
            commands::write_diversity(&plan, &a)?;
            Ok(partial(a.failed_rows))
        }
        Command::Report(args) => {
            let plan = ExperimentPlan::resolve(&args)?;
            let a = commands::analyse(&plan)?;
            commands::write_report(&plan, &a)?;
            println!("report written to {}", plan.output_dir.join("report.md").display());
            Ok(partial(a.failed_rows))
        }
        Command::RobustnessBuild { plan, args } => {
            let plan = ExperimentPlan::resolve(&plan)?;
            let expert = commands::expert_backend(&plan, &args.expert_backend)?;
            let (m, outcome) = commands::robustness_build(&plan, &args, &expert)?;
            println!(
                "{} candidates, {} labeled, {} need review, {} in the final dataset",
                m.report.filter.n_candidates, m.report.labeled, m.report.needs_review, m.report.final_submissions
            );
            Ok(outcome)
        }
        Command::Sensitivity { plan, args } => {
            let plan = ExperimentPlan::resolve(&plan)?;
            let backends = commands::http_backends(&plan);
            let (rows, outcome) = commands::sensitivity(&plan, &args, &backends)?;
            for r in rows {
                println!(
                    "{} / {}: F1 {:.4} [{:.4}, {:.4}], {} shortfalls",
                    r.model, r.strategy, r.f1, r.f1_low, r.f1_high, r.shortfalls
                );
            }
            Ok(outcome)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
