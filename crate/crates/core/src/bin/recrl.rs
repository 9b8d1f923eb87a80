//! Pipeline CLI: one binary, one config surface, reproducible stages.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recrl::config::resolve_config;
use recrl::pipeline;

#[derive(Parser)]
#[command(
    name = "recrl",
    version,
    about = "Train and evaluate a tiny recommendation policy: synthetic logs -> prompts -> supervised stage -> group-relative policy optimization -> recall/ndcg report"
)]
struct Cli {
    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Artifact directory (overrides the config file).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Dotted-path config override, e.g. --set grpo.iterations=200
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus files and the latent-truth file.
    Simulate,
    /// Validate the corpus files and report preprocessing survivors.
    Ingest,
    /// Build prompts, labels and splits into samples.jsonl.
    Prompts,
    /// Build the vocabulary and train the supervised checkpoint.
    Sft,
    /// Run group-relative policy optimization from the supervised checkpoint.
    Grpo,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Score a rollout dump file offline, one reward breakdown per line.
    Score {
        /// Rollout file (as written by grpo with grpo.dump_rollouts=true).
        #[arg(long)]
        rollouts: PathBuf,
    },
    /// All stages in order: simulate, ingest, prompts, sft, grpo, eval.
    Pipeline,
}

fn run(cli: Cli) -> recrl::Result<()> {
    let cfg = resolve_config(
        cli.config.as_deref(),
        &cli.sets,
        cli.seed,
        cli.out_dir.as_deref(),
    )?;
    match cli.command {
        Command::Simulate => println!("{}", pipeline::stage_simulate(&cfg)?),
        Command::Ingest => println!("{}", pipeline::stage_ingest(&cfg)?),
        Command::Prompts => println!("{}", pipeline::stage_prompts(&cfg)?),
        Command::Sft => println!("{}", pipeline::stage_sft(&cfg)?),
        Command::Grpo => println!("{}", pipeline::stage_grpo(&cfg)?),
        Command::Eval => {
            let report = pipeline::stage_eval(&cfg)?;
            print!("{}", report.render_text());
            println!("{}", report.render_summary_line());
        }
        Command::Score { rollouts } => println!("{}", pipeline::stage_score(&cfg, &rollouts)?),
        Command::Pipeline => {
            let (log, report) = pipeline::run_pipeline(&cfg)?;
            for line in log {
                println!("{line}");
            }
            print!("{}", report.render_text());
            println!("{}", report.render_summary_line());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error\tcode={}\tmsg={msg}", e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
