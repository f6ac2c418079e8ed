use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvqa_cli::{
    cmd_ablate, cmd_cache_ls, cmd_cache_purge, cmd_inspect, cmd_run, cmd_score, hit_rate_lines,
    CliError, Overrides,
};

#[derive(Parser)]
#[command(name = "kvqa", about = "Knowledge-based VQA pipeline runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Default)]
struct CommonFlags {
    /// Config file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run on a random subset of this many questions.
    #[arg(long)]
    limit: Option<usize>,
    /// Run seed, also used for subset sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overrides run.output_dir.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Cache root, overrides KVQA_CACHE_ROOT and cache.root.
    #[arg(long)]
    cache_root: Option<PathBuf>,
    /// Worker thread count.
    #[arg(long)]
    workers: Option<usize>,
}

impl CommonFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            limit: self.limit,
            seed: self.seed,
            output_dir: self.output_dir.clone(),
            cache_root: self.cache_root.clone(),
            workers: self.workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline on a dataset and write report.json.
    Run {
        #[command(flatten)]
        flags: CommonFlags,
    },
    /// Run ablation rows (table 2: strategy sets, table 3: rationales).
    Ablate {
        #[command(flatten)]
        flags: CommonFlags,
        /// Ablation table: 2 or 3.
        #[arg(long)]
        table: u8,
        /// Single row (1-6).
        #[arg(long)]
        row: Option<usize>,
        /// All six rows of the table.
        #[arg(long)]
        grid: bool,
    },
    /// Score a predictions file (JSON map of question_id to answer).
    Score {
        #[command(flatten)]
        flags: CommonFlags,
        /// Predictions JSON path.
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Print sentence relevance and candidates for one question of a run.
    Inspect {
        /// Output directory of a finished run.
        #[arg(long)]
        run_dir: PathBuf,
        /// Question to show.
        #[arg(long, required_unless_present = "hit_rates")]
        question_id: Option<String>,
        /// Print per-strategy rationale hit-rate table instead.
        #[arg(long)]
        hit_rates: bool,
    },
    /// Manage the completion cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// List cached entries with sizes.
    Ls {
        #[arg(long)]
        root: PathBuf,
    },
    /// Delete all cached entries.
    Purge {
        #[arg(long)]
        root: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { flags } => {
            cmd_run(&flags.config, &flags.overrides())?;
        }
        Command::Ablate {
            flags,
            table,
            row,
            grid,
        } => {
            cmd_ablate(&flags.config, table, row, grid, &flags.overrides())?;
        }
        Command::Score { flags, predictions } => {
            cmd_score(&flags.config, &predictions, &flags.overrides())?;
        }
        Command::Inspect {
            run_dir,
            question_id,
            hit_rates,
        } => {
            if hit_rates {
                for line in hit_rate_lines(&run_dir)? {
                    println!("{line}");
                }
            }
            if let Some(id) = question_id {
                cmd_inspect(&run_dir, &id)?;
            }
        }
        Command::Cache { action } => match action {
            CacheAction::Ls { root } => {
                cmd_cache_ls(&root)?;
            }
            CacheAction::Purge { root } => {
                cmd_cache_purge(&root)?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
