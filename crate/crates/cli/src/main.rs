use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fusionforge::commands::{format_report, load_config};
use fusionforge::datasets::data_root;
use fusionforge::{
    cmd_baseline, cmd_check, cmd_compare, cmd_fuse_retrain, cmd_pretrain, cmd_run, CliError, Context, Overrides,
};
use fusionforge::{EXIT_OK, EXIT_RUNTIME};
use fusionforge_core::selfcheck::CheckLevel;

/// Pretrain, fuse, retrain and compare CNNs for transferred fusion learning.
///
/// Datasets are read from $FUSIONFORGE_DATA (default ./data).
/// Exit codes: 0 success, 1 runtime failure, 2 configuration error.
#[derive(Parser)]
#[command(name = "fusionforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain both constituent models for every seed.
    Pretrain(RunArgs),
    /// Fuse the pretrained pair and retrain it on the target dataset.
    FuseRetrain(RunArgs),
    /// Transfer-learning baseline for each model on the target dataset.
    Baseline(RunArgs),
    /// Tabulate baseline and hybrid accuracies per seed.
    Compare(RunArgs),
    /// Pretrain, baseline, fuse-retrain and compare in one go.
    Run(RunArgs),
    /// Built-in self-checks: laws, oracles, gradients, isolation, round trip.
    Check {
        #[arg(value_enum, default_value = "quick")]
        level: Level,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion plan file to use instead of automatic pairing.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Keep both backbones fixed during retraining.
    #[arg(long)]
    freeze_backbones: bool,
    /// Independent (model, seed) jobs to run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Level {
    Quick,
    Full,
}

fn run(command: Command) -> Result<u8, CliError> {
    let (args, which) = match command {
        Command::Check { level } => {
            let level = match level {
                Level::Quick => CheckLevel::Quick,
                Level::Full => CheckLevel::Full,
            };
            let start = Instant::now();
            let report = cmd_check(level);
            print!("{}", format_report(&report));
            eprintln!("checks took {:.1} s", start.elapsed().as_secs_f64());
            return Ok(if report.passed() { EXIT_OK } else { EXIT_RUNTIME });
        }
        Command::Pretrain(a) => (a, "pretrain"),
        Command::FuseRetrain(a) => (a, "fuse-retrain"),
        Command::Baseline(a) => (a, "baseline"),
        Command::Compare(a) => (a, "compare"),
        Command::Run(a) => (a, "run"),
    };
    let overrides =
        Overrides { seed: args.seed, out: args.out, plan: args.plan, freeze_backbones: args.freeze_backbones };
    let cfg = load_config(&args.config, &overrides)?;
    let ctx = Context::new(data_root(), args.jobs);
    let summarize = |outcomes: Vec<fusionforge::commands::RunOutcome>| {
        for o in outcomes {
            let who = o.side.map_or("hybrid".to_string(), |s| s.to_string());
            println!(
                "seed {:>4}  {:<8} final accuracy {}  -> {}",
                o.seed,
                who,
                fusionforge::compare::percent(o.metrics.final_test_accuracy),
                o.dir.display()
            );
        }
    };
    match which {
        "pretrain" => summarize(cmd_pretrain(&cfg, &ctx)?),
        "baseline" => summarize(cmd_baseline(&cfg, &ctx)?),
        "fuse-retrain" => summarize(cmd_fuse_retrain(&cfg, &ctx)?),
        "compare" => print!("{}", cmd_compare(&cfg)?.to_text()),
        _ => print!("{}", cmd_run(&cfg, &ctx)?.to_text()),
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_secs().init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
