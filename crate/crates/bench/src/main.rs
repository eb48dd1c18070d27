//! `bench` CLI: run one experiment or sweep a load grid against the
//! in-process broker, emitting CSV plus a plain-text summary.

use std::path::PathBuf;
use std::process::ExitCode;

use bench::report::{export_report, export_sweep_csv};
use bench::{run_experiment, sweep, BenchError, ExperimentConfig, LimitsProfile, Scheme};
use broker::ContentCandidateMode;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Load-test harness for the serverless pub/sub broker",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration.
    Run(RunArgs),
    /// Run the cross product of subscriber and rate steps.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ContentModeArg {
    FirstKey,
    AllKeys,
}

impl From<ContentModeArg> for ContentCandidateMode {
    fn from(mode: ContentModeArg) -> Self {
        match mode {
            ContentModeArg::FirstKey => ContentCandidateMode::FirstKey,
            ContentModeArg::AllKeys => ContentCandidateMode::AllKeys,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Publications per run.
    #[arg(long, default_value_t = 50)]
    pubs: usize,
    /// Payload size in bytes.
    #[arg(long, default_value_t = 1024)]
    payload_bytes: usize,
    /// Output CSV path; a .txt summary lands next to it for `run`.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Limits profile JSON:
    /// {maxConcurrent, maxPerMinute, lookupsPerSecond, cacheTtlSeconds, evictionJitter}.
    /// Defaults to the vendor-plan ceilings.
    #[arg(long)]
    limits: Option<PathBuf>,
    /// Run even when the estimated demand exceeds the profile.
    #[arg(long, default_value_t = false)]
    force: bool,
    /// Candidate-key mode for the content scheme.
    #[arg(long, value_enum, default_value_t = ContentModeArg::FirstKey)]
    content_mode: ContentModeArg,
    /// Worker groups the subscribers are split across.
    #[arg(long, default_value_t = 4)]
    worker_groups: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    scheme: Scheme,
    #[arg(long)]
    subscribers: usize,
    /// Publications per second.
    #[arg(long)]
    rate: u32,
    /// Repetitions to average over.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Schemes to sweep.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Scheme::Topic, Scheme::Content, Scheme::Function])]
    schemes: Vec<Scheme>,
    /// Subscriber counts.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
    subscribers: Vec<usize>,
    /// Publication rates (per second).
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20, 40])]
    rates: Vec<u32>,
    /// Repetitions per cell.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[command(flatten)]
    common: CommonArgs,
}

fn build_config(
    scheme: Scheme,
    subscribers: usize,
    rate: u32,
    reps: usize,
    common: &CommonArgs,
) -> Result<ExperimentConfig, BenchError> {
    let limits = match &common.limits {
        Some(path) => LimitsProfile::load(path)?,
        None => LimitsProfile::default(),
    };
    let mut config = ExperimentConfig::new(scheme, subscribers, rate, common.pubs);
    config.payload_bytes = common.payload_bytes;
    config.repetitions = reps;
    config.worker_groups = common.worker_groups;
    config.limits = limits;
    config.content_mode = common.content_mode.into();
    config.force = common.force;
    Ok(config)
}

async fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run(args) => {
            let config =
                build_config(args.scheme, args.subscribers, args.rate, args.reps, &args.common)?;
            let result = run_experiment(&config).await?;
            export_report(&result, &args.common.out)?;
            println!(
                "{} | {} subscribers x {} pubs at {}/s x {} reps",
                result.scheme.name(),
                result.subscribers,
                result.publication_count,
                result.pubs_per_second,
                result.repetitions,
            );
            println!(
                "delivered {}/{} (dropped {}, throttled {}, suppressed {}, incomplete {})",
                result.delivered_count,
                result.expected_count,
                result.dropped_count,
                result.throttled_count,
                result.suppressed_count,
                result.incomplete_subscribers,
            );
            println!(
                "mean latency {:.1} ms | store lookups {} | conservation {}",
                result.mean_latency_ms,
                result.store_lookup_count,
                if result.conserved() { "ok" } else { "VIOLATED" },
            );
            println!("report: {} (+ .txt summary)", args.common.out.display());
        }
        Command::Sweep(args) => {
            let mut all_rows = Vec::new();
            for &scheme in &args.schemes {
                let template = build_config(
                    scheme,
                    args.subscribers[0],
                    args.rates[0],
                    args.reps,
                    &args.common,
                )?;
                let rows = sweep(&template, &args.subscribers, &args.rates).await?;
                all_rows.extend(rows);
            }
            for row in &all_rows {
                println!(
                    "{} subs={} rate={}/s mean={:.1}ms delivered={}/{} throttled={} conservation={}",
                    row.scheme,
                    row.subscribers,
                    row.rate,
                    row.mean_latency_ms,
                    row.delivered,
                    row.expected,
                    row.throttled,
                    if row.conserved() { "ok" } else { "VIOLATED" },
                );
            }
            export_sweep_csv(&all_rows, &args.common.out)?;
            println!("sweep CSV: {}", args.common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    let cli = Cli::parse();
    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    match runtime.block_on(run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
