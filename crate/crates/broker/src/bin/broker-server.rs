//! Standalone broker server: binds the HTTP API and runs until interrupted.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use broker::{Broker, BrokerConfig, ContentCandidateMode};

const USAGE: &str = "\
broker-server [options]

Options:
  --bind <addr>                listen address (default 127.0.0.1:8080)
  --cache-ttl-secs <n>         subscription cache staleness bound (default 10)
  --content-mode <mode>        first-key | all-keys (default first-key)
  --topic-dedupe               deliver at most one frame per publication per subscriber
  --lookups-per-second <n>     store budget (default 1000)
  --max-concurrent <n>         simultaneous invocations (default 1200)
  --max-per-minute <n>         invocations per minute (default 9000)
  --eviction-jitter <f>        container TTL jitter fraction in [0,1] (default 0)
  --persist <path>             append-only NDJSON store persistence file
  -h, --help                   print this help
";

fn main() -> ExitCode {
    let mut bind = "127.0.0.1:8080".to_string();
    let mut config = BrokerConfig::default();

    let mut args = std::env::args().skip(1);
    while let Some(arg) = args.next() {
        let mut value = |name: &str| {
            args.next().unwrap_or_else(|| {
                eprintln!("missing value for {name}");
                std::process::exit(2);
            })
        };
        match arg.as_str() {
            "--bind" => bind = value("--bind"),
            "--cache-ttl-secs" => {
                config.pipeline.cache_ttl =
                    Duration::from_secs_f64(parse(&value("--cache-ttl-secs")))
            }
            "--content-mode" => {
                config.pipeline.content_candidate_mode = match value("--content-mode").as_str() {
                    "first-key" => ContentCandidateMode::FirstKey,
                    "all-keys" => ContentCandidateMode::AllKeys,
                    other => {
                        eprintln!("unknown content mode '{other}'");
                        return ExitCode::from(2);
                    }
                }
            }
            "--topic-dedupe" => config.pipeline.topic_dedupe = true,
            "--lookups-per-second" => {
                config.store.lookups_per_second = parse(&value("--lookups-per-second"))
            }
            "--max-concurrent" => config.limits.max_concurrent = parse(&value("--max-concurrent")),
            "--max-per-minute" => config.limits.max_per_minute = parse(&value("--max-per-minute")),
            "--eviction-jitter" => config.limits.eviction_jitter = parse(&value("--eviction-jitter")),
            "--persist" => config.store.persist_path = Some(value("--persist").into()),
            "-h" | "--help" => {
                print!("{USAGE}");
                return ExitCode::SUCCESS;
            }
            other => {
                eprintln!("unknown argument '{other}'\n\n{USAGE}");
                return ExitCode::from(2);
            }
        }
    }

    let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
    runtime.block_on(async move {
        let broker = match Broker::new(config) {
            Ok(b) => Arc::new(b),
            Err(e) => {
                eprintln!("failed to start broker: {e}");
                return ExitCode::FAILURE;
            }
        };
        // Warm containers are destroyed after sitting idle past their TTL.
        broker.runtime().spawn_eviction_sweeper(Duration::from_secs(30));

        let server = match broker::http::serve_api(&bind, Arc::clone(&broker)).await {
            Ok(s) => s,
            Err(e) => {
                eprintln!("failed to bind {bind}: {e}");
                return ExitCode::FAILURE;
            }
        };
        println!("broker listening on http://{}", server.local_addr());
        match tokio::signal::ctrl_c().await {
            Ok(()) => {
                println!("shutting down");
                server.shutdown().await;
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("signal handling failed: {e}");
                ExitCode::FAILURE
            }
        }
    })
}

fn parse<T: std::str::FromStr>(value: &str) -> T
where
    T::Err: std::fmt::Display,
{
    value.parse().unwrap_or_else(|e| {
        eprintln!("invalid value '{value}': {e}");
        std::process::exit(2);
    })
}
