//! Load-test harness for the broker: one paced publisher, N subscribers in
//! worker groups, per-subscriber latency to receive every publication,
//! repeated and averaged.
//!
//! Each repetition builds a fresh broker from the configured limits profile,
//! registers and subscribes all subscribers so that every publication
//! matches every subscriber, paces the publisher at the requested rate, and
//! waits until either all expected frames arrived or the pipeline receipts
//! prove nothing more will be delivered (throttled runs finish without
//! timing out).

pub mod report;

use std::sync::Arc;
use std::time::Duration;

use broker::{
    Broker, BrokerConfig, CompareOp, Constraint, ContentCandidateMode, PipelineConfig,
    PropertyList, PublishReceipt, RuntimeLimits, Scalar, StoreConfig,
};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::UnboundedReceiver;
use tokio::task::JoinSet;
use tokio::time::Instant;

/// Matching scheme driven by an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
#[clap(rename_all = "lowercase")]
pub enum Scheme {
    Topic,
    Content,
    Function,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Topic => "topic",
            Scheme::Content => "content",
            Scheme::Function => "function",
        }
    }
}

/// Limits profile file: JSON with the platform and store ceilings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct LimitsProfile {
    pub max_concurrent: usize,
    pub max_per_minute: usize,
    pub lookups_per_second: u32,
    pub cache_ttl_seconds: f64,
    pub eviction_jitter: f64,
}

impl Default for LimitsProfile {
    /// Vendor-plan defaults, the same ceilings the broker itself defaults to.
    fn default() -> Self {
        Self {
            max_concurrent: 1200,
            max_per_minute: 9000,
            lookups_per_second: 1000,
            cache_ttl_seconds: 10.0,
            eviction_jitter: 0.0,
        }
    }
}

impl LimitsProfile {
    /// Effectively unlimited profile for completeness-focused runs.
    pub fn relaxed() -> Self {
        Self {
            max_concurrent: 1_000_000,
            max_per_minute: 100_000_000,
            lookups_per_second: 1_000_000,
            cache_ttl_seconds: 10.0,
            eviction_jitter: 0.0,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BenchError::InvalidConfig(e.to_string()))
    }

    fn broker_config(&self, content_mode: ContentCandidateMode) -> BrokerConfig {
        BrokerConfig {
            pipeline: PipelineConfig {
                cache_ttl: Duration::from_secs_f64(self.cache_ttl_seconds.max(0.001)),
                content_candidate_mode: content_mode,
                topic_dedupe: false,
            },
            limits: RuntimeLimits {
                max_concurrent: self.max_concurrent,
                max_per_minute: self.max_per_minute,
                eviction_jitter: self.eviction_jitter,
                ..RuntimeLimits::default()
            },
            store: StoreConfig {
                lookups_per_second: self.lookups_per_second,
                ..StoreConfig::default()
            },
            ..BrokerConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scheme: Scheme,
    pub subscribers: usize,
    pub pubs_per_second: u32,
    pub publication_count: usize,
    pub payload_bytes: usize,
    pub repetitions: usize,
    pub worker_groups: usize,
    pub limits: LimitsProfile,
    pub content_mode: ContentCandidateMode,
    /// Skip the demand-vs-profile estimate and run regardless.
    pub force: bool,
    /// Safety net only; runs normally finish when receipts complete.
    pub completion_timeout: Duration,
}

impl ExperimentConfig {
    pub fn new(scheme: Scheme, subscribers: usize, pubs_per_second: u32, publication_count: usize) -> Self {
        Self {
            scheme,
            subscribers,
            pubs_per_second,
            publication_count,
            payload_bytes: 1024,
            repetitions: 3,
            worker_groups: 4,
            limits: LimitsProfile::default(),
            content_mode: ContentCandidateMode::FirstKey,
            force: false,
            completion_timeout: Duration::from_secs(120),
        }
    }
}

/// Counters and latencies of one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunStats {
    pub delivered: u64,
    pub expected: u64,
    pub dropped: u64,
    pub throttled: u64,
    pub suppressed: u64,
    pub store_lookups: u64,
    pub mean_latency_ms: f64,
    pub incomplete_subscribers: u64,
}

impl RunStats {
    /// Delivered plus dropped plus throttle-suppressed accounts for every
    /// expected delivery.
    pub fn conserved(&self) -> bool {
        self.delivered + self.dropped + self.suppressed == self.expected
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub scheme: Scheme,
    pub subscribers: usize,
    pub pubs_per_second: u32,
    pub publication_count: usize,
    pub repetitions: usize,
    /// Completion latency of every completed subscriber, all repetitions.
    pub per_subscriber_latency_ms: Vec<f64>,
    /// Arithmetic mean of the per-run means.
    pub mean_latency_ms: f64,
    pub delivered_count: u64,
    pub expected_count: u64,
    pub dropped_count: u64,
    pub throttled_count: u64,
    pub suppressed_count: u64,
    pub store_lookup_count: u64,
    pub incomplete_subscribers: u64,
    pub per_run: Vec<RunStats>,
}

impl ExperimentResult {
    fn aggregate(config: &ExperimentConfig, runs: Vec<(RunStats, Vec<f64>)>) -> Self {
        let per_run: Vec<RunStats> = runs.iter().map(|(s, _)| s.clone()).collect();
        let per_subscriber_latency_ms: Vec<f64> =
            runs.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        let mean_latency_ms = if per_run.is_empty() {
            0.0
        } else {
            per_run.iter().map(|r| r.mean_latency_ms).sum::<f64>() / per_run.len() as f64
        };
        ExperimentResult {
            scheme: config.scheme,
            subscribers: config.subscribers,
            pubs_per_second: config.pubs_per_second,
            publication_count: config.publication_count,
            repetitions: per_run.len(),
            mean_latency_ms,
            delivered_count: per_run.iter().map(|r| r.delivered).sum(),
            expected_count: per_run.iter().map(|r| r.expected).sum(),
            dropped_count: per_run.iter().map(|r| r.dropped).sum(),
            throttled_count: per_run.iter().map(|r| r.throttled).sum(),
            suppressed_count: per_run.iter().map(|r| r.suppressed).sum(),
            store_lookup_count: per_run.iter().map(|r| r.store_lookups).sum(),
            incomplete_subscribers: per_run.iter().map(|r| r.incomplete_subscribers).sum(),
            per_subscriber_latency_ms,
            per_run,
        }
    }

    pub fn conserved(&self) -> bool {
        self.per_run.iter().all(RunStats::conserved)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("estimated demand exceeds the limits profile: {0} (pass --force to run anyway)")]
    ExceedsProfile(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("broker error: {0}")]
    Broker(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Assumed mean action duration used when estimating concurrent demand.
const ASSUMED_ACTION_SECS: f64 = 0.1;

/// Rough peak-demand estimate: each publication occupies roughly
/// `2 + subscribers` simultaneous invocations for `ASSUMED_ACTION_SECS`.
pub fn estimated_concurrent_demand(subscribers: usize, pubs_per_second: u32) -> usize {
    (f64::from(pubs_per_second) * (2.0 + subscribers as f64) * ASSUMED_ACTION_SECS).ceil() as usize
}

fn check_profile(config: &ExperimentConfig) -> Result<(), BenchError> {
    if config.force {
        return Ok(());
    }
    let demand = estimated_concurrent_demand(config.subscribers, config.pubs_per_second);
    if demand > config.limits.max_concurrent {
        return Err(BenchError::ExceedsProfile(format!(
            "estimated {demand} concurrent executions at {} subscribers x {}/s exceeds maxConcurrent={}",
            config.subscribers, config.pubs_per_second, config.limits.max_concurrent
        )));
    }
    Ok(())
}

/// Split `n` subscribers across `groups` as evenly as possible.
pub fn partition_sizes(n: usize, groups: usize) -> Vec<usize> {
    let groups = groups.max(1);
    let base = n / groups;
    let extra = n % groups;
    (0..groups).map(|i| base + usize::from(i < extra)).collect()
}

/// The matching program used by the function scheme: a population table
/// keyed by place names, matched case-insensitively against the payload.
pub const POPULATION_LOOKUP: &str = "let populations = {\"new zealand\": 4693000, \"germany\": 8267000}; \
     let places = find_keys(publication, populations); \
     lookup(populations, places[0], 0) > 4000000";

/// Payload that makes the population program return true.
pub const MATCHING_SENTENCE: &str =
    "DEBS2018 will be held at the University of Waikato in New Zealand.";

const BENCH_TOPIC: &str = "bench";
const FUNCTION_TYPE: &str = "population";

fn build_payload(scheme: Scheme, payload_bytes: usize) -> String {
    let base = match scheme {
        Scheme::Function => MATCHING_SENTENCE.to_string(),
        _ => "payload".to_string(),
    };
    let mut payload = base;
    while payload.len() < payload_bytes {
        payload.push('.');
    }
    payload
}

fn bench_constraints() -> Vec<Constraint> {
    vec![
        Constraint::new("k1", CompareOp::Eq, 5.0),
        Constraint::new("k2", CompareOp::Ge, 10.0),
    ]
}

fn bench_properties() -> PropertyList {
    PropertyList::new(vec![
        ("k1".to_string(), Scalar::Num(5.0)),
        ("k2".to_string(), Scalar::Num(12.0)),
    ])
    .expect("static property list")
}

/// Deliveries a receipt proves were attempted at the final pipeline stage
/// without being throttled away.
fn non_throttled_final_branches(receipt: &PublishReceipt) -> u64 {
    receipt
        .branches
        .iter()
        .filter(|b| {
            matches!(
                b.stage.as_str(),
                "topic-deliver" | "content-match-deliver" | "function-eval-deliver"
            ) && b.status != "throttled"
        })
        .count() as u64
}

fn receipt_throttles(receipt: &PublishReceipt) -> u64 {
    receipt.branches.iter().filter(|b| b.status == "throttled").count() as u64
}

/// Completion latency of one subscriber, or `None` when it never received
/// its full expected count.
type SubscriberOutcome = Option<Duration>;

async fn run_once(config: &ExperimentConfig) -> Result<(RunStats, Vec<f64>), BenchError> {
    let broker = Arc::new(
        Broker::new(config.limits.broker_config(config.content_mode))
            .map_err(|e| BenchError::Broker(e.to_string()))?,
    );

    // Register, device-register, connect, and subscribe every subscriber so
    // each publication matches all of them.
    let mut receivers: Vec<UnboundedReceiver<broker::DeliveryFrame>> =
        Vec::with_capacity(config.subscribers);
    for _ in 0..config.subscribers {
        let id = broker
            .register_subscriber()
            .await
            .map_err(|e| BenchError::Broker(e.to_string()))?;
        broker
            .gateway()
            .register_device(&id)
            .map_err(|e| BenchError::Broker(e.to_string()))?;
        let rx = broker
            .gateway()
            .connect(&id)
            .map_err(|e| BenchError::Broker(e.to_string()))?;
        match config.scheme {
            Scheme::Topic => broker
                .subscribe_topics(&id, &[BENCH_TOPIC.to_string()])
                .await
                .map_err(|e| BenchError::Broker(e.to_string()))?,
            Scheme::Content => broker
                .subscribe_content(&id, &bench_constraints())
                .await
                .map_err(|e| BenchError::Broker(e.to_string()))?,
            Scheme::Function => broker
                .subscribe_function(&id, FUNCTION_TYPE, POPULATION_LOOKUP)
                .await
                .map_err(|e| BenchError::Broker(e.to_string()))?,
        }
        receivers.push(rx);
    }

    let payload = Arc::new(build_payload(config.scheme, config.payload_bytes));
    let properties = bench_properties();
    let expected_per_sub = config.publication_count;
    let start = Instant::now();
    let (done_tx, _) = tokio::sync::watch::channel(false);

    // Worker groups: each group drains its slice of subscribers.
    let group_sizes = partition_sizes(config.subscribers, config.worker_groups);
    let mut groups: JoinSet<Vec<SubscriberOutcome>> = JoinSet::new();
    let mut rx_iter = receivers.into_iter();
    for size in group_sizes {
        let group_rxs: Vec<_> = rx_iter.by_ref().take(size).collect();
        let done_rx = done_tx.subscribe();
        let timeout = config.completion_timeout;
        groups.spawn(async move {
            let mut tasks: JoinSet<SubscriberOutcome> = JoinSet::new();
            for mut rx in group_rxs {
                let mut done = done_rx.clone();
                tasks.spawn(async move {
                    let mut received = 0usize;
                    let deadline = Instant::now() + timeout;
                    loop {
                        if received >= expected_per_sub {
                            return Some(start.elapsed());
                        }
                        tokio::select! {
                            frame = rx.recv() => match frame {
                                Some(_) => received += 1,
                                None => break,
                            },
                            _ = done.changed() => {
                                // Publishing finished; drain whatever is left.
                                while rx.try_recv().is_ok() {
                                    received += 1;
                                }
                                break;
                            }
                            _ = tokio::time::sleep_until(deadline) => break,
                        }
                    }
                    if received >= expected_per_sub {
                        Some(start.elapsed())
                    } else {
                        None
                    }
                });
            }
            let mut outcomes = Vec::new();
            while let Some(res) = tasks.join_next().await {
                outcomes.push(res.expect("subscriber task panicked"));
            }
            outcomes
        });
    }

    // One publisher paced at the configured rate; each publish runs as its
    // own task so slow cascades do not stall the pacing.
    let mut publishes: JoinSet<Result<PublishReceipt, String>> = JoinSet::new();
    let mut pacer = tokio::time::interval(Duration::from_secs(1) / config.pubs_per_second.max(1));
    pacer.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
    for _ in 0..config.publication_count {
        pacer.tick().await;
        let broker = Arc::clone(&broker);
        let payload = Arc::clone(&payload);
        let properties = properties.clone();
        let scheme = config.scheme;
        publishes.spawn(async move {
            let receipt = match scheme {
                Scheme::Topic => broker.publish_topic(&payload, &[BENCH_TOPIC.to_string()]).await,
                Scheme::Content => broker.publish_content(&payload, &properties).await,
                Scheme::Function => broker.publish_function(&payload, FUNCTION_TYPE).await,
            };
            receipt.map_err(|e| e.to_string())
        });
    }

    let mut throttled = 0u64;
    let mut attempted_final = 0u64;
    let mut failed_publishes = 0u64;
    while let Some(res) = publishes.join_next().await {
        match res.expect("publish task panicked") {
            Ok(receipt) => {
                throttled += receipt_throttles(&receipt);
                attempted_final += non_throttled_final_branches(&receipt);
            }
            Err(e) => {
                failed_publishes += 1;
                tracing::warn!(error = %e, "publish failed");
            }
        }
    }
    // Every receipt is in: nothing more can be delivered.
    let _ = done_tx.send(true);

    let mut latencies_ms = Vec::new();
    let mut incomplete = 0u64;
    while let Some(res) = groups.join_next().await {
        for outcome in res.expect("group task panicked") {
            match outcome {
                Some(latency) => latencies_ms.push(latency.as_secs_f64() * 1000.0),
                None => incomplete += 1,
            }
        }
    }

    let expected = (config.subscribers * config.publication_count) as u64;
    let delivered = broker.gateway().delivered_count();
    let dropped = broker.gateway().dropped_count();
    // Suppressed = expected deliveries whose final-stage attempt never
    // happened (throttled anywhere along the branch, or a failed publish).
    let suppressed = expected
        .saturating_sub(attempted_final)
        .max(failed_publishes * config.subscribers as u64);
    let mean_latency_ms = if latencies_ms.is_empty() {
        0.0
    } else {
        latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64
    };

    let stats = RunStats {
        delivered,
        expected,
        dropped,
        throttled,
        suppressed,
        store_lookups: broker.store().stats().reads(),
        mean_latency_ms,
        incomplete_subscribers: incomplete,
    };
    Ok((stats, latencies_ms))
}

/// Run the configured experiment `repetitions` times against fresh brokers
/// and aggregate. Incomplete delivery is reported in the result, not thrown.
pub async fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, BenchError> {
    if config.subscribers == 0 || config.publication_count == 0 {
        return Err(BenchError::InvalidConfig(
            "subscribers and publication count must be positive".into(),
        ));
    }
    check_profile(config)?;
    let mut runs = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let run = run_once(config).await?;
        tracing::info!(
            scheme = config.scheme.name(),
            rep,
            delivered = run.0.delivered,
            expected = run.0.expected,
            mean_latency_ms = run.0.mean_latency_ms,
            "repetition complete"
        );
        runs.push(run);
    }
    Ok(ExperimentResult::aggregate(config, runs))
}

/// One row of a sweep CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: String,
    pub subscribers: usize,
    pub rate: u32,
    pub mean_latency_ms: f64,
    pub delivered: u64,
    pub expected: u64,
    pub throttled: u64,
    pub lookups: u64,
    pub dropped: u64,
    pub suppressed: u64,
}

impl SweepRow {
    pub fn conserved(&self) -> bool {
        self.delivered + self.dropped + self.suppressed == self.expected
    }
}

/// Run the template over the cross product of subscriber and rate steps.
/// Logs (never asserts) the latency-vs-load trend; absolute latencies are
/// machine-dependent.
pub async fn sweep(
    template: &ExperimentConfig,
    subscriber_steps: &[usize],
    rate_steps: &[u32],
) -> Result<Vec<SweepRow>, BenchError> {
    let mut rows = Vec::new();
    for &subscribers in subscriber_steps {
        let mut previous_latency: Option<f64> = None;
        for &rate in rate_steps {
            let mut config = template.clone();
            config.subscribers = subscribers;
            config.pubs_per_second = rate;
            let result = run_experiment(&config).await?;
            if let Some(prev) = previous_latency {
                if result.mean_latency_ms + f64::EPSILON < prev {
                    tracing::warn!(
                        subscribers,
                        rate,
                        prev_mean_ms = prev,
                        mean_ms = result.mean_latency_ms,
                        "mean latency decreased as rate grew; expected a non-decreasing trend"
                    );
                }
            }
            previous_latency = Some(result.mean_latency_ms);
            rows.push(SweepRow {
                scheme: config.scheme.name().to_string(),
                subscribers,
                rate,
                mean_latency_ms: result.mean_latency_ms,
                delivered: result.delivered_count,
                expected: result.expected_count,
                throttled: result.throttled_count,
                lookups: result.store_lookup_count,
                dropped: result.dropped_count,
                suppressed: result.suppressed_count,
            });
        }
    }
    Ok(rows)
}
