//! Emulated serverless execution platform.
//!
//! Named stateless actions are invoked with mapping-in/mapping-out semantics
//! (JSON objects in, JSON objects out). The runtime enforces a concurrency
//! ceiling and a per-minute invocation ceiling the way a hosted platform
//! does: invocations over a limit are rejected immediately, never queued.
//! Handlers run inside containers that are reused while warm, carrying an
//! ephemeral per-container cache, and are destroyed after sitting idle past
//! a (possibly jittered) TTL.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use futures::future::BoxFuture;
use futures::FutureExt;
use rand::Rng;
use serde::Serialize;
use serde_json::Value as Json;
use tokio::time::Instant;

pub const DEFAULT_TIME_LIMIT: Duration = Duration::from_secs(60);
pub const DEFAULT_MEMORY_LIMIT_BYTES: u64 = 256 * 1024 * 1024;

pub type ActionHandler = Arc<
    dyn for<'a> Fn(Json, &'a mut ContainerCtx) -> BoxFuture<'a, Result<Json, HandlerError>>
        + Send
        + Sync,
>;

/// Execution context a handler runs in. The cache survives across
/// invocations routed to the same live container and dies with it.
pub struct ContainerCtx {
    pub container_id: String,
    pub cache: HashMap<String, Json>,
    created_at: Instant,
    last_used: Instant,
    effective_idle_ttl: Duration,
}

impl ContainerCtx {
    pub fn age(&self) -> Duration {
        self.created_at.elapsed()
    }
}

/// Failure produced by a handler, carrying a machine-readable code and a
/// human-readable detail (stack context for panics).
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {detail}")]
pub struct HandlerError {
    pub code: String,
    pub detail: String,
}

impl HandlerError {
    pub fn new(code: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { code: code.into(), detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThrottleReason {
    Concurrency,
    PerMinute,
}

impl fmt::Display for ThrottleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThrottleReason::Concurrency => f.write_str("concurrent execution limit reached"),
            ThrottleReason::PerMinute => f.write_str("per-minute invocation limit reached"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InvokeError {
    #[error("unknown action '{0}'")]
    UnknownAction(String),
    #[error("invocation throttled: {reason}")]
    Throttled { reason: ThrottleReason },
    #[error("action '{action}' exceeded its {limit_ms} ms time limit")]
    Timeout { action: String, limit_ms: u64 },
    #[error(transparent)]
    Handler(#[from] HandlerError),
}

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("action '{0}' is already registered")]
    DuplicateName(String),
    #[error("unknown action '{0}'")]
    UnknownAction(String),
}

/// Platform limits. Defaults mirror a hosted plan: 1200 simultaneous
/// executions, 9000 invocations per minute, 10-minute idle container TTL.
#[derive(Debug, Clone, Copy)]
pub struct RuntimeLimits {
    pub max_concurrent: usize,
    pub max_per_minute: usize,
    pub container_idle_ttl: Duration,
    /// Fraction in [0, 1]; each container's effective TTL is drawn uniformly
    /// from `ttl * (1 ± jitter)` at creation. Zero keeps eviction
    /// deterministic.
    pub eviction_jitter: f64,
}

impl Default for RuntimeLimits {
    fn default() -> Self {
        Self {
            max_concurrent: 1200,
            max_per_minute: 9000,
            container_idle_ttl: Duration::from_secs(600),
            eviction_jitter: 0.0,
        }
    }
}

/// A named action: handler plus its execution limits. The memory limit is
/// recorded metadata, not enforced.
pub struct ActionSpec {
    pub name: String,
    handler: ActionHandler,
    pub time_limit: Duration,
    pub memory_limit_bytes: u64,
}

impl ActionSpec {
    pub fn new<F>(name: impl Into<String>, handler: F) -> Self
    where
        F: for<'a> Fn(Json, &'a mut ContainerCtx) -> BoxFuture<'a, Result<Json, HandlerError>>
            + Send
            + Sync
            + 'static,
    {
        Self {
            name: name.into(),
            handler: Arc::new(handler),
            time_limit: DEFAULT_TIME_LIMIT,
            memory_limit_bytes: DEFAULT_MEMORY_LIMIT_BYTES,
        }
    }

    /// Synchronous handler with no container access, for simple actions.
    pub fn simple<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(Json) -> Result<Json, HandlerError> + Send + Sync + 'static,
    {
        let f = Arc::new(f);
        Self::new(name, move |input, _ctx| {
            let f = Arc::clone(&f);
            async move { f(input) }.boxed()
        })
    }

    pub fn with_time_limit(mut self, limit: Duration) -> Self {
        self.time_limit = limit;
        self
    }

    pub fn with_memory_limit(mut self, bytes: u64) -> Self {
        self.memory_limit_bytes = bytes;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InvocationStatus {
    Success,
    Error,
    Timeout,
    Throttled,
}

/// One entry of the invocation log consumed by the benchmark harness.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct InvocationRecord {
    pub invocation_id: String,
    pub action: String,
    pub container_id: String,
    pub start_ms: u64,
    pub end_ms: u64,
    pub status: InvocationStatus,
}

enum ActionKind {
    Single {
        handler: ActionHandler,
        time_limit: Duration,
        #[allow(dead_code)]
        memory_limit_bytes: u64,
    },
    Sequence(Vec<String>),
}

#[derive(Default)]
struct Sched {
    in_flight: usize,
    high_water: usize,
    starts: VecDeque<Instant>,
}

enum HandleInner {
    Rejected(InvokeError),
    Running(tokio::task::JoinHandle<Result<Json, InvokeError>>),
}

/// Handle to one submitted invocation; exposes completion status and output.
pub struct InvocationHandle {
    pub invocation_id: String,
    pub action: String,
    inner: HandleInner,
}

impl InvocationHandle {
    pub async fn outcome(self) -> Result<Json, InvokeError> {
        match self.inner {
            HandleInner::Rejected(e) => Err(e),
            HandleInner::Running(join) => match join.await {
                Ok(result) => result,
                Err(join_err) => Err(InvokeError::Handler(HandlerError::new(
                    "panic",
                    join_err.to_string(),
                ))),
            },
        }
    }

    pub fn is_finished(&self) -> bool {
        match &self.inner {
            HandleInner::Rejected(_) => true,
            HandleInner::Running(join) => join.is_finished(),
        }
    }
}

pub struct Runtime {
    limits: RuntimeLimits,
    actions: RwLock<HashMap<String, ActionKind>>,
    sched: Mutex<Sched>,
    pools: Mutex<HashMap<String, Vec<ContainerCtx>>>,
    log: Mutex<Vec<InvocationRecord>>,
    epoch: Instant,
    invocation_seq: AtomicU64,
    container_seq: AtomicU64,
}

/// Releases a concurrency slot when the invocation ends, however it ends.
struct SlotGuard(Arc<Runtime>);

impl Drop for SlotGuard {
    fn drop(&mut self) {
        let mut sched = self.0.sched.lock().unwrap();
        sched.in_flight -= 1;
    }
}

impl Runtime {
    pub fn new(limits: RuntimeLimits) -> Self {
        Self {
            limits,
            actions: RwLock::new(HashMap::new()),
            sched: Mutex::new(Sched::default()),
            pools: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
            epoch: Instant::now(),
            invocation_seq: AtomicU64::new(0),
            container_seq: AtomicU64::new(0),
        }
    }

    pub fn limits(&self) -> &RuntimeLimits {
        &self.limits
    }

    /// Milliseconds since this runtime was created, on its own clock.
    pub fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    pub fn register(&self, spec: ActionSpec) -> Result<(), RuntimeError> {
        let mut actions = self.actions.write().unwrap();
        if actions.contains_key(&spec.name) {
            return Err(RuntimeError::DuplicateName(spec.name));
        }
        actions.insert(
            spec.name,
            ActionKind::Single {
                handler: spec.handler,
                time_limit: spec.time_limit,
                memory_limit_bytes: spec.memory_limit_bytes,
            },
        );
        Ok(())
    }

    /// Register a sequence: invoking it pipes each action's output into the
    /// next action's input. A failure anywhere aborts the remainder. The
    /// wrapper and every constituent each count as one invocation against
    /// the limits.
    pub fn compose_sequence(
        &self,
        name: impl Into<String>,
        action_names: Vec<String>,
    ) -> Result<(), RuntimeError> {
        let name = name.into();
        let mut actions = self.actions.write().unwrap();
        if actions.contains_key(&name) {
            return Err(RuntimeError::DuplicateName(name));
        }
        for constituent in &action_names {
            if !actions.contains_key(constituent) {
                return Err(RuntimeError::UnknownAction(constituent.clone()));
            }
        }
        actions.insert(name, ActionKind::Sequence(action_names));
        Ok(())
    }

    pub fn registered_action_count(&self) -> usize {
        self.actions.read().unwrap().len()
    }

    pub fn in_flight(&self) -> usize {
        self.sched.lock().unwrap().in_flight
    }

    /// Highest simultaneous in-flight count observed so far.
    pub fn high_water_mark(&self) -> usize {
        self.sched.lock().unwrap().high_water
    }

    /// Invocation starts inside the trailing 60-second window.
    pub fn starts_in_window(&self) -> usize {
        let mut sched = self.sched.lock().unwrap();
        Self::prune_window(&mut sched);
        sched.starts.len()
    }

    fn prune_window(sched: &mut Sched) {
        if let Some(cutoff) = Instant::now().checked_sub(Duration::from_secs(60)) {
            while sched.starts.front().is_some_and(|t| *t <= cutoff) {
                sched.starts.pop_front();
            }
        }
    }

    fn try_admit(&self) -> Result<(), ThrottleReason> {
        let mut sched = self.sched.lock().unwrap();
        Self::prune_window(&mut sched);
        if sched.in_flight >= self.limits.max_concurrent {
            return Err(ThrottleReason::Concurrency);
        }
        if sched.starts.len() >= self.limits.max_per_minute {
            return Err(ThrottleReason::PerMinute);
        }
        sched.in_flight += 1;
        sched.high_water = sched.high_water.max(sched.in_flight);
        sched.starts.push_back(Instant::now());
        Ok(())
    }

    fn record(&self, record: InvocationRecord) {
        self.log.lock().unwrap().push(record);
    }

    pub fn invocation_log(&self) -> Vec<InvocationRecord> {
        self.log.lock().unwrap().clone()
    }

    pub fn export_log_ndjson(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for record in self.log.lock().unwrap().iter() {
            serde_json::to_writer(&mut w, record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn checkout_container(&self, action: &str) -> ContainerCtx {
        let mut pools = self.pools.lock().unwrap();
        if let Some(c) = pools.get_mut(action).and_then(Vec::pop) {
            return c;
        }
        let seq = self.container_seq.fetch_add(1, Ordering::Relaxed);
        let jitter = self.limits.eviction_jitter.clamp(0.0, 1.0);
        let factor = if jitter > 0.0 {
            1.0 + rand::rng().random_range(-jitter..=jitter)
        } else {
            1.0
        };
        let now = Instant::now();
        ContainerCtx {
            container_id: format!("{action}-c{seq}"),
            cache: HashMap::new(),
            created_at: now,
            last_used: now,
            effective_idle_ttl: self.limits.container_idle_ttl.mul_f64(factor),
        }
    }

    fn return_container(&self, action: &str, mut container: ContainerCtx) {
        container.last_used = Instant::now();
        let mut pools = self.pools.lock().unwrap();
        pools.entry(action.to_string()).or_default().push(container);
    }

    /// Destroy idle containers (and their caches) whose idle time exceeds
    /// their effective TTL; returns how many were evicted.
    pub fn evict_idle_containers(&self, now: Instant) -> usize {
        let mut pools = self.pools.lock().unwrap();
        let mut evicted = 0;
        for pool in pools.values_mut() {
            let before = pool.len();
            pool.retain(|c| now.duration_since(c.last_used) <= c.effective_idle_ttl);
            evicted += before - pool.len();
        }
        evicted
    }

    /// Periodic eviction; holds only a weak reference so dropping the
    /// runtime stops the task.
    pub fn spawn_eviction_sweeper(
        self: &Arc<Self>,
        interval: Duration,
    ) -> tokio::task::JoinHandle<()> {
        let weak = Arc::downgrade(self);
        tokio::spawn(async move {
            loop {
                tokio::time::sleep(interval).await;
                let Some(runtime) = weak.upgrade() else { break };
                runtime.evict_idle_containers(Instant::now());
            }
        })
    }

    /// Submit one invocation. Admission (limits) is decided synchronously at
    /// submission; rejected invocations resolve immediately with
    /// `ThrottledError` and are recorded as such.
    pub fn submit(self: &Arc<Self>, action: &str, input: Json) -> InvocationHandle {
        let invocation_id = format!("inv-{}", self.invocation_seq.fetch_add(1, Ordering::Relaxed));
        let kind_exists = {
            let actions = self.actions.read().unwrap();
            actions.contains_key(action)
        };
        if !kind_exists {
            return InvocationHandle {
                invocation_id,
                action: action.to_string(),
                inner: HandleInner::Rejected(InvokeError::UnknownAction(action.to_string())),
            };
        }
        if let Err(reason) = self.try_admit() {
            let now = self.now_ms();
            self.record(InvocationRecord {
                invocation_id: invocation_id.clone(),
                action: action.to_string(),
                container_id: "-".to_string(),
                start_ms: now,
                end_ms: now,
                status: InvocationStatus::Throttled,
            });
            return InvocationHandle {
                invocation_id,
                action: action.to_string(),
                inner: HandleInner::Rejected(InvokeError::Throttled { reason }),
            };
        }

        let runtime = Arc::clone(self);
        let action_name = action.to_string();
        let inv_id = invocation_id.clone();
        let join = tokio::spawn(async move {
            let guard = SlotGuard(Arc::clone(&runtime));
            let result = runtime.run_admitted(&action_name, input, &inv_id).await;
            drop(guard);
            result
        });
        InvocationHandle {
            invocation_id,
            action: action.to_string(),
            inner: HandleInner::Running(join),
        }
    }

    async fn run_admitted(
        self: &Arc<Self>,
        action: &str,
        input: Json,
        invocation_id: &str,
    ) -> Result<Json, InvokeError> {
        enum Resolved {
            Single(ActionHandler, Duration),
            Sequence(Vec<String>),
        }
        let resolved = {
            let actions = self.actions.read().unwrap();
            match actions.get(action) {
                Some(ActionKind::Single { handler, time_limit, .. }) => {
                    Resolved::Single(Arc::clone(handler), *time_limit)
                }
                Some(ActionKind::Sequence(names)) => Resolved::Sequence(names.clone()),
                None => return Err(InvokeError::UnknownAction(action.to_string())),
            }
        };
        match resolved {
            Resolved::Single(handler, time_limit) => {
                self.run_single(action, handler, time_limit, input, invocation_id).await
            }
            Resolved::Sequence(names) => self.run_sequence(action, &names, input, invocation_id).await,
        }
    }

    async fn run_single(
        self: &Arc<Self>,
        action: &str,
        handler: ActionHandler,
        time_limit: Duration,
        input: Json,
        invocation_id: &str,
    ) -> Result<Json, InvokeError> {
        let start_ms = self.now_ms();
        let mut container = self.checkout_container(action);
        let container_id = container.container_id.clone();

        let outcome = tokio::time::timeout(
            time_limit,
            std::panic::AssertUnwindSafe(handler(input, &mut container)).catch_unwind(),
        )
        .await;

        let end_ms = self.now_ms();
        let (status, result) = match outcome {
            Ok(Ok(Ok(output))) => {
                self.return_container(action, container);
                (InvocationStatus::Success, Ok(output))
            }
            Ok(Ok(Err(handler_err))) => {
                self.return_container(action, container);
                (InvocationStatus::Error, Err(InvokeError::Handler(handler_err)))
            }
            Ok(Err(panic)) => {
                // Panicked handlers lose their container.
                drop(container);
                let detail = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "handler panicked".to_string());
                (
                    InvocationStatus::Error,
                    Err(InvokeError::Handler(HandlerError::new("panic", detail))),
                )
            }
            Err(_elapsed) => {
                drop(container);
                (
                    InvocationStatus::Timeout,
                    Err(InvokeError::Timeout {
                        action: action.to_string(),
                        limit_ms: time_limit.as_millis() as u64,
                    }),
                )
            }
        };
        self.record(InvocationRecord {
            invocation_id: invocation_id.to_string(),
            action: action.to_string(),
            container_id,
            start_ms,
            end_ms,
            status,
        });
        result
    }

    async fn run_sequence(
        self: &Arc<Self>,
        name: &str,
        constituents: &[String],
        input: Json,
        invocation_id: &str,
    ) -> Result<Json, InvokeError> {
        let start_ms = self.now_ms();
        let mut current = Some(input);
        let mut failure = None;
        for constituent in constituents {
            let stage_input = current.take().expect("sequence input present");
            match self.submit(constituent, stage_input).outcome().await {
                Ok(output) => current = Some(output),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let end_ms = self.now_ms();
        let status = if failure.is_none() {
            InvocationStatus::Success
        } else {
            InvocationStatus::Error
        };
        self.record(InvocationRecord {
            invocation_id: invocation_id.to_string(),
            action: name.to_string(),
            container_id: "-".to_string(),
            start_ms,
            end_ms,
            status,
        });
        match failure {
            None => Ok(current.expect("sequence output present")),
            Some(e) => Err(e),
        }
    }

    /// Invoke and wait for the outcome.
    pub async fn invoke(self: &Arc<Self>, action: &str, input: Json) -> Result<Json, InvokeError> {
        self.submit(action, input).outcome().await
    }

    /// Submit each input as an independent invocation subject to the limits.
    /// Partial throttling is possible and surfaces per handle; no ordering
    /// across completions is guaranteed.
    pub fn invoke_async_fanout(
        self: &Arc<Self>,
        action: &str,
        inputs: Vec<Json>,
    ) -> Vec<InvocationHandle> {
        inputs.into_iter().map(|input| self.submit(action, input)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sleeper(input: Json, _ctx: &mut ContainerCtx) -> BoxFuture<'_, Result<Json, HandlerError>> {
        async move {
            let ms = input["ms"].as_u64().unwrap_or(0);
            tokio::time::sleep(Duration::from_millis(ms)).await;
            Ok(json!({ "slept": ms }))
        }
        .boxed()
    }

    fn cache_probe(input: Json, ctx: &mut ContainerCtx) -> BoxFuture<'_, Result<Json, HandlerError>> {
        async move {
            let mut seen = ctx
                .cache
                .get("seen")
                .and_then(Json::as_array)
                .cloned()
                .unwrap_or_default();
            seen.push(input["tag"].clone());
            ctx.cache.insert("seen".to_string(), json!(seen));
            Ok(json!({ "containerId": ctx.container_id, "seen": seen }))
        }
        .boxed()
    }

    fn runtime_with(limits: RuntimeLimits) -> Arc<Runtime> {
        Arc::new(Runtime::new(limits))
    }

    fn small_limits(max_concurrent: usize) -> RuntimeLimits {
        RuntimeLimits { max_concurrent, max_per_minute: 1_000_000, ..RuntimeLimits::default() }
    }

    #[tokio::test(start_paused = true)]
    async fn register_and_invoke_roundtrip() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("echo", Ok)).unwrap();
        let out = rt.invoke("echo", json!({"x": 1})).await.unwrap();
        assert_eq!(out, json!({"x": 1}));
    }

    #[tokio::test(start_paused = true)]
    async fn duplicate_registration_is_rejected() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("a", Ok)).unwrap();
        assert!(matches!(
            rt.register(ActionSpec::simple("a", Ok)),
            Err(RuntimeError::DuplicateName(_))
        ));
    }

    #[test]
    fn action_limits_default_to_platform_values() {
        let spec = ActionSpec::simple("a", Ok);
        assert_eq!(spec.time_limit, Duration::from_secs(60));
        assert_eq!(spec.memory_limit_bytes, 256 * 1024 * 1024);
        // The memory limit is recorded metadata only.
        let spec = spec.with_memory_limit(128 * 1024 * 1024);
        assert_eq!(spec.memory_limit_bytes, 128 * 1024 * 1024);
    }

    #[tokio::test(start_paused = true)]
    async fn twelve_actions_register_and_all_invoke() {
        let rt = runtime_with(RuntimeLimits::default());
        for i in 0..12 {
            rt.register(ActionSpec::simple(format!("action-{i}"), Ok)).unwrap();
        }
        assert_eq!(rt.registered_action_count(), 12);
        for i in 0..12 {
            assert!(rt.invoke(&format!("action-{i}"), json!({})).await.is_ok());
        }
    }

    #[tokio::test(start_paused = true)]
    async fn unknown_action_is_not_admitted() {
        let rt = runtime_with(RuntimeLimits::default());
        let err = rt.invoke("ghost", json!({})).await.unwrap_err();
        assert!(matches!(err, InvokeError::UnknownAction(_)));
        assert!(rt.invocation_log().is_empty());
        assert_eq!(rt.starts_in_window(), 0);
    }

    #[tokio::test(start_paused = true)]
    async fn concurrency_limit_rejects_excess_in_flight() {
        let rt = runtime_with(small_limits(3));
        rt.register(ActionSpec::new("sleeper", sleeper)).unwrap();

        let inputs = vec![json!({"ms": 1000}); 3];
        let handles = rt.invoke_async_fanout("sleeper", inputs);
        assert_eq!(rt.in_flight(), 3);

        let err = rt.submit("sleeper", json!({"ms": 1})).outcome().await.unwrap_err();
        assert!(matches!(err, InvokeError::Throttled { reason: ThrottleReason::Concurrency }));

        for h in handles {
            h.outcome().await.unwrap();
        }
        // Slots released; new invocations admitted again.
        assert!(rt.invoke("sleeper", json!({"ms": 1})).await.is_ok());
    }

    #[tokio::test(start_paused = true)]
    async fn per_minute_limit_rejects_then_recovers() {
        let rt = runtime_with(RuntimeLimits {
            max_per_minute: 5,
            ..RuntimeLimits::default()
        });
        rt.register(ActionSpec::simple("quick", Ok)).unwrap();
        for _ in 0..5 {
            rt.invoke("quick", json!({})).await.unwrap();
        }
        let err = rt.invoke("quick", json!({})).await.unwrap_err();
        assert!(matches!(err, InvokeError::Throttled { reason: ThrottleReason::PerMinute }));
        // The trailing window never holds more starts than the limit.
        assert_eq!(rt.starts_in_window(), 5);

        tokio::time::advance(Duration::from_secs(61)).await;
        assert!(rt.invoke("quick", json!({})).await.is_ok());
        assert_eq!(rt.starts_in_window(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn handler_over_time_limit_times_out() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::new("slow", sleeper)).unwrap();
        let err = rt.invoke("slow", json!({"ms": 61_000})).await.unwrap_err();
        assert!(matches!(err, InvokeError::Timeout { limit_ms: 60_000, .. }));
        let log = rt.invocation_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].status, InvocationStatus::Timeout);
        assert!(log[0].end_ms - log[0].start_ms >= 60_000);
    }

    #[tokio::test(start_paused = true)]
    async fn custom_time_limit_is_honored() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::new("slow", sleeper).with_time_limit(Duration::from_millis(50)))
            .unwrap();
        let err = rt.invoke("slow", json!({"ms": 100})).await.unwrap_err();
        assert!(matches!(err, InvokeError::Timeout { limit_ms: 50, .. }));
    }

    #[tokio::test(start_paused = true)]
    async fn warm_container_reuse_preserves_cache() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::new("probe", cache_probe)).unwrap();

        let first = rt.invoke("probe", json!({"tag": 1})).await.unwrap();
        let second = rt.invoke("probe", json!({"tag": 2})).await.unwrap();
        assert_eq!(first["containerId"], second["containerId"]);
        assert_eq!(second["seen"], json!([1, 2]));
    }

    #[tokio::test(start_paused = true)]
    async fn concurrent_invocations_get_cold_isolated_containers() {
        let rt = runtime_with(small_limits(8));
        rt.register(ActionSpec::new("probe", |input, ctx: &mut ContainerCtx| {
            async move {
                tokio::time::sleep(Duration::from_millis(10)).await;
                cache_probe(input, ctx).await
            }
            .boxed()
        }))
        .unwrap();

        let handles = rt.invoke_async_fanout(
            "probe",
            vec![json!({"tag": "a"}), json!({"tag": "b"})],
        );
        let mut outs = Vec::new();
        for h in handles {
            outs.push(h.outcome().await.unwrap());
        }
        assert_ne!(outs[0]["containerId"], outs[1]["containerId"]);
        // Each was cold: exactly its own tag in the cache.
        assert_eq!(outs[0]["seen"].as_array().unwrap().len(), 1);
        assert_eq!(outs[1]["seen"].as_array().unwrap().len(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn fanout_produces_independent_records() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("echo", Ok)).unwrap();
        let handles = rt.invoke_async_fanout("echo", vec![json!(1), json!(2), json!(3)]);
        assert_eq!(handles.len(), 3);
        for h in handles {
            h.outcome().await.unwrap();
        }
        assert_eq!(rt.invocation_log().len(), 3);
    }

    #[tokio::test(start_paused = true)]
    async fn fanout_over_capacity_throttles_the_excess_exactly() {
        let max = 6;
        let rt = runtime_with(small_limits(max));
        rt.register(ActionSpec::new("sleeper", sleeper)).unwrap();

        let handles =
            rt.invoke_async_fanout("sleeper", vec![json!({"ms": 500}); max + 10]);
        assert_eq!(rt.in_flight(), max);
        assert_eq!(rt.high_water_mark(), max);

        let mut ok = 0;
        let mut throttled = 0;
        for h in handles {
            match h.outcome().await {
                Ok(_) => ok += 1,
                Err(InvokeError::Throttled { .. }) => throttled += 1,
                Err(other) => panic!("unexpected: {other}"),
            }
        }
        assert_eq!(ok, max);
        assert_eq!(throttled, 10);
        assert!(rt.high_water_mark() <= max);
    }

    #[tokio::test(start_paused = true)]
    async fn sequence_pipes_outputs_and_counts_every_invocation() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("inc", |input| {
            let n = input["n"].as_i64().unwrap_or(0);
            Ok(json!({ "n": n + 1 }))
        }))
        .unwrap();
        rt.compose_sequence("inc-twice", vec!["inc".into(), "inc".into()]).unwrap();

        let out = rt.invoke("inc-twice", json!({"n": 1})).await.unwrap();
        assert_eq!(out, json!({"n": 3}));

        // Wrapper + two constituents = three invocations against the limits.
        assert_eq!(rt.starts_in_window(), 3);
        assert_eq!(rt.invocation_log().len(), 3);
    }

    #[tokio::test(start_paused = true)]
    async fn sequence_failure_aborts_remainder() {
        use std::sync::atomic::AtomicU64;
        let rt = runtime_with(RuntimeLimits::default());
        let third_runs = Arc::new(AtomicU64::new(0));
        rt.register(ActionSpec::simple("ok", Ok)).unwrap();
        rt.register(ActionSpec::simple("boom", |_| {
            Err(HandlerError::new("boom", "middle action failed"))
        }))
        .unwrap();
        let counter = Arc::clone(&third_runs);
        rt.register(ActionSpec::simple("third", move |input| {
            counter.fetch_add(1, Ordering::Relaxed);
            Ok(input)
        }))
        .unwrap();
        rt.compose_sequence("seq", vec!["ok".into(), "boom".into(), "third".into()]).unwrap();

        let err = rt.invoke("seq", json!({})).await.unwrap_err();
        assert!(matches!(err, InvokeError::Handler(HandlerError { ref code, .. }) if code == "boom"));
        assert_eq!(third_runs.load(Ordering::Relaxed), 0);
    }

    #[tokio::test(start_paused = true)]
    async fn sequence_requires_registered_constituents() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("a", Ok)).unwrap();
        assert!(matches!(
            rt.compose_sequence("s", vec!["a".into(), "missing".into()]),
            Err(RuntimeError::UnknownAction(_))
        ));
    }

    #[tokio::test(start_paused = true)]
    async fn idle_containers_evict_after_ttl() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("echo", Ok)).unwrap();
        rt.invoke("echo", json!({})).await.unwrap();

        tokio::time::advance(Duration::from_secs(11 * 60)).await;
        assert_eq!(rt.evict_idle_containers(Instant::now()), 1);

        rt.invoke("echo", json!({})).await.unwrap();
        tokio::time::advance(Duration::from_secs(1)).await;
        assert_eq!(rt.evict_idle_containers(Instant::now()), 0);
    }

    #[tokio::test(start_paused = true)]
    async fn jittered_eviction_stays_inside_bounds() {
        let rt = runtime_with(RuntimeLimits {
            max_concurrent: 64,
            eviction_jitter: 0.5,
            ..RuntimeLimits::default()
        });
        rt.register(ActionSpec::new("sleeper", sleeper)).unwrap();

        // Concurrent sleeps force the pool to grow to 40 containers.
        let handles = rt.invoke_async_fanout("sleeper", vec![json!({"ms": 10}); 40]);
        for h in handles {
            h.outcome().await.unwrap();
        }

        // TTL 10 min, jitter 0.5: effective TTLs live in [5, 15] minutes.
        tokio::time::advance(Duration::from_secs(4 * 60 + 50)).await;
        assert_eq!(rt.evict_idle_containers(Instant::now()), 0);
        tokio::time::advance(Duration::from_secs(11 * 60)).await;
        assert_eq!(rt.evict_idle_containers(Instant::now()), 40);
    }

    #[tokio::test(start_paused = true)]
    async fn invocation_log_exports_as_ndjson() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("echo", Ok)).unwrap();
        rt.invoke("echo", json!({})).await.unwrap();
        rt.invoke("echo", json!({})).await.unwrap();

        let mut buf = Vec::new();
        rt.export_log_ndjson(&mut buf).unwrap();
        let lines: Vec<Json> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["action"], "echo");
        assert_eq!(lines[0]["status"], "success");
        assert!(lines[0]["containerId"].as_str().unwrap().starts_with("echo-c"));
    }

    #[tokio::test(start_paused = true)]
    async fn panicking_handler_surfaces_as_handler_error() {
        let rt = runtime_with(RuntimeLimits::default());
        rt.register(ActionSpec::simple("panic", |_| panic!("kaboom"))).unwrap();
        let err = rt.invoke("panic", json!({})).await.unwrap_err();
        assert!(matches!(err, InvokeError::Handler(HandlerError { ref code, ref detail })
            if code == "panic" && detail.contains("kaboom")));
        assert_eq!(rt.in_flight(), 0);
    }
}
