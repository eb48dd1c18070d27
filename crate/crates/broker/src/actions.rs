//! The broker's action pipelines on top of the runtime, store, and gateway.
//!
//! Every caller-visible operation is a registered runtime action; the
//! `Broker` methods invoke actions rather than touching the store directly,
//! so platform limits apply to registration and subscription traffic exactly
//! as they do to publish traffic.
//!
//! Publish pipelines:
//!
//! - topic: `topic-split` fans out per topic to `topic-match`, which
//!   resolves subscribers (container cache, then store) and fans out per
//!   subscriber to `topic-deliver`.
//! - content: `content-sort` normalizes the properties and fans out per
//!   candidate key to `content-candidates`, which resolves candidate
//!   subscribers and fans out to `content-match-deliver` where the full
//!   constraint conjunction is evaluated.
//! - function: `function-candidates` resolves (subscriber, source) pairs for
//!   the published type and fans out to `function-eval-deliver`, which runs
//!   the matching program and delivers on a `true` verdict.
//!
//! Cached subscriber lists live in the invoked action's container and are
//! trusted for `cache_ttl` (ten seconds by default) after the fetch;
//! subscription changes do not invalidate remote caches, so staleness is
//! bounded only by the TTL.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use futures::future::BoxFuture;
use futures::FutureExt;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use uuid::Uuid;

use crate::domain::{
    Constraint, DeliveryFrame, MatchInfo, PropertyList, SubscriberId,
};
use crate::gateway::{DisplacePolicy, Gateway};
use crate::runtime::{
    ActionSpec, ContainerCtx, HandlerError, InvokeError, Runtime, RuntimeLimits,
};
use crate::store::{IndexKind, Store, StoreConfig, StoreError, SubscriptionDetail};

pub const ACTION_REGISTER: &str = "register-subscriber";
pub const ACTION_TOPIC_SUBSCRIPTION: &str = "topic-subscription";
pub const ACTION_CONTENT_SUBSCRIPTION: &str = "content-subscription";
pub const ACTION_FUNCTION_SUBSCRIPTION: &str = "function-subscription";
pub const ACTION_TOPIC_SPLIT: &str = "topic-split";
pub const ACTION_TOPIC_MATCH: &str = "topic-match";
pub const ACTION_TOPIC_DELIVER: &str = "topic-deliver";
pub const ACTION_CONTENT_SORT: &str = "content-sort";
pub const ACTION_CONTENT_CANDIDATES: &str = "content-candidates";
pub const ACTION_CONTENT_DELIVER: &str = "content-match-deliver";
pub const ACTION_FUNCTION_CANDIDATES: &str = "function-candidates";
pub const ACTION_FUNCTION_DELIVER: &str = "function-eval-deliver";

/// How the content pipeline picks candidate keys from a publication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContentCandidateMode {
    /// Candidates come from the single alphabetically-first property key.
    /// This misses subscriptions whose constraint keys exclude that key.
    #[default]
    FirstKey,
    /// Candidates are resolved under every property key; complete, at the
    /// cost of one lookup per key.
    AllKeys,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Cached subscriber lists older than this are never used for matching.
    pub cache_ttl: Duration,
    pub content_candidate_mode: ContentCandidateMode,
    /// When false (default), a subscriber on several of a publication's
    /// topics receives one frame per matched topic.
    pub topic_dedupe: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cache_ttl: Duration::from_secs(10),
            content_candidate_mode: ContentCandidateMode::default(),
            topic_dedupe: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BrokerConfig {
    pub pipeline: PipelineConfig,
    pub limits: RuntimeLimits,
    pub store: StoreConfig,
    pub eval_limits: matchlang::EvalLimits,
    pub displace_policy: DisplacePolicy,
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown subscriber '{0}'")]
    UnknownSubscriber(String),
    #[error("{0}")]
    Parse(String),
    #[error("not found")]
    NotFound,
    #[error("throttled: {0}")]
    Throttled(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("store error: {0}")]
    Store(String),
    #[error("internal error: {0}")]
    Internal(String),
}

/// Per-branch record of one publish, flattened across pipeline stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BranchReport {
    pub stage: String,
    pub status: String,
    pub invocation_id: String,
}

/// Observability record returned from every publish.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishReceipt {
    pub publication_id: String,
    pub branches: Vec<BranchReport>,
}

impl PublishReceipt {
    pub fn count_status(&self, status: &str) -> usize {
        self.branches.iter().filter(|b| b.status == status).count()
    }

    pub fn throttled(&self) -> usize {
        self.count_status("throttled")
    }

    pub fn delivered(&self) -> usize {
        self.count_status("ok")
    }
}

struct PipelineShared {
    runtime: Weak<Runtime>,
    store: Arc<Store>,
    gateway: Arc<Gateway>,
    pipeline: PipelineConfig,
    eval_limits: matchlang::EvalLimits,
    epoch: tokio::time::Instant,
    /// (publication id -> subscribers already delivered), used for the
    /// topic dedupe toggle and for content candidate-branch dedupe; cleared
    /// when the publish completes.
    marks: Mutex<HashMap<String, HashSet<String>>>,
    match_errors: AtomicU64,
}

impl PipelineShared {
    fn now_ms(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn runtime(&self) -> Result<Arc<Runtime>, HandlerError> {
        self.runtime
            .upgrade()
            .ok_or_else(|| HandlerError::new("RUNTIME_GONE", "runtime has shut down"))
    }

    fn try_mark(&self, publication_id: &str, subscriber: &str) -> bool {
        self.marks
            .lock()
            .unwrap()
            .entry(publication_id.to_string())
            .or_default()
            .insert(subscriber.to_string())
    }

    fn clear_marks(&self, publication_id: &str) {
        self.marks.lock().unwrap().remove(publication_id);
    }

    /// Publication timestamps are wall-clock epoch millis, clamped to be
    /// monotonically non-decreasing per emitting container.
    fn next_timestamp(&self, ctx: &mut ContainerCtx) -> u64 {
        let wall = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let last = ctx.cache.get("lastTimestampMs").and_then(Json::as_u64).unwrap_or(0);
        let ts = wall.max(last);
        ctx.cache.insert("lastTimestampMs".to_string(), json!(ts));
        ts
    }
}

/// The broker facade: owns the runtime, store, and gateway, and exposes the
/// action set as typed calls.
pub struct Broker {
    runtime: Arc<Runtime>,
    store: Arc<Store>,
    gateway: Arc<Gateway>,
    shared: Arc<PipelineShared>,
}

type PipelineHandler =
    for<'a> fn(Arc<PipelineShared>, Json, &'a mut ContainerCtx) -> BoxFuture<'a, Result<Json, HandlerError>>;

impl Broker {
    pub fn new(config: BrokerConfig) -> Result<Self, BrokerError> {
        if config.pipeline.cache_ttl.is_zero() {
            return Err(BrokerError::InvalidRequest("cache_ttl must be positive".into()));
        }
        let store = Arc::new(Store::new(config.store).map_err(|e| BrokerError::Store(e.to_string()))?);
        let runtime = Arc::new(Runtime::new(config.limits));
        let gateway = Arc::new(Gateway::new(config.displace_policy));
        let shared = Arc::new(PipelineShared {
            runtime: Arc::downgrade(&runtime),
            store: Arc::clone(&store),
            gateway: Arc::clone(&gateway),
            pipeline: config.pipeline,
            eval_limits: config.eval_limits,
            epoch: tokio::time::Instant::now(),
            marks: Mutex::new(HashMap::new()),
            match_errors: AtomicU64::new(0),
        });

        let actions: [(&str, PipelineHandler); 12] = [
            (ACTION_REGISTER, register_subscriber_action),
            (ACTION_TOPIC_SUBSCRIPTION, topic_subscription_action),
            (ACTION_CONTENT_SUBSCRIPTION, content_subscription_action),
            (ACTION_FUNCTION_SUBSCRIPTION, function_subscription_action),
            (ACTION_TOPIC_SPLIT, topic_split_action),
            (ACTION_TOPIC_MATCH, topic_match_action),
            (ACTION_TOPIC_DELIVER, topic_deliver_action),
            (ACTION_CONTENT_SORT, content_sort_action),
            (ACTION_CONTENT_CANDIDATES, content_candidates_action),
            (ACTION_CONTENT_DELIVER, content_deliver_action),
            (ACTION_FUNCTION_CANDIDATES, function_candidates_action),
            (ACTION_FUNCTION_DELIVER, function_deliver_action),
        ];
        for (name, f) in actions {
            let shared_ref = Arc::clone(&shared);
            runtime
                .register(ActionSpec::new(name, move |input, ctx| {
                    f(Arc::clone(&shared_ref), input, ctx)
                }))
                .map_err(|e| BrokerError::Internal(e.to_string()))?;
        }

        Ok(Broker { runtime, store, gateway, shared })
    }

    pub fn runtime(&self) -> &Arc<Runtime> {
        &self.runtime
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    /// Count of matching-function or constraint evaluations that errored at
    /// publish time (treated as non-matches).
    pub fn match_error_count(&self) -> u64 {
        self.shared.match_errors.load(Ordering::Relaxed)
    }

    async fn invoke(&self, action: &str, input: Json) -> Result<Json, BrokerError> {
        self.runtime.invoke(action, input).await.map_err(broker_error)
    }

    /// Phase one of registration: mint and persist a fresh id. The caller
    /// completes phase two by registering the id as a device with the
    /// gateway.
    pub async fn register_subscriber(&self) -> Result<SubscriberId, BrokerError> {
        let out = self.invoke(ACTION_REGISTER, json!({})).await?;
        let id = out
            .get("subscriberId")
            .and_then(Json::as_str)
            .ok_or_else(|| BrokerError::Internal("registration returned no id".into()))?;
        SubscriberId::new(id).map_err(|e| BrokerError::Internal(e.to_string()))
    }

    pub async fn subscribe_topics(
        &self,
        subscriber: &SubscriberId,
        topics: &[String],
    ) -> Result<(), BrokerError> {
        if topics.is_empty() {
            return Err(BrokerError::InvalidRequest("topic list must be non-empty".into()));
        }
        self.invoke(
            ACTION_TOPIC_SUBSCRIPTION,
            json!({"mode": "subscribe", "subscriberId": subscriber, "topics": topics}),
        )
        .await
        .map(|_| ())
    }

    pub async fn unsubscribe_topics(
        &self,
        subscriber: &SubscriberId,
        topics: &[String],
    ) -> Result<(), BrokerError> {
        self.invoke(
            ACTION_TOPIC_SUBSCRIPTION,
            json!({"mode": "unsubscribe", "subscriberId": subscriber, "topics": topics}),
        )
        .await
        .map(|_| ())
    }

    pub async fn subscribe_content(
        &self,
        subscriber: &SubscriberId,
        constraints: &[Constraint],
    ) -> Result<(), BrokerError> {
        if constraints.is_empty() {
            return Err(BrokerError::InvalidRequest("constraint list must be non-empty".into()));
        }
        self.invoke(
            ACTION_CONTENT_SUBSCRIPTION,
            json!({"mode": "subscribe", "subscriberId": subscriber, "constraints": constraints}),
        )
        .await
        .map(|_| ())
    }

    pub async fn unsubscribe_content(&self, subscriber: &SubscriberId) -> Result<(), BrokerError> {
        self.invoke(
            ACTION_CONTENT_SUBSCRIPTION,
            json!({"mode": "unsubscribe", "subscriberId": subscriber}),
        )
        .await
        .map(|_| ())
    }

    pub async fn subscribe_function(
        &self,
        subscriber: &SubscriberId,
        function_type: &str,
        source: &str,
    ) -> Result<(), BrokerError> {
        if function_type.is_empty() {
            return Err(BrokerError::InvalidRequest("function type must be non-empty".into()));
        }
        self.invoke(
            ACTION_FUNCTION_SUBSCRIPTION,
            json!({
                "mode": "subscribe",
                "subscriberId": subscriber,
                "functionType": function_type,
                "source": source,
            }),
        )
        .await
        .map(|_| ())
    }

    pub async fn unsubscribe_function(
        &self,
        subscriber: &SubscriberId,
        function_type: &str,
    ) -> Result<(), BrokerError> {
        self.invoke(
            ACTION_FUNCTION_SUBSCRIPTION,
            json!({
                "mode": "unsubscribe",
                "subscriberId": subscriber,
                "functionType": function_type,
            }),
        )
        .await
        .map(|_| ())
    }

    pub async fn publish_topic(
        &self,
        data: &str,
        topics: &[String],
    ) -> Result<PublishReceipt, BrokerError> {
        if topics.is_empty() {
            return Err(BrokerError::InvalidRequest("topic list must be non-empty".into()));
        }
        self.run_pipeline(
            ACTION_TOPIC_SPLIT,
            json!({"data": data, "topics": topics}),
        )
        .await
    }

    pub async fn publish_content(
        &self,
        data: &str,
        properties: &PropertyList,
    ) -> Result<PublishReceipt, BrokerError> {
        if properties.is_empty() {
            return Err(BrokerError::InvalidRequest("property list must be non-empty".into()));
        }
        self.run_pipeline(
            ACTION_CONTENT_SORT,
            json!({"data": data, "properties": properties}),
        )
        .await
    }

    pub async fn publish_function(
        &self,
        data: &str,
        function_type: &str,
    ) -> Result<PublishReceipt, BrokerError> {
        if function_type.is_empty() {
            return Err(BrokerError::InvalidRequest("function type must be non-empty".into()));
        }
        self.run_pipeline(
            ACTION_FUNCTION_CANDIDATES,
            json!({"data": data, "functionType": function_type}),
        )
        .await
    }

    async fn run_pipeline(&self, entry_action: &str, mut input: Json) -> Result<PublishReceipt, BrokerError> {
        let publication_id = Uuid::new_v4().to_string();
        input["publicationId"] = json!(publication_id);

        let handle = self.runtime.submit(entry_action, input);
        let root_invocation = handle.invocation_id.clone();
        let outcome = handle.outcome().await;
        self.shared.clear_marks(&publication_id);

        let mut branches = vec![BranchReport {
            stage: entry_action.to_string(),
            status: match &outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => invoke_status(e).to_string(),
            },
            invocation_id: root_invocation,
        }];
        if let Ok(output) = &outcome {
            if let Some(nested) = output.get("branches").and_then(Json::as_array) {
                for b in nested {
                    branches.push(
                        serde_json::from_value(b.clone())
                            .map_err(|e| BrokerError::Internal(e.to_string()))?,
                    );
                }
            }
        }
        Ok(PublishReceipt { publication_id, branches })
    }
}

fn invoke_status(e: &InvokeError) -> &'static str {
    match e {
        InvokeError::Throttled { .. } => "throttled",
        InvokeError::Timeout { .. } => "timeout",
        _ => "error",
    }
}

fn broker_error(e: InvokeError) -> BrokerError {
    match e {
        InvokeError::Throttled { reason } => BrokerError::Throttled(reason.to_string()),
        InvokeError::Timeout { action, limit_ms } => {
            BrokerError::Timeout(format!("{action} exceeded {limit_ms} ms"))
        }
        InvokeError::UnknownAction(name) => BrokerError::Internal(format!("unknown action {name}")),
        InvokeError::Handler(h) => match h.code.as_str() {
            "UNKNOWN_SUBSCRIBER" => BrokerError::UnknownSubscriber(h.detail),
            "PARSE_ERROR" => BrokerError::Parse(h.detail),
            "NOT_FOUND" => BrokerError::NotFound,
            "INVALID_REQUEST" => BrokerError::InvalidRequest(h.detail),
            "BUDGET_REJECTED" | "STORE_IO" => BrokerError::Store(h.detail),
            _ => BrokerError::Internal(h.to_string()),
        },
    }
}

fn store_handler_error(e: StoreError) -> HandlerError {
    match e {
        StoreError::UnknownSubscriber(s) => HandlerError::new("UNKNOWN_SUBSCRIBER", s),
        StoreError::InvalidFunction(p) => HandlerError::new("PARSE_ERROR", p.to_string()),
        StoreError::NotFound => HandlerError::new("NOT_FOUND", "no such record"),
        StoreError::DuplicateConstraintKey(k) => {
            HandlerError::new("INVALID_REQUEST", format!("duplicate constraint key '{k}'"))
        }
        StoreError::EmptyId => HandlerError::new("INVALID_REQUEST", "empty document id"),
        StoreError::BudgetRejected => HandlerError::new("BUDGET_REJECTED", "lookup budget exhausted"),
        StoreError::Io(e) => HandlerError::new("STORE_IO", e.to_string()),
        StoreError::CorruptRecord(e) => HandlerError::new("STORE_IO", e),
    }
}

fn bad_input(e: impl std::fmt::Display) -> HandlerError {
    HandlerError::new("INVALID_REQUEST", e.to_string())
}

// ---------------------------------------------------------------------------
// Action handlers
// ---------------------------------------------------------------------------

fn register_subscriber_action(
    shared: Arc<PipelineShared>,
    _input: Json,
    _ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let id = Uuid::new_v4().to_string();
        shared
            .store
            .put_doc(
                &format!("subscribers/{id}"),
                json!({"registeredAtMs": shared.now_ms()}),
            )
            .await
            .map_err(store_handler_error)?;
        Ok(json!({"subscriberId": id}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TopicSubscriptionInput {
    mode: String,
    subscriber_id: SubscriberId,
    topics: Vec<String>,
}

fn topic_subscription_action(
    shared: Arc<PipelineShared>,
    input: Json,
    _ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: TopicSubscriptionInput = serde_json::from_value(input).map_err(bad_input)?;
        match req.mode.as_str() {
            "subscribe" => {
                if req.topics.is_empty() {
                    return Err(bad_input("topic list must be non-empty"));
                }
                shared
                    .store
                    .index_add_topic(&req.subscriber_id, &req.topics)
                    .await
                    .map_err(store_handler_error)?;
            }
            "unsubscribe" => {
                shared
                    .store
                    .index_remove_topic(&req.subscriber_id, &req.topics)
                    .await
                    .map_err(store_handler_error)?;
            }
            other => return Err(bad_input(format!("unknown mode '{other}'"))),
        }
        Ok(json!({"ok": true}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ContentSubscriptionInput {
    mode: String,
    subscriber_id: SubscriberId,
    #[serde(default)]
    constraints: Vec<Constraint>,
}

fn content_subscription_action(
    shared: Arc<PipelineShared>,
    input: Json,
    _ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: ContentSubscriptionInput = serde_json::from_value(input).map_err(bad_input)?;
        match req.mode.as_str() {
            "subscribe" => {
                if req.constraints.is_empty() {
                    return Err(bad_input("constraint list must be non-empty"));
                }
                shared
                    .store
                    .index_set_content(&req.subscriber_id, &req.constraints)
                    .await
                    .map_err(store_handler_error)?;
            }
            "unsubscribe" => {
                shared
                    .store
                    .index_clear_content(&req.subscriber_id)
                    .await
                    .map_err(store_handler_error)?;
            }
            other => return Err(bad_input(format!("unknown mode '{other}'"))),
        }
        Ok(json!({"ok": true}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct FunctionSubscriptionInput {
    mode: String,
    subscriber_id: SubscriberId,
    function_type: String,
    #[serde(default)]
    source: String,
}

fn function_subscription_action(
    shared: Arc<PipelineShared>,
    input: Json,
    _ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: FunctionSubscriptionInput = serde_json::from_value(input).map_err(bad_input)?;
        if req.function_type.is_empty() {
            return Err(bad_input("function type must be non-empty"));
        }
        match req.mode.as_str() {
            "subscribe" => {
                // Sources are validated here, at subscribe time; publish-time
                // evaluation failures are non-matches, never subscriber errors.
                matchlang::parse(&req.source)
                    .map_err(|e| HandlerError::new("PARSE_ERROR", e.to_string()))?;
                shared
                    .store
                    .index_set_function(&req.subscriber_id, &req.function_type, &req.source)
                    .await
                    .map_err(store_handler_error)?;
            }
            "unsubscribe" => {
                shared
                    .store
                    .index_remove_function(&req.subscriber_id, &req.function_type)
                    .await
                    .map_err(store_handler_error)?;
            }
            other => return Err(bad_input(format!("unknown mode '{other}'"))),
        }
        Ok(json!({"ok": true}))
    }
    .boxed()
}

/// Resolve a subscriber list through the container cache, falling back to a
/// budgeted store lookup when the entry is missing or stale.
async fn cached_lookup(
    shared: &PipelineShared,
    ctx: &mut ContainerCtx,
    kind: IndexKind,
    key: &str,
) -> Result<Vec<(SubscriberId, SubscriptionDetail)>, HandlerError> {
    let cache_key = format!("lookup:{}", kind.doc_id(key));
    let now = shared.now_ms();
    let ttl_ms = shared.pipeline.cache_ttl.as_millis() as u64;

    if let Some(entry) = ctx.cache.get(&cache_key) {
        let fetched = entry.get("fetchedAtMs").and_then(Json::as_u64).unwrap_or(0);
        if now.saturating_sub(fetched) <= ttl_ms {
            if let Some(value) = entry.get("value") {
                return decode_details(kind, value).map_err(bad_input);
            }
        }
    }

    let fresh = shared
        .store
        .lookup_subscribers(kind, key)
        .await
        .map_err(store_handler_error)?;
    let pairs: Vec<(SubscriberId, SubscriptionDetail)> = fresh.into_iter().collect();
    ctx.cache.insert(
        cache_key,
        json!({"fetchedAtMs": now, "value": encode_details(&pairs)}),
    );
    Ok(pairs)
}

fn encode_details(pairs: &[(SubscriberId, SubscriptionDetail)]) -> Json {
    let mut map = serde_json::Map::new();
    for (sub, detail) in pairs {
        let value = match detail {
            SubscriptionDetail::Topic => json!(true),
            SubscriptionDetail::Content { constraints } => json!({"constraints": constraints}),
            SubscriptionDetail::Function { source } => json!({"source": source}),
        };
        map.insert(sub.to_string(), value);
    }
    Json::Object(map)
}

fn decode_details(
    kind: IndexKind,
    value: &Json,
) -> Result<Vec<(SubscriberId, SubscriptionDetail)>, String> {
    let obj = value.as_object().ok_or("cache entry is not an object")?;
    let mut out = Vec::with_capacity(obj.len());
    for (sub, detail) in obj {
        let sub = SubscriberId::new(sub.as_str()).map_err(|e| e.to_string())?;
        let detail = match kind {
            IndexKind::Topic => SubscriptionDetail::Topic,
            IndexKind::ContentKey => SubscriptionDetail::Content {
                constraints: serde_json::from_value(
                    detail.get("constraints").cloned().unwrap_or(json!([])),
                )
                .map_err(|e| e.to_string())?,
            },
            IndexKind::FunctionType => SubscriptionDetail::Function {
                source: detail
                    .get("source")
                    .and_then(Json::as_str)
                    .unwrap_or_default()
                    .to_string(),
            },
        };
        out.push((sub, detail));
    }
    Ok(out)
}

/// Await a fan-out and flatten each handle (plus any branches its output
/// reports) into branch records.
async fn collect_branches(
    stage: &str,
    handles: Vec<crate::runtime::InvocationHandle>,
) -> Vec<Json> {
    let mut branches = Vec::new();
    for handle in handles {
        let invocation_id = handle.invocation_id.clone();
        match handle.outcome().await {
            Ok(output) => {
                let status = output
                    .get("result")
                    .and_then(Json::as_str)
                    .unwrap_or("ok")
                    .to_string();
                branches.push(json!({
                    "stage": stage,
                    "status": status,
                    "invocationId": invocation_id,
                }));
                if let Some(nested) = output.get("branches").and_then(Json::as_array) {
                    branches.extend(nested.iter().cloned());
                }
            }
            Err(e) => branches.push(json!({
                "stage": stage,
                "status": invoke_status(&e),
                "invocationId": invocation_id,
            })),
        }
    }
    branches
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TopicSplitInput {
    publication_id: String,
    data: String,
    topics: Vec<String>,
}

fn topic_split_action(
    shared: Arc<PipelineShared>,
    input: Json,
    _ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: TopicSplitInput = serde_json::from_value(input).map_err(bad_input)?;
        if req.topics.is_empty() {
            return Err(bad_input("topic list must be non-empty"));
        }
        let runtime = shared.runtime()?;
        let mut seen = HashSet::new();
        let inputs: Vec<Json> = req
            .topics
            .iter()
            .filter(|t| seen.insert(t.as_str()))
            .map(|topic| {
                json!({
                    "publicationId": req.publication_id,
                    "data": req.data,
                    "topic": topic,
                })
            })
            .collect();
        let handles = runtime.invoke_async_fanout(ACTION_TOPIC_MATCH, inputs);
        let branches = collect_branches(ACTION_TOPIC_MATCH, handles).await;
        Ok(json!({"branches": branches}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TopicMatchInput {
    publication_id: String,
    data: String,
    topic: String,
}

fn topic_match_action(
    shared: Arc<PipelineShared>,
    input: Json,
    ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: TopicMatchInput = serde_json::from_value(input).map_err(bad_input)?;
        let subscribers = cached_lookup(&shared, ctx, IndexKind::Topic, &req.topic).await?;
        let runtime = shared.runtime()?;
        let inputs: Vec<Json> = subscribers
            .iter()
            .map(|(sub, _)| {
                json!({
                    "publicationId": req.publication_id,
                    "data": req.data,
                    "topic": req.topic,
                    "subscriberId": sub,
                })
            })
            .collect();
        let handles = runtime.invoke_async_fanout(ACTION_TOPIC_DELIVER, inputs);
        let branches = collect_branches(ACTION_TOPIC_DELIVER, handles).await;
        Ok(json!({"branches": branches}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TopicDeliverInput {
    publication_id: String,
    data: String,
    topic: String,
    subscriber_id: SubscriberId,
}

fn topic_deliver_action(
    shared: Arc<PipelineShared>,
    input: Json,
    ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: TopicDeliverInput = serde_json::from_value(input).map_err(bad_input)?;
        if shared.pipeline.topic_dedupe
            && !shared.try_mark(&req.publication_id, req.subscriber_id.as_str())
        {
            return Ok(json!({"result": "deduped"}));
        }
        let timestamp = shared.next_timestamp(ctx);
        let outcome = shared.gateway.deliver(DeliveryFrame {
            subscriber_id: req.subscriber_id,
            data: req.data,
            match_info: MatchInfo::Topic(req.topic),
            timestamp,
        });
        Ok(deliver_result(outcome))
    }
    .boxed()
}

fn deliver_result(outcome: crate::gateway::DeliverOutcome) -> Json {
    use crate::gateway::{DeliverOutcome, DropReason};
    match outcome {
        DeliverOutcome::Delivered => json!({"result": "ok"}),
        DeliverOutcome::Dropped(DropReason::Unknown) => {
            json!({"result": "dropped", "reason": "UNKNOWN"})
        }
        DeliverOutcome::Dropped(DropReason::Disconnected) => {
            json!({"result": "dropped", "reason": "DISCONNECTED"})
        }
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ContentSortInput {
    publication_id: String,
    data: String,
    properties: PropertyList,
}

fn content_sort_action(
    shared: Arc<PipelineShared>,
    input: Json,
    _ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: ContentSortInput = serde_json::from_value(input).map_err(bad_input)?;
        if req.properties.is_empty() {
            return Err(bad_input("property list must be non-empty"));
        }
        let candidate_keys: Vec<&str> = match shared.pipeline.content_candidate_mode {
            ContentCandidateMode::FirstKey => vec![req.properties.first_key().unwrap()],
            ContentCandidateMode::AllKeys => req.properties.keys().collect(),
        };
        let runtime = shared.runtime()?;
        let inputs: Vec<Json> = candidate_keys
            .iter()
            .map(|key| {
                json!({
                    "publicationId": req.publication_id,
                    "data": req.data,
                    "candidateKey": key,
                    "properties": req.properties,
                })
            })
            .collect();
        let handles = runtime.invoke_async_fanout(ACTION_CONTENT_CANDIDATES, inputs);
        let branches = collect_branches(ACTION_CONTENT_CANDIDATES, handles).await;
        Ok(json!({"branches": branches}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ContentCandidatesInput {
    publication_id: String,
    data: String,
    candidate_key: String,
    properties: PropertyList,
}

fn content_candidates_action(
    shared: Arc<PipelineShared>,
    input: Json,
    ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: ContentCandidatesInput = serde_json::from_value(input).map_err(bad_input)?;
        let candidates =
            cached_lookup(&shared, ctx, IndexKind::ContentKey, &req.candidate_key).await?;
        let runtime = shared.runtime()?;
        let inputs: Vec<Json> = candidates
            .iter()
            .map(|(sub, detail)| {
                let constraints = detail.constraints().unwrap_or(&[]);
                json!({
                    "publicationId": req.publication_id,
                    "data": req.data,
                    "subscriberId": sub,
                    "constraints": constraints,
                    "properties": req.properties,
                })
            })
            .collect();
        let handles = runtime.invoke_async_fanout(ACTION_CONTENT_DELIVER, inputs);
        let branches = collect_branches(ACTION_CONTENT_DELIVER, handles).await;
        Ok(json!({"branches": branches}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ContentDeliverInput {
    publication_id: String,
    data: String,
    subscriber_id: SubscriberId,
    constraints: Vec<Constraint>,
    properties: PropertyList,
}

fn content_deliver_action(
    shared: Arc<PipelineShared>,
    input: Json,
    ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: ContentDeliverInput = serde_json::from_value(input).map_err(bad_input)?;
        let matched = match crate::domain::satisfies(&req.constraints, &req.properties) {
            Ok(m) => m,
            Err(mismatch) => {
                // A type mismatch counts the candidate as non-matching;
                // logged, never fatal to the pipeline.
                shared.match_errors.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(
                    subscriber = %req.subscriber_id,
                    error = %mismatch,
                    "constraint comparison failed; treating as non-match"
                );
                return Ok(json!({"result": "nomatch", "error": mismatch.to_string()}));
            }
        };
        if !matched {
            return Ok(json!({"result": "nomatch"}));
        }
        // A subscriber can be a candidate under several keys; deliver once
        // per publication.
        if !shared.try_mark(&req.publication_id, req.subscriber_id.as_str()) {
            return Ok(json!({"result": "deduped"}));
        }
        let timestamp = shared.next_timestamp(ctx);
        let outcome = shared.gateway.deliver(DeliveryFrame {
            subscriber_id: req.subscriber_id,
            data: req.data,
            match_info: MatchInfo::Properties(req.properties),
            timestamp,
        });
        Ok(deliver_result(outcome))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct FunctionCandidatesInput {
    publication_id: String,
    data: String,
    function_type: String,
}

fn function_candidates_action(
    shared: Arc<PipelineShared>,
    input: Json,
    ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: FunctionCandidatesInput = serde_json::from_value(input).map_err(bad_input)?;
        if req.function_type.is_empty() {
            return Err(bad_input("function type must be non-empty"));
        }
        let candidates =
            cached_lookup(&shared, ctx, IndexKind::FunctionType, &req.function_type).await?;
        let runtime = shared.runtime()?;
        let inputs: Vec<Json> = candidates
            .iter()
            .map(|(sub, detail)| {
                json!({
                    "publicationId": req.publication_id,
                    "data": req.data,
                    "subscriberId": sub,
                    "functionType": req.function_type,
                    "source": detail.source().unwrap_or_default(),
                })
            })
            .collect();
        let handles = runtime.invoke_async_fanout(ACTION_FUNCTION_DELIVER, inputs);
        let branches = collect_branches(ACTION_FUNCTION_DELIVER, handles).await;
        Ok(json!({"branches": branches}))
    }
    .boxed()
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct FunctionDeliverInput {
    data: String,
    subscriber_id: SubscriberId,
    function_type: String,
    source: String,
}

fn function_deliver_action(
    shared: Arc<PipelineShared>,
    input: Json,
    ctx: &mut ContainerCtx,
) -> BoxFuture<'_, Result<Json, HandlerError>> {
    async move {
        let req: FunctionDeliverInput = serde_json::from_value(input).map_err(bad_input)?;
        let verdict = matchlang::parse(&req.source)
            .map_err(|e| e.to_string())
            .and_then(|prog| {
                matchlang::evaluate(&prog, &req.data, &shared.eval_limits)
                    .map_err(|e| e.to_string())
            });
        let matched = match verdict {
            Ok(m) => m,
            Err(e) => {
                // Runtime errors in user functions count as non-matches.
                shared.match_errors.fetch_add(1, Ordering::Relaxed);
                tracing::debug!(
                    subscriber = %req.subscriber_id,
                    function_type = %req.function_type,
                    error = %e,
                    "matching function failed; treating as non-match"
                );
                return Ok(json!({"result": "nomatch", "error": e}));
            }
        };
        if !matched {
            return Ok(json!({"result": "nomatch"}));
        }
        let timestamp = shared.next_timestamp(ctx);
        let outcome = shared.gateway.deliver(DeliveryFrame {
            subscriber_id: req.subscriber_id,
            data: req.data,
            match_info: MatchInfo::FunctionType(req.function_type),
            timestamp,
        });
        Ok(deliver_result(outcome))
    }
    .boxed()
}
