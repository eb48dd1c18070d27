//! Identifier-addressed document store with a lookups-per-second budget and
//! the dual-redundant subscription layout.
//!
//! Every subscription is stored twice: once under the subscription key
//! (`topic/<t>`, `ckey/<k>`, `ftype/<T>`) listing subscribers, and once under
//! the subscriber (`sub-topics/<id>`, `sub-content/<id>`, `sub-funcs/<id>`)
//! listing what that subscriber holds. Publish pipelines then resolve
//! subscribers with a single id-addressed lookup instead of content queries.
//!
//! The budget is a zero-burst pacing gate: the k-th operation in a backlog
//! completes k/capacity seconds after the backlog started, so completed
//! operations in any trailing one-second window never exceed the capacity.
//! Under the `Queue` policy callers wait for their slot; under `Reject` an
//! operation arriving while another slot is pending fails fast.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use tokio::time::Instant;

use crate::domain::{Constraint, SubscriberId};

pub const NS_SUBSCRIBERS: &str = "subscribers/";
pub const NS_TOPIC: &str = "topic/";
pub const NS_SUB_TOPICS: &str = "sub-topics/";
pub const NS_CKEY: &str = "ckey/";
pub const NS_SUB_CONTENT: &str = "sub-content/";
pub const NS_FTYPE: &str = "ftype/";
pub const NS_SUB_FUNCS: &str = "sub-funcs/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BudgetPolicy {
    Queue,
    Reject,
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Budgeted operations per second (reads, plus writes when
    /// `charge_writes` is set).
    pub lookups_per_second: u32,
    pub policy: BudgetPolicy,
    /// Whether writes draw from the same budget as reads.
    pub charge_writes: bool,
    /// Append-only NDJSON persistence file; replayed on open when present.
    pub persist_path: Option<PathBuf>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            lookups_per_second: 1000,
            policy: BudgetPolicy::Queue,
            charge_writes: true,
            persist_path: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("document id must be non-empty")]
    EmptyId,
    #[error("not found")]
    NotFound,
    #[error("lookup budget exhausted")]
    BudgetRejected,
    #[error("unknown subscriber '{0}'")]
    UnknownSubscriber(String),
    #[error("duplicate constraint key '{0}'")]
    DuplicateConstraintKey(String),
    #[error(transparent)]
    InvalidFunction(#[from] matchlang::ParseError),
    #[error("persistence error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt persistence record: {0}")]
    CorruptRecord(String),
}

/// Which side of the key-addressed index to resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexKind {
    Topic,
    ContentKey,
    FunctionType,
}

impl IndexKind {
    pub fn doc_id(self, key: &str) -> String {
        match self {
            IndexKind::Topic => format!("{NS_TOPIC}{key}"),
            IndexKind::ContentKey => format!("{NS_CKEY}{key}"),
            IndexKind::FunctionType => format!("{NS_FTYPE}{key}"),
        }
    }
}

/// Per-subscriber payload returned by [`Store::lookup_subscribers`].
#[derive(Debug, Clone, PartialEq)]
pub enum SubscriptionDetail {
    Topic,
    Content { constraints: Vec<Constraint> },
    Function { source: String },
}

impl SubscriptionDetail {
    pub fn constraints(&self) -> Option<&[Constraint]> {
        match self {
            SubscriptionDetail::Content { constraints } => Some(constraints),
            _ => None,
        }
    }

    pub fn source(&self) -> Option<&str> {
        match self {
            SubscriptionDetail::Function { source } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub puts: u64,
    pub gets: u64,
    pub deletes: u64,
    pub lookups: u64,
}

impl StatsSnapshot {
    /// Total budget-relevant read operations.
    pub fn reads(&self) -> u64 {
        self.gets + self.lookups
    }
}

#[derive(Serialize, Deserialize)]
struct PersistRecord {
    id: String,
    rev: u64,
    body: Option<Json>,
}

struct DocEntry {
    body: Option<Json>,
    rev: u64,
}

struct Inner {
    docs: HashMap<String, DocEntry>,
    reads_by_id: HashMap<String, u64>,
    log: Option<File>,
}

struct Budget {
    interval: Duration,
    policy: BudgetPolicy,
    next_slot: Mutex<Instant>,
}

impl Budget {
    fn new(capacity: u32, policy: BudgetPolicy) -> Self {
        let capacity = capacity.max(1);
        Budget {
            interval: Duration::from_secs(1) / capacity,
            policy,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    async fn acquire(&self, permits: u32) -> Result<(), StoreError> {
        if permits == 0 {
            return Ok(());
        }
        let deadline = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            if self.policy == BudgetPolicy::Reject && *slot > now {
                return Err(StoreError::BudgetRejected);
            }
            let base = (*slot).max(now);
            let deadline = base + self.interval * permits;
            *slot = deadline;
            deadline
        };
        tokio::time::sleep_until(deadline).await;
        Ok(())
    }
}

pub struct Store {
    inner: Mutex<Inner>,
    budget: Budget,
    charge_writes: bool,
    puts: AtomicU64,
    gets: AtomicU64,
    deletes: AtomicU64,
    lookups: AtomicU64,
}

impl Store {
    pub fn new(config: StoreConfig) -> Result<Self, StoreError> {
        let mut docs = HashMap::new();
        let log = match &config.persist_path {
            Some(path) => {
                if path.exists() {
                    let reader = BufReader::new(File::open(path)?);
                    for line in reader.lines() {
                        let line = line?;
                        if line.trim().is_empty() {
                            continue;
                        }
                        let rec: PersistRecord = serde_json::from_str(&line)
                            .map_err(|e| StoreError::CorruptRecord(e.to_string()))?;
                        docs.insert(rec.id, DocEntry { body: rec.body, rev: rec.rev });
                    }
                }
                Some(OpenOptions::new().create(true).append(true).open(path)?)
            }
            None => None,
        };
        Ok(Store {
            inner: Mutex::new(Inner { docs, reads_by_id: HashMap::new(), log }),
            budget: Budget::new(config.lookups_per_second, config.policy),
            charge_writes: config.charge_writes,
            puts: AtomicU64::new(0),
            gets: AtomicU64::new(0),
            deletes: AtomicU64::new(0),
            lookups: AtomicU64::new(0),
        })
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            puts: self.puts.load(Ordering::Relaxed),
            gets: self.gets.load(Ordering::Relaxed),
            deletes: self.deletes.load(Ordering::Relaxed),
            lookups: self.lookups.load(Ordering::Relaxed),
        }
    }

    /// Budgeted reads (gets and lookups) that targeted one document id.
    pub fn reads_for(&self, doc_id: &str) -> u64 {
        self.inner.lock().unwrap().reads_by_id.get(doc_id).copied().unwrap_or(0)
    }

    /// Final state of every document, for replay-determinism checks.
    pub fn snapshot(&self) -> BTreeMap<String, (u64, Option<Json>)> {
        let inner = self.inner.lock().unwrap();
        inner
            .docs
            .iter()
            .map(|(id, e)| (id.clone(), (e.rev, e.body.clone())))
            .collect()
    }

    fn write_charge(&self, permits: u32) -> u32 {
        if self.charge_writes {
            permits
        } else {
            0
        }
    }

    pub async fn put_doc(&self, id: &str, body: Json) -> Result<u64, StoreError> {
        if id.is_empty() {
            return Err(StoreError::EmptyId);
        }
        self.budget.acquire(self.write_charge(1)).await?;
        let mut inner = self.inner.lock().unwrap();
        let rev = apply_write(&mut inner, id, Some(body));
        self.puts.fetch_add(1, Ordering::Relaxed);
        Ok(rev)
    }

    pub async fn get_doc(&self, id: &str) -> Result<Json, StoreError> {
        self.budget.acquire(1).await?;
        let mut inner = self.inner.lock().unwrap();
        *inner.reads_by_id.entry(id.to_string()).or_insert(0) += 1;
        self.gets.fetch_add(1, Ordering::Relaxed);
        match inner.docs.get(id).and_then(|e| e.body.clone()) {
            Some(body) => Ok(body),
            None => Err(StoreError::NotFound),
        }
    }

    pub async fn delete_doc(&self, id: &str) -> Result<(), StoreError> {
        self.budget.acquire(self.write_charge(1)).await?;
        let mut inner = self.inner.lock().unwrap();
        let exists = inner.docs.get(id).is_some_and(|e| e.body.is_some());
        if !exists {
            return Err(StoreError::NotFound);
        }
        apply_write(&mut inner, id, None);
        self.deletes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn check_registered(inner: &Inner, subscriber: &SubscriberId) -> Result<(), StoreError> {
        let id = format!("{NS_SUBSCRIBERS}{subscriber}");
        if inner.docs.get(&id).is_some_and(|e| e.body.is_some()) {
            Ok(())
        } else {
            Err(StoreError::UnknownSubscriber(subscriber.to_string()))
        }
    }

    /// Add `subscriber` to each `topic/<t>` document and the topics to
    /// `sub-topics/<id>`; both sides update under one critical section.
    pub async fn index_add_topic(
        &self,
        subscriber: &SubscriberId,
        topics: &[String],
    ) -> Result<(), StoreError> {
        self.mutate_topics(subscriber, topics, true).await
    }

    /// Symmetric removal; unsubscribing a never-subscribed topic is a no-op.
    pub async fn index_remove_topic(
        &self,
        subscriber: &SubscriberId,
        topics: &[String],
    ) -> Result<(), StoreError> {
        self.mutate_topics(subscriber, topics, false).await
    }

    async fn mutate_topics(
        &self,
        subscriber: &SubscriberId,
        topics: &[String],
        add: bool,
    ) -> Result<(), StoreError> {
        {
            let inner = self.inner.lock().unwrap();
            Self::check_registered(&inner, subscriber)?;
        }
        self.budget.acquire(self.write_charge(topics.len() as u32 + 1)).await?;

        let mut inner = self.inner.lock().unwrap();
        Self::check_registered(&inner, subscriber)?;
        let mut writes = 0u64;
        for topic in topics {
            let id = IndexKind::Topic.doc_id(topic);
            let mut subs = read_string_list(&inner, &id, "subscribers");
            let changed = if add {
                insert_sorted(&mut subs, subscriber.as_str())
            } else {
                remove_item(&mut subs, subscriber.as_str())
            };
            if changed {
                apply_write(&mut inner, &id, Some(json!({ "subscribers": subs })));
                writes += 1;
            }
        }
        let sub_id = format!("{NS_SUB_TOPICS}{subscriber}");
        let mut mine = read_string_list(&inner, &sub_id, "topics");
        let mut changed = false;
        for topic in topics {
            changed |= if add {
                insert_sorted(&mut mine, topic)
            } else {
                remove_item(&mut mine, topic)
            };
        }
        if changed {
            apply_write(&mut inner, &sub_id, Some(json!({ "topics": mine })));
            writes += 1;
        }
        self.puts.fetch_add(writes, Ordering::Relaxed);
        Ok(())
    }

    /// Replace the subscriber's content subscription. Keys no longer
    /// referenced lose the subscriber in their `ckey/` documents.
    pub async fn index_set_content(
        &self,
        subscriber: &SubscriberId,
        constraints: &[Constraint],
    ) -> Result<(), StoreError> {
        let mut sorted: Vec<Constraint> = constraints.to_vec();
        sorted.sort_by(|a, b| a.key.as_bytes().cmp(b.key.as_bytes()));
        for pair in sorted.windows(2) {
            if pair[0].key == pair[1].key {
                return Err(StoreError::DuplicateConstraintKey(pair[0].key.clone()));
            }
        }
        self.replace_content(subscriber, sorted).await
    }

    /// Remove the subscriber's content subscription entirely; a clear with
    /// no prior subscription is a no-op.
    pub async fn index_clear_content(&self, subscriber: &SubscriberId) -> Result<(), StoreError> {
        self.replace_content(subscriber, Vec::new()).await
    }

    async fn replace_content(
        &self,
        subscriber: &SubscriberId,
        constraints: Vec<Constraint>,
    ) -> Result<(), StoreError> {
        let sub_doc_id = format!("{NS_SUB_CONTENT}{subscriber}");
        let planned = {
            let inner = self.inner.lock().unwrap();
            Self::check_registered(&inner, subscriber)?;
            let old_keys = read_content_keys(&inner, &sub_doc_id);
            let mut keys: Vec<String> = old_keys;
            for c in &constraints {
                if !keys.contains(&c.key) {
                    keys.push(c.key.clone());
                }
            }
            keys.len() as u32 + 1
        };
        self.budget.acquire(self.write_charge(planned)).await?;

        let mut inner = self.inner.lock().unwrap();
        Self::check_registered(&inner, subscriber)?;
        let old_keys = read_content_keys(&inner, &sub_doc_id);
        let mut writes = 0u64;

        // Key-side documents: drop stale keys, then upsert current ones.
        for key in &old_keys {
            if !constraints.iter().any(|c| &c.key == key) {
                let id = IndexKind::ContentKey.doc_id(key);
                let mut map = read_subscriber_map(&inner, &id);
                if map.remove(subscriber.as_str()).is_some() {
                    apply_write(&mut inner, &id, Some(json!({ "subscribers": map })));
                    writes += 1;
                }
            }
        }
        for c in &constraints {
            let id = IndexKind::ContentKey.doc_id(&c.key);
            let mut map = read_subscriber_map(&inner, &id);
            let detail = json!({
                "op": c.op,
                "value": c.value,
                "constraints": constraints,
            });
            if map.get(subscriber.as_str()) != Some(&detail) {
                map.insert(subscriber.to_string(), detail);
                apply_write(&mut inner, &id, Some(json!({ "subscribers": map })));
                writes += 1;
            }
        }

        // Subscriber-side document.
        let new_body = if constraints.is_empty() {
            None
        } else {
            Some(json!({ "constraints": constraints }))
        };
        let current = inner.docs.get(&sub_doc_id).and_then(|e| e.body.clone());
        if current != new_body && !(current.is_none() && new_body.is_none()) {
            apply_write(&mut inner, &sub_doc_id, new_body);
            writes += 1;
        }
        self.puts.fetch_add(writes, Ordering::Relaxed);
        Ok(())
    }

    /// Store one matching function per (subscriber, type); same-type
    /// resubmission overwrites.
    pub async fn index_set_function(
        &self,
        subscriber: &SubscriberId,
        function_type: &str,
        source: &str,
    ) -> Result<(), StoreError> {
        matchlang::parse(source)?;
        {
            let inner = self.inner.lock().unwrap();
            Self::check_registered(&inner, subscriber)?;
        }
        self.budget.acquire(self.write_charge(2)).await?;

        let mut inner = self.inner.lock().unwrap();
        Self::check_registered(&inner, subscriber)?;
        let mut writes = 0u64;

        let type_doc = IndexKind::FunctionType.doc_id(function_type);
        let mut map = read_subscriber_map(&inner, &type_doc);
        let detail = json!({ "source": source });
        if map.get(subscriber.as_str()) != Some(&detail) {
            map.insert(subscriber.to_string(), detail);
            apply_write(&mut inner, &type_doc, Some(json!({ "subscribers": map })));
            writes += 1;
        }

        let sub_doc = format!("{NS_SUB_FUNCS}{subscriber}");
        let mut funcs = read_function_map(&inner, &sub_doc);
        if funcs.get(function_type).map(String::as_str) != Some(source) {
            funcs.insert(function_type.to_string(), source.to_string());
            apply_write(&mut inner, &sub_doc, Some(json!({ "functions": funcs })));
            writes += 1;
        }
        self.puts.fetch_add(writes, Ordering::Relaxed);
        Ok(())
    }

    /// Removing an absent type returns `NotFound` and leaves the store
    /// unchanged.
    pub async fn index_remove_function(
        &self,
        subscriber: &SubscriberId,
        function_type: &str,
    ) -> Result<(), StoreError> {
        {
            let inner = self.inner.lock().unwrap();
            Self::check_registered(&inner, subscriber)?;
            let sub_doc = format!("{NS_SUB_FUNCS}{subscriber}");
            if !read_function_map(&inner, &sub_doc).contains_key(function_type) {
                return Err(StoreError::NotFound);
            }
        }
        self.budget.acquire(self.write_charge(2)).await?;

        let mut inner = self.inner.lock().unwrap();
        Self::check_registered(&inner, subscriber)?;
        let mut writes = 0u64;
        let sub_doc = format!("{NS_SUB_FUNCS}{subscriber}");
        let mut funcs = read_function_map(&inner, &sub_doc);
        if funcs.remove(function_type).is_none() {
            return Err(StoreError::NotFound);
        }
        apply_write(&mut inner, &sub_doc, Some(json!({ "functions": funcs })));
        writes += 1;

        let type_doc = IndexKind::FunctionType.doc_id(function_type);
        let mut map = read_subscriber_map(&inner, &type_doc);
        if map.remove(subscriber.as_str()).is_some() {
            apply_write(&mut inner, &type_doc, Some(json!({ "subscribers": map })));
            writes += 1;
        }
        self.puts.fetch_add(writes, Ordering::Relaxed);
        Ok(())
    }

    /// Snapshot of one key-addressed index document; counts as one budgeted
    /// lookup.
    pub async fn lookup_subscribers(
        &self,
        kind: IndexKind,
        key: &str,
    ) -> Result<BTreeMap<SubscriberId, SubscriptionDetail>, StoreError> {
        self.budget.acquire(1).await?;
        let doc_id = kind.doc_id(key);
        let mut inner = self.inner.lock().unwrap();
        *inner.reads_by_id.entry(doc_id.clone()).or_insert(0) += 1;
        self.lookups.fetch_add(1, Ordering::Relaxed);

        let mut out = BTreeMap::new();
        let Some(body) = inner.docs.get(&doc_id).and_then(|e| e.body.as_ref()) else {
            return Ok(out);
        };
        match kind {
            IndexKind::Topic => {
                if let Some(subs) = body.get("subscribers").and_then(Json::as_array) {
                    for s in subs.iter().filter_map(Json::as_str) {
                        out.insert(SubscriberId::new(s).unwrap(), SubscriptionDetail::Topic);
                    }
                }
            }
            IndexKind::ContentKey => {
                if let Some(map) = body.get("subscribers").and_then(Json::as_object) {
                    for (s, detail) in map {
                        let constraints: Vec<Constraint> = detail
                            .get("constraints")
                            .cloned()
                            .map(serde_json::from_value)
                            .transpose()
                            .map_err(|e| StoreError::CorruptRecord(e.to_string()))?
                            .unwrap_or_default();
                        out.insert(
                            SubscriberId::new(s.as_str()).unwrap(),
                            SubscriptionDetail::Content { constraints },
                        );
                    }
                }
            }
            IndexKind::FunctionType => {
                if let Some(map) = body.get("subscribers").and_then(Json::as_object) {
                    for (s, detail) in map {
                        let source = detail
                            .get("source")
                            .and_then(Json::as_str)
                            .unwrap_or_default()
                            .to_string();
                        out.insert(
                            SubscriberId::new(s.as_str()).unwrap(),
                            SubscriptionDetail::Function { source },
                        );
                    }
                }
            }
        }
        Ok(out)
    }
}

fn apply_write(inner: &mut Inner, id: &str, body: Option<Json>) -> u64 {
    let entry = inner
        .docs
        .entry(id.to_string())
        .or_insert(DocEntry { body: None, rev: 0 });
    entry.rev += 1;
    entry.body = body.clone();
    let rev = entry.rev;
    if let Some(log) = &mut inner.log {
        let record = PersistRecord { id: id.to_string(), rev, body };
        // Appending is best-effort durability; the in-memory state is
        // authoritative for the running process.
        let _ = serde_json::to_writer(&mut *log, &record);
        let _ = log.write_all(b"\n");
    }
    rev
}

fn read_string_list(inner: &Inner, id: &str, field: &str) -> Vec<String> {
    inner
        .docs
        .get(id)
        .and_then(|e| e.body.as_ref())
        .and_then(|b| b.get(field))
        .and_then(Json::as_array)
        .map(|a| a.iter().filter_map(Json::as_str).map(str::to_string).collect())
        .unwrap_or_default()
}

fn read_subscriber_map(inner: &Inner, id: &str) -> serde_json::Map<String, Json> {
    inner
        .docs
        .get(id)
        .and_then(|e| e.body.as_ref())
        .and_then(|b| b.get("subscribers"))
        .and_then(Json::as_object)
        .cloned()
        .unwrap_or_default()
}

fn read_function_map(inner: &Inner, id: &str) -> BTreeMap<String, String> {
    inner
        .docs
        .get(id)
        .and_then(|e| e.body.as_ref())
        .and_then(|b| b.get("functions"))
        .and_then(Json::as_object)
        .map(|m| {
            m.iter()
                .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
                .collect()
        })
        .unwrap_or_default()
}

fn read_content_keys(inner: &Inner, sub_doc_id: &str) -> Vec<String> {
    inner
        .docs
        .get(sub_doc_id)
        .and_then(|e| e.body.as_ref())
        .and_then(|b| b.get("constraints"))
        .and_then(Json::as_array)
        .map(|a| {
            a.iter()
                .filter_map(|c| c.get("key").and_then(Json::as_str).map(str::to_string))
                .collect()
        })
        .unwrap_or_default()
}

fn insert_sorted(list: &mut Vec<String>, item: &str) -> bool {
    match list.binary_search_by(|x| x.as_str().cmp(item)) {
        Ok(_) => false,
        Err(pos) => {
            list.insert(pos, item.to_string());
            true
        }
    }
}

fn remove_item(list: &mut Vec<String>, item: &str) -> bool {
    match list.binary_search_by(|x| x.as_str().cmp(item)) {
        Ok(pos) => {
            list.remove(pos);
            true
        }
        Err(_) => false,
    }
}

/// Document id holding a subscriber's registration record.
pub fn subscriber_doc_id(subscriber: &SubscriberId) -> String {
    format!("{NS_SUBSCRIBERS}{subscriber}")
}
