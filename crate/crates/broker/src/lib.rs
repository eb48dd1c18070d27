//! A self-contained serverless pub/sub broker that runs entirely in one
//! process: stateless matching actions executed by an emulated
//! Function-as-a-Service runtime with vendor-style limits, backed by a
//! rate-limited document store and a per-subscriber push delivery channel.
//!
//! The broker supports three matching schemes:
//!
//! - **topic**: a publication carries a topic list; subscribers holding any
//!   of those topics receive it, once per matched topic.
//! - **content**: a publication carries key/value properties; subscribers
//!   whose constraint conjunction is fully satisfied receive it.
//! - **function**: a publication carries a function type; subscribers'
//!   matching programs (see the `matchlang` crate) are evaluated against the
//!   payload and a `true` verdict delivers.
//!
//! Each publish is decomposed into a pipeline of independently invoked
//! runtime actions with per-container subscription caches, so concurrency
//! limits, invocation-rate limits, and store lookup budgets apply at the
//! same grain they would on a hosted FaaS platform.

pub mod actions;
pub mod domain;
pub mod gateway;
pub mod http;
pub mod runtime;
pub mod store;

pub use actions::{Broker, BrokerConfig, BrokerError, ContentCandidateMode, PipelineConfig, PublishReceipt};
pub use domain::{
    compare_scalars, satisfies, topic_matches, Attachment, CompareOp, Constraint, DeliveryFrame,
    DomainError, MatchInfo, Publication, PropertyEntry, PropertyList, Scalar, SubscriberId,
    Subscription, TypeMismatch,
};
pub use gateway::{
    ConnectionState, DeliverOutcome, DeviceInfo, DropReason, Gateway, GatewayError,
};
pub use runtime::{
    ActionSpec, ContainerCtx, HandlerError, InvocationHandle, InvocationRecord, InvocationStatus,
    InvokeError, Runtime, RuntimeLimits,
};
pub use store::{
    BudgetPolicy, IndexKind, StatsSnapshot, Store, StoreConfig, StoreError, SubscriptionDetail,
};
