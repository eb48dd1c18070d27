//! Public HTTP API fronting all broker actions, plus the per-subscriber
//! NDJSON frame stream.
//!
//! Bodies are UTF-8 JSON; errors come back as
//! `{"error": <code>, "detail": <text>}` with conventional status codes.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json as AxumJson, Router};
use serde::Deserialize;
use serde_json::json;

use crate::actions::{Broker, BrokerError};
use crate::domain::{Constraint, PropertyList, SubscriberId};
use crate::gateway::{frame_line, GatewayError};

/// Running API server; dropping the handle leaves the server running until
/// `shutdown` is called or the process exits.
pub struct ApiServer {
    local_addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    join: tokio::task::JoinHandle<()>,
}

impl ApiServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = self.join.await;
    }
}

/// Bind and serve the broker API. Fails fast when the address is not
/// bindable.
pub async fn serve_api(
    bind_address: &str,
    broker: Arc<Broker>,
) -> Result<ApiServer, std::io::Error> {
    let listener = tokio::net::TcpListener::bind(bind_address).await?;
    let local_addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let app = router(broker);
    let join = tokio::spawn(async move {
        // Shutdown drops the server outright: long-lived frame streams would
        // otherwise hold a graceful shutdown open forever.
        tokio::select! {
            result = axum::serve(listener, app) => {
                let _ = result;
            }
            _ = rx => {}
        }
    });
    Ok(ApiServer { local_addr, shutdown: Some(tx), join })
}

pub fn router(broker: Arc<Broker>) -> Router {
    Router::new()
        .route("/register", get(register))
        .route("/register-device", post(register_device))
        .route("/subscribe/topics", post(subscribe_topics))
        .route("/unsubscribe/topics", post(unsubscribe_topics))
        .route("/subscribe/content", post(subscribe_content))
        .route("/unsubscribe/content", post(unsubscribe_content))
        .route("/subscribe/function", post(subscribe_function))
        .route("/unsubscribe/function", post(unsubscribe_function))
        .route("/publish/topic", post(publish_topic))
        .route("/publish/content", post(publish_content))
        .route("/publish/function", post(publish_function))
        .route("/stream/{subscriber_id}", get(stream))
        .with_state(broker)
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            AxumJson(json!({"error": self.code, "detail": self.detail})),
        )
            .into_response()
    }
}

impl From<BrokerError> for ApiError {
    fn from(e: BrokerError) -> Self {
        let (status, code) = match &e {
            BrokerError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "INVALID_REQUEST"),
            BrokerError::Parse(_) => (StatusCode::BAD_REQUEST, "PARSE_ERROR"),
            BrokerError::UnknownSubscriber(_) => (StatusCode::NOT_FOUND, "UNKNOWN_SUBSCRIBER"),
            BrokerError::NotFound => (StatusCode::NOT_FOUND, "NOT_FOUND"),
            BrokerError::Throttled(_) => (StatusCode::TOO_MANY_REQUESTS, "THROTTLED"),
            BrokerError::Timeout(_) => (StatusCode::GATEWAY_TIMEOUT, "TIMEOUT"),
            BrokerError::Store(_) => (StatusCode::SERVICE_UNAVAILABLE, "STORE"),
            BrokerError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError { status, code, detail: e.to_string() }
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let (status, code) = match &e {
            GatewayError::AlreadyRegistered(_) => (StatusCode::CONFLICT, "ALREADY_REGISTERED"),
            GatewayError::UnknownSubscriber(_) => (StatusCode::NOT_FOUND, "UNKNOWN_SUBSCRIBER"),
            GatewayError::AlreadyConnected(_) => (StatusCode::CONFLICT, "ALREADY_CONNECTED"),
        };
        ApiError { status, code, detail: e.to_string() }
    }
}

async fn register(State(broker): State<Arc<Broker>>) -> Result<impl IntoResponse, ApiError> {
    let id = broker.register_subscriber().await?;
    Ok(AxumJson(json!({"subscriberId": id})))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct DeviceBody {
    subscriber_id: SubscriberId,
}

async fn register_device(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<DeviceBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker.gateway().register_device(&body.subscriber_id)?;
    Ok(AxumJson(json!({"ok": true})))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct TopicsBody {
    subscriber_id: SubscriberId,
    topics: Vec<String>,
}

async fn subscribe_topics(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<TopicsBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker.subscribe_topics(&body.subscriber_id, &body.topics).await?;
    Ok(AxumJson(json!({"ok": true})))
}

async fn unsubscribe_topics(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<TopicsBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker.unsubscribe_topics(&body.subscriber_id, &body.topics).await?;
    Ok(AxumJson(json!({"ok": true})))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct ContentBody {
    subscriber_id: SubscriberId,
    constraints: Vec<Constraint>,
}

async fn subscribe_content(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<ContentBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker.subscribe_content(&body.subscriber_id, &body.constraints).await?;
    Ok(AxumJson(json!({"ok": true})))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct SubscriberBody {
    subscriber_id: SubscriberId,
}

async fn unsubscribe_content(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<SubscriberBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker.unsubscribe_content(&body.subscriber_id).await?;
    Ok(AxumJson(json!({"ok": true})))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct FunctionBody {
    subscriber_id: SubscriberId,
    function_type: String,
    #[serde(default)]
    source: String,
}

async fn subscribe_function(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<FunctionBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker
        .subscribe_function(&body.subscriber_id, &body.function_type, &body.source)
        .await?;
    Ok(AxumJson(json!({"ok": true})))
}

async fn unsubscribe_function(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<FunctionBody>,
) -> Result<impl IntoResponse, ApiError> {
    broker
        .unsubscribe_function(&body.subscriber_id, &body.function_type)
        .await?;
    Ok(AxumJson(json!({"ok": true})))
}

#[derive(Deserialize)]
struct PublishTopicBody {
    data: String,
    topics: Vec<String>,
}

async fn publish_topic(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<PublishTopicBody>,
) -> Result<impl IntoResponse, ApiError> {
    let receipt = broker.publish_topic(&body.data, &body.topics).await?;
    Ok((StatusCode::ACCEPTED, AxumJson(receipt)))
}

#[derive(Deserialize)]
struct PublishContentBody {
    data: String,
    properties: PropertyList,
}

async fn publish_content(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<PublishContentBody>,
) -> Result<impl IntoResponse, ApiError> {
    let receipt = broker.publish_content(&body.data, &body.properties).await?;
    Ok((StatusCode::ACCEPTED, AxumJson(receipt)))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct PublishFunctionBody {
    data: String,
    function_type: String,
}

async fn publish_function(
    State(broker): State<Arc<Broker>>,
    AxumJson(body): AxumJson<PublishFunctionBody>,
) -> Result<impl IntoResponse, ApiError> {
    let receipt = broker.publish_function(&body.data, &body.function_type).await?;
    Ok((StatusCode::ACCEPTED, AxumJson(receipt)))
}

async fn stream(
    State(broker): State<Arc<Broker>>,
    Path(subscriber_id): Path<String>,
) -> Result<Response, ApiError> {
    let subscriber = SubscriberId::new(subscriber_id)
        .map_err(|e| ApiError::from(BrokerError::InvalidRequest(e.to_string())))?;
    let rx = broker.gateway().connect(&subscriber)?;
    let body = Body::from_stream(futures::stream::unfold(rx, |mut rx| async move {
        rx.recv()
            .await
            .map(|frame| (Ok::<_, Infallible>(Bytes::from(frame_line(&frame))), rx))
    }));
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
