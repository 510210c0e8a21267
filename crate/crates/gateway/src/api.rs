use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use ssc_core::audit::{AuditFilter, Category, Entry, Outcome};
use ssc_core::cooperation::CooperationError;
use ssc_core::envelope::{parse_envelope, serialize_envelope, Envelope, Sender};
use ssc_core::eventbus::EventBusError;
use ssc_core::identity::{AuthLevel, Credential, Decision, DenyReason, IdentityError, TokenClaims};
use ssc_core::orchestration::{OrchestrationError, ProcessInstance, ProcessModel, TaskFilter, TaskState};
use ssc_core::registry::{Binding, LifeEventNode, RegistryError, ServiceDescriptor, UsageTarget};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::app::{GatewayError, Ssc};
use crate::seed::UserSeed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
                reason: None,
                diagnostics: Vec::new(),
            },
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthorized", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn with_reason(mut self, reason: &str) -> Self {
        self.body.reason = Some(reason.into());
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<OrchestrationError> for ApiError {
    fn from(e: OrchestrationError) -> Self {
        use OrchestrationError as E;
        let (status, code) = match &e {
            E::ValidationFailed(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation_failed"),
            E::UnknownModel(_) | E::UnknownVersion { .. } | E::UnknownInstance(_) | E::UnknownTask(_) => {
                (StatusCode::NOT_FOUND, "not_found")
            }
            E::MissingInput { .. } => (StatusCode::BAD_REQUEST, "missing_input"),
            E::AlreadyClaimed { .. } => (StatusCode::CONFLICT, "already_claimed"),
            E::RoleDenied { .. } => (StatusCode::FORBIDDEN, "role_denied"),
            E::NotClaimant { .. } => (StatusCode::FORBIDDEN, "not_claimant"),
            E::AlreadyCompleted(_) => (StatusCode::CONFLICT, "already_completed"),
            E::Corrupt(_) | E::Storage(_) | E::Audit(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let mut err = ApiError::new(status, code, e.to_string());
        if let E::ValidationFailed(diags) = &e {
            err.body.diagnostics = diags.iter().map(|d| d.to_string()).collect();
        }
        err
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        use RegistryError as E;
        let (status, code) = match &e {
            E::DuplicateNode(_) | E::DuplicateService(_) => (StatusCode::CONFLICT, "duplicate"),
            E::UnknownService(_) => (StatusCode::NOT_FOUND, "not_found"),
            E::UnknownParent(_) | E::UnknownLifeEvent(_) => (StatusCode::BAD_REQUEST, "unknown_life_event"),
            E::UnknownBinding(_) => (StatusCode::BAD_REQUEST, "unknown_binding"),
            E::CycleDetected(_) | E::InvalidDescriptor(_) => (StatusCode::BAD_REQUEST, "invalid"),
            E::Storage(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<IdentityError> for ApiError {
    fn from(e: IdentityError) -> Self {
        use IdentityError as E;
        let (status, code) = match &e {
            E::DuplicateUser(_) => (StatusCode::CONFLICT, "duplicate"),
            E::WeakPassword | E::InvalidPublicKey(_) | E::NoStrongCredential(_) => {
                (StatusCode::BAD_REQUEST, "bad_request")
            }
            E::StaticAttributeViolation(_) => (StatusCode::BAD_REQUEST, "static_attribute"),
            E::UnknownUser(_) => (StatusCode::NOT_FOUND, "not_found"),
            E::BadCredential => (StatusCode::UNAUTHORIZED, "bad_credential"),
            E::InvalidToken => (StatusCode::UNAUTHORIZED, "invalid_token"),
            E::ExpiredToken => (StatusCode::UNAUTHORIZED, "expired_token"),
            E::Hashing(_) | E::Storage(_) | E::Audit(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let err = ApiError::new(status, code, e.to_string());
        match e {
            E::InvalidToken => err.with_reason("invalid_token"),
            E::ExpiredToken => err.with_reason("expired"),
            _ => err,
        }
    }
}

impl From<EventBusError> for ApiError {
    fn from(e: EventBusError) -> Self {
        use EventBusError as E;
        let (status, code) = match &e {
            E::InvalidTopicName(_) => (StatusCode::BAD_REQUEST, "invalid_topic_name"),
            E::UnknownTopic(_) | E::UnknownSubscription(_) => (StatusCode::NOT_FOUND, "not_found"),
            E::VerificationFailed(_) => (StatusCode::BAD_REQUEST, "verification_failed"),
            E::CursorRegression { .. } => (StatusCode::CONFLICT, "cursor_regression"),
            E::AckBeyondDelivered { .. } => (StatusCode::CONFLICT, "ack_beyond_delivered"),
            E::Storage(_) | E::Audit(_) | E::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<CooperationError> for ApiError {
    fn from(e: CooperationError) -> Self {
        use CooperationError as E;
        let (status, code) = match &e {
            E::InvalidPort(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            E::DuplicatePort { .. } => (StatusCode::CONFLICT, "duplicate"),
            E::UnknownPort { .. } | E::NoRoute(_) => (StatusCode::NOT_FOUND, "not_found"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError::internal(e.to_string())
    }
}

type Api<T> = Result<T, ApiError>;
type AppState = State<Arc<Ssc>>;

/// Runs blocking module code off the async executor.
async fn blocking<T, F>(f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> Api<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Json(v).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(e.to_string()).into_response(),
    }
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Api<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn bearer(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    value
        .strip_prefix("Bearer ")
        .or_else(|| value.strip_prefix("bearer "))
        .map(|t| t.trim().to_string())
}

fn require_user(ssc: &Ssc, token: Option<String>) -> Api<TokenClaims> {
    let token = token.ok_or_else(|| ApiError::unauthorized("bearer token required"))?;
    Ok(ssc.identity.validate_token(&token)?)
}

pub fn router(ssc: Arc<Ssc>) -> Router {
    let origins = &ssc.config.cors_origins;
    let allow_origin = if origins.is_empty() {
        AllowOrigin::from(Any)
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(allow_origin)
        .allow_methods([Method::GET, Method::POST, Method::PATCH, Method::DELETE])
        .allow_headers([header::AUTHORIZATION, header::CONTENT_TYPE]);

    Router::new()
        .route("/health", get(health))
        .route("/exchange", post(exchange))
        .route("/ports", get(list_ports).post(register_port))
        .route("/ports/{admin_id}/{service_id}", axum::routing::delete(deregister_port))
        .route("/keys", get(list_keys).post(add_key))
        .route("/keys/{admin_id}/{key_id}/revoke", post(revoke_key))
        .route("/topics", get(list_topics).post(create_topic))
        .route("/topics/{name}/publish", post(publish))
        .route("/subscriptions", post(subscribe))
        .route("/subscriptions/{id}", get(get_subscription))
        .route("/subscriptions/{id}/pull", post(pull))
        .route("/subscriptions/{id}/ack", post(ack))
        .route("/models", get(list_models).post(register_model))
        .route("/models/{id}", get(get_model))
        .route("/instances", get(list_instances).post(start_instance))
        .route("/instances/{id}", get(get_instance))
        .route("/instances/{id}/advance", post(advance))
        .route("/tasks", get(list_tasks))
        .route("/tasks/{id}/claim", post(claim_task))
        .route("/tasks/{id}/complete", post(complete_task))
        .route("/taxonomy", get(list_taxonomy).post(add_life_event))
        .route("/services", get(find_services).post(register_service))
        .route("/services/{id}", get(get_service))
        .route("/auth/register", post(register_user))
        .route("/auth/login", post(login))
        .route("/auth/challenge", post(challenge))
        .route("/auth/respond", post(respond))
        .route("/profile", get(profile))
        .route("/profile/preferences", axum::routing::patch(update_preferences))
        .route("/audit", get(query_audit))
        .route("/audit/trace/{correlation_id}", get(trace))
        .route("/demo/seed", post(seed_demo))
        .layer(cors)
        .with_state(ssc)
}

async fn health(State(ssc): AppState) -> Response {
    let h = tokio::task::spawn_blocking(move || ssc.health()).await;
    match h {
        Ok(h) => {
            let status = if h.storage_writable {
                StatusCode::OK
            } else {
                StatusCode::SERVICE_UNAVAILABLE
            };
            (status, Json(h)).into_response()
        }
        Err(e) => ApiError::internal(e.to_string()).into_response(),
    }
}

fn envelope_response(e: &Envelope) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        serialize_envelope(e),
    )
        .into_response()
}

fn parse_env(body: &[u8]) -> Api<Envelope> {
    parse_envelope(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed_envelope", e.to_string()))
}

async fn exchange(State(ssc): AppState, body: Bytes) -> Response {
    let run = move || -> Api<Envelope> {
        let request = parse_env(&body)?;
        Ok(ssc.cooperation.exchange_sync(&request, None))
    };
    match tokio::task::spawn_blocking(run).await {
        Ok(Ok(e)) => envelope_response(&e),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::internal(e.to_string()).into_response(),
    }
}

#[derive(Deserialize)]
struct PortRequest {
    admin_id: String,
    service_id: String,
    endpoint: String,
}

async fn list_ports(State(ssc): AppState) -> Response {
    blocking(move || Ok(ssc.cooperation.ports())).await
}

async fn register_port(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: PortRequest = parse_json(&body)?;
        Ok(ssc.cooperation.register_applicative_port(&r.admin_id, &r.service_id, &r.endpoint)?)
    })
    .await
}

async fn deregister_port(State(ssc): AppState, Path((admin_id, service_id)): Path<(String, String)>) -> Response {
    blocking(move || {
        ssc.cooperation.deregister_applicative_port(&admin_id, &service_id)?;
        Ok(serde_json::json!({"admin_id": admin_id, "service_id": service_id, "status": "offline"}))
    })
    .await
}

#[derive(Deserialize)]
struct KeyRequest {
    admin_id: String,
    key_id: String,
    /// Hex-encoded Ed25519 public key.
    public_key: String,
}

async fn list_keys(State(ssc): AppState) -> Response {
    blocking(move || Ok(ssc.keys.to_document())).await
}

async fn add_key(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: KeyRequest = parse_json(&body)?;
        let pk = hex::decode(&r.public_key).map_err(|e| ApiError::bad_request(format!("public_key: {e}")))?;
        ssc.add_key(&r.admin_id, &r.key_id, &pk)
            .map_err(|e| ApiError::new(StatusCode::CONFLICT, "key_rejected", e.to_string()))?;
        Ok(serde_json::json!({"admin_id": r.admin_id, "key_id": r.key_id}))
    })
    .await
}

async fn revoke_key(State(ssc): AppState, Path((admin_id, key_id)): Path<(String, String)>) -> Response {
    blocking(move || {
        ssc.revoke_key(&admin_id, &key_id)
            .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()))?;
        Ok(serde_json::json!({"admin_id": admin_id, "key_id": key_id, "status": "revoked"}))
    })
    .await
}

#[derive(Deserialize)]
struct TopicRequest {
    name: String,
}

async fn list_topics(State(ssc): AppState) -> Response {
    blocking(move || Ok(ssc.bus.topics())).await
}

async fn create_topic(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: TopicRequest = parse_json(&body)?;
        Ok(ssc.bus.create_topic(&r.name)?)
    })
    .await
}

#[derive(Deserialize)]
struct DemoRequest {
    admins: usize,
    #[serde(default = "default_participation")]
    participation: f64,
}

fn default_participation() -> f64 {
    0.8
}

async fn seed_demo(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: DemoRequest = parse_json(&body)?;
        crate::harness::demo::seed_demo(&ssc, r.admins, r.participation, 0)?;
        Ok(ssc.health())
    })
    .await
}

async fn publish(State(ssc): AppState, Path(topic): Path<String>, body: Bytes) -> Response {
    blocking(move || {
        let event = parse_env(&body)?;
        let receipt = ssc.bus.publish(&event, &topic)?;
        ssc.pump_events()?;
        Ok(receipt)
    })
    .await
}

#[derive(Deserialize)]
struct SubscribeRequest {
    subscriber: Sender,
    topic: String,
    #[serde(default = "yes")]
    durable: bool,
}

fn yes() -> bool {
    true
}

async fn subscribe(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: SubscribeRequest = parse_json(&body)?;
        Ok(ssc.bus.subscribe(r.subscriber, &r.topic, r.durable)?)
    })
    .await
}

async fn get_subscription(State(ssc): AppState, Path(id): Path<String>) -> Response {
    blocking(move || Ok(ssc.bus.subscription(&id)?)).await
}

#[derive(Deserialize)]
struct PullRequest {
    #[serde(default = "default_max")]
    max: usize,
}

fn default_max() -> usize {
    10
}

/// One pulled event; `envelope` is the canonical envelope JSON, verbatim.
#[derive(Serialize)]
struct PulledEvent {
    global_seq: u64,
    publisher_seq: u64,
    envelope: Box<RawValue>,
}

async fn pull(State(ssc): AppState, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(move || {
        let r: PullRequest = if body.is_empty() {
            PullRequest { max: default_max() }
        } else {
            parse_json(&body)?
        };
        ssc.bus
            .pull(&id, r.max)?
            .into_iter()
            .map(|d| {
                let text = String::from_utf8(serialize_envelope(&d.envelope)).map_err(|e| ApiError::internal(e.to_string()))?;
                Ok(PulledEvent {
                    global_seq: d.global_seq,
                    publisher_seq: d.publisher_seq,
                    envelope: RawValue::from_string(text).map_err(|e| ApiError::internal(e.to_string()))?,
                })
            })
            .collect::<Api<Vec<_>>>()
    })
    .await
}

#[derive(Deserialize)]
struct AckRequest {
    up_to: u64,
}

async fn ack(State(ssc): AppState, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(move || {
        let r: AckRequest = parse_json(&body)?;
        ssc.bus.ack(&id, r.up_to)?;
        Ok(ssc.bus.subscription(&id)?)
    })
    .await
}

#[derive(Serialize)]
struct ModelRef {
    model_id: String,
    version: u32,
}

async fn list_models(State(ssc): AppState) -> Response {
    blocking(move || {
        Ok(ssc
            .orchestrator
            .models()
            .into_iter()
            .map(|(model_id, version)| ModelRef { model_id, version })
            .collect::<Vec<_>>())
    })
    .await
}

async fn register_model(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let model: ProcessModel = parse_json(&body)?;
        let (model_id, version) = ssc.register_model(model)?;
        Ok(ModelRef { model_id, version })
    })
    .await
}

async fn get_model(State(ssc): AppState, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> Response {
    blocking(move || {
        let version = q
            .get("version")
            .map(|v| v.parse::<u32>().map_err(|e| ApiError::bad_request(format!("version: {e}"))))
            .transpose()?;
        Ok(ssc.orchestrator.model(&id, version)?)
    })
    .await
}

#[derive(Deserialize)]
struct StartRequest {
    #[serde(default)]
    model_id: Option<String>,
    #[serde(default)]
    version: Option<u32>,
    #[serde(default)]
    inputs: BTreeMap<String, String>,
    #[serde(default)]
    correlation_id: Option<String>,
    /// Start through a catalogued, process-bound service; its access level
    /// is enforced against the bearer token.
    #[serde(default)]
    service_id: Option<String>,
}

fn deny(ssc: &Ssc, actor: &str, service_id: &str, reason: DenyReason) -> Api<()> {
    let reason_text = match reason {
        DenyReason::InvalidToken => "invalid_token",
        DenyReason::Expired => "expired",
        DenyReason::Level => "level",
    };
    ssc.audit
        .record(
            Entry::new(Category::AuthEvent, actor, format!("authorize:{service_id}"))
                .fault()
                .detail(format!("denied reason={reason_text}")),
        )
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let err = match reason {
        DenyReason::Level => ApiError::new(StatusCode::FORBIDDEN, "forbidden", "authentication level too low"),
        _ => ApiError::unauthorized("token rejected"),
    };
    Err(err.with_reason(reason_text))
}

fn authorize_service(ssc: &Ssc, token: Option<&str>, descriptor: &ServiceDescriptor) -> Api<()> {
    match token {
        Some(t) => match ssc.identity.authorize(t, descriptor) {
            Decision::Allow => Ok(()),
            Decision::Deny(reason) => {
                let actor = ssc
                    .identity
                    .validate_token(t)
                    .map(|c| c.subject)
                    .unwrap_or_else(|_| "anonymous".into());
                deny(ssc, &actor, &descriptor.service_id, reason)
            }
        },
        None if descriptor.min_auth_level == AuthLevel::None => Ok(()),
        None => deny(ssc, "anonymous", &descriptor.service_id, DenyReason::InvalidToken),
    }
}

async fn start_instance(State(ssc): AppState, headers: HeaderMap, body: Bytes) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let r: StartRequest = parse_json(&body)?;
        let model_id = match &r.service_id {
            Some(sid) => {
                let d = ssc.registry.get_descriptor(sid)?;
                let Binding::Process { model_id } = &d.binding else {
                    return Err(ApiError::bad_request(format!("service {sid} is not bound to a process")));
                };
                if r.model_id.as_ref().is_some_and(|m| m != model_id) {
                    return Err(ApiError::bad_request(format!("service {sid} is bound to model {model_id}")));
                }
                authorize_service(&ssc, token.as_deref(), &d)?;
                model_id.clone()
            }
            None => r
                .model_id
                .clone()
                .ok_or_else(|| ApiError::bad_request("model_id or service_id required"))?,
        };
        Ok(ssc
            .orchestrator
            .start_instance(&model_id, r.version, r.inputs, r.correlation_id)?)
    })
    .await
}

async fn list_instances(State(ssc): AppState, Query(q): Query<HashMap<String, String>>) -> Response {
    blocking(move || {
        let keep = |i: &ProcessInstance| {
            q.get("model_id").is_none_or(|m| &i.model_id == m)
                && q.get("correlation_id").is_none_or(|c| i.correlation_id.as_ref() == Some(c))
                && q.get("status").is_none_or(|s| i.status.as_str() == s)
        };
        Ok(ssc.orchestrator.instances().into_iter().filter(keep).collect::<Vec<_>>())
    })
    .await
}

async fn get_instance(State(ssc): AppState, Path(id): Path<String>) -> Response {
    blocking(move || Ok(ssc.orchestrator.instance_state(&id)?)).await
}

async fn advance(State(ssc): AppState, Path(id): Path<String>) -> Response {
    blocking(move || Ok(ssc.orchestrator.advance(&id)?)).await
}

async fn list_tasks(State(ssc): AppState, headers: HeaderMap, Query(q): Query<HashMap<String, String>>) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        require_user(&ssc, token)?;
        let state = q
            .get("state")
            .map(|s| TaskState::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown task state `{s}`"))))
            .transpose()?;
        let filter = TaskFilter {
            role: q.get("role").cloned(),
            state,
            instance_id: q.get("instance_id").cloned(),
        };
        Ok(ssc.orchestrator.list_tasks(&filter))
    })
    .await
}

async fn claim_task(State(ssc): AppState, headers: HeaderMap, Path(id): Path<String>) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let user = require_user(&ssc, token)?;
        Ok(ssc.orchestrator.claim_task(&id, &user.subject)?)
    })
    .await
}

#[derive(Deserialize)]
struct CompleteRequest {
    outcome: String,
}

async fn complete_task(State(ssc): AppState, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let user = require_user(&ssc, token)?;
        let r: CompleteRequest = parse_json(&body)?;
        Ok(ssc.orchestrator.complete_task(&id, &user.subject, &r.outcome)?)
    })
    .await
}

async fn list_taxonomy(State(ssc): AppState) -> Response {
    blocking(move || Ok(ssc.registry.list_taxonomy())).await
}

async fn add_life_event(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let n: LifeEventNode = parse_json(&body)?;
        Ok(ssc.registry.add_life_event(&n.node_id, &n.label, n.parent.as_deref())?)
    })
    .await
}

async fn register_service(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let d: ServiceDescriptor = parse_json(&body)?;
        ssc.register_service(d.clone())?;
        Ok(d)
    })
    .await
}

async fn get_service(State(ssc): AppState, Path(id): Path<String>) -> Response {
    blocking(move || Ok(ssc.registry.get_descriptor(&id)?)).await
}

async fn find_services(State(ssc): AppState, Query(q): Query<HashMap<String, String>>) -> Response {
    blocking(move || {
        let target = q
            .get("target")
            .map(|t| UsageTarget::parse(t).ok_or_else(|| ApiError::bad_request(format!("unknown target `{t}`"))))
            .transpose()?;
        match q.get("life_event") {
            Some(node) => Ok(ssc.registry.find_by_life_event(node, target)?),
            None => Ok(ssc.registry.list_services(target)),
        }
    })
    .await
}

async fn register_user(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let u: UserSeed = parse_json(&body)?;
        let new_user = u.to_new_user().map_err(|e| ApiError::bad_request(e.to_string()))?;
        Ok(ssc.identity.register_user(new_user)?)
    })
    .await
}

#[derive(Deserialize)]
struct LoginRequest {
    user_id: String,
    password: String,
}

async fn login(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: LoginRequest = parse_json(&body)?;
        Ok(ssc.identity.authenticate(&r.user_id, Credential::Password(r.password))?)
    })
    .await
}

#[derive(Deserialize)]
struct ChallengeRequest {
    user_id: String,
}

async fn challenge(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: ChallengeRequest = parse_json(&body)?;
        Ok(ssc.identity.issue_challenge(&r.user_id)?)
    })
    .await
}

#[derive(Deserialize)]
struct RespondRequest {
    user_id: String,
    nonce: String,
    /// Hex-encoded signature over the challenge message.
    signature: String,
}

async fn respond(State(ssc): AppState, body: Bytes) -> Response {
    blocking(move || {
        let r: RespondRequest = parse_json(&body)?;
        let signature = hex::decode(&r.signature).map_err(|e| ApiError::bad_request(format!("signature: {e}")))?;
        Ok(ssc.identity.authenticate(
            &r.user_id,
            Credential::SignedChallenge {
                nonce: r.nonce,
                signature,
            },
        )?)
    })
    .await
}

async fn profile(State(ssc): AppState, headers: HeaderMap) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let user = require_user(&ssc, token)?;
        Ok(ssc.identity.get_profile(&user.subject)?)
    })
    .await
}

async fn update_preferences(State(ssc): AppState, headers: HeaderMap, body: Bytes) -> Response {
    let token = bearer(&headers);
    blocking(move || {
        let user = require_user(&ssc, token)?;
        let delta: BTreeMap<String, Option<String>> = parse_json(&body)?;
        Ok(ssc.identity.update_preferences(&user.subject, delta)?)
    })
    .await
}

fn parse_time(raw: &str) -> Api<chrono::DateTime<chrono::Utc>> {
    chrono::DateTime::parse_from_rfc3339(raw)
        .map(|t| t.with_timezone(&chrono::Utc))
        .map_err(|e| ApiError::bad_request(format!("timestamp `{raw}`: {e}")))
}

async fn query_audit(State(ssc): AppState, Query(q): Query<HashMap<String, String>>) -> Response {
    blocking(move || {
        let filter = AuditFilter {
            from: q.get("from").map(|s| parse_time(s)).transpose()?,
            to: q.get("to").map(|s| parse_time(s)).transpose()?,
            category: q
                .get("category")
                .map(|c| Category::parse(c).ok_or_else(|| ApiError::bad_request(format!("unknown category `{c}`"))))
                .transpose()?,
            actor: q.get("actor").cloned(),
            subject: q.get("subject").cloned(),
            outcome: q
                .get("outcome")
                .map(|o| Outcome::parse(o).ok_or_else(|| ApiError::bad_request(format!("unknown outcome `{o}`"))))
                .transpose()?,
        };
        Ok(ssc.audit.query(&filter))
    })
    .await
}

async fn trace(State(ssc): AppState, Path(correlation_id): Path<String>) -> Response {
    blocking(move || Ok(ssc.audit.trace(&correlation_id))).await
}
