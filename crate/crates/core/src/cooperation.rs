//! Applicative port registry and synchronous request/response mediation.
//!
//! The gateway sits between delegated ports (front-end side) and applicative
//! ports (back-office side). For a synchronous exchange it verifies the
//! request, routes it to the one online port for its destination, waits at
//! most the configured timeout and checks that the answer is signed by the
//! destination administration. It never signs anything itself: failures are
//! reported as unsigned fault envelopes from the `ssc` gateway.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audit::{AuditLog, Category, Entry, Outcome};
use crate::envelope::{
    build_envelope, verify_envelope, Body, Destination, Envelope, KeyDirectory, MessageKind, Profile, Sender,
};

pub const FAULT_CONTENT_TYPE: &str = "application/vnd.ssc.fault+json";
pub const INPROC_SCHEME: &str = "inproc://";
pub const DEFAULT_SYNC_TIMEOUT: Duration = Duration::from_secs(5);
/// Administration id the gateway uses as sender of its own fault envelopes.
pub const GATEWAY_ADMIN: &str = "ssc";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortStatus {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicativePortRecord {
    pub admin_id: String,
    pub service_id: String,
    pub endpoint: String,
    pub status: PortStatus,
    pub registered_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultCode {
    NoRoute,
    Timeout,
    VerificationFailed,
    BackendFault,
    Unauthorized,
}

impl FaultCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaultCode::NoRoute => "no_route",
            FaultCode::Timeout => "timeout",
            FaultCode::VerificationFailed => "verification_failed",
            FaultCode::BackendFault => "backend_fault",
            FaultCode::Unauthorized => "unauthorized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultInfo {
    pub code: FaultCode,
    pub detail: String,
}

impl FaultInfo {
    pub fn new(code: FaultCode, detail: impl Into<String>) -> Self {
        FaultInfo {
            code,
            detail: detail.into(),
        }
    }

    pub fn to_body(&self) -> Body {
        Body::new(FAULT_CONTENT_TYPE, serde_json::to_vec(self).expect("fault info encodes"))
    }

    /// Extracts the fault carried by `envelope`, if it is a fault envelope.
    pub fn from_envelope(envelope: &Envelope) -> Option<FaultInfo> {
        if envelope.message_kind != MessageKind::Fault {
            return None;
        }
        serde_json::from_slice(&envelope.body.payload)
            .ok()
            .or_else(|| Some(FaultInfo::new(FaultCode::BackendFault, envelope.body.payload_text())))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CooperationError {
    #[error("invalid port: {0} must be non-empty")]
    InvalidPort(&'static str),
    #[error("port {admin_id}/{service_id} is already online")]
    DuplicatePort { admin_id: String, service_id: String },
    #[error("unknown port {admin_id}/{service_id}")]
    UnknownPort { admin_id: String, service_id: String },
    #[error("no route to {0}")]
    NoRoute(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("no handler at endpoint {0}")]
    UnknownEndpoint(String),
    #[error("backend failed: {0}")]
    Backend(String),
}

/// An applicative port implementation living in the gateway process.
pub trait Backend: Send + Sync {
    fn handle(&self, request: &Envelope) -> Result<Envelope, String>;
}

impl<F> Backend for F
where
    F: Fn(&Envelope) -> Result<Envelope, String> + Send + Sync,
{
    fn handle(&self, request: &Envelope) -> Result<Envelope, String> {
        self(request)
    }
}

/// Carries a request to an endpoint and returns whatever came back.
pub trait Transport: Send + Sync {
    fn deliver(&self, endpoint: &str, request: &Envelope) -> Result<Envelope, TransportError>;
}

/// Endpoints of the form `inproc://<handle>` bound to in-process backends.
#[derive(Default)]
pub struct InProcessTransport {
    handlers: RwLock<HashMap<String, Arc<dyn Backend>>>,
}

impl InProcessTransport {
    pub fn bind(&self, handle: &str, backend: Arc<dyn Backend>) -> String {
        let endpoint = format!("{INPROC_SCHEME}{handle}");
        self.handlers.write().insert(endpoint.clone(), backend);
        endpoint
    }
}

impl Transport for InProcessTransport {
    fn deliver(&self, endpoint: &str, request: &Envelope) -> Result<Envelope, TransportError> {
        let backend = self
            .handlers
            .read()
            .get(endpoint)
            .cloned()
            .ok_or_else(|| TransportError::UnknownEndpoint(endpoint.to_string()))?;
        backend.handle(request).map_err(TransportError::Backend)
    }
}

pub struct Cooperation {
    ports: RwLock<BTreeMap<(String, String), ApplicativePortRecord>>,
    keys: Arc<KeyDirectory>,
    audit: Arc<AuditLog>,
    inproc: Arc<InProcessTransport>,
    external: Option<Arc<dyn Transport>>,
    default_timeout: Duration,
}

impl Cooperation {
    pub fn new(keys: Arc<KeyDirectory>, audit: Arc<AuditLog>) -> Self {
        Cooperation {
            ports: RwLock::new(BTreeMap::new()),
            keys,
            audit,
            inproc: Arc::new(InProcessTransport::default()),
            external: None,
            default_timeout: DEFAULT_SYNC_TIMEOUT,
        }
    }

    /// Transport used for every endpoint that is not `inproc://`.
    pub fn with_external_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.external = Some(transport);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.default_timeout = timeout;
        self
    }

    pub fn default_timeout(&self) -> Duration {
        self.default_timeout
    }

    pub fn keys(&self) -> &Arc<KeyDirectory> {
        &self.keys
    }

    pub fn inproc(&self) -> &InProcessTransport {
        &self.inproc
    }

    pub fn register_applicative_port(
        &self,
        admin_id: &str,
        service_id: &str,
        endpoint: &str,
    ) -> Result<ApplicativePortRecord, CooperationError> {
        for (v, name) in [(admin_id, "admin_id"), (service_id, "service_id"), (endpoint, "endpoint")] {
            if v.trim().is_empty() {
                return Err(CooperationError::InvalidPort(name));
            }
        }
        let key = (admin_id.to_string(), service_id.to_string());
        let mut ports = self.ports.write();
        if ports.get(&key).is_some_and(|p| p.status == PortStatus::Online) {
            return Err(CooperationError::DuplicatePort {
                admin_id: key.0,
                service_id: key.1,
            });
        }
        let record = ApplicativePortRecord {
            admin_id: key.0.clone(),
            service_id: key.1.clone(),
            endpoint: endpoint.to_string(),
            status: PortStatus::Online,
            registered_at: Utc::now(),
        };
        ports.insert(key, record.clone());
        Ok(record)
    }

    pub fn deregister_applicative_port(&self, admin_id: &str, service_id: &str) -> Result<(), CooperationError> {
        let mut ports = self.ports.write();
        let record = ports
            .get_mut(&(admin_id.to_string(), service_id.to_string()))
            .ok_or_else(|| CooperationError::UnknownPort {
                admin_id: admin_id.to_string(),
                service_id: service_id.to_string(),
            })?;
        record.status = PortStatus::Offline;
        Ok(())
    }

    pub fn resolve_route(&self, destination: &Destination) -> Result<String, CooperationError> {
        self.ports
            .read()
            .get(&(destination.admin_id.clone(), destination.service_id.clone()))
            .filter(|p| p.status == PortStatus::Online)
            .map(|p| p.endpoint.clone())
            .ok_or_else(|| CooperationError::NoRoute(destination.to_string()))
    }

    pub fn ports(&self) -> Vec<ApplicativePortRecord> {
        self.ports.read().values().cloned().collect()
    }

    /// Administrations with at least one online port.
    pub fn online_admins(&self) -> Vec<String> {
        let mut admins: Vec<String> = self
            .ports
            .read()
            .values()
            .filter(|p| p.status == PortStatus::Online)
            .map(|p| p.admin_id.clone())
            .collect();
        admins.dedup();
        admins
    }

    /// Unsigned fault envelope from the gateway answering `request`.
    pub fn fault_envelope(request: &Envelope, info: FaultInfo) -> Envelope {
        let to_admin = non_empty_or(&request.sender.admin_id, "unknown");
        let to_port = non_empty_or(&request.sender.port_id, "unknown");
        build_envelope(
            Sender::new(GATEWAY_ADMIN, "gateway"),
            Destination::new(to_admin, to_port),
            Profile::Sync,
            MessageKind::Fault,
            info.to_body(),
            Some(non_empty_or(&request.envelope_id, "unknown")),
        )
        .expect("fault envelope addresses are non-empty")
    }

    fn deliver(&self, endpoint: &str, request: &Envelope) -> Result<Envelope, TransportError> {
        if endpoint.starts_with(INPROC_SCHEME) {
            self.inproc.deliver(endpoint, request)
        } else if let Some(t) = &self.external {
            t.deliver(endpoint, request)
        } else {
            Err(TransportError::UnknownEndpoint(endpoint.to_string()))
        }
    }

    /// Mediates one synchronous exchange. Always returns exactly one
    /// envelope: the backend's signed response, or a fault.
    pub fn exchange_sync(self: &Arc<Self>, request: &Envelope, timeout: Option<Duration>) -> Envelope {
        let timeout = timeout.unwrap_or(self.default_timeout);
        let correlation = request
            .correlation_id
            .clone()
            .unwrap_or_else(|| request.envelope_id.clone());
        let subject = request.destination.to_string();

        if let Err(e) = self.audit.record(
            Entry::new(Category::ExchangeRequest, request.sender.admin_id.clone(), subject.clone())
                .correlation(correlation.clone())
                .detail(format!("envelope={}", request.envelope_id)),
        ) {
            return Self::fault_envelope(request, FaultInfo::new(FaultCode::BackendFault, e.to_string()));
        }

        let response = self.mediate(request, timeout);
        let fault = FaultInfo::from_envelope(&response);
        let detail = match &fault {
            Some(f) => format!("envelope={} code={} {}", response.envelope_id, f.code.as_str(), f.detail),
            None => format!("envelope={}", response.envelope_id),
        };
        let outcome = if fault.is_some() { Outcome::Fault } else { Outcome::Ok };
        match self.audit.record(
            Entry::new(Category::ExchangeResponse, response.sender.admin_id.clone(), subject)
                .correlation(correlation)
                .outcome(outcome)
                .detail(detail),
        ) {
            Ok(_) => response,
            Err(e) => Self::fault_envelope(request, FaultInfo::new(FaultCode::BackendFault, e.to_string())),
        }
    }

    fn mediate(self: &Arc<Self>, request: &Envelope, timeout: Duration) -> Envelope {
        let fault = |code, detail: String| Self::fault_envelope(request, FaultInfo::new(code, detail));

        if request.profile != Profile::Sync || request.message_kind != MessageKind::Request {
            return fault(
                FaultCode::VerificationFailed,
                format!(
                    "expected a sync request, got {} {}",
                    request.profile.as_str(),
                    request.message_kind.as_str()
                ),
            );
        }
        let report = verify_envelope(request, &self.keys);
        if !report.valid {
            return fault(FaultCode::VerificationFailed, report.reason.as_str().to_string());
        }
        let endpoint = match self.resolve_route(&request.destination) {
            Ok(e) => e,
            Err(e) => return fault(FaultCode::NoRoute, e.to_string()),
        };

        let (tx, rx) = mpsc::sync_channel(1);
        let this = Arc::clone(self);
        let req = request.clone();
        let spawned = std::thread::Builder::new()
            .name("ssc-exchange".into())
            .spawn(move || {
                let _ = tx.send(this.deliver(&endpoint, &req));
            });
        if let Err(e) = spawned {
            return fault(FaultCode::BackendFault, format!("cannot dispatch: {e}"));
        }
        let response = match rx.recv_timeout(timeout) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => return fault(FaultCode::BackendFault, e.to_string()),
            Err(mpsc::RecvTimeoutError::Timeout) => {
                return fault(FaultCode::Timeout, format!("no answer within {} ms", timeout.as_millis()))
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                return fault(FaultCode::BackendFault, "backend terminated".into())
            }
        };

        if let Err(problem) = self.check_response(request, &response) {
            return fault(FaultCode::BackendFault, format!("invalid response: {problem}"));
        }
        response
    }

    fn check_response(&self, request: &Envelope, response: &Envelope) -> Result<(), String> {
        if !matches!(response.message_kind, MessageKind::Response | MessageKind::Fault) {
            return Err(format!("message kind {}", response.message_kind.as_str()));
        }
        if response.correlation_id.as_deref() != Some(request.envelope_id.as_str()) {
            return Err("correlation id does not match request".into());
        }
        if response.sender.admin_id != request.destination.admin_id {
            return Err(format!("answered by {}", response.sender.admin_id));
        }
        let report = verify_envelope(response, &self.keys);
        if !report.valid {
            return Err(format!("signature {}", report.reason.as_str()));
        }
        Ok(())
    }
}

fn non_empty_or(s: &str, fallback: &str) -> String {
    if s.is_empty() {
        fallback.to_string()
    } else {
        s.to_string()
    }
}
