//! The e-Government envelope: the signed unit of every exchange between
//! delegated and applicative ports.
//!
//! The national envelope model is cited without a published schema, so the
//! layout here is an interpretation: a key-sorted, whitespace-free JSON
//! object (see [`canonical_bytes`]) signed with Ed25519 over everything but
//! the `security` block.

mod signing;
mod wire;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use signing::{
    sign_envelope, verify_envelope, Algorithm, KeyDirectory, KeyDirectoryDocument, KeyEntry, KeyError,
    KeyStatus, Signer, VerificationReport, VerifyReason,
};
pub use wire::{canonical_bytes, parse_envelope, serialize_envelope};

use crate::clock;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sender {
    pub admin_id: String,
    pub port_id: String,
}

impl Sender {
    pub fn new(admin_id: impl Into<String>, port_id: impl Into<String>) -> Self {
        Sender {
            admin_id: admin_id.into(),
            port_id: port_id.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Destination {
    pub admin_id: String,
    pub service_id: String,
}

impl Destination {
    pub fn new(admin_id: impl Into<String>, service_id: impl Into<String>) -> Self {
        Destination {
            admin_id: admin_id.into(),
            service_id: service_id.into(),
        }
    }
}

impl std::fmt::Display for Destination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.admin_id, self.service_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Sync,
    AsyncEvent,
    AsyncProcess,
}

impl Profile {
    pub fn as_str(&self) -> &'static str {
        match self {
            Profile::Sync => "sync",
            Profile::AsyncEvent => "async_event",
            Profile::AsyncProcess => "async_process",
        }
    }

    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "sync" => Some(Profile::Sync),
            "async_event" => Some(Profile::AsyncEvent),
            "async_process" => Some(Profile::AsyncProcess),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Request,
    Response,
    Event,
    Fault,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::Request => "request",
            MessageKind::Response => "response",
            MessageKind::Event => "event",
            MessageKind::Fault => "fault",
        }
    }

    pub fn parse(s: &str) -> Option<MessageKind> {
        match s {
            "request" => Some(MessageKind::Request),
            "response" => Some(MessageKind::Response),
            "event" => Some(MessageKind::Event),
            "fault" => Some(MessageKind::Fault),
            _ => None,
        }
    }

    /// Responses and faults always answer something.
    pub fn requires_correlation(&self) -> bool {
        matches!(self, MessageKind::Response | MessageKind::Fault)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Body {
    pub content_type: String,
    pub payload: Vec<u8>,
}

impl Body {
    pub fn new(content_type: impl Into<String>, payload: impl Into<Vec<u8>>) -> Self {
        Body {
            content_type: content_type.into(),
            payload: payload.into(),
        }
    }

    pub fn text(payload: impl Into<String>) -> Self {
        Body::new("text/plain", payload.into().into_bytes())
    }

    pub fn payload_text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureBlock {
    pub signer_admin_id: String,
    pub key_id: String,
    pub algorithm: String,
    pub signature: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub envelope_id: String,
    pub created_at: DateTime<Utc>,
    pub sender: Sender,
    pub destination: Destination,
    pub profile: Profile,
    pub message_kind: MessageKind,
    pub correlation_id: Option<String>,
    pub body: Body,
    pub security: Option<SignatureBlock>,
}

impl Envelope {
    pub fn is_signed(&self) -> bool {
        self.security.is_some()
    }

    /// Copy of this envelope with the signature block removed.
    pub fn unsigned(&self) -> Envelope {
        Envelope {
            security: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("invalid address: {0} must be non-empty")]
    InvalidAddress(&'static str),
    #[error("message kind {0} requires a correlation id")]
    MissingCorrelation(&'static str),
    #[error("unknown or inactive key {admin_id}/{key_id}")]
    UnknownKey { admin_id: String, key_id: String },
    #[error("envelope {0} is already signed")]
    AlreadySigned(String),
    #[error("malformed envelope{}{}: {reason}",
        field.as_ref().map(|f| format!(" at field `{f}`")).unwrap_or_default(),
        position.map(|(l, c)| format!(" (line {l}, column {c})")).unwrap_or_default())]
    Malformed {
        field: Option<String>,
        position: Option<(usize, usize)>,
        reason: String,
    },
}

/// Creates a fresh, unsigned envelope stamped with the current time.
pub fn build_envelope(
    sender: Sender,
    destination: Destination,
    profile: Profile,
    kind: MessageKind,
    body: Body,
    correlation_id: Option<String>,
) -> Result<Envelope, EnvelopeError> {
    build_envelope_at(Utc::now(), sender, destination, profile, kind, body, correlation_id)
}

/// [`build_envelope`] with an explicit creation time.
pub fn build_envelope_at(
    now: DateTime<Utc>,
    sender: Sender,
    destination: Destination,
    profile: Profile,
    kind: MessageKind,
    body: Body,
    correlation_id: Option<String>,
) -> Result<Envelope, EnvelopeError> {
    for (value, name) in [
        (&sender.admin_id, "sender.admin_id"),
        (&sender.port_id, "sender.port_id"),
        (&destination.admin_id, "destination.admin_id"),
        (&destination.service_id, "destination.service_id"),
    ] {
        if value.trim().is_empty() {
            return Err(EnvelopeError::InvalidAddress(name));
        }
    }
    if kind.requires_correlation() && correlation_id.as_deref().is_none_or(str::is_empty) {
        return Err(EnvelopeError::MissingCorrelation(kind.as_str()));
    }
    Ok(Envelope {
        envelope_id: Uuid::new_v4().to_string(),
        created_at: clock::to_millis(now),
        sender,
        destination,
        profile,
        message_kind: kind,
        correlation_id,
        body,
        security: None,
    })
}

/// Builds the reply to `request`: addressed back to the requesting port,
/// correlated to the request's id.
pub fn build_reply(
    request: &Envelope,
    responder_port: impl Into<String>,
    kind: MessageKind,
    body: Body,
) -> Result<Envelope, EnvelopeError> {
    build_envelope(
        Sender::new(request.destination.admin_id.clone(), responder_port),
        Destination::new(request.sender.admin_id.clone(), request.sender.port_id.clone()),
        request.profile,
        kind,
        body,
        Some(request.envelope_id.clone()),
    )
}
