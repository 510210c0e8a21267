//! Canonical JSON encoding of envelopes.
//!
//! Layout: one JSON object, no insignificant whitespace, keys sorted at
//! every level:
//!
//! ```text
//! {"body":{"content_type":..,"payload":<base64>},"correlation_id":<string|null>,
//!  "created_at":"YYYY-MM-DDTHH:MM:SS.mmmZ","destination":{"admin_id":..,"service_id":..},
//!  "envelope_id":..,"message_kind":..,"profile":..,
//!  "security":{"algorithm":..,"key_id":..,"signature":<base64>,"signer_admin_id":..},
//!  "sender":{"admin_id":..,"port_id":..}}
//! ```
//!
//! `security` is omitted when absent and always omitted from the signed
//! bytes. Strings use minimal JSON escaping (`\"`, `\\`, `\b`, `\f`, `\n`,
//! `\r`, `\t`, other control characters as `\u00xx`); non-ASCII text is
//! emitted as raw UTF-8. Payloads are standard base64 with padding.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use chrono::{DateTime, Utc};
use serde::Serialize;
use serde_json::{Map, Value};

use super::{Body, Destination, Envelope, EnvelopeError, MessageKind, Profile, Sender, SignatureBlock};
use crate::clock;

// Field order in these structs is the canonical (sorted) key order.

#[derive(Serialize)]
struct WireBody<'a> {
    content_type: &'a str,
    payload: String,
}

#[derive(Serialize)]
struct WireAddress<'a> {
    admin_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    port_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    service_id: Option<&'a str>,
}

#[derive(Serialize)]
struct WireSecurity<'a> {
    algorithm: &'a str,
    key_id: &'a str,
    signature: String,
    signer_admin_id: &'a str,
}

#[derive(Serialize)]
struct WireEnvelope<'a> {
    body: WireBody<'a>,
    correlation_id: Option<&'a str>,
    created_at: String,
    destination: WireAddress<'a>,
    envelope_id: &'a str,
    message_kind: &'static str,
    profile: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    security: Option<WireSecurity<'a>>,
    sender: WireAddress<'a>,
}

fn to_wire(e: &Envelope, with_security: bool) -> WireEnvelope<'_> {
    WireEnvelope {
        body: WireBody {
            content_type: &e.body.content_type,
            payload: STANDARD.encode(&e.body.payload),
        },
        correlation_id: e.correlation_id.as_deref(),
        created_at: clock::format_millis(&e.created_at),
        destination: WireAddress {
            admin_id: &e.destination.admin_id,
            port_id: None,
            service_id: Some(&e.destination.service_id),
        },
        envelope_id: &e.envelope_id,
        message_kind: e.message_kind.as_str(),
        profile: e.profile.as_str(),
        security: e.security.as_ref().filter(|_| with_security).map(|s| WireSecurity {
            algorithm: &s.algorithm,
            key_id: &s.key_id,
            signature: STANDARD.encode(&s.signature),
            signer_admin_id: &s.signer_admin_id,
        }),
        sender: WireAddress {
            admin_id: &e.sender.admin_id,
            port_id: Some(&e.sender.port_id),
            service_id: None,
        },
    }
}

/// The bytes covered by the signature: canonical form without `security`.
pub fn canonical_bytes(e: &Envelope) -> Vec<u8> {
    serde_json::to_vec(&to_wire(e, false)).expect("envelope encoding is infallible")
}

/// Wire form: canonical layout including the signature block when present.
pub fn serialize_envelope(e: &Envelope) -> Vec<u8> {
    serde_json::to_vec(&to_wire(e, true)).expect("envelope encoding is infallible")
}

fn malformed(field: &str, reason: impl Into<String>) -> EnvelopeError {
    EnvelopeError::Malformed {
        field: Some(field.to_string()),
        position: None,
        reason: reason.into(),
    }
}

fn object<'a>(v: &'a Value, field: &str) -> Result<&'a Map<String, Value>, EnvelopeError> {
    v.as_object().ok_or_else(|| malformed(field, "expected an object"))
}

fn string(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, EnvelopeError> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(malformed(path, "expected a string")),
        None => Err(malformed(path, "missing")),
    }
}

fn non_empty(obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, EnvelopeError> {
    let s = string(obj, key, path)?;
    if s.is_empty() {
        return Err(malformed(path, "must be non-empty"));
    }
    Ok(s)
}

fn base64_field(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Vec<u8>, EnvelopeError> {
    let raw = string(obj, key, path)?;
    STANDARD
        .decode(raw.as_bytes())
        .map_err(|e| malformed(path, format!("invalid base64: {e}")))
}

fn child<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a Map<String, Value>, EnvelopeError> {
    object(obj.get(key).ok_or_else(|| malformed(key, "missing"))?, key)
}

/// Rejects `\u` escapes written with uppercase hex digits, so that each
/// string value has exactly one accepted spelling.
fn check_escapes(bytes: &[u8]) -> Result<(), EnvelopeError> {
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            if bytes.get(i + 1) == Some(&b'u') {
                let hex = bytes.get(i + 2..i + 6).unwrap_or_default();
                if hex.iter().any(u8::is_ascii_uppercase) {
                    return Err(EnvelopeError::Malformed {
                        field: None,
                        position: None,
                        reason: format!("escape at byte {i} must use lowercase hex"),
                    });
                }
            }
            i += 2;
        } else {
            i += 1;
        }
    }
    Ok(())
}

/// Decodes an envelope from its wire form. Unknown fields are ignored and
/// key order is free, but known values must be spelled canonically.
pub fn parse_envelope(bytes: &[u8]) -> Result<Envelope, EnvelopeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| EnvelopeError::Malformed {
        field: None,
        position: Some((e.line(), e.column())),
        reason: e.to_string(),
    })?;
    let root = object(&value, "$")?;
    check_escapes(bytes)?;

    let body = child(root, "body")?;
    let body = Body {
        content_type: string(body, "content_type", "body.content_type")?,
        payload: base64_field(body, "payload", "body.payload")?,
    };

    let correlation_id = match root.get("correlation_id") {
        None => return Err(malformed("correlation_id", "missing (use null when absent)")),
        Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(malformed("correlation_id", "expected a string or null")),
    };

    let created_raw = string(root, "created_at", "created_at")?;
    let created_at = DateTime::parse_from_rfc3339(&created_raw)
        .map_err(|e| malformed("created_at", format!("not an RFC 3339 timestamp: {e}")))?
        .with_timezone(&Utc);
    if clock::format_millis(&created_at) != created_raw {
        return Err(malformed("created_at", "expected YYYY-MM-DDTHH:MM:SS.mmmZ"));
    }

    let dest = child(root, "destination")?;
    let destination = Destination {
        admin_id: non_empty(dest, "admin_id", "destination.admin_id")?,
        service_id: non_empty(dest, "service_id", "destination.service_id")?,
    };

    let envelope_id = non_empty(root, "envelope_id", "envelope_id")?;

    let kind_raw = string(root, "message_kind", "message_kind")?;
    let message_kind =
        MessageKind::parse(&kind_raw).ok_or_else(|| malformed("message_kind", format!("unknown kind `{kind_raw}`")))?;
    let profile_raw = string(root, "profile", "profile")?;
    let profile =
        Profile::parse(&profile_raw).ok_or_else(|| malformed("profile", format!("unknown profile `{profile_raw}`")))?;

    if message_kind.requires_correlation() && correlation_id.is_none() {
        return Err(malformed("correlation_id", format!("required for {}", message_kind.as_str())));
    }

    let security = match root.get("security") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let s = object(v, "security")?;
            Some(SignatureBlock {
                signer_admin_id: non_empty(s, "signer_admin_id", "security.signer_admin_id")?,
                key_id: non_empty(s, "key_id", "security.key_id")?,
                algorithm: non_empty(s, "algorithm", "security.algorithm")?,
                signature: base64_field(s, "signature", "security.signature")?,
            })
        }
    };

    let snd = child(root, "sender")?;
    let sender = Sender {
        admin_id: non_empty(snd, "admin_id", "sender.admin_id")?,
        port_id: non_empty(snd, "port_id", "sender.port_id")?,
    };

    Ok(Envelope {
        envelope_id,
        created_at: clock::to_millis(created_at),
        sender,
        destination,
        profile,
        message_kind,
        correlation_id,
        body,
        security,
    })
}
