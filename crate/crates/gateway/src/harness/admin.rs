use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ssc_core::envelope::{build_reply, sign_envelope, Body, Envelope, KeyDirectory, MessageKind, Signer};

pub const ADMIN_KEY_ID: &str = "k1";

/// How one simulated back-office service answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    /// Response payload; `${payload}` and `${admin}` are substituted.
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default = "default_content_type")]
    pub content_type: String,
    #[serde(default)]
    pub latency_ms: u64,
    /// When set, every call fails with this detail (a backend fault).
    #[serde(default)]
    pub fault: Option<String>,
    /// Fail only the first `n` calls, then answer normally.
    #[serde(default)]
    pub fail_first: u64,
}

fn default_response() -> String {
    "${payload}".into()
}

fn default_content_type() -> String {
    "text/plain".into()
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            response: default_response(),
            content_type: default_content_type(),
            latency_ms: 0,
            fault: None,
            fail_first: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdminSpec {
    pub admin_id: String,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendSpec>,
}

/// Deterministic key seed for a simulated administration.
pub fn admin_key_seed(seed: u64, admin_id: &str) -> [u8; 32] {
    Sha256::digest(format!("ssc-sim:{seed}:{admin_id}")).into()
}

/// A back-office administration living inside the gateway process. Its
/// handlers are pure functions of the request payload and the fault script.
pub struct SimulatedAdministration {
    pub admin_id: String,
    pub signer: Signer,
    pub backends: BTreeMap<String, BackendSpec>,
    calls: BTreeMap<String, AtomicU64>,
}

impl SimulatedAdministration {
    pub fn new(spec: &AdminSpec, seed: u64) -> Self {
        SimulatedAdministration {
            admin_id: spec.admin_id.clone(),
            signer: Signer::from_seed(spec.admin_id.clone(), ADMIN_KEY_ID, admin_key_seed(seed, &spec.admin_id)),
            backends: spec.backends.clone(),
            calls: spec.backends.keys().map(|k| (k.clone(), AtomicU64::new(0))).collect(),
        }
    }

    /// Answers a request addressed to `service_id`, signing the reply.
    pub fn handle(&self, service_id: &str, request: &Envelope, keys: &KeyDirectory) -> Result<Envelope, String> {
        let spec = self
            .backends
            .get(service_id)
            .ok_or_else(|| format!("{} offers no service {service_id}", self.admin_id))?;
        let n = self.calls[service_id].fetch_add(1, Ordering::SeqCst);
        if spec.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(spec.latency_ms));
        }
        if let Some(detail) = &spec.fault {
            return Err(detail.clone());
        }
        if n < spec.fail_first {
            return Err(format!("scripted failure {} of {}", n + 1, spec.fail_first));
        }
        let payload = spec
            .response
            .replace("${payload}", &request.body.payload_text())
            .replace("${admin}", &self.admin_id);
        let reply = build_reply(
            request,
            service_id,
            MessageKind::Response,
            Body::new(spec.content_type.clone(), payload.into_bytes()),
        )
        .map_err(|e| e.to_string())?;
        sign_envelope(&reply, &self.signer, keys).map_err(|e| e.to_string())
    }

    pub fn calls(&self, service_id: &str) -> u64 {
        self.calls.get(service_id).map_or(0, |c| c.load(Ordering::SeqCst))
    }
}

pub type SharedAdmin = Arc<SimulatedAdministration>;
