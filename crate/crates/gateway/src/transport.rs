use std::time::Duration;

use ssc_core::cooperation::{Transport, TransportError};
use ssc_core::envelope::{parse_envelope, serialize_envelope, Envelope};
use ureq::Agent;

/// Delivers envelopes to external applicative ports: POST of the canonical
/// envelope bytes, response body parsed as an envelope.
pub struct HttpTransport {
    agent: Agent,
}

impl HttpTransport {
    /// `ceiling` bounds how long an abandoned call may linger after the
    /// exchange itself has already timed out.
    pub fn new(ceiling: Duration) -> Self {
        let agent = Agent::config_builder()
            .timeout_global(Some(ceiling))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport { agent }
    }
}

impl Transport for HttpTransport {
    fn deliver(&self, endpoint: &str, request: &Envelope) -> Result<Envelope, TransportError> {
        let mut resp = self
            .agent
            .post(endpoint)
            .header("content-type", "application/json")
            .send(&serialize_envelope(request)[..])
            .map_err(|e| TransportError::Backend(format!("{endpoint}: {e}")))?;
        let status = resp.status();
        let body = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| TransportError::Backend(format!("{endpoint}: {e}")))?;
        if !status.is_success() {
            return Err(TransportError::Backend(format!("{endpoint} answered HTTP {}", status.as_u16())));
        }
        parse_envelope(&body).map_err(|e| TransportError::Backend(format!("{endpoint}: {e}")))
    }
}
