//! Clients for the gateway HTTP API: one that drives the router in-process
//! and one that speaks real HTTP.

use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower::ServiceExt;
use ureq::Agent;

#[derive(Debug, Clone)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl ApiResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn json<T: DeserializeOwned>(&self) -> Result<T, String> {
        serde_json::from_slice(&self.body).map_err(|e| format!("HTTP {}: {e}: {}", self.status, self.text()))
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }

    /// The JSON body when the status is 2xx, otherwise the error text.
    pub fn ok_json<T: DeserializeOwned>(&self) -> Result<T, String> {
        if self.is_success() {
            self.json()
        } else {
            Err(format!("HTTP {}: {}", self.status, self.text()))
        }
    }
}

/// `Err` means the request never produced an HTTP response.
pub trait ApiClient: Send + Sync {
    fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<Vec<u8>>) -> Result<ApiResponse, String>;

    fn get(&self, path: &str, token: Option<&str>) -> Result<ApiResponse, String> {
        self.request("GET", path, token, None)
    }

    fn post_json(&self, path: &str, token: Option<&str>, body: &impl Serialize) -> Result<ApiResponse, String>
    where
        Self: Sized,
    {
        let bytes = serde_json::to_vec(body).map_err(|e| e.to_string())?;
        self.request("POST", path, token, Some(bytes))
    }

    fn post_bytes(&self, path: &str, token: Option<&str>, body: Vec<u8>) -> Result<ApiResponse, String> {
        self.request("POST", path, token, Some(body))
    }
}

pub struct InProcessClient {
    router: Router,
    runtime: tokio::runtime::Runtime,
}

impl InProcessClient {
    pub fn new(router: Router) -> Self {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("tokio runtime");
        InProcessClient { router, runtime }
    }
}

impl ApiClient for InProcessClient {
    fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<Vec<u8>>) -> Result<ApiResponse, String> {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
        }
        if body.is_some() {
            req = req.header(header::CONTENT_TYPE, "application/json");
        }
        let req = req
            .body(Body::from(body.unwrap_or_default()))
            .map_err(|e| e.to_string())?;
        let router = self.router.clone();
        self.runtime.block_on(async move {
            let resp = router.oneshot(req).await.map_err(|e| e.to_string())?;
            let status = resp.status().as_u16();
            let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
                .await
                .map_err(|e| e.to_string())?;
            Ok(ApiResponse {
                status,
                body: body.to_vec(),
            })
        })
    }
}

pub struct HttpClient {
    base: String,
    agent: Agent,
}

impl HttpClient {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        let agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpClient {
            base: base.into().trim_end_matches('/').to_string(),
            agent,
        }
    }
}

impl ApiClient for HttpClient {
    fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<Vec<u8>>) -> Result<ApiResponse, String> {
        let url = format!("{}{path}", self.base);
        let auth = token.map(|t| format!("Bearer {t}"));
        let result = match (method, body) {
            ("GET", _) => {
                let mut r = self.agent.get(&url);
                if let Some(a) = &auth {
                    r = r.header("authorization", a);
                }
                r.call()
            }
            ("DELETE", _) => {
                let mut r = self.agent.delete(&url);
                if let Some(a) = &auth {
                    r = r.header("authorization", a);
                }
                r.call()
            }
            (m, body) => {
                let mut r = match m {
                    "PATCH" => self.agent.patch(&url),
                    _ => self.agent.post(&url),
                };
                if let Some(a) = &auth {
                    r = r.header("authorization", a);
                }
                r.header("content-type", "application/json")
                    .send(&body.unwrap_or_default()[..])
            }
        };
        let mut resp = result.map_err(|e| format!("{method} {url}: {e}"))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_vec()
            .map_err(|e| format!("{method} {url}: {e}"))?;
        Ok(ApiResponse { status, body })
    }
}
