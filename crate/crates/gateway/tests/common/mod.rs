#![allow(dead_code)]

pub mod crash;

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use ssc_core::identity::HashParams;
use ssc_gateway::api::router;
use ssc_gateway::client::{ApiClient, HttpClient, InProcessClient};
use ssc_gateway::harness::scenario::Scenario;
use ssc_gateway::{GatewayConfig, Ssc};

pub const FRAMEWORK_KEY: &str = "0707070707070707070707070707070707070707070707070707070707070707";

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn residence_change() -> Scenario {
    Scenario::load(&scenarios_dir().join("residence-change.json")).expect("scenario loads")
}

pub fn config(storage: &Path) -> GatewayConfig {
    GatewayConfig {
        storage: storage.to_path_buf(),
        framework_key: Some(FRAMEWORK_KEY.into()),
        password_hash: HashParams::light(),
        ..GatewayConfig::default()
    }
}

/// A gateway with the residence-change scenario installed but not run.
pub fn installed(storage: &Path) -> (Arc<Ssc>, InProcessClient) {
    let ssc = Ssc::open(config(storage)).expect("gateway opens");
    residence_change().install(&ssc).expect("scenario installs");
    let client = InProcessClient::new(router(ssc.clone()));
    (ssc, client)
}

pub fn login(client: &dyn ApiClient, user: &str, password: &str) -> String {
    let body = serde_json::json!({"user_id": user, "password": password});
    let r = client
        .request("POST", "/auth/login", None, Some(serde_json::to_vec(&body).unwrap()))
        .unwrap();
    let v: serde_json::Value = r.ok_json().unwrap();
    v["token"].as_str().unwrap().to_string()
}

pub fn post(client: &dyn ApiClient, path: &str, token: Option<&str>, body: serde_json::Value) -> ssc_gateway::client::ApiResponse {
    client
        .request("POST", path, token, Some(serde_json::to_vec(&body).unwrap()))
        .unwrap()
}

pub fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// An `ssc serve` child process running in harness mode.
pub struct Server {
    pub url: String,
    config_path: PathBuf,
    child: Option<Child>,
}

impl Server {
    pub fn start(dir: &Path, scenario: &Path) -> Server {
        let port = free_port();
        let storage = dir.join("data");
        let cfg = serde_json::json!({
            "listen": format!("127.0.0.1:{port}"),
            "storage": storage,
            "framework_key": FRAMEWORK_KEY,
            "password_hash": {"memory_kib": 256, "iterations": 1, "parallelism": 1},
            "scenario": scenario,
        });
        let config_path = dir.join("ssc.json");
        std::fs::write(&config_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        let mut s = Server {
            url: format!("http://127.0.0.1:{port}"),
            config_path,
            child: None,
        };
        s.restart();
        s
    }

    pub fn restart(&mut self) {
        let child = Command::new(env!("CARGO_BIN_EXE_ssc"))
            .args(["serve", "--config"])
            .arg(&self.config_path)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn ssc serve");
        self.child = Some(child);
        self.wait_ready(Duration::from_secs(30));
    }

    pub fn wait_ready(&self, limit: Duration) {
        let client = HttpClient::new(self.url.clone(), Duration::from_secs(2));
        let start = Instant::now();
        while start.elapsed() < limit {
            if client.get("/health", None).is_ok_and(|r| r.is_success()) {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        panic!("gateway at {} not ready after {limit:?}", self.url);
    }

    /// SIGKILL, no chance to flush or clean up.
    pub fn kill(&mut self) {
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.kill();
    }
}
