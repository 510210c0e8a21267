//! Drives the residence-change scenario against an `ssc serve` process
//! that is SIGKILLed and restarted partway through.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use ssc_gateway::client::{ApiClient, ApiResponse, HttpClient};
use ssc_gateway::harness::scenario::{crash_equivalent, Driver, Expectation, Scenario, ScenarioReport};

use super::{residence_change, scenarios_dir, Server};

/// Counts requests and, at request number `at`, kills the server after
/// `delay` and starts it again from the same storage. The next request is
/// held back until the kill has happened, so every kill lands between
/// sending request `at` and sending the one after it.
struct KillingClient {
    inner: HttpClient,
    server: Arc<Mutex<Server>>,
    sent: AtomicUsize,
    kill_at: Option<(usize, Duration)>,
    killed: Arc<AtomicBool>,
    killer: Mutex<Option<JoinHandle<()>>>,
    outages: AtomicUsize,
}

impl ApiClient for KillingClient {
    fn request(&self, method: &str, path: &str, token: Option<&str>, body: Option<Vec<u8>>) -> Result<ApiResponse, String> {
        let n = self.sent.fetch_add(1, Ordering::SeqCst);
        if let Some((at, delay)) = self.kill_at {
            while n > at && !self.killed.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(1));
            }
            if n == at {
                let (server, killed) = (self.server.clone(), self.killed.clone());
                *self.killer.lock().unwrap() = Some(std::thread::spawn(move || {
                    std::thread::sleep(delay);
                    let mut s = server.lock().unwrap();
                    s.kill();
                    killed.store(true, Ordering::SeqCst);
                    s.restart();
                }));
            }
        }
        let r = self.inner.request(method, path, token, body);
        if r.is_err() {
            self.outages.fetch_add(1, Ordering::SeqCst);
        }
        r
    }
}

impl KillingClient {
    fn join(&self) {
        if let Some(h) = self.killer.lock().unwrap().take() {
            h.join().unwrap();
        }
    }
}

/// The scenario minus its exact-transcript assertion, which a retried
/// call is allowed to break.
pub fn crash_scenario() -> Scenario {
    let mut s = residence_change();
    s.expect.retain(|e| !matches!(e, Expectation::TraceGolden { .. }));
    s
}

pub struct CrashRun {
    pub report: ScenarioReport,
    pub script_requests: usize,
    pub killed: bool,
    /// Requests that found the gateway down and were retried.
    pub outages: usize,
}

pub fn run(kill_at: Option<(usize, Duration)>) -> Result<CrashRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let server = Server::start(dir.path(), &scenarios_dir().join("residence-change.json"));
    let scenario = crash_scenario();
    let client = KillingClient {
        inner: HttpClient::new(server.url.clone(), Duration::from_secs(10)),
        server: Arc::new(Mutex::new(server)),
        sent: AtomicUsize::new(0),
        kill_at,
        killed: Arc::new(AtomicBool::new(false)),
        killer: Mutex::new(None),
        outages: AtomicUsize::new(0),
    };
    let mut driver = Driver::new(&client, &scenario).with_patience(Duration::from_secs(60));
    let steps = driver.run_script();
    let script_requests = client.sent.load(Ordering::SeqCst);
    client.join();
    let report = driver.finish(steps);
    Ok(CrashRun {
        report,
        script_requests,
        killed: client.killed.load(Ordering::SeqCst),
        outages: client.outages.load(Ordering::SeqCst),
    })
}

/// One interrupted run, judged against the golden transcript.
pub fn check(run: &CrashRun) -> Result<(), String> {
    if !run.report.passed {
        return Err(run.report.lines().join("\n"));
    }
    let golden = residence_change().read_golden(std::path::Path::new("residence-change.golden.json"))?;
    crash_equivalent(&golden, &run.report.traces["rc-0001"])
}
