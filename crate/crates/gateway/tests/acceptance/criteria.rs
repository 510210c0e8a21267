use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use axum::body::Body as HttpBody;
use axum::http::{Request, StatusCode};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ssc_core::audit::{AuditLog, Category, Outcome};
use ssc_core::cooperation::{FaultCode, FaultInfo};
use ssc_core::envelope::{
    build_envelope, canonical_bytes, parse_envelope, serialize_envelope, sign_envelope, verify_envelope, Body,
    Destination, Envelope, KeyDirectory, MessageKind, Profile, Sender, Signer,
};
use ssc_core::eventbus::{EventBus, EventRecord};
use ssc_core::identity::{challenge_message, AuthLevel};
use ssc_core::registry::{Binding, ServiceDescriptor, UsageTarget};
use ssc_core::store::Journal;
use ssc_gateway::api::router;
use ssc_gateway::client::{ApiClient, InProcessClient};
use ssc_gateway::harness::admin::{AdminSpec, BackendSpec, SimulatedAdministration};
use ssc_gateway::harness::demo::seed_demo;
use ssc_gateway::harness::scenario::{run_in_process, TraceEntry};
use ssc_gateway::seed::UserSeed;
use ssc_gateway::Ssc;
use tower::ServiceExt;

use crate::common::{self, config, crash, login, post, residence_change};
use crate::reference::{forest, gen, oracle, workflow};

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn signed_sample(seed: u64) -> (Envelope, KeyDirectory) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut e = gen::envelope(&mut rng);
    let signer = Signer::from_seed(e.sender.admin_id.clone(), "k1", rng.gen());
    let dir = KeyDirectory::new();
    dir.ensure_signer(&signer).unwrap();
    e.security = None;
    (sign_envelope(&e, &signer, &dir).unwrap(), dir)
}

pub fn envelope() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xe11e);
    for i in 0..1000 {
        let e = gen::envelope(&mut rng);
        let back = parse_envelope(&serialize_envelope(&e)).map_err(|err| format!("envelope {i}: {err}"))?;
        ensure(back == e, || format!("envelope {i} changed in a round trip"))?;
    }
    for seed in 0..100 {
        let (e, _) = signed_sample(seed);
        ensure(canonical_bytes(&e) == oracle::canonical(&e, false).into_bytes(), || {
            format!("sample {seed}: canonical bytes differ from the reference encoder")
        })?;
        ensure(serialize_envelope(&e) == oracle::canonical(&e, true).into_bytes(), || {
            format!("sample {seed}: wire bytes differ from the reference encoder")
        })?;
    }
    let mut tampers = 0usize;
    for seed in 1000..1050 {
        let (e, dir) = signed_sample(seed);
        let wire = serialize_envelope(&e);
        for i in 0..wire.len() {
            let original = wire[i];
            let mut values = vec![original ^ 0x01, original ^ 0x20];
            let mut v = rng.gen::<u8>();
            while v == original || values.contains(&v) {
                v = rng.gen();
            }
            values.push(v);
            for value in values {
                let mut t = wire.clone();
                t[i] = value;
                let accepted = parse_envelope(&t).map(|t| verify_envelope(&t, &dir).valid).unwrap_or(false);
                ensure(!accepted, || format!("sample {seed}: byte {i} set to {value:#04x} accepted"))?;
                tampers += 1;
            }
        }
    }
    Ok(format!("1000 round trips, 100 reference matches, {tampers}/{tampers} tampers rejected"))
}

const COOP_SEED: u64 = 31;
const COOP_ADMINS: [&str; 3] = ["comune-a", "comune-b", "comune-c"];

fn coop_gateway(dir: &Path) -> Arc<Ssc> {
    let mut cfg = config(dir);
    cfg.sync_timeout_ms = 150;
    let ssc = Ssc::open(cfg).unwrap();
    for admin in COOP_ADMINS {
        let mut backends = BTreeMap::from([(
            "echo".to_string(),
            BackendSpec {
                response: "${admin}|${payload}".into(),
                ..BackendSpec::default()
            },
        )]);
        if admin == "comune-a" {
            backends.insert(
                "archive".into(),
                BackendSpec {
                    fault: Some("archive offline".into()),
                    ..BackendSpec::default()
                },
            );
        }
        if admin == "comune-b" {
            backends.insert(
                "slow".into(),
                BackendSpec {
                    latency_ms: 600,
                    ..BackendSpec::default()
                },
            );
        }
        let spec = AdminSpec {
            admin_id: admin.into(),
            backends,
        };
        ssc.spawn_admin(SimulatedAdministration::new(&spec, COOP_SEED)).unwrap();
    }
    ssc
}

fn coop_request(ssc: &Ssc, from: &str, to: &str, service: &str, payload: &str, corr: &str) -> Envelope {
    let signer = ssc.admin(from).unwrap().signer.clone();
    let req = build_envelope(
        Sender::new(from, "desk"),
        Destination::new(to, service),
        Profile::Sync,
        MessageKind::Request,
        Body::text(payload),
        Some(corr.into()),
    )
    .unwrap();
    sign_envelope(&req, &signer, &ssc.keys).unwrap()
}

pub fn cooperation() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let ssc = coop_gateway(dir.path());
    let total = 1000;
    let workers = 50;
    let handles: Vec<_> = (0..workers)
        .map(|w| {
            let ssc = ssc.clone();
            thread::spawn(move || -> Result<(), String> {
                for i in (w..total).step_by(workers) {
                    let from = COOP_ADMINS[i % 3];
                    let to = COOP_ADMINS[(i / 3) % 3];
                    let payload = format!("{from}:{i}");
                    let req = coop_request(&ssc, from, to, "echo", &payload, &format!("x-{i}"));
                    let reply = ssc.cooperation.exchange_sync(&req, None);
                    ensure(reply.message_kind == MessageKind::Response, || {
                        format!("exchange {i}: {:?}", FaultInfo::from_envelope(&reply))
                    })?;
                    ensure(reply.correlation_id.as_deref() == Some(req.envelope_id.as_str()), || {
                        format!("exchange {i}: reply correlated to {:?}", reply.correlation_id)
                    })?;
                    ensure(reply.sender.admin_id == to && reply.destination.admin_id == from, || {
                        format!("exchange {i}: routed {} -> {}", reply.sender.admin_id, reply.destination.admin_id)
                    })?;
                    ensure(reply.body.payload_text() == format!("{to}|{payload}"), || {
                        format!("exchange {i}: payload {}", reply.body.payload_text())
                    })?;
                }
                Ok(())
            })
        })
        .collect();
    for h in handles {
        h.join().map_err(|_| "worker panicked".to_string())??;
    }
    for i in 0..total {
        let trace = ssc.audit.trace(&format!("x-{i}"));
        let cats: Vec<Category> = trace.iter().map(|r| r.category).collect();
        ensure(cats == [Category::ExchangeRequest, Category::ExchangeResponse], || {
            format!("exchange {i}: audit {cats:?}")
        })?;
    }

    let mut fault_paths = Vec::new();
    for (to, service, code, corr) in [
        ("comune-a", "archive", FaultCode::BackendFault, "fault-1"),
        ("comune-b", "slow", FaultCode::Timeout, "timeout-1"),
    ] {
        let req = coop_request(&ssc, "comune-c", to, service, "mario", corr);
        let started = Instant::now();
        let reply = ssc.cooperation.exchange_sync(&req, None);
        let info = FaultInfo::from_envelope(&reply).ok_or_else(|| format!("{corr}: no fault envelope"))?;
        ensure(info.code == code, || format!("{corr}: fault code {:?}", info.code))?;
        if code == FaultCode::Timeout {
            ensure(started.elapsed() < Duration::from_millis(600), || format!("{corr}: waited for the backend"))?;
        }
        let trace = ssc.audit.trace(corr);
        let faults = trace.iter().filter(|r| r.outcome == Outcome::Fault).count();
        ensure(trace.len() >= 2 && faults == 1, || format!("{corr}: {} records, {faults} faults", trace.len()))?;
        fault_paths.push(format!("{corr}: 1 fault envelope, {} audit records", trace.len()));
    }
    Ok(format!("{total} concurrent exchanges routed and correlated; {}", fault_paths.join("; ")))
}

const BUS_TOPIC: &str = "civil.events";

fn bus_keys(publishers: usize) -> (Arc<KeyDirectory>, Vec<Signer>) {
    let keys = Arc::new(KeyDirectory::new());
    let signers: Vec<Signer> = (0..publishers)
        .map(|i| Signer::from_seed(format!("pub{i}"), "k1", [i as u8 + 1; 32]))
        .collect();
    for s in &signers {
        keys.ensure_signer(s).unwrap();
    }
    (keys, signers)
}

fn bus_event(signer: &Signer, keys: &KeyDirectory, topic: &str, text: &str) -> Envelope {
    let e = build_envelope(
        Sender::new(signer.admin_id.clone(), "events"),
        Destination::new("ssc", topic),
        Profile::AsyncEvent,
        MessageKind::Event,
        Body::text(text),
        None,
    )
    .unwrap();
    sign_envelope(&e, signer, keys).unwrap()
}

fn open_bus(path: &Path, keys: &Arc<KeyDirectory>, audit: &Arc<AuditLog>) -> EventBus {
    let (journal, records) = Journal::open::<EventRecord>(path).unwrap();
    EventBus::new(keys.clone(), audit.clone()).recover(journal, records).unwrap()
}

pub fn event_bus() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let (keys, signers) = bus_keys(4);
    let audit = Arc::new(AuditLog::in_memory());
    let bus = Arc::new(open_bus(&dir.path().join("events.ndjson"), &keys, &audit));
    bus.create_topic(BUS_TOPIC).map_err(|e| e.to_string())?;
    let subs: Vec<String> = (0..5)
        .map(|i| bus.subscribe(Sender::new(format!("sub{i}"), "inbox"), BUS_TOPIC, true).unwrap().sub_id)
        .collect();
    let per_publisher = 2500;
    let total = 4 * per_publisher;

    let publishers: Vec<_> = signers
        .iter()
        .cloned()
        .enumerate()
        .map(|(p, signer)| {
            let (bus, keys) = (bus.clone(), keys.clone());
            thread::spawn(move || {
                for i in 0..per_publisher {
                    bus.publish(&bus_event(&signer, &keys, BUS_TOPIC, &format!("{p}:{i}")), BUS_TOPIC)
                        .unwrap();
                }
            })
        })
        .collect();
    let consumers: Vec<_> = subs
        .iter()
        .cloned()
        .map(|sub| {
            let bus = bus.clone();
            thread::spawn(move || -> Result<(), String> {
                let mut seen: BTreeMap<usize, Vec<(usize, u64)>> = BTreeMap::new();
                let (mut received, mut last) = (0, 0u64);
                let started = Instant::now();
                while received < total {
                    ensure(started.elapsed() < Duration::from_secs(50), || {
                        format!("{sub}: only {received} of {total} delivered")
                    })?;
                    let batch = bus.pull(&sub, 64).map_err(|e| e.to_string())?;
                    let Some(tail) = batch.last() else {
                        thread::yield_now();
                        continue;
                    };
                    for d in &batch {
                        ensure(d.global_seq > last, || format!("{sub}: global_seq {} after {last}", d.global_seq))?;
                        last = d.global_seq;
                        let text = d.envelope.body.payload_text();
                        let (p, i) = text.split_once(':').unwrap();
                        seen.entry(p.parse().unwrap()).or_default().push((i.parse().unwrap(), d.publisher_seq));
                        received += 1;
                    }
                    bus.ack(&sub, tail.global_seq).map_err(|e| e.to_string())?;
                }
                for p in 0..4 {
                    let expected: Vec<(usize, u64)> = (0..per_publisher).map(|i| (i, i as u64 + 1)).collect();
                    ensure(seen.get(&p) == Some(&expected), || format!("{sub}: publisher {p} out of order or lost"))?;
                }
                Ok(())
            })
        })
        .collect();
    for h in publishers {
        h.join().map_err(|_| "publisher panicked".to_string())?;
    }
    for h in consumers {
        h.join().map_err(|_| "consumer panicked".to_string())??;
    }

    bus.create_topic("nobody.listens").map_err(|e| e.to_string())?;
    let receipt = bus
        .publish(&bus_event(&signers[0], &keys, "nobody.listens", "hello"), "nobody.listens")
        .map_err(|e| format!("publish without subscribers: {e}"))?;
    ensure(receipt.global_seq == 1, || "publish without subscribers was not sequenced".into())?;

    // Kill and restart mid-stream: everything not acknowledged before the
    // kill must come back, in order, after recovery.
    let path = dir.path().join("restart.ndjson");
    let mut bus = open_bus(&path, &keys, &audit);
    bus.create_topic(BUS_TOPIC).unwrap();
    let sub = bus.subscribe(Sender::new("sub-r", "inbox"), BUS_TOPIC, true).unwrap().sub_id;
    let mut published = Vec::new();
    let mut acked = 0;
    let mut restarts = 0;
    let mut rng = StdRng::seed_from_u64(0xb05);
    for round in 0..10 {
        for i in 0..200 {
            let e = bus_event(&signers[i % 4], &keys, BUS_TOPIC, &format!("{round}:{i}"));
            bus.publish(&e, BUS_TOPIC).unwrap();
            published.push(e.envelope_id);
        }
        let batch = bus.pull(&sub, rng.gen_range(50..250)).unwrap();
        let keep = rng.gen_range(0..=batch.len());
        if keep > 0 {
            bus.ack(&sub, batch[keep - 1].global_seq).unwrap();
            acked += keep;
        }
        drop(bus);
        bus = open_bus(&path, &keys, &audit);
        restarts += 1;
    }
    let mut redelivered = Vec::new();
    loop {
        let batch = bus.pull(&sub, 128).unwrap();
        let Some(tail) = batch.last() else { break };
        redelivered.extend(batch.iter().map(|d| d.envelope.envelope_id.clone()));
        bus.ack(&sub, tail.global_seq).unwrap();
    }
    ensure(redelivered == published[acked..], || {
        format!("after {restarts} restarts {} of {} unacked events came back", redelivered.len(), published.len() - acked)
    })?;

    for seed in 0..20 {
        workflow_free_restart(seed)?;
    }
    Ok(format!(
        "{total} events x 5 subscriptions, FIFO per publisher; 0-subscriber publish ok; {} unacked events survived {restarts} restarts",
        published.len() - acked
    ))
}

fn workflow_free_restart(seed: u64) -> Result<(), String> {
    crate::reference::bus::at_least_once_across_restarts(seed, 300).map_err(|e| format!("seed {seed}: {e}"))
}

pub fn orchestration() -> Result<String, String> {
    let legal = workflow::legal_histories();
    for seed in 0..200 {
        workflow::join_trial(seed, &legal).map_err(|e| format!("interleaving {seed}: {e}"))?;
    }
    let (claims, completions, records) = workflow::claim_race(50)?;
    ensure((claims, completions, records) == (1, 1, 1), || {
        format!("50 racers: {claims} claims, {completions} completions, {records} records")
    })?;
    for seed in 0..50 {
        workflow::two_instance_delivery(seed).map_err(|e| format!("delivery {seed}: {e}"))?;
    }
    Ok("200 interleavings joined once and replayed identically; 1 of 50 claims won".into())
}

pub fn registry() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xf0e5);
    let mut queries = 0;
    for i in 0..50 {
        queries += forest::check(&mut rng, 100, 200).map_err(|e| format!("forest {i}: {e}"))?;
    }
    Ok(format!("50 forests, {queries} queries equal to the descendant walk"))
}

const PORTALS: [&str; 2] = ["https://cittadino.portal.test", "https://operatore.portal.test"];

fn strong_service() -> ServiceDescriptor {
    ServiceDescriptor {
        service_id: "residence-change-strong".into(),
        provider_admin_id: "comune-b".into(),
        title: "Change of residence (strong identity)".into(),
        description: String::new(),
        life_events: BTreeSet::from(["residence".to_string()]),
        usage_target: UsageTarget::Citizen,
        min_auth_level: AuthLevel::Strong,
        binding: Binding::Process {
            model_id: "residence-change".into(),
        },
    }
}

fn start(client: &dyn ApiClient, token: &str, service: &str, corr: &str) -> u16 {
    post(
        client,
        "/instances",
        Some(token),
        serde_json::json!({"service_id": service, "correlation_id": corr, "inputs": {"citizen": "mario", "request_ref": corr}}),
    )
    .status
}

pub fn identity() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.cors_origins = PORTALS.iter().map(|s| s.to_string()).collect();
    let ssc = Ssc::open(cfg).unwrap();
    residence_change().install(&ssc).unwrap();
    ssc.register_service(strong_service()).unwrap();
    let app = router(ssc.clone());
    let client = InProcessClient::new(app.clone());
    let token = login(&client, "mario", "mario-password");

    // Every endpoint that takes a bearer token.
    let mut accepted = 0;
    for (method, path, body) in [
        ("GET", "/profile".to_string(), None),
        ("PATCH", "/profile/preferences".to_string(), Some(r#"{"language":"it"}"#)),
        ("GET", "/tasks".to_string(), None),
    ] {
        let r = client
            .request(method, &path, Some(&token), body.map(|b| b.as_bytes().to_vec()))
            .unwrap();
        ensure(r.is_success(), || format!("{method} {path}: {} {}", r.status, r.text()))?;
        accepted += 1;
    }
    ensure(start(&client, &token, "residence-change", "sso-1") == 200, || "instance start refused".into())?;
    accepted += 1;
    let clerk = login(&client, "clerk-b", "clerk-b-password");
    let tasks: Vec<serde_json::Value> = client.get("/tasks", Some(&clerk)).unwrap().ok_json()?;
    let task = tasks[0]["task_id"].as_str().unwrap().to_string();
    for step in ["claim", "complete"] {
        let r = post(&client, &format!("/tasks/{task}/{step}"), Some(&clerk), serde_json::json!({"outcome": "approve"}));
        ensure(r.is_success(), || format!("task {step}: {}", r.text()))?;
        accepted += 1;
    }

    let rt = tokio::runtime::Runtime::new().unwrap();
    for origin in PORTALS {
        let req = Request::get("/profile")
            .header("origin", origin)
            .header("authorization", format!("Bearer {token}"))
            .body(HttpBody::empty())
            .unwrap();
        let resp = rt.block_on(app.clone().oneshot(req)).unwrap();
        ensure(resp.status() == StatusCode::OK, || format!("{origin}: {}", resp.status()))?;
        ensure(resp.headers().get("access-control-allow-origin").is_some_and(|v| v == origin), || {
            format!("{origin}: no CORS grant")
        })?;
    }

    let weak_attempts = 100;
    for i in 0..weak_attempts {
        let status = start(&client, &token, "residence-change-strong", &format!("weak-{i}"));
        ensure(status == 403, || format!("weak attempt {i}: HTTP {status}"))?;
    }
    let strong_user = UserSeed {
        user_id: "giulia".into(),
        password: "giulia-password".into(),
        public_key: Some(hex::encode(Signer::from_seed("giulia", "card", [42; 32]).public_key_bytes())),
        roles: BTreeSet::new(),
        static_profile: BTreeMap::new(),
    };
    ssc.identity.register_user(strong_user.to_new_user().unwrap()).unwrap();
    let c: serde_json::Value = post(&client, "/auth/challenge", None, serde_json::json!({"user_id": "giulia"})).ok_json()?;
    let nonce = c["nonce"].as_str().unwrap();
    let sig = Signer::from_seed("giulia", "card", [42; 32]).sign_bytes(&challenge_message(nonce));
    let strong: serde_json::Value = post(
        &client,
        "/auth/respond",
        None,
        serde_json::json!({"user_id": "giulia", "nonce": nonce, "signature": hex::encode(sig)}),
    )
    .ok_json()?;
    let strong = strong["token"].as_str().unwrap();
    ensure(start(&client, strong, "residence-change-strong", "strong-1") == 200, || {
        "strong token refused".into()
    })?;

    drop(client);
    let dir2 = tempfile::tempdir().unwrap();
    let mut short = config(dir2.path());
    short.token_ttl_secs = 1;
    let ssc2 = Ssc::open(short).unwrap();
    residence_change().install(&ssc2).unwrap();
    let client2 = InProcessClient::new(router(ssc2));
    let expiring = login(&client2, "mario", "mario-password");
    ensure(client2.get("/profile", Some(&expiring)).unwrap().is_success(), || "fresh token refused".into())?;
    thread::sleep(Duration::from_millis(1_100));
    let expired_attempts = 100;
    for i in 0..expired_attempts {
        let r = client2.get("/profile", Some(&expiring)).unwrap();
        ensure(r.status == 401, || format!("expired attempt {i}: HTTP {}", r.status))?;
        let status = start(&client2, &expiring, "residence-change", &format!("late-{i}"));
        ensure(status == 401, || format!("expired start {i}: HTTP {status}"))?;
    }
    Ok(format!(
        "one token accepted by {accepted} endpoints and 2 origins; {weak_attempts}/{weak_attempts} weak and {}/{} expired attempts denied",
        2 * expired_attempts,
        2 * expired_attempts
    ))
}

fn category_counts(trace: &[TraceEntry]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for t in trace {
        *m.entry(t.category.clone()).or_insert(0) += 1;
    }
    m
}

pub fn end_to_end() -> Result<String, String> {
    let scenario = residence_change();
    ensure(scenario.administrations.len() == 3 && scenario.models.len() == 1, || "scenario shape changed".into())?;
    let dir = tempfile::tempdir().unwrap();
    let report = run_in_process(&scenario, config(dir.path())).map_err(|e| e.to_string())?;
    ensure(report.passed, || report.lines().join("\n"))?;
    let golden = scenario.read_golden(Path::new("residence-change.golden.json"))?;
    let trace = &report.traces["rc-0001"];
    ensure(category_counts(trace) == category_counts(&golden), || "category counts differ".into())?;
    ensure(trace == &golden, || "trace order differs from the transcript".into())?;
    let tasks = trace.iter().filter(|t| t.subject.ends_with(":completed")).count();
    ensure(tasks == 1, || format!("{tasks} clerk tasks completed"))?;

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_ssc"))
        .args(["scenario", "run"])
        .arg(common::scenarios_dir().join("residence-change.json"))
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || String::from_utf8_lossy(&out.stdout).into_owned())?;
    Ok(format!("status completed, {} records match the transcript, CLI exit 0", trace.len()))
}

pub fn crash_safety() -> Result<String, String> {
    let clean = crash::run(None)?;
    crash::check(&clean).map_err(|e| format!("uninterrupted run: {e}"))?;
    let requests = clean.script_requests;
    let mut rng = StdRng::seed_from_u64(0xdead);
    let mut points = Vec::new();
    let mut outages = 0;
    for k in 0..10 {
        let at = rng.gen_range(0..requests);
        let delay = Duration::from_millis(rng.gen_range(0..20));
        let run = crash::run(Some((at, delay)))?;
        ensure(run.killed, || format!("kill {k} never fired"))?;
        crash::check(&run).map_err(|e| format!("kill {k} at request {at}+{delay:?}: {e}"))?;
        points.push(format!("{at}+{}ms", delay.as_millis()));
        outages += run.outages;
    }
    ensure(clean.outages == 0, || "the uninterrupted run saw an outage".into())?;
    Ok(format!(
        "10 SIGKILLs (request+delay: {}) resumed to completed with equivalent traces; {outages} calls retried",
        points.join(", ")
    ))
}

pub fn seed_knob() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let ssc = Ssc::open(config(dir.path())).unwrap();
    seed_demo(&ssc, 10, 0.8, 0).map_err(|e| e.to_string())?;
    let online = ssc.health().online_admins;
    ensure(online.len() == 8, || format!("{} administrations online", online.len()))?;
    Ok("seed_demo(10, 0.8) -> 8 online administrations".into())
}
