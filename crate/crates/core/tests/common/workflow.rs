//! Concurrency workloads for the process engine, each checked against a
//! brute-force expectation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ssc_core::audit::AuditLog;
use ssc_core::envelope::{build_envelope, Body, Destination, Envelope, MessageKind, Profile, Sender};
use ssc_core::orchestration::{
    replay, Action, InstanceStatus, InvokeOutcome, InvokeRequest, Invocation, OrchestrationError, Orchestrator,
    ProcessModel, RoleResolver, TaskFilter,
};

pub fn echo_engine() -> Orchestrator {
    let invoker = Arc::new(|r: &InvokeRequest| Invocation {
        request_id: format!("{}-{}", r.instance_id, r.step),
        outcome: InvokeOutcome::Response {
            payload: format!("echo:{}", r.payload),
        },
    });
    let roles: Arc<dyn RoleResolver> = Arc::new(|user: &str, role: &str| role == "clerk" && user.starts_with("clerk"));
    Orchestrator::new(invoker, roles, Arc::new(AuditLog::in_memory()))
}

pub fn parallel_model() -> ProcessModel {
    serde_json::from_value(serde_json::json!({
        "model_id": "parallel", "entry_step": "split",
        "variables": ["ref", "ea", "ra", "decision", "eb"],
        "steps": {
            "split": {"kind": "parallel_split", "branches": ["a1", "b1"], "join": "j"},
            "a1": {"kind": "wait_event", "topic": "topic.a", "correlation_var": "ref", "output_var": "ea", "next": "a2"},
            "a2": {"kind": "service_invoke", "destination": {"admin_id": "x", "service_id": "y"},
                   "payload_template": "${ea}", "output_var": "ra", "next": "j"},
            "b1": {"kind": "human_task", "role": "clerk", "prompt_template": "review ${ref}",
                   "outcome_var": "decision", "next": "b2"},
            "b2": {"kind": "wait_event", "topic": "topic.b", "correlation_var": "ref", "output_var": "eb", "next": "j"},
            "j": {"kind": "join", "arity": 2, "next": "end"},
            "end": {"kind": "terminate", "status": "completed"}
        }
    }))
    .unwrap()
}

pub fn event(topic: &str, correlation: &str, payload: &str) -> Envelope {
    build_envelope(
        Sender::new("publisher", "events"),
        Destination::new("ssc", topic),
        Profile::AsyncEvent,
        MessageKind::Event,
        Body::text(payload),
        Some(correlation.to_string()),
    )
    .unwrap()
}

fn merges(a: &[&str], b: &[&str], prefix: &mut Vec<String>, out: &mut BTreeSet<Vec<String>>) {
    if a.is_empty() && b.is_empty() {
        out.insert(prefix.clone());
        return;
    }
    if let Some((h, t)) = a.split_first() {
        prefix.push(h.to_string());
        merges(t, b, prefix, out);
        prefix.pop();
    }
    if let Some((h, t)) = b.split_first() {
        prefix.push(h.to_string());
        merges(a, t, prefix, out);
        prefix.pop();
    }
}

/// Every step order the parallel model may legally produce: the split, any
/// interleaving of the two branches, then the join exactly once.
pub fn legal_histories() -> BTreeSet<Vec<String>> {
    let mut body = BTreeSet::new();
    merges(&["a1", "a2"], &["b1", "b1", "b2"], &mut Vec::new(), &mut body);
    body.into_iter()
        .map(|mid| {
            let mut h = vec!["split".to_string()];
            h.extend(mid);
            h.extend(["j".to_string(), "end".to_string()]);
            h
        })
        .collect()
}

type Work = Box<dyn Fn(&Orchestrator, &mut StdRng) + Send>;

/// Drives one instance of the parallel model with four racing threads
/// (two event feeders, a clerk, an advancer) and checks the outcome.
pub fn join_trial(seed: u64, legal: &BTreeSet<Vec<String>>) -> Result<(), String> {
    let o = Arc::new(echo_engine());
    let model = parallel_model();
    o.register_model(model.clone()).map_err(|e| e.to_string())?;
    let reference = format!("ref-{seed}");
    let inputs = BTreeMap::from([("ref".to_string(), reference.clone())]);
    let snap = o
        .start_instance("parallel", None, inputs.clone(), None)
        .map_err(|e| e.to_string())?;
    let id = snap.instance_id.clone();
    let deadline = Instant::now() + Duration::from_secs(10);
    let start = Arc::new(Barrier::new(4));

    let spawn = |k: u64, work: Work| {
        let o = o.clone();
        let id = id.clone();
        let start = start.clone();
        thread::spawn(move || {
            let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(k));
            start.wait();
            while Instant::now() < deadline {
                if o.instance_state(&id).map(|s| s.status.is_terminal()).unwrap_or(true) {
                    break;
                }
                work(&o, &mut rng);
                for _ in 0..rng.gen_range(0..50) {
                    std::hint::spin_loop();
                }
                if rng.gen_bool(0.3) {
                    thread::yield_now();
                }
            }
        })
    };

    let ev_a = event("topic.a", &reference, "A");
    let ev_b = event("topic.b", &reference, "B");
    let handles = vec![
        spawn(1, Box::new(move |o, _| {
            o.deliver_event("topic.a", &ev_a).unwrap();
        })),
        spawn(2, Box::new(move |o, _| {
            o.deliver_event("topic.b", &ev_b).unwrap();
        })),
        spawn(3, {
            let id = id.clone();
            Box::new(move |o, rng| {
                let filter = TaskFilter {
                    instance_id: Some(id.clone()),
                    ..Default::default()
                };
                if let Some(t) = o.list_tasks(&filter).into_iter().next() {
                    let user = format!("clerk-{}", rng.gen_range(0..2));
                    if o.claim_task(&t.task_id, &user).is_ok() {
                        let _ = o.complete_task(&t.task_id, &user, "ok");
                    }
                }
            })
        }),
        spawn(4, {
            let id = id.clone();
            Box::new(move |o, _| {
                o.advance(&id).unwrap();
            })
        }),
    ];
    for h in handles {
        h.join().map_err(|_| "worker panicked".to_string())?;
    }

    let done = o.instance_state(&id).map_err(|e| e.to_string())?;
    if done.status != InstanceStatus::Completed {
        return Err(format!("status {:?} after deadline", done.status));
    }
    let steps: Vec<String> = done.history.iter().map(|r| r.step.clone()).collect();
    if !legal.contains(&steps) {
        return Err(format!("illegal history {steps:?}"));
    }
    let count = |pred: &dyn Fn(&Action) -> bool| done.history.iter().filter(|r| pred(&r.action)).count();
    if count(&|a| matches!(a, Action::Joined)) != 1 {
        return Err("join did not execute exactly once".into());
    }
    if count(&|a| matches!(a, Action::EventConsumed { .. })) != 2 {
        return Err("each wait step must consume exactly one event".into());
    }
    if count(&|a| matches!(a, Action::TaskCompleted { .. })) != 1 {
        return Err("task must complete exactly once".into());
    }
    let m = o.model("parallel", Some(done.version)).map_err(|e| e.to_string())?;
    let replayed = replay(&m, inputs, done.created_at, &done.history)?;
    let frontier: Vec<String> = replayed.frontier.iter().cloned().collect();
    if replayed.variables != done.variables || frontier != done.frontier || replayed.status(&m) != done.status {
        return Err("replay diverged from live state".into());
    }
    if done.variables.get("ra").map(String::as_str) != Some("echo:A") {
        return Err(format!("unexpected variables {:?}", done.variables));
    }
    Ok(())
}

/// `n` users race to claim one task, then all race to complete it.
/// Returns (successful claims, successful completions, completed records).
pub fn claim_race(n: usize) -> Result<(usize, usize, usize), String> {
    let o = Arc::new(echo_engine());
    let model: ProcessModel = serde_json::from_value(serde_json::json!({
        "model_id": "approval", "entry_step": "review", "variables": ["decision"],
        "steps": {
            "review": {"kind": "human_task", "role": "clerk", "prompt_template": "approve?",
                       "outcome_var": "decision", "next": "end"},
            "end": {"kind": "terminate", "status": "completed"}
        }
    }))
    .unwrap();
    o.register_model(model).map_err(|e| e.to_string())?;
    let snap = o
        .start_instance("approval", None, BTreeMap::new(), None)
        .map_err(|e| e.to_string())?;
    let task = o.list_tasks(&TaskFilter::default())[0].task_id.clone();
    let race = |op: fn(&Orchestrator, &str, &str) -> Result<(), OrchestrationError>| {
        let barrier = Arc::new(Barrier::new(n));
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let (o, barrier, task) = (o.clone(), barrier.clone(), task.clone());
                thread::spawn(move || {
                    barrier.wait();
                    op(&o, &task, &format!("clerk-{i}")).is_ok()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).filter(|ok| *ok).count()
    };
    let claims = race(|o, t, u| o.claim_task(t, u).map(|_| ()));
    let completions = race(|o, t, u| o.complete_task(t, u, "approve").map(|_| ()));
    let done = o.instance_state(&snap.instance_id).map_err(|e| e.to_string())?;
    let records = done
        .history
        .iter()
        .filter(|r| matches!(r.action, Action::TaskCompleted { .. }))
        .count();
    Ok((claims, completions, records))
}

/// Two instances wait on one topic with distinct correlations; a single
/// event must advance exactly the instances whose correlation matches.
pub fn two_instance_delivery(seed: u64) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let o = echo_engine();
    let model: ProcessModel = serde_json::from_value(serde_json::json!({
        "model_id": "waiter", "entry_step": "wait", "variables": ["ref", "evt"],
        "steps": {
            "wait": {"kind": "wait_event", "topic": "t", "correlation_var": "ref", "output_var": "evt", "next": "end"},
            "end": {"kind": "terminate", "status": "completed"}
        }
    }))
    .unwrap();
    o.register_model(model).map_err(|e| e.to_string())?;
    let refs = [format!("c{}", rng.gen_range(0..3)), format!("c{}", rng.gen_range(0..3))];
    let ids: Vec<String> = refs
        .iter()
        .map(|r| {
            o.start_instance("waiter", None, BTreeMap::from([("ref".to_string(), r.clone())]), None)
                .map(|s| s.instance_id)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let correlation = format!("c{}", rng.gen_range(0..3));
    let mut advanced = o
        .deliver_event("t", &event("t", &correlation, "payload"))
        .map_err(|e| e.to_string())?;
    advanced.sort();
    let mut expected: Vec<String> = ids
        .iter()
        .zip(&refs)
        .filter(|(_, r)| **r == correlation)
        .map(|(id, _)| id.clone())
        .collect();
    expected.sort();
    if advanced != expected {
        return Err(format!("refs {refs:?}, event {correlation}: advanced {advanced:?}, expected {expected:?}"));
    }
    for (id, r) in ids.iter().zip(&refs) {
        let status = o.instance_state(id).map_err(|e| e.to_string())?.status;
        let want = if *r == correlation {
            InstanceStatus::Completed
        } else {
            InstanceStatus::WaitingEvent
        };
        if status != want {
            return Err(format!("instance waiting on {r}: status {status:?}, expected {want:?}"));
        }
    }
    Ok(())
}
