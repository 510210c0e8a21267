//! Event bus workloads checked against a simple queue model.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ssc_core::audit::AuditLog;
use ssc_core::envelope::{
    build_envelope, sign_envelope, Body, Destination, Envelope, KeyDirectory, MessageKind, Profile, Sender, Signer,
};
use ssc_core::eventbus::EventBus;
use ssc_core::store::Journal;

pub const TOPIC: &str = "civil.events";

pub struct Fixture {
    pub keys: Arc<KeyDirectory>,
    pub audit: Arc<AuditLog>,
    pub signers: Vec<Signer>,
}

impl Fixture {
    pub fn new(publishers: usize) -> Self {
        let keys = Arc::new(KeyDirectory::new());
        let signers: Vec<Signer> = (0..publishers)
            .map(|i| Signer::from_seed(format!("pub{i}"), "k1", [i as u8 + 1; 32]))
            .collect();
        for s in &signers {
            keys.ensure_signer(s).unwrap();
        }
        Fixture {
            keys,
            audit: Arc::new(AuditLog::in_memory()),
            signers,
        }
    }

    pub fn event(&self, publisher: usize, text: &str) -> Envelope {
        let s = &self.signers[publisher];
        let e = build_envelope(
            Sender::new(s.admin_id.clone(), "events"),
            Destination::new("ssc", TOPIC),
            Profile::AsyncEvent,
            MessageKind::Event,
            Body::text(text),
            None,
        )
        .unwrap();
        sign_envelope(&e, s, &self.keys).unwrap()
    }

    pub fn bus(&self, journal: Journal, records: Vec<ssc_core::eventbus::EventRecord>) -> EventBus {
        EventBus::new(self.keys.clone(), self.audit.clone())
            .recover(journal, records)
            .unwrap()
    }
}

fn decode(e: &Envelope) -> (usize, usize) {
    let text = String::from_utf8(e.body.payload.clone()).unwrap();
    let (p, i) = text.split_once(':').unwrap();
    (p.parse().unwrap(), i.parse().unwrap())
}

/// Several publishers race; a consumer pulls and acks in random batches
/// while they run. Each publisher's events must arrive in publish order,
/// each exactly once, with consecutive per-publisher sequence numbers.
pub fn concurrent_fifo(seed: u64, publishers: usize, per_publisher: usize) -> Result<(), String> {
    let fx = Arc::new(Fixture::new(publishers));
    let (journal, _) = Journal::memory();
    let bus = Arc::new(fx.bus(journal, Vec::new()));
    bus.create_topic(TOPIC).map_err(|e| e.to_string())?;
    let sub = bus
        .subscribe(Sender::new("consumer", "inbox"), TOPIC, true)
        .map_err(|e| e.to_string())?;

    let handles: Vec<_> = (0..publishers)
        .map(|p| {
            let (fx, bus) = (fx.clone(), bus.clone());
            thread::spawn(move || {
                for i in 0..per_publisher {
                    bus.publish(&fx.event(p, &format!("{p}:{i}")), TOPIC).unwrap();
                }
            })
        })
        .collect();

    let mut rng = StdRng::seed_from_u64(seed);
    let total = publishers * per_publisher;
    let mut seen: BTreeMap<usize, Vec<(usize, u64)>> = BTreeMap::new();
    let mut last_global = 0;
    let mut received = 0;
    while received < total {
        let batch = bus.pull(&sub.sub_id, rng.gen_range(1..8)).map_err(|e| e.to_string())?;
        if batch.is_empty() {
            thread::yield_now();
            continue;
        }
        // acking only part of a batch makes the rest come back next pull
        let keep = rng.gen_range(1..=batch.len());
        for d in &batch[..keep] {
            if d.global_seq <= last_global {
                return Err(format!("global_seq {} after {last_global}", d.global_seq));
            }
            last_global = d.global_seq;
            let (p, i) = decode(&d.envelope);
            seen.entry(p).or_default().push((i, d.publisher_seq));
            received += 1;
        }
        bus.ack(&sub.sub_id, batch[keep - 1].global_seq).map_err(|e| e.to_string())?;
    }
    for h in handles {
        h.join().map_err(|_| "publisher panicked".to_string())?;
    }
    if !bus.pull(&sub.sub_id, 10).map_err(|e| e.to_string())?.is_empty() {
        return Err("events left over after all were acked".into());
    }
    for p in 0..publishers {
        let got = seen.remove(&p).unwrap_or_default();
        let expected: Vec<(usize, u64)> = (0..per_publisher).map(|i| (i, i as u64 + 1)).collect();
        if got != expected {
            return Err(format!("publisher {p} observed {got:?}"));
        }
    }
    Ok(())
}

/// Random publish/pull/ack/restart program on a durable subscription.
/// Every event published after subscribing must be delivered at least
/// once, and nothing at or below an acknowledged position may reappear.
pub fn at_least_once_across_restarts(seed: u64, steps: usize) -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let fx = Fixture::new(2);
    let (journal, buf) = Journal::memory();
    let mut bus = fx.bus(journal, Vec::new());
    bus.create_topic(TOPIC).map_err(|e| e.to_string())?;
    let sub = bus
        .subscribe(Sender::new("consumer", "inbox"), TOPIC, true)
        .map_err(|e| e.to_string())?;

    let mut published: BTreeSet<String> = BTreeSet::new();
    let mut delivered: BTreeSet<String> = BTreeSet::new();
    let mut acked_ids: BTreeSet<String> = BTreeSet::new();
    let mut pending: Vec<(u64, String)> = Vec::new();
    let mut acked_upto = 0u64;
    let mut restarts = 0;

    let drain_check = |batch: &[ssc_core::eventbus::Delivery],
                           acked_upto: u64,
                           delivered: &mut BTreeSet<String>,
                           acked_ids: &BTreeSet<String>|
     -> Result<(), String> {
        for d in batch {
            if d.global_seq <= acked_upto || acked_ids.contains(&d.envelope.envelope_id) {
                return Err(format!("acked event {} redelivered", d.global_seq));
            }
            delivered.insert(d.envelope.envelope_id.clone());
        }
        Ok(())
    };

    for n in 0..steps {
        match rng.gen_range(0..10) {
            0..=3 => {
                let e = fx.event(rng.gen_range(0..2), &format!("0:{n}"));
                bus.publish(&e, TOPIC).map_err(|e| e.to_string())?;
                published.insert(e.envelope_id);
            }
            4..=6 => {
                let batch = bus.pull(&sub.sub_id, rng.gen_range(1..5)).map_err(|e| e.to_string())?;
                drain_check(&batch, acked_upto, &mut delivered, &acked_ids)?;
                pending = batch.iter().map(|d| (d.global_seq, d.envelope.envelope_id.clone())).collect();
            }
            7 | 8 => {
                if !pending.is_empty() {
                    let k = rng.gen_range(0..pending.len());
                    let upto = pending[k].0;
                    if upto > acked_upto {
                        bus.ack(&sub.sub_id, upto).map_err(|e| e.to_string())?;
                        acked_upto = upto;
                        acked_ids.extend(pending[..=k].iter().map(|(_, id)| id.clone()));
                    }
                    pending.clear();
                }
            }
            _ => {
                drop(bus);
                let records = Journal::replay_memory(&buf).map_err(|e| e.to_string())?;
                bus = fx.bus(Journal::from_buffer(buf.clone()), records);
                restarts += 1;
                pending.clear();
                let cursor = bus.subscription(&sub.sub_id).map_err(|e| e.to_string())?.cursor;
                if cursor != acked_upto {
                    return Err(format!("cursor {cursor} after restart, acked {acked_upto}"));
                }
            }
        }
    }
    loop {
        let batch = bus.pull(&sub.sub_id, 16).map_err(|e| e.to_string())?;
        let Some(last) = batch.last() else { break };
        drain_check(&batch, acked_upto, &mut delivered, &acked_ids)?;
        acked_upto = last.global_seq;
        bus.ack(&sub.sub_id, acked_upto).map_err(|e| e.to_string())?;
    }
    if delivered != published {
        let missing: Vec<_> = published.difference(&delivered).collect();
        return Err(format!("{} restarts, never delivered: {missing:?}", restarts));
    }
    Ok(())
}
