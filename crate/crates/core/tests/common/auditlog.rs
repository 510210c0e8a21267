//! Randomized audit logs and a linear-scan reference for filtered queries.

use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use ssc_core::audit::{AuditFilter, AuditLog, Category, Entry, Outcome};
use ssc_core::clock::{Clock, ManualClock};

pub struct Written {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    pub category: Category,
    pub actor: String,
    pub subject: String,
    pub outcome: Outcome,
}

pub fn random_log<R: Rng>(rng: &mut R, n: usize) -> (AuditLog, Vec<Written>) {
    let clock = ManualClock::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap());
    let mut log = AuditLog::in_memory();
    log.set_clock(Arc::new(clock.clone()));
    let mut written = Vec::with_capacity(n);
    for _ in 0..n {
        clock.advance(Duration::milliseconds(rng.gen_range(0..5)));
        let category = *Category::ALL.choose(rng).unwrap();
        let actor = format!("actor-{}", rng.gen_range(0..4));
        let subject = format!("subject-{}", rng.gen_range(0..6));
        let outcome = if rng.gen_bool(0.3) { Outcome::Fault } else { Outcome::Ok };
        let seq = log
            .record(Entry::new(category, actor.clone(), subject.clone()).outcome(outcome))
            .unwrap();
        written.push(Written {
            seq,
            ts: clock.now(),
            category,
            actor,
            subject,
            outcome,
        });
    }
    (log, written)
}

pub fn random_filter<R: Rng>(rng: &mut R, written: &[Written]) -> AuditFilter {
    let pick_ts = |rng: &mut R| written[rng.gen_range(0..written.len())].ts;
    AuditFilter {
        from: rng.gen_bool(0.3).then(|| pick_ts(rng)),
        to: rng.gen_bool(0.3).then(|| pick_ts(rng)),
        category: rng.gen_bool(0.5).then(|| *Category::ALL.choose(rng).unwrap()),
        actor: rng.gen_bool(0.4).then(|| format!("actor-{}", rng.gen_range(0..5))),
        subject: rng.gen_bool(0.4).then(|| format!("subject-{}", rng.gen_range(0..7))),
        outcome: rng.gen_bool(0.4).then(|| if rng.gen_bool(0.5) { Outcome::Fault } else { Outcome::Ok }),
    }
}

/// Sequence numbers a correct query must return, by linear scan.
pub fn expected(written: &[Written], f: &AuditFilter) -> Vec<u64> {
    let mut out = Vec::new();
    for w in written {
        if let Some(from) = f.from {
            if w.ts < from {
                continue;
            }
        }
        if let Some(to) = f.to {
            if w.ts > to {
                continue;
            }
        }
        if f.category.is_some() && f.category != Some(w.category) {
            continue;
        }
        if f.actor.is_some() && f.actor.as_deref() != Some(w.actor.as_str()) {
            continue;
        }
        if f.subject.is_some() && f.subject.as_deref() != Some(w.subject.as_str()) {
            continue;
        }
        if f.outcome.is_some() && f.outcome != Some(w.outcome) {
            continue;
        }
        out.push(w.seq);
    }
    out
}
