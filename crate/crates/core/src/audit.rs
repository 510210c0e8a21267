//! Traceability log for every framework action.
//!
//! Records are totally ordered by a gap-free sequence number assigned under
//! a single lock, and are appended to the audit journal before they become
//! visible to queries. Callers record before acknowledging the audited
//! operation, so a crash can over-report an attempt but never under-report a
//! completed one.

use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{self, Clock, SystemClock};
use crate::store::{Journal, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    ExchangeRequest,
    ExchangeResponse,
    Publish,
    Deliver,
    OrchestrationTransition,
    TaskEvent,
    AuthEvent,
    Error,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::ExchangeRequest,
        Category::ExchangeResponse,
        Category::Publish,
        Category::Deliver,
        Category::OrchestrationTransition,
        Category::TaskEvent,
        Category::AuthEvent,
        Category::Error,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::ExchangeRequest => "exchange_request",
            Category::ExchangeResponse => "exchange_response",
            Category::Publish => "publish",
            Category::Deliver => "deliver",
            Category::OrchestrationTransition => "orchestration_transition",
            Category::TaskEvent => "task_event",
            Category::AuthEvent => "auth_event",
            Category::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Fault,
}

impl Outcome {
    pub fn parse(s: &str) -> Option<Outcome> {
        match s {
            "ok" => Some(Outcome::Ok),
            "fault" => Some(Outcome::Fault),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    #[serde(with = "clock::millis")]
    pub ts: DateTime<Utc>,
    pub category: Category,
    pub correlation_id: Option<String>,
    pub actor: String,
    pub subject: String,
    pub outcome: Outcome,
    pub detail: String,
}

/// Everything about a record except what the log assigns.
#[derive(Debug, Clone)]
pub struct Entry {
    pub category: Category,
    pub correlation_id: Option<String>,
    pub actor: String,
    pub subject: String,
    pub outcome: Outcome,
    pub detail: String,
}

impl Entry {
    pub fn new(category: Category, actor: impl Into<String>, subject: impl Into<String>) -> Self {
        Entry {
            category,
            correlation_id: None,
            actor: actor.into(),
            subject: subject.into(),
            outcome: Outcome::Ok,
            detail: String::new(),
        }
    }

    pub fn correlation(mut self, id: impl Into<String>) -> Self {
        self.correlation_id = Some(id.into());
        self
    }

    pub fn maybe_correlation(mut self, id: Option<String>) -> Self {
        self.correlation_id = id;
        self
    }

    pub fn fault(mut self) -> Self {
        self.outcome = Outcome::Fault;
        self
    }

    pub fn outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = outcome;
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    StorageFailure(#[from] StoreError),
    #[error("audit journal out of order at seq {found}, expected {expected}")]
    SequenceGap { expected: u64, found: u64 },
}

/// Conjunctive query filter. Absent fields match everything.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditFilter {
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
    pub category: Option<Category>,
    pub actor: Option<String>,
    pub subject: Option<String>,
    pub outcome: Option<Outcome>,
}

impl AuditFilter {
    pub fn matches(&self, r: &AuditRecord) -> bool {
        self.from.is_none_or(|f| r.ts >= f)
            && self.to.is_none_or(|t| r.ts <= t)
            && self.category.is_none_or(|c| r.category == c)
            && self.actor.as_ref().is_none_or(|a| &r.actor == a)
            && self.subject.as_ref().is_none_or(|s| &r.subject == s)
            && self.outcome.is_none_or(|o| r.outcome == o)
    }
}

const SECRET_KEYS: [&str; 6] = ["password", "secret", "private_key", "signing_key", "token", "hash"];

/// Masks `key=value` / `key: value` fragments whose key names credential
/// material. Detail strings are free text, so this is a last line of defence
/// in addition to callers not passing secrets in the first place.
pub fn redact(detail: &str) -> String {
    let lower = detail.to_ascii_lowercase();
    let mut out = String::with_capacity(detail.len());
    let mut i = 0;
    'outer: while i < detail.len() {
        for key in SECRET_KEYS {
            if !lower[i..].starts_with(key) {
                continue;
            }
            let after = &detail[i + key.len()..];
            if !(after.starts_with('=') || after.starts_with(':')) {
                continue;
            }
            let sep_len = 1 + after[1..].len() - after[1..].trim_start().len();
            let value = &after[sep_len..];
            let end = value
                .find(|c: char| c.is_whitespace() || c == ',' || c == ';')
                .unwrap_or(value.len());
            out.push_str(&detail[i..i + key.len() + sep_len]);
            out.push_str("***");
            i += key.len() + sep_len + end;
            continue 'outer;
        }
        let ch = detail[i..].chars().next().unwrap();
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

pub struct AuditLog {
    records: RwLock<Vec<AuditRecord>>,
    append_lock: Mutex<()>,
    journal: Option<Journal>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuditLog")
            .field("len", &self.records.read().len())
            .finish()
    }
}

impl AuditLog {
    /// Volatile log, for tests and tools.
    pub fn in_memory() -> Self {
        AuditLog {
            records: RwLock::new(Vec::new()),
            append_lock: Mutex::new(()),
            journal: None,
            clock: Arc::new(SystemClock),
        }
    }

    /// Log backed by a journal, seeded with its replayed records.
    pub fn with_journal(
        journal: Journal,
        replayed: Vec<AuditRecord>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AuditError> {
        for (i, r) in replayed.iter().enumerate() {
            let expected = i as u64 + 1;
            if r.seq != expected {
                return Err(AuditError::SequenceGap {
                    expected,
                    found: r.seq,
                });
            }
        }
        Ok(AuditLog {
            records: RwLock::new(replayed),
            append_lock: Mutex::new(()),
            journal: Some(journal),
            clock,
        })
    }

    pub fn set_clock(&mut self, clock: Arc<dyn Clock>) {
        self.clock = clock;
    }

    /// Appends a record and returns its sequence number. The record is
    /// durable before this returns.
    pub fn record(&self, entry: Entry) -> Result<u64, AuditError> {
        let _guard = self.append_lock.lock();
        let seq = self.records.read().len() as u64 + 1;
        let record = AuditRecord {
            seq,
            ts: clock::to_millis(self.clock.now()),
            category: entry.category,
            correlation_id: entry.correlation_id,
            actor: entry.actor,
            subject: entry.subject,
            outcome: entry.outcome,
            detail: redact(&entry.detail),
        };
        if let Some(journal) = &self.journal {
            journal.append(&record)?;
        }
        self.records.write().push(record);
        Ok(seq)
    }

    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditRecord> {
        self.records
            .read()
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect()
    }

    /// All records for one correlation id, in sequence order.
    pub fn trace(&self, correlation_id: &str) -> Vec<AuditRecord> {
        self.records
            .read()
            .iter()
            .filter(|r| r.correlation_id.as_deref() == Some(correlation_id))
            .cloned()
            .collect()
    }

    /// Highest sequence number written so far (0 when empty).
    pub fn high_water(&self) -> u64 {
        self.records.read().len() as u64
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
