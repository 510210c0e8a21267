//! Publish & subscribe event notification.
//!
//! Publishers and subscribers never meet: a publish is acknowledged as soon
//! as the event is journaled, whatever the number or state of subscribers.
//! Delivery is pull-based with explicit acknowledgement (at-least-once).
//!
//! Ordering: every event gets a per-topic `global_seq` and a
//! per-(topic, publisher) `seq`; pulls return events in `global_seq` order,
//! which preserves each publisher's own order.
//!
//! Locking: subscription lock before topic lock, never the reverse.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::audit::{AuditError, AuditLog, Category, Entry};
use crate::envelope::{
    parse_envelope, serialize_envelope, verify_envelope, Envelope, KeyDirectory, MessageKind, Profile, Sender,
};
use crate::store::{Journal, StoreError};

pub const DEFAULT_RETENTION_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub name: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub sub_id: String,
    pub subscriber: Sender,
    pub topic: String,
    pub durable: bool,
    /// Highest acknowledged `global_seq`.
    pub cursor: u64,
    /// `global_seq` of the last event published before the subscription
    /// existed; only later events are delivered.
    pub start_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicationReceipt {
    pub topic: String,
    pub publisher: String,
    pub envelope_id: String,
    pub seq: u64,
    pub global_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub global_seq: u64,
    pub publisher_seq: u64,
    pub envelope: Envelope,
}

#[derive(Debug, Error)]
pub enum EventBusError {
    #[error("invalid topic name `{0}`")]
    InvalidTopicName(String),
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("unknown subscription `{0}`")]
    UnknownSubscription(String),
    #[error("event rejected: {0}")]
    VerificationFailed(String),
    #[error("cursor regression: ack {requested} is below cursor {cursor}")]
    CursorRegression { cursor: u64, requested: u64 },
    #[error("ack {requested} is beyond the last delivered event {delivered}")]
    AckBeyondDelivered { delivered: u64, requested: u64 },
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("corrupt event journal: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventRecord {
    TopicCreated {
        name: String,
        created_at: DateTime<Utc>,
    },
    Published {
        topic: String,
        global_seq: u64,
        publisher: String,
        seq: u64,
        envelope: String,
    },
    Subscribed {
        subscription: Subscription,
    },
    Acked {
        sub_id: String,
        up_to: u64,
    },
}

/// `[a-z0-9_]+(\.[a-z0-9_]+)*`
pub fn valid_topic_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .split('.')
            .all(|seg| !seg.is_empty() && seg.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_'))
}

struct StoredEvent {
    global_seq: u64,
    publisher_seq: u64,
    envelope: Envelope,
}

struct TopicState {
    topic: Topic,
    log: VecDeque<StoredEvent>,
    last_global: u64,
    publisher_seq: HashMap<String, u64>,
    receipts: HashMap<String, PublicationReceipt>,
    /// Effective position (max of cursor and start) of each subscription.
    positions: BTreeMap<String, u64>,
}

impl TopicState {
    fn new(topic: Topic) -> Self {
        TopicState {
            topic,
            log: VecDeque::new(),
            last_global: 0,
            publisher_seq: HashMap::new(),
            receipts: HashMap::new(),
            positions: BTreeMap::new(),
        }
    }

    fn append(&mut self, publisher: &str, envelope: Envelope) -> PublicationReceipt {
        self.last_global += 1;
        let seq = self.publisher_seq.entry(publisher.to_string()).or_insert(0);
        *seq += 1;
        let receipt = PublicationReceipt {
            topic: self.topic.name.clone(),
            publisher: publisher.to_string(),
            envelope_id: envelope.envelope_id.clone(),
            seq: *seq,
            global_seq: self.last_global,
        };
        self.receipts.insert(envelope.envelope_id.clone(), receipt.clone());
        self.log.push_back(StoredEvent {
            global_seq: self.last_global,
            publisher_seq: *seq,
            envelope,
        });
        receipt
    }

    /// Drops events every subscription has moved past, then enforces the
    /// cap. Returns the number of events evicted by the cap.
    fn prune(&mut self, cap: usize) -> usize {
        let floor = self.positions.values().copied().min().unwrap_or(self.last_global);
        while self.log.front().is_some_and(|e| e.global_seq <= floor) {
            self.log.pop_front();
        }
        let mut evicted = 0;
        while self.log.len() > cap {
            self.log.pop_front();
            evicted += 1;
        }
        evicted
    }
}

struct SubState {
    sub: Subscription,
    delivered_high: u64,
}

pub struct EventBus {
    topics: RwLock<BTreeMap<String, Arc<Mutex<TopicState>>>>,
    subs: RwLock<BTreeMap<String, Arc<Mutex<SubState>>>>,
    keys: Arc<KeyDirectory>,
    audit: Arc<AuditLog>,
    journal: Option<Journal>,
    retention_cap: usize,
}

impl EventBus {
    pub fn new(keys: Arc<KeyDirectory>, audit: Arc<AuditLog>) -> Self {
        EventBus {
            topics: RwLock::new(BTreeMap::new()),
            subs: RwLock::new(BTreeMap::new()),
            keys,
            audit,
            journal: None,
            retention_cap: DEFAULT_RETENTION_CAP,
        }
    }

    pub fn with_retention_cap(mut self, cap: usize) -> Self {
        self.retention_cap = cap.max(1);
        self
    }

    /// Rebuilds the bus from journaled records and keeps appending to
    /// `journal`. Non-durable subscriptions are never journaled, so they do
    /// not survive.
    pub fn recover(mut self, journal: Journal, records: Vec<EventRecord>) -> Result<Self, EventBusError> {
        for (i, rec) in records.into_iter().enumerate() {
            let at = |what: &str| EventBusError::Corrupt(format!("record {}: {what}", i + 1));
            match rec {
                EventRecord::TopicCreated { name, created_at } => {
                    self.topics
                        .write()
                        .entry(name.clone())
                        .or_insert_with(|| Arc::new(Mutex::new(TopicState::new(Topic { name, created_at }))));
                }
                EventRecord::Published {
                    topic,
                    global_seq,
                    publisher,
                    seq,
                    envelope,
                } => {
                    let state = self.topic_state(&topic).map_err(|_| at("publish to unknown topic"))?;
                    let envelope = parse_envelope(envelope.as_bytes()).map_err(|e| at(&e.to_string()))?;
                    let mut t = state.lock();
                    let receipt = t.append(&publisher, envelope);
                    if receipt.global_seq != global_seq || receipt.seq != seq {
                        return Err(at("sequence numbers out of order"));
                    }
                    t.prune(self.retention_cap);
                }
                EventRecord::Subscribed { subscription } => {
                    let state = self.topic_state(&subscription.topic).map_err(|_| at("subscription to unknown topic"))?;
                    state
                        .lock()
                        .positions
                        .insert(subscription.sub_id.clone(), subscription.cursor.max(subscription.start_after));
                    self.subs.write().insert(
                        subscription.sub_id.clone(),
                        Arc::new(Mutex::new(SubState {
                            delivered_high: subscription.cursor,
                            sub: subscription,
                        })),
                    );
                }
                EventRecord::Acked { sub_id, up_to } => {
                    let sub = self.sub_state(&sub_id).map_err(|_| at("ack for unknown subscription"))?;
                    let mut s = sub.lock();
                    s.sub.cursor = s.sub.cursor.max(up_to);
                    s.delivered_high = s.delivered_high.max(up_to);
                    let position = s.sub.cursor.max(s.sub.start_after);
                    let state = self.topic_state(&s.sub.topic).map_err(|_| at("unknown topic"))?;
                    let mut t = state.lock();
                    t.positions.insert(sub_id, position);
                    t.prune(self.retention_cap);
                }
            }
        }
        self.journal = Some(journal);
        Ok(self)
    }

    fn persist(&self, rec: &EventRecord) -> Result<(), EventBusError> {
        if let Some(j) = &self.journal {
            j.append(rec)?;
        }
        Ok(())
    }

    fn topic_state(&self, name: &str) -> Result<Arc<Mutex<TopicState>>, EventBusError> {
        self.topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| EventBusError::UnknownTopic(name.to_string()))
    }

    fn sub_state(&self, sub_id: &str) -> Result<Arc<Mutex<SubState>>, EventBusError> {
        self.subs
            .read()
            .get(sub_id)
            .cloned()
            .ok_or_else(|| EventBusError::UnknownSubscription(sub_id.to_string()))
    }

    /// Creates a topic; creating an existing one returns it unchanged.
    pub fn create_topic(&self, name: &str) -> Result<Topic, EventBusError> {
        if !valid_topic_name(name) {
            return Err(EventBusError::InvalidTopicName(name.to_string()));
        }
        let mut topics = self.topics.write();
        if let Some(t) = topics.get(name) {
            return Ok(t.lock().topic.clone());
        }
        let topic = Topic {
            name: name.to_string(),
            created_at: Utc::now(),
        };
        self.persist(&EventRecord::TopicCreated {
            name: topic.name.clone(),
            created_at: topic.created_at,
        })?;
        topics.insert(name.to_string(), Arc::new(Mutex::new(TopicState::new(topic.clone()))));
        Ok(topic)
    }

    pub fn topic_exists(&self, name: &str) -> bool {
        self.topics.read().contains_key(name)
    }

    pub fn topics(&self) -> Vec<Topic> {
        self.topics.read().values().map(|t| t.lock().topic.clone()).collect()
    }

    pub fn subscribe(&self, subscriber: Sender, topic: &str, durable: bool) -> Result<Subscription, EventBusError> {
        let state = self.topic_state(topic)?;
        let mut t = state.lock();
        let sub = Subscription {
            sub_id: Uuid::new_v4().to_string(),
            subscriber,
            topic: topic.to_string(),
            durable,
            cursor: 0,
            start_after: t.last_global,
        };
        if durable {
            self.persist(&EventRecord::Subscribed {
                subscription: sub.clone(),
            })?;
        }
        t.positions.insert(sub.sub_id.clone(), sub.start_after);
        self.subs.write().insert(
            sub.sub_id.clone(),
            Arc::new(Mutex::new(SubState {
                sub: sub.clone(),
                delivered_high: 0,
            })),
        );
        Ok(sub)
    }

    pub fn subscription(&self, sub_id: &str) -> Result<Subscription, EventBusError> {
        Ok(self.sub_state(sub_id)?.lock().sub.clone())
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.subs.read().values().map(|s| s.lock().sub.clone()).collect()
    }

    /// Stores a signed event. Republishing an envelope id that is already
    /// on the topic returns the original receipt.
    pub fn publish(&self, event: &Envelope, topic: &str) -> Result<PublicationReceipt, EventBusError> {
        let state = self.topic_state(topic)?;
        if event.message_kind != MessageKind::Event || event.profile != Profile::AsyncEvent {
            return Err(EventBusError::VerificationFailed(format!(
                "expected an async_event event, got {} {}",
                event.profile.as_str(),
                event.message_kind.as_str()
            )));
        }
        let report = verify_envelope(event, &self.keys);
        if !report.valid {
            return Err(EventBusError::VerificationFailed(report.reason.as_str().to_string()));
        }
        let publisher = event.sender.admin_id.clone();
        let correlation = event.correlation_id.clone().unwrap_or_else(|| event.envelope_id.clone());
        let audit_entry = |detail: String| {
            Entry::new(Category::Publish, publisher.clone(), topic)
                .correlation(correlation.clone())
                .detail(detail)
        };

        let mut t = state.lock();
        if let Some(receipt) = t.receipts.get(&event.envelope_id).cloned() {
            drop(t);
            self.audit.record(audit_entry(format!(
                "envelope={} global_seq={} duplicate",
                event.envelope_id, receipt.global_seq
            )))?;
            return Ok(receipt);
        }
        let global_seq = t.last_global + 1;
        let seq = t.publisher_seq.get(&publisher).copied().unwrap_or(0) + 1;
        self.audit.record(audit_entry(format!(
            "envelope={} global_seq={global_seq} seq={seq}",
            event.envelope_id
        )))?;
        self.persist(&EventRecord::Published {
            topic: topic.to_string(),
            global_seq,
            publisher: publisher.clone(),
            seq,
            envelope: String::from_utf8(serialize_envelope(event)).expect("canonical form is UTF-8"),
        })?;
        let receipt = t.append(&publisher, event.clone());
        let evicted = t.prune(self.retention_cap);
        drop(t);
        if evicted > 0 {
            self.audit.record(
                Entry::new(Category::Error, "ssc", topic)
                    .fault()
                    .detail(format!("retention cap {} reached, evicted {evicted} oldest events", self.retention_cap)),
            )?;
        }
        Ok(receipt)
    }

    /// Up to `max` unacknowledged events, oldest first. Pulling again
    /// without acknowledging returns the same events.
    pub fn pull(&self, sub_id: &str, max: usize) -> Result<Vec<Delivery>, EventBusError> {
        let sub = self.sub_state(sub_id)?;
        let mut s = sub.lock();
        let from = s.sub.cursor.max(s.sub.start_after);
        let state = self.topic_state(&s.sub.topic)?;
        let batch: Vec<Delivery> = {
            let t = state.lock();
            let start = t.log.partition_point(|e| e.global_seq <= from);
            t.log
                .range(start..)
                .take(max)
                .map(|e| Delivery {
                    global_seq: e.global_seq,
                    publisher_seq: e.publisher_seq,
                    envelope: e.envelope.clone(),
                })
                .collect()
        };
        if let (Some(first), Some(last)) = (batch.first(), batch.last()) {
            s.delivered_high = s.delivered_high.max(last.global_seq);
            self.audit.record(
                Entry::new(Category::Deliver, s.sub.subscriber.admin_id.clone(), s.sub.topic.clone()).detail(
                    format!("sub={} count={} range={}..={}", sub_id, batch.len(), first.global_seq, last.global_seq),
                ),
            )?;
        }
        Ok(batch)
    }

    /// Advances the subscription cursor to `up_to`.
    pub fn ack(&self, sub_id: &str, up_to: u64) -> Result<(), EventBusError> {
        let sub = self.sub_state(sub_id)?;
        let mut s = sub.lock();
        if up_to < s.sub.cursor {
            return Err(EventBusError::CursorRegression {
                cursor: s.sub.cursor,
                requested: up_to,
            });
        }
        if up_to == s.sub.cursor {
            return Ok(());
        }
        let delivered = s.delivered_high.max(s.sub.cursor);
        if up_to > delivered {
            return Err(EventBusError::AckBeyondDelivered {
                delivered,
                requested: up_to,
            });
        }
        if s.sub.durable {
            self.persist(&EventRecord::Acked {
                sub_id: sub_id.to_string(),
                up_to,
            })?;
        }
        s.sub.cursor = up_to;
        let position = s.sub.cursor.max(s.sub.start_after);
        let state = self.topic_state(&s.sub.topic)?;
        let mut t = state.lock();
        t.positions.insert(sub_id.to_string(), position);
        t.prune(self.retention_cap);
        Ok(())
    }

    /// Number of events currently retained on `topic`.
    pub fn retained(&self, topic: &str) -> Result<usize, EventBusError> {
        Ok(self.topic_state(topic)?.lock().log.len())
    }

    /// Highest `global_seq` assigned per topic.
    pub fn high_water(&self) -> BTreeMap<String, u64> {
        self.topics
            .read()
            .iter()
            .map(|(k, v)| (k.clone(), v.lock().last_global))
            .collect()
    }
}
