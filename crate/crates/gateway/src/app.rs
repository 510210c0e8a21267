use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use ssc_core::audit::{AuditLog, AuditRecord};
use ssc_core::clock::SystemClock;
use ssc_core::cooperation::{ApplicativePortRecord, Backend, Cooperation, CooperationError, GATEWAY_ADMIN};
use ssc_core::envelope::{Algorithm, Envelope, KeyDirectory, KeyDirectoryDocument, Sender, Signer};
use ssc_core::eventbus::{EventBus, EventBusError, EventRecord, PublicationReceipt, Subscription};
use ssc_core::identity::{AccountRecord, Identity, IdentityConfig};
use ssc_core::orchestration::{CooperationInvoker, InstanceRecord, OrchestrationError, Orchestrator, ProcessModel};
use ssc_core::registry::{Binding, CatalogRecord, Registry, RegistryError, ServiceDescriptor};
use ssc_core::store::{Journal, StoreError};
use thiserror::Error;

use crate::config::{framework_seed, ConfigError, GatewayConfig};
use crate::harness::admin::SimulatedAdministration;
use crate::harness::scenario::Scenario;
use crate::seed;
use crate::transport::HttpTransport;

pub const FRAMEWORK_KEY_ID: &str = "framework";
pub const ENGINE_PORT: &str = "orchestrator";
const FRAMEWORK_KEY_FILE: &str = "framework.key";
const PROBE_FILE: &str = ".probe";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("storage corrupt: {0}")]
    StorageCorrupt(String),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("seeding failed: {0}")]
    Seed(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("{0}")]
    Module(String),
}

impl From<StoreError> for GatewayError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Corrupt { .. } => GatewayError::StorageCorrupt(e.to_string()),
            other => GatewayError::Storage(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KeyRecord {
    Added {
        admin_id: String,
        key_id: String,
        public_key: String,
    },
    Revoked {
        admin_id: String,
        key_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighWater {
    pub audit: u64,
    pub events: BTreeMap<String, u64>,
    pub models: usize,
    pub instances: usize,
    pub accounts: usize,
    pub services: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    /// `ok` or `degraded`.
    pub status: String,
    pub modules: BTreeMap<String, bool>,
    pub storage_writable: bool,
    pub online_admins: Vec<String>,
    pub high_water: HighWater,
}

/// The assembled shared services center: every module wired to one audit
/// log, one key directory and one storage directory.
pub struct Ssc {
    pub config: GatewayConfig,
    pub audit: Arc<AuditLog>,
    pub keys: Arc<KeyDirectory>,
    pub framework: Signer,
    pub cooperation: Arc<Cooperation>,
    pub bus: Arc<EventBus>,
    pub orchestrator: Arc<Orchestrator>,
    pub registry: Arc<Registry>,
    pub identity: Arc<Identity>,
    admins: RwLock<BTreeMap<String, Arc<SimulatedAdministration>>>,
    key_journal: Journal,
    pump: Mutex<()>,
}

fn corrupt(store: &str) -> impl Fn(String) -> GatewayError + '_ {
    move |m| GatewayError::StorageCorrupt(format!("{store}: {m}"))
}

fn storage_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ndjson"))
}

impl Ssc {
    /// Opens (or creates) the storage directory, replays every store and
    /// finishes any work interrupted by a crash.
    pub fn open(config: GatewayConfig) -> Result<Arc<Ssc>, GatewayError> {
        config.validate()?;
        let dir = config.storage.clone();
        std::fs::create_dir_all(&dir)
            .map_err(|e| ConfigError::Invalid(format!("storage {} not usable: {e}", dir.display())))?;
        if !probe(&dir) {
            return Err(ConfigError::Invalid(format!("storage {} is not writable", dir.display())).into());
        }

        let (journal, records) = Journal::open::<AuditRecord>(storage_file(&dir, "audit"))?;
        let audit = Arc::new(AuditLog::with_journal(journal, records, Arc::new(SystemClock)).map_err(|e| corrupt("audit")(e.to_string()))?);

        let framework = Signer::from_seed(GATEWAY_ADMIN, FRAMEWORK_KEY_ID, framework_key(&config, &dir)?);
        let keys = Arc::new(match &config.key_directory {
            Some(path) => {
                let doc: KeyDirectoryDocument = seed::read_json(path)?;
                KeyDirectory::from_document(doc).map_err(|e| ConfigError::Invalid(format!("key directory: {e}")))?
            }
            None => KeyDirectory::new(),
        });
        let (key_journal, key_records) = Journal::open::<KeyRecord>(storage_file(&dir, "keys"))?;
        for (i, rec) in key_records.into_iter().enumerate() {
            apply_key_record(&keys, rec).map_err(|e| corrupt("keys")(format!("record {}: {e}", i + 1)))?;
        }
        keys.ensure_signer(&framework)
            .map_err(|e| ConfigError::Invalid(format!("framework key: {e}")))?;

        let cooperation = Arc::new(
            Cooperation::new(keys.clone(), audit.clone())
                .with_timeout(config.sync_timeout())
                .with_external_transport(Arc::new(HttpTransport::new(config.sync_timeout() + Duration::from_secs(30)))),
        );

        let (journal, records) = Journal::open::<AccountRecord>(storage_file(&dir, "accounts"))?;
        let identity_cfg = IdentityConfig {
            token_ttl: chrono::Duration::seconds(config.token_ttl_secs as i64),
            hash: config.password_hash,
            ..Default::default()
        };
        let identity = Arc::new(
            Identity::new(framework.clone(), identity_cfg, audit.clone())
                .recover(journal, records)
                .map_err(|e| corrupt("accounts")(e.to_string()))?,
        );

        let (journal, records) = Journal::open::<CatalogRecord>(storage_file(&dir, "catalog"))?;
        let registry = Arc::new(Registry::recover(journal, records).map_err(|e| corrupt("catalog")(e.to_string()))?);

        let (journal, records) = Journal::open::<EventRecord>(storage_file(&dir, "events"))?;
        let bus = Arc::new(
            EventBus::new(keys.clone(), audit.clone())
                .with_retention_cap(config.retention_cap)
                .recover(journal, records)
                .map_err(|e| corrupt("events")(e.to_string()))?,
        );

        let (journal, records) = Journal::open::<InstanceRecord>(storage_file(&dir, "instances"))?;
        let invoker = Arc::new(CooperationInvoker::new(cooperation.clone(), framework.clone(), ENGINE_PORT));
        let orchestrator = Arc::new(
            Orchestrator::new(invoker, identity.clone(), audit.clone())
                .with_lease(chrono::Duration::seconds(config.task_lease_secs as i64))
                .recover(journal, records)
                .map_err(|e| corrupt("instances")(e.to_string()))?,
        );

        let ssc = Arc::new(Ssc {
            config,
            audit,
            keys,
            framework,
            cooperation,
            bus,
            orchestrator,
            registry,
            identity,
            admins: RwLock::new(BTreeMap::new()),
            key_journal,
            pump: Mutex::new(()),
        });

        if let Some(path) = ssc.config.scenario.clone() {
            Scenario::load(&path)?.install(&ssc)?;
        }
        let seeds = ssc.config.seed.clone();
        if let Some(p) = &seeds.models {
            seed::seed_models(&ssc, &seed::read_json::<Vec<ProcessModel>>(p)?)?;
        }
        if let Some(p) = &seeds.users {
            seed::seed_users(&ssc, &seed::read_json::<Vec<seed::UserSeed>>(p)?)?;
        }
        if let Some(p) = &seeds.catalog {
            seed::seed_catalog(&ssc, &seed::read_json(p)?)?;
        }

        let module = |e: OrchestrationError| GatewayError::Module(e.to_string());
        ssc.orchestrator.reconcile_audit().map_err(module)?;
        ssc.ensure_engine_subscriptions().map_err(|e| GatewayError::Module(e.to_string()))?;
        ssc.orchestrator.resume_all().map_err(module)?;
        ssc.pump_events()?;
        Ok(ssc)
    }

    /// Registers a simulated administration's key and one in-process
    /// applicative port per backend.
    pub fn spawn_admin(&self, admin: SimulatedAdministration) -> Result<Vec<ApplicativePortRecord>, GatewayError> {
        let admin = Arc::new(admin);
        self.keys
            .ensure_signer(&admin.signer)
            .map_err(|e| GatewayError::Module(e.to_string()))?;
        let mut ports = Vec::new();
        for service_id in admin.backends.keys() {
            let (a, keys, sid) = (admin.clone(), self.keys.clone(), service_id.clone());
            let backend: Arc<dyn Backend> = Arc::new(move |req: &Envelope| a.handle(&sid, req, &keys));
            let endpoint = self
                .cooperation
                .inproc()
                .bind(&format!("{}/{}", admin.admin_id, service_id), backend);
            ports.push(
                self.cooperation
                    .register_applicative_port(&admin.admin_id, service_id, &endpoint)
                    .map_err(|e: CooperationError| GatewayError::Module(e.to_string()))?,
            );
        }
        self.admins.write().insert(admin.admin_id.clone(), admin);
        Ok(ports)
    }

    pub fn admin(&self, admin_id: &str) -> Option<Arc<SimulatedAdministration>> {
        self.admins.read().get(admin_id).cloned()
    }

    pub fn add_key(&self, admin_id: &str, key_id: &str, public_key: &[u8]) -> Result<(), GatewayError> {
        self.keys
            .add_key(admin_id, key_id, Algorithm::Ed25519, public_key.to_vec())
            .map_err(|e| GatewayError::Module(e.to_string()))?;
        self.key_journal.append(&KeyRecord::Added {
            admin_id: admin_id.into(),
            key_id: key_id.into(),
            public_key: hex::encode(public_key),
        })?;
        Ok(())
    }

    pub fn revoke_key(&self, admin_id: &str, key_id: &str) -> Result<(), GatewayError> {
        self.keys
            .revoke(admin_id, key_id)
            .map_err(|e| GatewayError::Module(e.to_string()))?;
        self.key_journal.append(&KeyRecord::Revoked {
            admin_id: admin_id.into(),
            key_id: key_id.into(),
        })?;
        Ok(())
    }

    pub fn register_model(&self, model: ProcessModel) -> Result<(String, u32), OrchestrationError> {
        let registered = self.orchestrator.register_model(model)?;
        self.ensure_engine_subscriptions()
            .map_err(|e| OrchestrationError::Storage(StoreError::Encode(e.to_string())))?;
        Ok(registered)
    }

    /// Checks the descriptor's binding against the live modules, then
    /// catalogs it.
    pub fn register_service(&self, descriptor: ServiceDescriptor) -> Result<(), RegistryError> {
        let resolver = |b: &Binding| match b {
            Binding::SyncPort { admin_id, service_id } => self
                .cooperation
                .resolve_route(&ssc_core::envelope::Destination::new(admin_id.clone(), service_id.clone()))
                .is_ok(),
            Binding::EventTopic { name } => self.bus.topic_exists(name),
            Binding::Process { model_id } => self.orchestrator.has_model(model_id),
        };
        self.registry.register_service(descriptor, &resolver)
    }

    /// Publishes and immediately hands the event to waiting instances.
    pub fn publish(&self, event: &Envelope, topic: &str) -> Result<PublicationReceipt, GatewayError> {
        let receipt = self
            .bus
            .publish(event, topic)
            .map_err(|e| GatewayError::Module(e.to_string()))?;
        self.pump_events()?;
        Ok(receipt)
    }

    fn engine_subscriber() -> Sender {
        Sender::new(GATEWAY_ADMIN, ENGINE_PORT)
    }

    fn engine_subscriptions(&self) -> Vec<Subscription> {
        let me = Self::engine_subscriber();
        self.bus.subscriptions().into_iter().filter(|s| s.subscriber == me).collect()
    }

    /// The engine holds one durable subscription per topic that some model
    /// waits on.
    fn ensure_engine_subscriptions(&self) -> Result<(), EventBusError> {
        let _guard = self.pump.lock();
        let have: Vec<String> = self.engine_subscriptions().into_iter().map(|s| s.topic).collect();
        for topic in self.orchestrator.event_topics() {
            if !have.contains(&topic) {
                self.bus.create_topic(&topic)?;
                self.bus.subscribe(Self::engine_subscriber(), &topic, true)?;
            }
        }
        Ok(())
    }

    /// Drains the engine subscriptions into the orchestrator. An event is
    /// acknowledged only after delivery, so a crash in between redelivers
    /// it and the engine's own bookkeeping drops the duplicate.
    pub fn pump_events(&self) -> Result<usize, GatewayError> {
        let _guard = self.pump.lock();
        let mut delivered = 0;
        for sub in self.engine_subscriptions() {
            loop {
                let batch = self
                    .bus
                    .pull(&sub.sub_id, 64)
                    .map_err(|e| GatewayError::Module(e.to_string()))?;
                let Some(last) = batch.last().map(|d| d.global_seq) else {
                    break;
                };
                for d in &batch {
                    self.orchestrator
                        .deliver_event(&sub.topic, &d.envelope)
                        .map_err(|e| GatewayError::Module(e.to_string()))?;
                    delivered += 1;
                }
                self.bus
                    .ack(&sub.sub_id, last)
                    .map_err(|e| GatewayError::Module(e.to_string()))?;
            }
        }
        Ok(delivered)
    }

    pub fn health(&self) -> Health {
        let writable = probe(&self.config.storage);
        let modules: BTreeMap<String, bool> = [
            "envelope",
            "cooperation",
            "eventbus",
            "orchestration",
            "registry",
            "identity",
            "audit",
        ]
        .into_iter()
        .map(|m| (m.to_string(), writable || m == "envelope"))
        .collect();
        Health {
            status: if writable { "ok" } else { "degraded" }.into(),
            modules,
            storage_writable: writable,
            online_admins: self.cooperation.online_admins(),
            high_water: HighWater {
                audit: self.audit.high_water(),
                events: self.bus.high_water(),
                models: self.orchestrator.models().len(),
                instances: self.orchestrator.instances().len(),
                accounts: self.identity.user_count(),
                services: self.registry.service_count(),
            },
        }
    }
}

fn probe(dir: &Path) -> bool {
    let path = dir.join(PROBE_FILE);
    let ok = std::fs::write(&path, b"ok").is_ok();
    let _ = std::fs::remove_file(&path);
    ok
}

fn framework_key(config: &GatewayConfig, dir: &Path) -> Result<[u8; 32], GatewayError> {
    if let Some(k) = &config.framework_key {
        return Ok(framework_seed(k)?);
    }
    let path = dir.join(FRAMEWORK_KEY_FILE);
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(|e| GatewayError::Storage(format!("{}: {e}", path.display())))?;
        return framework_seed(&text).map_err(|e| GatewayError::StorageCorrupt(format!("{}: {e}", path.display())));
    }
    let seed: [u8; 32] = rand::random();
    std::fs::write(&path, hex::encode(seed)).map_err(|e| GatewayError::Storage(format!("{}: {e}", path.display())))?;
    Ok(seed)
}

fn apply_key_record(keys: &KeyDirectory, rec: KeyRecord) -> Result<(), String> {
    match rec {
        KeyRecord::Added {
            admin_id,
            key_id,
            public_key,
        } => {
            let pk = hex::decode(public_key).map_err(|e| e.to_string())?;
            keys.add_key(&admin_id, &key_id, Algorithm::Ed25519, pk)
                .map_err(|e| e.to_string())
        }
        KeyRecord::Revoked { admin_id, key_id } => keys.revoke(&admin_id, &key_id).map_err(|e| e.to_string()),
    }
}
