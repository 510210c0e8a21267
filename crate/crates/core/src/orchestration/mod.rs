//! Process engine: versioned models, instances, and human tasks.
//!
//! An instance's state is never stored directly. It is the fold of its
//! transition history over the model (see [`state`]), and every executed
//! step appends exactly one record. Each record is journaled before it
//! becomes visible, so a restart resumes from the last durable transition.

pub mod expr;
pub mod model;
pub mod state;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{Diagnostic, ProcessModel, StepDef, TerminalStatus};
pub use state::{replay, Action, InstanceState, InstanceStatus, InvokeOutcome, TransitionRecord};

use crate::audit::{AuditError, AuditFilter, AuditLog, Category, Entry, Outcome};
use crate::clock::{self, Clock, SystemClock};
use crate::cooperation::{Cooperation, FaultCode, FaultInfo};
use crate::envelope::{build_envelope, sign_envelope, Body, Destination, Envelope, MessageKind, Profile, Sender, Signer};
use crate::identity::Identity;
use crate::store::{Journal, StoreError};
use expr::Predicate;

pub const DEFAULT_TASK_LEASE_MINUTES: i64 = 15;
const ENGINE_ACTOR: &str = "orchestrator";
const MAX_STEPS_PER_PASS: usize = 10_000;

/// Answers whether a user holds a role.
pub trait RoleResolver: Send + Sync {
    fn has_role(&self, user_id: &str, role: &str) -> bool;
}

impl<F: Fn(&str, &str) -> bool + Send + Sync> RoleResolver for F {
    fn has_role(&self, user_id: &str, role: &str) -> bool {
        self(user_id, role)
    }
}

impl RoleResolver for Identity {
    fn has_role(&self, user_id: &str, role: &str) -> bool {
        Identity::has_role(self, user_id, role)
    }
}

#[derive(Debug, Clone)]
pub struct InvokeRequest {
    pub instance_id: String,
    pub step: String,
    pub correlation_id: String,
    pub destination: Destination,
    pub content_type: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub request_id: String,
    pub outcome: InvokeOutcome,
}

/// Performs the synchronous call behind a service_invoke step.
pub trait Invoker: Send + Sync {
    fn invoke(&self, request: &InvokeRequest) -> Invocation;
}

impl<F: Fn(&InvokeRequest) -> Invocation + Send + Sync> Invoker for F {
    fn invoke(&self, request: &InvokeRequest) -> Invocation {
        self(request)
    }
}

/// Invokes services through the cooperation gateway with signed requests.
pub struct CooperationInvoker {
    cooperation: Arc<Cooperation>,
    signer: Signer,
    port_id: String,
}

impl CooperationInvoker {
    pub fn new(cooperation: Arc<Cooperation>, signer: Signer, port_id: impl Into<String>) -> Self {
        CooperationInvoker {
            cooperation,
            signer,
            port_id: port_id.into(),
        }
    }

    fn request(&self, r: &InvokeRequest) -> Result<Envelope, FaultInfo> {
        let env = build_envelope(
            Sender::new(self.signer.admin_id.clone(), self.port_id.clone()),
            r.destination.clone(),
            Profile::Sync,
            MessageKind::Request,
            Body::new(r.content_type.clone(), r.payload.clone().into_bytes()),
            Some(r.correlation_id.clone()),
        )
        .map_err(|e| FaultInfo::new(FaultCode::NoRoute, e.to_string()))?;
        sign_envelope(&env, &self.signer, self.cooperation.keys())
            .map_err(|e| FaultInfo::new(FaultCode::VerificationFailed, e.to_string()))
    }
}

impl Invoker for CooperationInvoker {
    fn invoke(&self, r: &InvokeRequest) -> Invocation {
        let request = match self.request(r) {
            Ok(env) => env,
            Err(f) => {
                return Invocation {
                    request_id: String::new(),
                    outcome: InvokeOutcome::Fault {
                        code: f.code,
                        detail: f.detail,
                    },
                }
            }
        };
        let response = self.cooperation.exchange_sync(&request, None);
        let outcome = match FaultInfo::from_envelope(&response) {
            Some(f) => InvokeOutcome::Fault {
                code: f.code,
                detail: f.detail,
            },
            None => InvokeOutcome::Response {
                payload: response.body.payload_text(),
            },
        };
        Invocation {
            request_id: request.envelope_id,
            outcome,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Claimed,
    Completed,
}

impl TaskState {
    pub fn parse(s: &str) -> Option<TaskState> {
        match s {
            "open" => Some(TaskState::Open),
            "claimed" => Some(TaskState::Claimed),
            "completed" => Some(TaskState::Completed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanTask {
    pub task_id: String,
    pub instance_id: String,
    pub model_id: String,
    pub step: String,
    pub role: String,
    pub prompt: String,
    pub state: TaskState,
    pub claimant: Option<String>,
    #[serde(default, with = "opt_millis")]
    pub lease_expiry: Option<DateTime<Utc>>,
    pub outcome: Option<String>,
}

mod opt_millis {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(t) => s.serialize_some(&crate::clock::format_millis(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateTime<Utc>>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|raw| {
                DateTime::parse_from_rfc3339(&raw)
                    .map(|t| t.with_timezone(&Utc))
                    .map_err(serde::de::Error::custom)
            })
            .transpose()
    }
}

impl HumanTask {
    fn lease_live(&self, now: DateTime<Utc>) -> bool {
        self.lease_expiry.is_some_and(|t| now < t)
    }

    /// The task as seen at `now`: a claim whose lease ran out reads as open.
    fn view(&self, now: DateTime<Utc>) -> HumanTask {
        let mut t = self.clone();
        if t.state == TaskState::Claimed && !t.lease_live(now) {
            t.state = TaskState::Open;
            t.claimant = None;
            t.lease_expiry = None;
        }
        t
    }
}

#[derive(Debug, Clone, Default)]
pub struct TaskFilter {
    pub role: Option<String>,
    pub state: Option<TaskState>,
    pub instance_id: Option<String>,
}

/// A consistent copy of an instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessInstance {
    pub instance_id: String,
    pub model_id: String,
    pub version: u32,
    pub correlation_id: Option<String>,
    pub variables: BTreeMap<String, String>,
    pub frontier: Vec<String>,
    pub status: InstanceStatus,
    pub history: Vec<TransitionRecord>,
    #[serde(with = "clock::millis")]
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("model validation failed: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    ValidationFailed(Vec<Diagnostic>),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{model_id}` has no version {version}")]
    UnknownVersion { model_id: String, version: u32 },
    #[error("input `{variable}` is {reason}")]
    MissingInput { variable: String, reason: &'static str },
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task `{task_id}` is claimed by `{claimant}`")]
    AlreadyClaimed { task_id: String, claimant: String },
    #[error("user `{user_id}` lacks role `{role}`")]
    RoleDenied { user_id: String, role: String },
    #[error("user `{user_id}` has not claimed task `{task_id}`")]
    NotClaimant { task_id: String, user_id: String },
    #[error("task `{0}` is already completed")]
    AlreadyCompleted(String),
    #[error("corrupt orchestration journal: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InstanceRecord {
    ModelRegistered {
        model: ProcessModel,
    },
    InstanceCreated {
        instance_id: String,
        model_id: String,
        version: u32,
        correlation_id: Option<String>,
        inputs: BTreeMap<String, String>,
        #[serde(with = "clock::millis")]
        created_at: DateTime<Utc>,
    },
    Transition {
        instance_id: String,
        record: TransitionRecord,
    },
    TaskClaimed {
        task_id: String,
        user_id: String,
        #[serde(with = "clock::millis")]
        lease_expiry: DateTime<Utc>,
    },
}

struct Instance {
    id: String,
    model: Arc<ProcessModel>,
    correlation_id: Option<String>,
    created_at: DateTime<Utc>,
    state: InstanceState,
    history: Vec<TransitionRecord>,
}

impl Instance {
    fn trace_id(&self) -> String {
        self.correlation_id.clone().unwrap_or_else(|| self.id.clone())
    }

    fn snapshot(&self) -> ProcessInstance {
        ProcessInstance {
            instance_id: self.id.clone(),
            model_id: self.model.model_id.clone(),
            version: self.model.version,
            correlation_id: self.correlation_id.clone(),
            variables: self.state.variables.clone(),
            frontier: self.state.frontier.iter().cloned().collect(),
            status: self.state.status(&self.model),
            history: self.history.clone(),
            created_at: self.created_at,
        }
    }
}

pub struct Orchestrator {
    models: RwLock<BTreeMap<String, Vec<Arc<ProcessModel>>>>,
    instances: RwLock<BTreeMap<String, Arc<Mutex<Instance>>>>,
    correlations: Mutex<HashMap<(String, String), String>>,
    tasks: RwLock<BTreeMap<String, Arc<Mutex<HumanTask>>>>,
    invoker: Arc<dyn Invoker>,
    roles: Arc<dyn RoleResolver>,
    audit: Arc<AuditLog>,
    clock: Arc<dyn Clock>,
    lease: Duration,
    journal: Option<Journal>,
}

impl Orchestrator {
    pub fn new(invoker: Arc<dyn Invoker>, roles: Arc<dyn RoleResolver>, audit: Arc<AuditLog>) -> Self {
        Orchestrator {
            models: RwLock::new(BTreeMap::new()),
            instances: RwLock::new(BTreeMap::new()),
            correlations: Mutex::new(HashMap::new()),
            tasks: RwLock::new(BTreeMap::new()),
            invoker,
            roles,
            audit,
            clock: Arc::new(SystemClock),
            lease: Duration::minutes(DEFAULT_TASK_LEASE_MINUTES),
            journal: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    /// Rebuilds models, instances and tasks from journaled records. Call
    /// [`Orchestrator::reconcile_audit`] and [`Orchestrator::resume_all`]
    /// afterwards to finish recovery.
    pub fn recover(mut self, journal: Journal, records: Vec<InstanceRecord>) -> Result<Self, OrchestrationError> {
        for (i, rec) in records.into_iter().enumerate() {
            let corrupt = |msg: String| OrchestrationError::Corrupt(format!("record {}: {msg}", i + 1));
            match rec {
                InstanceRecord::ModelRegistered { model } => {
                    let mut models = self.models.write();
                    let versions = models.entry(model.model_id.clone()).or_default();
                    if model.version as usize != versions.len() + 1 {
                        return Err(corrupt(format!("model `{}` version {} out of order", model.model_id, model.version)));
                    }
                    versions.push(Arc::new(model));
                }
                InstanceRecord::InstanceCreated {
                    instance_id,
                    model_id,
                    version,
                    correlation_id,
                    inputs,
                    created_at,
                } => {
                    let model = self.model_version(&model_id, Some(version)).map_err(|e| corrupt(e.to_string()))?;
                    if let Some(c) = &correlation_id {
                        self.correlations
                            .lock()
                            .insert((model_id.clone(), c.clone()), instance_id.clone());
                    }
                    let state = InstanceState::initial(&model, inputs, created_at);
                    self.instances.write().insert(
                        instance_id.clone(),
                        Arc::new(Mutex::new(Instance {
                            id: instance_id,
                            model,
                            correlation_id,
                            created_at,
                            state,
                            history: Vec::new(),
                        })),
                    );
                }
                InstanceRecord::Transition { instance_id, record } => {
                    let inst = self
                        .instance_arc(&instance_id)
                        .map_err(|_| corrupt(format!("unknown instance `{instance_id}`")))?;
                    let mut inst = inst.lock();
                    let model = inst.model.clone();
                    inst.state.apply(&model, &record).map_err(corrupt)?;
                    self.index_task(&inst, &record);
                    inst.history.push(record);
                }
                InstanceRecord::TaskClaimed {
                    task_id,
                    user_id,
                    lease_expiry,
                } => {
                    let task = self.task_arc(&task_id).map_err(|_| corrupt(format!("unknown task `{task_id}`")))?;
                    let mut t = task.lock();
                    t.state = TaskState::Claimed;
                    t.claimant = Some(user_id);
                    t.lease_expiry = Some(lease_expiry);
                }
            }
        }
        self.journal = Some(journal);
        Ok(self)
    }

    /// Emits audit records for journaled transitions that never reached the
    /// audit log (a crash between the two writes). Returns how many.
    pub fn reconcile_audit(&self) -> Result<usize, OrchestrationError> {
        let audited: HashSet<String> = self
            .audit
            .query(&AuditFilter {
                category: Some(Category::OrchestrationTransition),
                ..Default::default()
            })
            .into_iter()
            .filter_map(|r| r.detail.split(" action=").next().map(String::from))
            .collect();
        let mut emitted = 0;
        for inst in self.instance_arcs() {
            let inst = inst.lock();
            for rec in &inst.history {
                if !audited.contains(&transition_key(&inst.id, rec.seq)) {
                    self.audit_transition(&inst, rec)?;
                    emitted += 1;
                }
            }
        }
        Ok(emitted)
    }

    /// Runs an engine pass on every unfinished instance.
    pub fn resume_all(&self) -> Result<Vec<String>, OrchestrationError> {
        let mut resumed = Vec::new();
        for inst in self.instance_arcs() {
            let mut inst = inst.lock();
            if inst.state.terminal.is_none() {
                self.run_pass(&mut inst)?;
                resumed.push(inst.id.clone());
            }
        }
        Ok(resumed)
    }

    fn persist(&self, rec: &InstanceRecord) -> Result<(), OrchestrationError> {
        if let Some(j) = &self.journal {
            j.append(rec)?;
        }
        Ok(())
    }

    pub fn register_model(&self, mut model: ProcessModel) -> Result<(String, u32), OrchestrationError> {
        model.validate().map_err(OrchestrationError::ValidationFailed)?;
        let mut models = self.models.write();
        let versions = models.entry(model.model_id.clone()).or_default();
        model.version = versions.len() as u32 + 1;
        self.persist(&InstanceRecord::ModelRegistered { model: model.clone() })?;
        let id = (model.model_id.clone(), model.version);
        versions.push(Arc::new(model));
        Ok(id)
    }

    fn model_version(&self, model_id: &str, version: Option<u32>) -> Result<Arc<ProcessModel>, OrchestrationError> {
        let models = self.models.read();
        let versions = models
            .get(model_id)
            .ok_or_else(|| OrchestrationError::UnknownModel(model_id.to_string()))?;
        match version {
            None => Ok(versions.last().expect("registered models have a version").clone()),
            Some(v) => versions
                .get((v as usize).wrapping_sub(1))
                .cloned()
                .ok_or_else(|| OrchestrationError::UnknownVersion {
                    model_id: model_id.to_string(),
                    version: v,
                }),
        }
    }

    pub fn model(&self, model_id: &str, version: Option<u32>) -> Result<ProcessModel, OrchestrationError> {
        self.model_version(model_id, version).map(|m| (*m).clone())
    }

    pub fn has_model(&self, model_id: &str) -> bool {
        self.models.read().contains_key(model_id)
    }

    /// Latest version of every registered model.
    pub fn models(&self) -> Vec<(String, u32)> {
        self.models
            .read()
            .iter()
            .map(|(id, v)| (id.clone(), v.len() as u32))
            .collect()
    }

    /// Topics any registered model can wait on.
    pub fn event_topics(&self) -> BTreeSet<String> {
        self.models
            .read()
            .values()
            .flatten()
            .flat_map(|m| m.steps.values())
            .filter_map(|s| match s {
                StepDef::WaitEvent { topic, .. } => Some(topic.clone()),
                _ => None,
            })
            .collect()
    }

    /// Creates an instance and runs its first engine pass. Starting the same
    /// model again with a correlation id already in use returns the
    /// existing instance.
    pub fn start_instance(
        &self,
        model_id: &str,
        version: Option<u32>,
        inputs: BTreeMap<String, String>,
        correlation_id: Option<String>,
    ) -> Result<ProcessInstance, OrchestrationError> {
        let model = self.model_version(model_id, version)?;
        if let Some(v) = inputs.keys().find(|k| !model.variables.contains(*k)) {
            return Err(OrchestrationError::MissingInput {
                variable: v.clone(),
                reason: "undeclared",
            });
        }
        if let Some(v) = model.required_inputs().into_iter().find(|v| !inputs.contains_key(v)) {
            return Err(OrchestrationError::MissingInput {
                variable: v,
                reason: "absent",
            });
        }
        let mut correlations = self.correlations.lock();
        if let Some(c) = &correlation_id {
            if let Some(existing) = correlations.get(&(model_id.to_string(), c.clone())) {
                let existing = existing.clone();
                drop(correlations);
                return self.instance_state(&existing);
            }
        }
        let instance_id = uuid::Uuid::new_v4().to_string();
        let created_at = clock::to_millis(self.clock.now());
        self.persist(&InstanceRecord::InstanceCreated {
            instance_id: instance_id.clone(),
            model_id: model.model_id.clone(),
            version: model.version,
            correlation_id: correlation_id.clone(),
            inputs: inputs.clone(),
            created_at,
        })?;
        let state = InstanceState::initial(&model, inputs, created_at);
        let inst = Arc::new(Mutex::new(Instance {
            id: instance_id.clone(),
            model,
            correlation_id: correlation_id.clone(),
            created_at,
            state,
            history: Vec::new(),
        }));
        let mut guard = inst.lock();
        self.instances.write().insert(instance_id.clone(), inst.clone());
        if let Some(c) = correlation_id {
            correlations.insert((model_id.to_string(), c), instance_id);
        }
        drop(correlations);
        self.run_pass(&mut guard)?;
        Ok(guard.snapshot())
    }

    fn instance_arc(&self, id: &str) -> Result<Arc<Mutex<Instance>>, OrchestrationError> {
        self.instances
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| OrchestrationError::UnknownInstance(id.to_string()))
    }

    fn instance_arcs(&self) -> Vec<Arc<Mutex<Instance>>> {
        self.instances.read().values().cloned().collect()
    }

    fn task_arc(&self, id: &str) -> Result<Arc<Mutex<HumanTask>>, OrchestrationError> {
        self.tasks
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| OrchestrationError::UnknownTask(id.to_string()))
    }

    pub fn instance_state(&self, instance_id: &str) -> Result<ProcessInstance, OrchestrationError> {
        Ok(self.instance_arc(instance_id)?.lock().snapshot())
    }

    pub fn instance_by_correlation(&self, model_id: &str, correlation_id: &str) -> Option<String> {
        self.correlations
            .lock()
            .get(&(model_id.to_string(), correlation_id.to_string()))
            .cloned()
    }

    pub fn instances(&self) -> Vec<ProcessInstance> {
        self.instance_arcs().iter().map(|i| i.lock().snapshot()).collect()
    }

    /// Executes ready steps until the instance blocks or terminates.
    pub fn advance(&self, instance_id: &str) -> Result<ProcessInstance, OrchestrationError> {
        let inst = self.instance_arc(instance_id)?;
        let mut inst = inst.lock();
        self.run_pass(&mut inst)?;
        Ok(inst.snapshot())
    }

    fn run_pass(&self, inst: &mut Instance) -> Result<(), OrchestrationError> {
        let mut budget = MAX_STEPS_PER_PASS;
        while inst.state.terminal.is_none() {
            let now = self.clock.now();
            let Some(step) = inst
                .state
                .frontier
                .iter()
                .find(|s| inst.state.is_ready(&inst.model, s, now))
                .cloned()
            else {
                break;
            };
            let action = if budget == 0 {
                Action::Faulted {
                    reason: format!("more than {MAX_STEPS_PER_PASS} steps in one pass"),
                }
            } else {
                self.execute(inst, &step)
            };
            budget = budget.saturating_sub(1);
            self.commit(inst, &step, action)?;
        }
        Ok(())
    }

    fn execute(&self, inst: &Instance, step: &str) -> Action {
        let vars = &inst.state.variables;
        let fault = |reason: String| Action::Faulted { reason };
        match inst.model.step(step).expect("frontier steps exist in the model") {
            StepDef::ServiceInvoke {
                destination,
                payload_template,
                content_type,
                ..
            } => match expr::render(payload_template, vars) {
                Err(e) => fault(e),
                Ok(payload) => {
                    let inv = self.invoker.invoke(&InvokeRequest {
                        instance_id: inst.id.clone(),
                        step: step.to_string(),
                        correlation_id: inst.trace_id(),
                        destination: destination.clone(),
                        content_type: content_type.clone(),
                        payload,
                    });
                    Action::Invoked {
                        request_id: inv.request_id,
                        outcome: inv.outcome,
                    }
                }
            },
            StepDef::WaitEvent { .. } => Action::EventTimedOut,
            StepDef::HumanTask {
                role, prompt_template, ..
            } => match expr::render(prompt_template, vars) {
                Err(e) => fault(e),
                Ok(prompt) => Action::TaskOpened {
                    task_id: uuid::Uuid::new_v4().to_string(),
                    role: role.clone(),
                    prompt,
                },
            },
            StepDef::ExclusiveBranch { predicate, .. } => match Predicate::parse(predicate).and_then(|p| p.eval(vars)) {
                Ok(taken) => Action::Branched { taken },
                Err(e) => fault(e),
            },
            StepDef::ParallelSplit { .. } => Action::Split,
            StepDef::Join { .. } => Action::Joined,
            StepDef::Terminate { status } => Action::Terminated { status: *status },
        }
    }

    /// Journals, applies and audits one transition, in that order.
    fn commit(&self, inst: &mut Instance, step: &str, action: Action) -> Result<(), OrchestrationError> {
        let record = TransitionRecord {
            seq: inst.state.transitions + 1,
            step: step.to_string(),
            at: clock::to_millis(self.clock.now()),
            action,
        };
        let mut next = inst.state.clone();
        next.apply(&inst.model, &record).map_err(OrchestrationError::Corrupt)?;
        self.persist(&InstanceRecord::Transition {
            instance_id: inst.id.clone(),
            record: record.clone(),
        })?;
        inst.state = next;
        self.index_task(inst, &record);
        inst.history.push(record);
        self.audit_transition(inst, inst.history.last().expect("just pushed"))?;
        Ok(())
    }

    fn audit_transition(&self, inst: &Instance, rec: &TransitionRecord) -> Result<(), OrchestrationError> {
        let faulty = matches!(
            &rec.action,
            Action::Faulted { .. }
                | Action::Invoked {
                    outcome: InvokeOutcome::Fault { .. },
                    ..
                }
                | Action::Terminated {
                    status: TerminalStatus::Faulted
                }
        );
        let outcome = if faulty { Outcome::Fault } else { Outcome::Ok };
        self.audit.record(
            Entry::new(
                Category::OrchestrationTransition,
                ENGINE_ACTOR,
                format!("{}/{}", inst.model.model_id, rec.step),
            )
            .correlation(inst.trace_id())
            .outcome(outcome)
            .detail(format!("{} action={}", transition_key(&inst.id, rec.seq), rec.action.name())),
        )?;
        Ok(())
    }

    fn index_task(&self, inst: &Instance, rec: &TransitionRecord) {
        match &rec.action {
            Action::TaskOpened { task_id, role, prompt } => {
                self.tasks.write().insert(
                    task_id.clone(),
                    Arc::new(Mutex::new(HumanTask {
                        task_id: task_id.clone(),
                        instance_id: inst.id.clone(),
                        model_id: inst.model.model_id.clone(),
                        step: rec.step.clone(),
                        role: role.clone(),
                        prompt: prompt.clone(),
                        state: TaskState::Open,
                        claimant: None,
                        lease_expiry: None,
                        outcome: None,
                    })),
                );
            }
            Action::TaskCompleted {
                task_id,
                user_id,
                outcome,
            } => {
                if let Some(t) = self.tasks.read().get(task_id) {
                    let mut t = t.lock();
                    t.state = TaskState::Completed;
                    t.claimant = Some(user_id.clone());
                    t.outcome = Some(outcome.clone());
                }
            }
            _ => {}
        }
    }

    /// Hands an event to every instance waiting for it. Returns the ids of
    /// the instances that consumed it.
    pub fn deliver_event(&self, topic: &str, event: &Envelope) -> Result<Vec<String>, OrchestrationError> {
        let Some(correlation) = &event.correlation_id else {
            return Ok(Vec::new());
        };
        let mut advanced = Vec::new();
        for inst in self.instance_arcs() {
            let mut inst = inst.lock();
            if inst.state.consumed_events.contains(&event.envelope_id) {
                continue;
            }
            let waiting = inst.state.frontier.iter().find(|s| {
                matches!(
                    inst.model.step(s),
                    Some(StepDef::WaitEvent { topic: t, correlation_var, .. })
                        if t == topic && inst.state.variables.get(correlation_var) == Some(correlation)
                )
            });
            if let Some(step) = waiting.cloned() {
                let action = Action::EventConsumed {
                    envelope_id: event.envelope_id.clone(),
                    value: event.body.payload_text(),
                };
                self.commit(&mut inst, &step, action)?;
                self.run_pass(&mut inst)?;
                advanced.push(inst.id.clone());
            }
        }
        Ok(advanced)
    }

    /// Tasks matching `filter`, ordered by task id.
    pub fn list_tasks(&self, filter: &TaskFilter) -> Vec<HumanTask> {
        let now = self.clock.now();
        self.tasks
            .read()
            .values()
            .map(|t| t.lock().view(now))
            .filter(|t| filter.role.as_ref().is_none_or(|r| &t.role == r))
            .filter(|t| filter.state.is_none_or(|s| t.state == s))
            .filter(|t| filter.instance_id.as_ref().is_none_or(|i| &t.instance_id == i))
            .collect()
    }

    pub fn task(&self, task_id: &str) -> Result<HumanTask, OrchestrationError> {
        Ok(self.task_arc(task_id)?.lock().view(self.clock.now()))
    }

    fn task_audit(&self, task: &HumanTask, user_id: &str, what: &str, correlation: String, outcome: Outcome) -> Result<(), OrchestrationError> {
        self.audit.record(
            Entry::new(Category::TaskEvent, user_id, format!("{}/{}:{what}", task.model_id, task.step))
                .correlation(correlation)
                .outcome(outcome)
                .detail(format!("task={}", task.task_id)),
        )?;
        Ok(())
    }

    /// Claims an open task. Claiming again as the current claimant is a
    /// no-op that returns the task unchanged.
    pub fn claim_task(&self, task_id: &str, user_id: &str) -> Result<HumanTask, OrchestrationError> {
        let task = self.task_arc(task_id)?;
        let instance_id = task.lock().instance_id.clone();
        let inst = self.instance_arc(&instance_id)?;
        let inst = inst.lock();
        let mut t = task.lock();
        let now = self.clock.now();
        let current = t.view(now);
        let deny = |what: &str| self.task_audit(&current, user_id, what, inst.trace_id(), Outcome::Fault);
        if current.state == TaskState::Completed || inst.state.open_tasks.get(&t.step) != Some(&t.task_id) {
            deny("claim")?;
            return Err(OrchestrationError::AlreadyCompleted(task_id.to_string()));
        }
        if !self.roles.has_role(user_id, &t.role) {
            deny("claim")?;
            return Err(OrchestrationError::RoleDenied {
                user_id: user_id.to_string(),
                role: t.role.clone(),
            });
        }
        if current.state == TaskState::Claimed {
            let claimant = current.claimant.clone().unwrap_or_default();
            if claimant == user_id {
                return Ok(current);
            }
            deny("claim")?;
            return Err(OrchestrationError::AlreadyClaimed {
                task_id: task_id.to_string(),
                claimant,
            });
        }
        let lease_expiry = clock::to_millis(now + self.lease);
        self.task_audit(&current, user_id, "claimed", inst.trace_id(), Outcome::Ok)?;
        self.persist(&InstanceRecord::TaskClaimed {
            task_id: task_id.to_string(),
            user_id: user_id.to_string(),
            lease_expiry,
        })?;
        t.state = TaskState::Claimed;
        t.claimant = Some(user_id.to_string());
        t.lease_expiry = Some(lease_expiry);
        Ok(t.clone())
    }

    /// Records the claimant's outcome and advances the instance.
    pub fn complete_task(&self, task_id: &str, user_id: &str, outcome: &str) -> Result<ProcessInstance, OrchestrationError> {
        let task = self.task_arc(task_id)?;
        let instance_id = task.lock().instance_id.clone();
        let inst = self.instance_arc(&instance_id)?;
        let mut inst = inst.lock();
        let t = task.lock().clone();
        if t.state == TaskState::Completed || inst.state.open_tasks.get(&t.step) != Some(&t.task_id) {
            return Err(OrchestrationError::AlreadyCompleted(task_id.to_string()));
        }
        let claimed_by_user = t.state == TaskState::Claimed && t.claimant.as_deref() == Some(user_id);
        if !claimed_by_user {
            self.task_audit(&t, user_id, "complete", inst.trace_id(), Outcome::Fault)?;
            return Err(OrchestrationError::NotClaimant {
                task_id: task_id.to_string(),
                user_id: user_id.to_string(),
            });
        }
        self.task_audit(&t, user_id, "completed", inst.trace_id(), Outcome::Ok)?;
        let action = Action::TaskCompleted {
            task_id: task_id.to_string(),
            user_id: user_id.to_string(),
            outcome: outcome.to_string(),
        };
        self.commit(&mut inst, &t.step, action)?;
        self.run_pass(&mut inst)?;
        Ok(inst.snapshot())
    }
}

fn transition_key(instance_id: &str, seq: u64) -> String {
    format!("instance={instance_id} seq={seq}")
}
