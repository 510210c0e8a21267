use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use ssc_core::audit::{AuditRecord, Category};
use ssc_core::envelope::{
    build_envelope, serialize_envelope, sign_envelope, Body, Destination, KeyDirectory, MessageKind, Profile, Sender,
    Signer,
};
use ssc_core::identity::SsoToken;
use ssc_core::orchestration::{HumanTask, ProcessInstance, ProcessModel, StepDef, TaskState};

use crate::api::router;
use crate::app::{GatewayError, Ssc};
use crate::client::{ApiClient, InProcessClient};
use crate::config::GatewayConfig;
use crate::harness::admin::{admin_key_seed, AdminSpec, SimulatedAdministration, ADMIN_KEY_ID};
use crate::seed::{self, CatalogSeed, UserSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScriptAction {
    Login {
        user: String,
    },
    /// Starts the process behind a catalogued service.
    Submit {
        #[serde(default)]
        user: Option<String>,
        service_id: String,
        correlation_id: String,
        #[serde(default)]
        inputs: BTreeMap<String, String>,
    },
    /// Claims and completes the task a step of the instance opened.
    CompleteTask {
        user: String,
        correlation_id: String,
        step: String,
        outcome: String,
    },
    /// A simulated administration publishes a signed event.
    Publish {
        admin_id: String,
        topic: String,
        correlation_id: String,
        payload: String,
    },
}

impl ScriptAction {
    pub fn describe(&self) -> String {
        match self {
            ScriptAction::Login { user } => format!("login {user}"),
            ScriptAction::Submit {
                service_id,
                correlation_id,
                ..
            } => format!("submit {service_id} as {correlation_id}"),
            ScriptAction::CompleteTask {
                user, step, outcome, ..
            } => format!("{user} completes {step} with {outcome}"),
            ScriptAction::Publish { admin_id, topic, .. } => format!("{admin_id} publishes on {topic}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "assert", rename_all = "snake_case")]
pub enum Expectation {
    Status {
        correlation_id: String,
        equals: String,
    },
    Variable {
        correlation_id: String,
        name: String,
        equals: String,
    },
    /// Number of trace records of one category.
    TraceCount {
        correlation_id: String,
        category: String,
        equals: usize,
    },
    /// The projected trace equals a transcript file, record for record.
    TraceGolden {
        correlation_id: String,
        file: PathBuf,
    },
}

impl Expectation {
    pub fn describe(&self) -> String {
        match self {
            Expectation::Status { correlation_id, equals } => format!("{correlation_id} status is {equals}"),
            Expectation::Variable {
                correlation_id,
                name,
                equals,
            } => format!("{correlation_id} variable {name} is {equals}"),
            Expectation::TraceCount {
                correlation_id,
                category,
                equals,
            } => format!("{correlation_id} trace has {equals} {category}"),
            Expectation::TraceGolden { correlation_id, file } => {
                format!("{correlation_id} trace matches {}", file.display())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seeds the simulated administrations' keys.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub administrations: Vec<AdminSpec>,
    #[serde(default)]
    pub topics: Vec<String>,
    #[serde(default)]
    pub models: Vec<ProcessModel>,
    #[serde(default)]
    pub users: Vec<UserSeed>,
    #[serde(default)]
    pub catalog: CatalogSeed,
    #[serde(default)]
    pub script: Vec<ScriptAction>,
    #[serde(default)]
    pub expect: Vec<Expectation>,
    /// Directory that relative golden paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// The part of an audit record that is stable across runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceEntry {
    pub category: String,
    pub actor: String,
    pub subject: String,
    pub outcome: String,
}

impl From<&AuditRecord> for TraceEntry {
    fn from(r: &AuditRecord) -> Self {
        TraceEntry {
            category: r.category.as_str().into(),
            actor: r.actor.clone(),
            subject: r.subject.clone(),
            outcome: match r.outcome {
                ssc_core::audit::Outcome::Ok => "ok",
                ssc_core::audit::Outcome::Fault => "fault",
            }
            .into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub passed: bool,
    pub steps: Vec<CheckResult>,
    pub assertions: Vec<CheckResult>,
    /// Projected audit trace per submitted correlation id.
    pub traces: BTreeMap<String, Vec<TraceEntry>>,
}

impl ScenarioReport {
    pub fn lines(&self) -> Vec<String> {
        let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = Vec::new();
        for (i, s) in self.steps.iter().enumerate() {
            out.push(format!("{} step {}: {} ({})", mark(s.passed), i + 1, s.description, s.detail));
        }
        for a in &self.assertions {
            out.push(format!("{} assert: {} ({})", mark(a.passed), a.description, a.detail));
        }
        out.push(format!("{} scenario {}", mark(self.passed), self.name));
        out
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, GatewayError> {
        let mut s: Scenario = seed::read_json(path).map_err(|e| GatewayError::Scenario(e.to_string()))?;
        s.base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        s.validate()?;
        Ok(s)
    }

    pub fn signer(&self, admin_id: &str) -> Signer {
        Signer::from_seed(admin_id, ADMIN_KEY_ID, admin_key_seed(self.seed, admin_id))
    }

    fn golden_path(&self, file: &Path) -> PathBuf {
        if file.is_relative() {
            self.base_dir.join(file)
        } else {
            file.to_path_buf()
        }
    }

    /// Rejects scripts that name users, services, administrations or
    /// topics the scenario does not seed.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let users: BTreeSet<&str> = self.users.iter().map(|u| u.user_id.as_str()).collect();
        let services: BTreeSet<&str> = self.catalog.services.iter().map(|d| d.service_id.as_str()).collect();
        let admins: BTreeSet<&str> = self.administrations.iter().map(|a| a.admin_id.as_str()).collect();
        let mut topics: BTreeSet<&str> = self.topics.iter().map(String::as_str).collect();
        for m in &self.models {
            for step in m.steps.values() {
                if let StepDef::WaitEvent { topic, .. } = step {
                    topics.insert(topic);
                }
            }
        }
        let err = |i: usize, what: String| Err(GatewayError::Scenario(format!("script step {}: {what}", i + 1)));
        let mut correlations = BTreeSet::new();
        for (i, a) in self.script.iter().enumerate() {
            match a {
                ScriptAction::Login { user } | ScriptAction::CompleteTask { user, .. } if !users.contains(user.as_str()) => {
                    return err(i, format!("unknown user `{user}`"))
                }
                ScriptAction::Submit { user: Some(user), .. } if !users.contains(user.as_str()) => {
                    return err(i, format!("unknown user `{user}`"))
                }
                ScriptAction::Submit {
                    service_id,
                    correlation_id,
                    ..
                } => {
                    if !services.contains(service_id.as_str()) {
                        return err(i, format!("unknown service `{service_id}`"));
                    }
                    correlations.insert(correlation_id.as_str());
                }
                ScriptAction::Publish { admin_id, topic, .. } => {
                    if !admins.contains(admin_id.as_str()) {
                        return err(i, format!("unknown administration `{admin_id}`"));
                    }
                    if !topics.contains(topic.as_str()) {
                        return err(i, format!("unknown topic `{topic}`"));
                    }
                }
                _ => {}
            }
        }
        for e in &self.expect {
            let (Expectation::Status { correlation_id, .. }
            | Expectation::Variable { correlation_id, .. }
            | Expectation::TraceCount { correlation_id, .. }
            | Expectation::TraceGolden { correlation_id, .. }) = e;
            if !correlations.contains(correlation_id.as_str()) {
                return Err(GatewayError::Scenario(format!(
                    "assertion `{}` names correlation `{correlation_id}` that no step submits",
                    e.describe()
                )));
            }
            if let Expectation::TraceCount { category, .. } = e {
                if Category::parse(category).is_none() {
                    return Err(GatewayError::Scenario(format!("unknown audit category `{category}`")));
                }
            }
        }
        Ok(())
    }

    /// Spawns the administrations and seeds everything the script needs.
    /// Entities that already exist are left alone.
    pub fn install(&self, ssc: &Ssc) -> Result<(), GatewayError> {
        self.validate()?;
        for spec in &self.administrations {
            if ssc.admin(&spec.admin_id).is_none() {
                ssc.spawn_admin(SimulatedAdministration::new(spec, self.seed))?;
            }
        }
        seed::seed_topics(ssc, &self.topics)?;
        seed::seed_models(ssc, &self.models)?;
        seed::seed_users(ssc, &self.users)?;
        seed::seed_catalog(ssc, &self.catalog)?;
        Ok(())
    }

    pub fn read_golden(&self, file: &Path) -> Result<Vec<TraceEntry>, String> {
        let path = self.golden_path(file);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

enum Failure {
    /// No HTTP response: the gateway is unreachable.
    Transport(String),
    Failed(String),
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Failed(s)
    }
}

/// Executes a scenario script against the public API, one action at a
/// time.
pub struct Driver<'a> {
    client: &'a dyn ApiClient,
    scenario: &'a Scenario,
    /// When set, actions are retried from the top while the gateway is
    /// unreachable, until this much time has passed.
    patience: Option<Duration>,
    tokens: HashMap<String, String>,
    events: HashMap<usize, Vec<u8>>,
}

impl<'a> Driver<'a> {
    pub fn new(client: &'a dyn ApiClient, scenario: &'a Scenario) -> Self {
        Driver {
            client,
            scenario,
            patience: None,
            tokens: HashMap::new(),
            events: HashMap::new(),
        }
    }

    pub fn with_patience(mut self, patience: Duration) -> Self {
        self.patience = Some(patience);
        self
    }

    fn call(&self, method: &str, path: &str, token: Option<&str>, body: Option<Vec<u8>>) -> Result<crate::client::ApiResponse, Failure> {
        self.client.request(method, path, token, body).map_err(Failure::Transport)
    }

    fn json(body: &impl Serialize) -> Option<Vec<u8>> {
        Some(serde_json::to_vec(body).expect("serializable"))
    }

    fn instance(&self, correlation_id: &str) -> Result<ProcessInstance, Failure> {
        let list: Vec<ProcessInstance> = self
            .call("GET", &format!("/instances?correlation_id={correlation_id}"), None, None)?
            .ok_json()?;
        list.into_iter()
            .next()
            .ok_or_else(|| Failure::Failed(format!("no instance for {correlation_id}")))
    }

    fn attempt(&mut self, index: usize, action: &ScriptAction) -> Result<String, Failure> {
        match action {
            ScriptAction::Login { user } => {
                let password = &self
                    .scenario
                    .users
                    .iter()
                    .find(|u| &u.user_id == user)
                    .expect("validated")
                    .password;
                let token: SsoToken = self
                    .call(
                        "POST",
                        "/auth/login",
                        None,
                        Self::json(&serde_json::json!({"user_id": user, "password": password})),
                    )?
                    .ok_json()?;
                let level = token.claims.level.as_str().to_string();
                self.tokens.insert(user.clone(), token.token);
                Ok(format!("{level} token"))
            }
            ScriptAction::Submit {
                user,
                service_id,
                correlation_id,
                inputs,
            } => {
                let token = user.as_ref().and_then(|u| self.tokens.get(u)).cloned();
                let body = serde_json::json!({
                    "service_id": service_id,
                    "correlation_id": correlation_id,
                    "inputs": inputs,
                });
                let inst: ProcessInstance = self
                    .call("POST", "/instances", token.as_deref(), Self::json(&body))?
                    .ok_json()?;
                Ok(format!("status {}", inst.status.as_str()))
            }
            ScriptAction::CompleteTask {
                user,
                correlation_id,
                step,
                outcome,
            } => {
                let token = self
                    .tokens
                    .get(user)
                    .cloned()
                    .ok_or_else(|| format!("{user} is not logged in"))?;
                let inst = self.instance(correlation_id)?;
                let tasks: Vec<HumanTask> = self
                    .call("GET", &format!("/tasks?instance_id={}", inst.instance_id), Some(&token), None)?
                    .ok_json()?;
                let task = tasks
                    .into_iter()
                    .find(|t| &t.step == step)
                    .ok_or_else(|| format!("no task for step {step}"))?;
                if task.state == TaskState::Completed {
                    return Ok(format!("status {}", inst.status.as_str()));
                }
                if task.claimant.as_deref() != Some(user.as_str()) {
                    self.call("POST", &format!("/tasks/{}/claim", task.task_id), Some(&token), None)?
                        .ok_json::<HumanTask>()?;
                }
                let after: ProcessInstance = self
                    .call(
                        "POST",
                        &format!("/tasks/{}/complete", task.task_id),
                        Some(&token),
                        Self::json(&serde_json::json!({"outcome": outcome})),
                    )?
                    .ok_json()?;
                Ok(format!("status {}", after.status.as_str()))
            }
            ScriptAction::Publish {
                admin_id,
                topic,
                correlation_id,
                payload,
            } => {
                let bytes = match self.events.get(&index) {
                    Some(b) => b.clone(),
                    None => {
                        let signer = self.scenario.signer(admin_id);
                        let env = build_envelope(
                            Sender::new(admin_id.clone(), "events"),
                            Destination::new(ssc_core::cooperation::GATEWAY_ADMIN, topic.clone()),
                            Profile::AsyncEvent,
                            MessageKind::Event,
                            Body::text(payload.clone()),
                            Some(correlation_id.clone()),
                        )
                        .map_err(|e| e.to_string())?;
                        let dir = KeyDirectory::new();
                        dir.ensure_signer(&signer).map_err(|e| e.to_string())?;
                        let signed = serialize_envelope(&sign_envelope(&env, &signer, &dir).map_err(|e| e.to_string())?);
                        self.events.insert(index, signed.clone());
                        signed
                    }
                };
                let receipt: serde_json::Value = self
                    .call("POST", &format!("/topics/{topic}/publish"), None, Some(bytes))?
                    .ok_json()?;
                Ok(format!("seq {}", receipt["seq"]))
            }
        }
    }

    fn perform(&mut self, index: usize, action: &ScriptAction) -> Result<String, String> {
        let started = Instant::now();
        loop {
            match self.attempt(index, action) {
                Ok(d) => return Ok(d),
                Err(Failure::Failed(e)) => return Err(e),
                Err(Failure::Transport(e)) => match self.patience {
                    Some(p) if started.elapsed() < p => std::thread::sleep(Duration::from_millis(25)),
                    _ => return Err(e),
                },
            }
        }
    }

    fn trace(&self, correlation_id: &str) -> Result<Vec<TraceEntry>, String> {
        self.retrying(|| {
            let records: Vec<AuditRecord> = self
                .call("GET", &format!("/audit/trace/{correlation_id}"), None, None)?
                .ok_json()?;
            Ok(records.iter().map(TraceEntry::from).collect())
        })
    }

    fn retrying<T>(&self, f: impl Fn() -> Result<T, Failure>) -> Result<T, String> {
        let started = Instant::now();
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(Failure::Failed(e)) => return Err(e),
                Err(Failure::Transport(e)) => match self.patience {
                    Some(p) if started.elapsed() < p => std::thread::sleep(Duration::from_millis(25)),
                    _ => return Err(e),
                },
            }
        }
    }

    fn check(&self, e: &Expectation, traces: &BTreeMap<String, Vec<TraceEntry>>) -> Result<(), String> {
        let empty = Vec::new();
        match e {
            Expectation::Status { correlation_id, equals } => {
                let inst = self.retrying(|| self.instance(correlation_id))?;
                match inst.status.as_str() == equals {
                    true => Ok(()),
                    false => Err(format!("status {}", inst.status.as_str())),
                }
            }
            Expectation::Variable {
                correlation_id,
                name,
                equals,
            } => {
                let inst = self.retrying(|| self.instance(correlation_id))?;
                match inst.variables.get(name) {
                    Some(v) if v == equals => Ok(()),
                    other => Err(format!("{name} = {other:?}")),
                }
            }
            Expectation::TraceCount {
                correlation_id,
                category,
                equals,
            } => {
                let n = traces
                    .get(correlation_id)
                    .unwrap_or(&empty)
                    .iter()
                    .filter(|t| &t.category == category)
                    .count();
                match n == *equals {
                    true => Ok(()),
                    false => Err(format!("counted {n}")),
                }
            }
            Expectation::TraceGolden { correlation_id, file } => {
                let golden = self.scenario.read_golden(file)?;
                compare_exact(&golden, traces.get(correlation_id).unwrap_or(&empty))
            }
        }
    }

    pub fn run(mut self) -> ScenarioReport {
        let steps = self.run_script();
        self.finish(steps)
    }

    /// Performs the script, stopping at the first failed step.
    pub fn run_script(&mut self) -> Vec<CheckResult> {
        let mut steps = Vec::new();
        for (i, action) in self.scenario.script.iter().enumerate() {
            let (passed, detail) = match self.perform(i, action) {
                Ok(d) => (true, d),
                Err(e) => (false, e),
            };
            steps.push(CheckResult {
                description: action.describe(),
                passed,
                detail,
            });
            if !passed {
                break;
            }
        }
        steps
    }

    /// Collects traces and checks the expectations after the script.
    pub fn finish(self, steps: Vec<CheckResult>) -> ScenarioReport {
        let mut ok = steps.iter().all(|s| s.passed) && steps.len() == self.scenario.script.len();
        let mut traces = BTreeMap::new();
        for a in &self.scenario.script {
            if let ScriptAction::Submit { correlation_id, .. } = a {
                let t = self.trace(correlation_id).unwrap_or_default();
                traces.insert(correlation_id.clone(), t);
            }
        }
        let assertions: Vec<CheckResult> = self
            .scenario
            .expect
            .iter()
            .map(|e| {
                let r = self.check(e, &traces);
                CheckResult {
                    description: e.describe(),
                    passed: r.is_ok(),
                    detail: r.err().unwrap_or_else(|| "as expected".into()),
                }
            })
            .collect();
        ok &= assertions.iter().all(|a| a.passed);
        ScenarioReport {
            name: self.scenario.name.clone(),
            passed: ok,
            steps,
            assertions,
            traces,
        }
    }
}

fn compare_exact(golden: &[TraceEntry], actual: &[TraceEntry]) -> Result<(), String> {
    for (i, (g, a)) in golden.iter().zip(actual).enumerate() {
        if g != a {
            return Err(format!("record {}: expected {g:?}, got {a:?}", i + 1));
        }
    }
    match golden.len().cmp(&actual.len()) {
        std::cmp::Ordering::Equal => Ok(()),
        _ => Err(format!("expected {} records, got {}", golden.len(), actual.len())),
    }
}

/// Compares a trace from a run that may have been interrupted against an
/// uninterrupted transcript. Transitions must match exactly. Other records
/// may repeat when an interrupted call was retried, so they are compared
/// as distinct entries, each of which must first appear between the same
/// two transitions as in the transcript.
pub fn crash_equivalent(golden: &[TraceEntry], actual: &[TraceEntry]) -> Result<(), String> {
    let transition = Category::OrchestrationTransition.as_str();
    let split = |trace: &[TraceEntry]| {
        let mut transitions = Vec::new();
        let mut first_seen: BTreeMap<TraceEntry, usize> = BTreeMap::new();
        for t in trace {
            if t.category == transition {
                transitions.push(t.clone());
            } else {
                first_seen.entry(t.clone()).or_insert(transitions.len());
            }
        }
        (transitions, first_seen)
    };
    let (g_trans, g_other) = split(golden);
    let (a_trans, a_other) = split(actual);
    compare_exact(&g_trans, &a_trans).map_err(|e| format!("transitions differ: {e}"))?;
    for (entry, segment) in &g_other {
        match a_other.get(entry) {
            None => return Err(format!("missing {entry:?}")),
            Some(s) if s != segment => {
                return Err(format!("{entry:?} first appears after transition {s}, expected {segment}"))
            }
            _ => {}
        }
    }
    if let Some(extra) = a_other.keys().find(|k| !g_other.contains_key(*k)) {
        return Err(format!("unexpected {extra:?}"));
    }
    Ok(())
}

/// Runs a scenario against a fresh in-process gateway whose storage lives
/// in `storage`.
pub fn run_in_process(scenario: &Scenario, mut config: GatewayConfig) -> Result<ScenarioReport, GatewayError> {
    config.scenario = None;
    let ssc: Arc<Ssc> = Ssc::open(config)?;
    scenario.install(&ssc)?;
    let client = InProcessClient::new(router(ssc));
    Ok(Driver::new(&client, scenario).run())
}
