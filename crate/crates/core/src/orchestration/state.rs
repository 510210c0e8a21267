//! Instance state as a pure fold over its transition history.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::model::{ProcessModel, StepDef, TerminalStatus};
use crate::clock;
use crate::cooperation::FaultCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Running,
    WaitingEvent,
    WaitingTask,
    Completed,
    Faulted,
}

impl InstanceStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstanceStatus::Running => "running",
            InstanceStatus::WaitingEvent => "waiting_event",
            InstanceStatus::WaitingTask => "waiting_task",
            InstanceStatus::Completed => "completed",
            InstanceStatus::Faulted => "faulted",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, InstanceStatus::Completed | InstanceStatus::Faulted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum InvokeOutcome {
    Response { payload: String },
    Fault { code: FaultCode, detail: String },
}

/// What a step did. Carries every external input (responses, events,
/// task outcomes, branch decisions) so replay never re-executes anything.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Invoked { request_id: String, outcome: InvokeOutcome },
    EventConsumed { envelope_id: String, value: String },
    EventTimedOut,
    TaskOpened { task_id: String, role: String, prompt: String },
    TaskCompleted { task_id: String, user_id: String, outcome: String },
    Branched { taken: bool },
    Split,
    Joined,
    Terminated { status: TerminalStatus },
    Faulted { reason: String },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Invoked { .. } => "invoked",
            Action::EventConsumed { .. } => "event_consumed",
            Action::EventTimedOut => "event_timed_out",
            Action::TaskOpened { .. } => "task_opened",
            Action::TaskCompleted { .. } => "task_completed",
            Action::Branched { .. } => "branched",
            Action::Split => "split",
            Action::Joined => "joined",
            Action::Terminated { .. } => "terminated",
            Action::Faulted { .. } => "faulted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub seq: u64,
    pub step: String,
    #[serde(with = "clock::millis")]
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceState {
    pub variables: BTreeMap<String, String>,
    pub frontier: BTreeSet<String>,
    pub terminal: Option<TerminalStatus>,
    /// Arrivals counted at joins that are not yet ready.
    pub join_arrivals: BTreeMap<String, usize>,
    /// Open task id per human_task step in the frontier.
    pub open_tasks: BTreeMap<String, String>,
    /// When each frontier step was entered.
    #[serde(with = "entered_map")]
    pub entered_at: BTreeMap<String, DateTime<Utc>>,
    pub consumed_events: BTreeSet<String>,
    pub transitions: u64,
}

mod entered_map {
    use std::collections::BTreeMap;

    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        m.iter()
            .map(|(k, v)| (k.clone(), crate::clock::format_millis(v)))
            .collect::<BTreeMap<_, _>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, DateTime<Utc>>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                DateTime::parse_from_rfc3339(&v)
                    .map(|t| (k, t.with_timezone(&Utc)))
                    .map_err(serde::de::Error::custom)
            })
            .collect()
    }
}

impl InstanceState {
    pub fn initial(model: &ProcessModel, inputs: BTreeMap<String, String>, at: DateTime<Utc>) -> Self {
        let mut s = InstanceState {
            variables: inputs,
            frontier: BTreeSet::new(),
            terminal: None,
            join_arrivals: BTreeMap::new(),
            open_tasks: BTreeMap::new(),
            entered_at: BTreeMap::new(),
            consumed_events: BTreeSet::new(),
            transitions: 0,
        };
        s.enter(model, &model.entry_step, at);
        s
    }

    fn enter(&mut self, model: &ProcessModel, step: &str, at: DateTime<Utc>) {
        if let Some(StepDef::Join { arity, .. }) = model.step(step) {
            let n = self.join_arrivals.entry(step.to_string()).or_default();
            *n += 1;
            if *n < *arity {
                return;
            }
            self.join_arrivals.remove(step);
        }
        self.frontier.insert(step.to_string());
        self.entered_at.insert(step.to_string(), at);
    }

    fn leave(&mut self, step: &str) {
        self.frontier.remove(step);
        self.entered_at.remove(step);
        self.open_tasks.remove(step);
    }

    fn move_on(&mut self, model: &ProcessModel, from: &str, to: &str, at: DateTime<Utc>) {
        self.leave(from);
        self.enter(model, to, at);
    }

    fn finish(&mut self, status: TerminalStatus) {
        self.frontier.clear();
        self.entered_at.clear();
        self.open_tasks.clear();
        self.join_arrivals.clear();
        self.terminal = Some(status);
    }

    /// Applies one record. Records produced by the engine always apply; a
    /// record that does not fit the model is reported as an error.
    pub fn apply(&mut self, model: &ProcessModel, rec: &TransitionRecord) -> Result<(), String> {
        if rec.seq != self.transitions + 1 {
            return Err(format!("expected transition {}, got {}", self.transitions + 1, rec.seq));
        }
        if self.terminal.is_some() {
            return Err("instance already terminated".into());
        }
        if !self.frontier.contains(&rec.step) {
            return Err(format!("step `{}` is not in the frontier", rec.step));
        }
        let def = model
            .step(&rec.step)
            .ok_or_else(|| format!("unknown step `{}`", rec.step))?;
        let step = rec.step.as_str();
        let at = rec.at;
        match (&rec.action, def) {
            (Action::Faulted { .. }, _) => self.finish(TerminalStatus::Faulted),
            (Action::Invoked { outcome, .. }, StepDef::ServiceInvoke { output_var, on_fault, next, .. }) => match outcome {
                InvokeOutcome::Response { payload } => {
                    self.variables.insert(output_var.clone(), payload.clone());
                    self.move_on(model, step, next, at);
                }
                InvokeOutcome::Fault { .. } => match on_fault {
                    Some(handler) => self.move_on(model, step, handler, at),
                    None => self.finish(TerminalStatus::Faulted),
                },
            },
            (Action::EventConsumed { envelope_id, value }, StepDef::WaitEvent { output_var, next, .. }) => {
                self.variables.insert(output_var.clone(), value.clone());
                self.consumed_events.insert(envelope_id.clone());
                self.move_on(model, step, next, at);
            }
            (Action::EventTimedOut, StepDef::WaitEvent { on_timeout: Some(handler), .. }) => {
                self.move_on(model, step, handler, at);
            }
            (Action::TaskOpened { task_id, .. }, StepDef::HumanTask { .. }) => {
                self.open_tasks.insert(step.to_string(), task_id.clone());
            }
            (Action::TaskCompleted { task_id, outcome, .. }, StepDef::HumanTask { outcome_var, next, .. }) => {
                if self.open_tasks.get(step) != Some(task_id) {
                    return Err(format!("task `{task_id}` is not open at `{step}`"));
                }
                self.variables.insert(outcome_var.clone(), outcome.clone());
                self.move_on(model, step, next, at);
            }
            (Action::Branched { taken }, StepDef::ExclusiveBranch { if_true, if_false, .. }) => {
                let to = if *taken { if_true } else { if_false };
                self.move_on(model, step, to, at);
            }
            (Action::Split, StepDef::ParallelSplit { branches, .. }) => {
                self.leave(step);
                for b in branches {
                    self.enter(model, b, at);
                }
            }
            (Action::Joined, StepDef::Join { next, .. }) => self.move_on(model, step, next, at),
            (Action::Terminated { status }, StepDef::Terminate { .. }) => self.finish(*status),
            (action, def) => {
                return Err(format!("action {} does not fit {} step `{step}`", action.name(), def.kind()));
            }
        }
        self.transitions += 1;
        Ok(())
    }

    /// Whether the engine can execute `step` now without external input.
    pub fn is_ready(&self, model: &ProcessModel, step: &str, now: DateTime<Utc>) -> bool {
        match model.step(step) {
            Some(StepDef::HumanTask { .. }) => !self.open_tasks.contains_key(step),
            Some(StepDef::WaitEvent { timeout_ms, .. }) => match (timeout_ms, self.entered_at.get(step)) {
                (Some(ms), Some(entered)) => now >= *entered + chrono::Duration::milliseconds(*ms as i64),
                _ => false,
            },
            Some(_) => true,
            None => false,
        }
    }

    pub fn status(&self, model: &ProcessModel) -> InstanceStatus {
        match self.terminal {
            Some(TerminalStatus::Completed) => return InstanceStatus::Completed,
            Some(TerminalStatus::Faulted) => return InstanceStatus::Faulted,
            None => {}
        }
        let blocked = |s: &String| match model.step(s) {
            Some(StepDef::HumanTask { .. }) => self.open_tasks.contains_key(s),
            Some(StepDef::WaitEvent { .. }) => true,
            _ => false,
        };
        if !self.frontier.iter().all(blocked) {
            InstanceStatus::Running
        } else if !self.open_tasks.is_empty() {
            InstanceStatus::WaitingTask
        } else if self.frontier.is_empty() {
            InstanceStatus::Running
        } else {
            InstanceStatus::WaitingEvent
        }
    }
}

/// Rebuilds state from scratch by folding `history` over the initial state.
pub fn replay(
    model: &ProcessModel,
    inputs: BTreeMap<String, String>,
    created_at: DateTime<Utc>,
    history: &[TransitionRecord],
) -> Result<InstanceState, String> {
    let mut s = InstanceState::initial(model, inputs, created_at);
    for rec in history {
        s.apply(model, rec)?;
    }
    Ok(s)
}
