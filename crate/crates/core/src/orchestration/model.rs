//! Process model definitions and their validation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::expr::{self, Predicate};
use crate::envelope::Destination;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Completed,
    Faulted,
}

fn default_content_type() -> String {
    "text/plain".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepDef {
    ServiceInvoke {
        destination: Destination,
        payload_template: String,
        #[serde(default = "default_content_type")]
        content_type: String,
        output_var: String,
        #[serde(default)]
        on_fault: Option<String>,
        next: String,
    },
    WaitEvent {
        topic: String,
        correlation_var: String,
        output_var: String,
        #[serde(default)]
        timeout_ms: Option<u64>,
        #[serde(default)]
        on_timeout: Option<String>,
        next: String,
    },
    HumanTask {
        role: String,
        prompt_template: String,
        outcome_var: String,
        next: String,
    },
    ExclusiveBranch {
        predicate: String,
        if_true: String,
        if_false: String,
    },
    ParallelSplit {
        branches: Vec<String>,
        join: String,
    },
    Join {
        arity: usize,
        next: String,
    },
    Terminate {
        status: TerminalStatus,
    },
}

impl StepDef {
    /// Every step this one can hand control to.
    pub fn successors(&self) -> Vec<&str> {
        match self {
            StepDef::ServiceInvoke { on_fault, next, .. } => {
                std::iter::once(next.as_str()).chain(on_fault.as_deref()).collect()
            }
            StepDef::WaitEvent { on_timeout, next, .. } => {
                std::iter::once(next.as_str()).chain(on_timeout.as_deref()).collect()
            }
            StepDef::HumanTask { next, .. } | StepDef::Join { next, .. } => vec![next],
            StepDef::ExclusiveBranch { if_true, if_false, .. } => vec![if_true, if_false],
            StepDef::ParallelSplit { branches, .. } => branches.iter().map(String::as_str).collect(),
            StepDef::Terminate { .. } => vec![],
        }
    }

    /// The variable this step writes, if any.
    pub fn assigns(&self) -> Option<&str> {
        match self {
            StepDef::ServiceInvoke { output_var, .. } | StepDef::WaitEvent { output_var, .. } => Some(output_var),
            StepDef::HumanTask { outcome_var, .. } => Some(outcome_var),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StepDef::ServiceInvoke { .. } => "service_invoke",
            StepDef::WaitEvent { .. } => "wait_event",
            StepDef::HumanTask { .. } => "human_task",
            StepDef::ExclusiveBranch { .. } => "exclusive_branch",
            StepDef::ParallelSplit { .. } => "parallel_split",
            StepDef::Join { .. } => "join",
            StepDef::Terminate { .. } => "terminate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessModel {
    pub model_id: String,
    /// Assigned at registration; any value supplied in a definition is
    /// ignored.
    #[serde(default)]
    pub version: u32,
    pub entry_step: String,
    #[serde(default)]
    pub variables: BTreeSet<String>,
    pub steps: BTreeMap<String, StepDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub step: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.step {
            Some(s) => write!(f, "step `{s}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl ProcessModel {
    pub fn step(&self, name: &str) -> Option<&StepDef> {
        self.steps.get(name)
    }

    /// Declared variables that no step ever assigns; a new instance must
    /// supply all of them.
    pub fn required_inputs(&self) -> BTreeSet<String> {
        let assigned: BTreeSet<&str> = self.steps.values().filter_map(StepDef::assigns).collect();
        self.variables
            .iter()
            .filter(|v| !assigned.contains(v.as_str()))
            .cloned()
            .collect()
    }

    fn reachable_from(&self, start: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([start.to_string()]);
        while let Some(s) = queue.pop_front() {
            if !seen.insert(s.clone()) {
                continue;
            }
            if let Some(def) = self.steps.get(&s) {
                queue.extend(def.successors().into_iter().map(String::from));
            }
        }
        seen
    }

    /// Structural checks; returns every problem found.
    pub fn validate(&self) -> Result<(), Vec<Diagnostic>> {
        let mut diags = Vec::new();
        let mut err = |step: Option<&str>, message: String| {
            diags.push(Diagnostic {
                step: step.map(String::from),
                message,
            })
        };
        if self.model_id.trim().is_empty() {
            err(None, "model_id must be non-empty".into());
        }
        if !self.steps.contains_key(&self.entry_step) {
            err(None, format!("entry step `{}` does not exist", self.entry_step));
        }
        for v in &self.variables {
            if !expr::is_identifier(v) {
                err(None, format!("`{v}` is not a valid variable name"));
            }
        }
        let declared = |v: &str| self.variables.contains(v);

        for (name, def) in &self.steps {
            let at = Some(name.as_str());
            for target in def.successors() {
                if !self.steps.contains_key(target) {
                    err(at, format!("target `{target}` does not exist"));
                }
            }
            if let Some(v) = def.assigns() {
                if !declared(v) {
                    err(at, format!("assigns undeclared variable `{v}`"));
                }
            }
            let mut check_template = |t: &str| match expr::template_vars(t) {
                Ok(vars) => {
                    for v in vars.iter().filter(|v| !declared(v)) {
                        err(at, format!("template references undeclared variable `{v}`"));
                    }
                }
                Err(e) => err(at, e),
            };
            match def {
                StepDef::ServiceInvoke { payload_template, .. } => check_template(payload_template),
                StepDef::HumanTask {
                    prompt_template, role, ..
                } => {
                    check_template(prompt_template);
                    if role.trim().is_empty() {
                        err(at, "role must be non-empty".into());
                    }
                }
                StepDef::WaitEvent {
                    correlation_var,
                    timeout_ms,
                    on_timeout,
                    topic,
                    ..
                } => {
                    if !declared(correlation_var) {
                        err(at, format!("correlation variable `{correlation_var}` is undeclared"));
                    }
                    if timeout_ms.is_some() != on_timeout.is_some() {
                        err(at, "timeout_ms and on_timeout must be given together".into());
                    }
                    if topic.trim().is_empty() {
                        err(at, "topic must be non-empty".into());
                    }
                }
                StepDef::ExclusiveBranch { predicate, .. } => match Predicate::parse(predicate) {
                    Ok(p) if !declared(&p.var) => err(at, format!("predicate references undeclared variable `{}`", p.var)),
                    Ok(_) => {}
                    Err(e) => err(at, e),
                },
                StepDef::ParallelSplit { branches, join } => {
                    if branches.is_empty() {
                        err(at, "parallel split needs at least one branch".into());
                    }
                    let distinct: BTreeSet<&String> = branches.iter().collect();
                    if distinct.len() != branches.len() {
                        err(at, "branches must be distinct".into());
                    }
                    match self.steps.get(join) {
                        Some(StepDef::Join { arity, .. }) => {
                            if *arity != branches.len() {
                                err(at, format!("join `{join}` has arity {arity} but split has {} branches", branches.len()));
                            }
                            for b in branches.iter().filter(|b| self.steps.contains_key(*b)) {
                                if !self.reachable_from(b).contains(join) {
                                    err(at, format!("branch `{b}` never reaches join `{join}`"));
                                }
                            }
                        }
                        Some(_) => err(at, format!("`{join}` is not a join step")),
                        None => err(at, format!("join `{join}` does not exist")),
                    }
                }
                StepDef::Join { arity, .. } => {
                    if *arity == 0 {
                        err(at, "join arity must be at least 1".into());
                    }
                    let owned = self.steps.values().any(|d| matches!(d, StepDef::ParallelSplit { join, .. } if join == name));
                    if !owned {
                        err(at, "join is not the join of any parallel split".into());
                    }
                }
                StepDef::Terminate { .. } => {}
            }
        }

        if self.steps.contains_key(&self.entry_step) {
            let reachable = self.reachable_from(&self.entry_step);
            for name in self.steps.keys().filter(|n| !reachable.contains(*n)) {
                err(Some(name), "unreachable from the entry step".into());
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(diags)
        }
    }
}
