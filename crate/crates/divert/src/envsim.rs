//! Deterministic miniature task environments: tools, mutable table state and
//! executable success predicates.
//!
//! Every tool is a pure function of `(state, call)`. An execution owns its
//! `EnvState` exclusively; concurrent trajectories each hold independent
//! copies restored from snapshots.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Outcome, TerminationReason, ToolCall};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unsupported suite schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },
    #[error("task {task_id:?} references unregistered tool {tool:?}")]
    UnknownTool { task_id: String, tool: String },
    #[error("duplicate task id {task_id:?}")]
    DuplicateTask { task_id: String },
    #[error("suite parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A scalar cell value. Only text and integers are supported; richer value
/// kinds are out of scope for the bundled environments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Int(i64),
    Text(String),
}

impl FieldValue {
    pub fn text(s: impl Into<String>) -> Self {
        FieldValue::Text(s.into())
    }

    fn render(&self) -> String {
        match self {
            FieldValue::Int(n) => n.to_string(),
            FieldValue::Text(s) => s.clone(),
        }
    }
}

pub type Record = BTreeMap<String, FieldValue>;

/// Full environment state: named tables of keyed flat records. Serialization
/// is key-sorted (BTreeMap), so equal states serialize to equal bytes.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EnvState {
    pub tables: BTreeMap<String, BTreeMap<String, Record>>,
}

impl EnvState {
    pub fn get(&self, table: &str, record: &str, field: &str) -> Option<&FieldValue> {
        self.tables.get(table)?.get(record)?.get(field)
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("EnvState serialization cannot fail")
    }
}

/// One field-equality check against a final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvCheck {
    pub table: String,
    pub record: String,
    pub field: String,
    pub equals: FieldValue,
}

/// Conjunction of field-equality checks. Decidable against any state:
/// a missing table, record or field simply fails the check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvAssertion {
    pub checks: Vec<EnvCheck>,
}

impl EnvAssertion {
    pub fn holds(&self, state: &EnvState) -> bool {
        self.checks
            .iter()
            .all(|c| state.get(&c.table, &c.record, &c.field) == Some(&c.equals))
    }
}

/// Outcome of one tool invocation. `ok` and `is_error` are mutually
/// exclusive by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub ok: bool,
    pub payload: String,
    pub is_error: bool,
}

impl ToolResult {
    pub fn success(payload: impl Into<String>) -> Self {
        ToolResult {
            ok: true,
            payload: payload.into(),
            is_error: false,
        }
    }

    pub fn error(payload: impl Into<String>) -> Self {
        ToolResult {
            ok: false,
            payload: payload.into(),
            is_error: true,
        }
    }
}

/// A single evaluable scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub domain: String,
    pub user_instructions: String,
    pub purpose: String,
    pub initial_env: EnvState,
    pub expected_final: EnvAssertion,
    pub tool_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSuite {
    pub schema_version: u32,
    pub tasks: Vec<Task>,
}

pub const SUITE_SCHEMA_VERSION: u32 = 1;

/// Names of the built-in tools.
pub const REGISTERED_TOOLS: &[&str] = &["lookup_order", "cancel_order", "apply_refund", "escalate"];

fn get_str<'a>(call: &'a ToolCall, key: &str) -> Result<&'a str, ToolResult> {
    match call.arguments.get(key) {
        Some(serde_json::Value::String(s)) => Ok(s),
        Some(_) => Err(ToolResult::error(format!(
            "argument error: {key} must be a string"
        ))),
        None => Err(ToolResult::error(format!("argument error: missing {key}"))),
    }
}

fn get_int(call: &ToolCall, key: &str) -> Result<i64, ToolResult> {
    match call.arguments.get(key) {
        Some(serde_json::Value::Number(n)) => n
            .as_i64()
            .ok_or_else(|| ToolResult::error(format!("argument error: {key} must be an integer"))),
        Some(_) => Err(ToolResult::error(format!(
            "argument error: {key} must be an integer"
        ))),
        None => Err(ToolResult::error(format!("argument error: missing {key}"))),
    }
}

fn record_summary(id: &str, record: &Record) -> String {
    let fields: Vec<String> = record
        .iter()
        .map(|(k, v)| format!("{k}={}", v.render()))
        .collect();
    format!("order {id}: {}", fields.join("; "))
}

/// Executes one tool call against a state, returning the successor state and
/// the result. Pure: identical inputs always produce identical outputs, and
/// failed actions leave the state unchanged.
pub fn execute_tool(state: &EnvState, call: &ToolCall) -> (EnvState, ToolResult) {
    match call.name.as_str() {
        "lookup_order" => {
            let id = match get_str(call, "order_id") {
                Ok(v) => v,
                Err(e) => return (state.clone(), e),
            };
            match state.tables.get("orders").and_then(|t| t.get(id)) {
                Some(rec) => (state.clone(), ToolResult::success(record_summary(id, rec))),
                None => (
                    state.clone(),
                    ToolResult::error(format!("order {id} not found")),
                ),
            }
        }
        "cancel_order" => {
            let id = match get_str(call, "order_id") {
                Ok(v) => v.to_string(),
                Err(e) => return (state.clone(), e),
            };
            let mut next = state.clone();
            let Some(rec) = next.tables.get_mut("orders").and_then(|t| t.get_mut(&id)) else {
                return (
                    state.clone(),
                    ToolResult::error(format!("order {id} not found")),
                );
            };
            if rec.get("status") == Some(&FieldValue::text("cancelled")) {
                return (
                    state.clone(),
                    ToolResult::error(format!("order {id} already cancelled")),
                );
            }
            rec.insert("status".into(), FieldValue::text("cancelled"));
            (next, ToolResult::success(format!("order {id} cancelled")))
        }
        "apply_refund" => {
            let id = match get_str(call, "order_id") {
                Ok(v) => v.to_string(),
                Err(e) => return (state.clone(), e),
            };
            let amount = match get_int(call, "amount_cents") {
                Ok(v) => v,
                Err(e) => return (state.clone(), e),
            };
            let mut next = state.clone();
            let Some(rec) = next.tables.get_mut("orders").and_then(|t| t.get_mut(&id)) else {
                return (
                    state.clone(),
                    ToolResult::error(format!("order {id} not found")),
                );
            };
            if rec.get("status") != Some(&FieldValue::text("cancelled")) {
                return (
                    state.clone(),
                    ToolResult::error(format!("refund requires order {id} to be cancelled")),
                );
            }
            if rec.contains_key("refunded_cents") {
                return (
                    state.clone(),
                    ToolResult::error(format!("order {id} already refunded")),
                );
            }
            rec.insert("refunded_cents".into(), FieldValue::Int(amount));
            (
                next,
                ToolResult::success(format!("refund of {amount} cents applied to order {id}")),
            )
        }
        "escalate" => {
            let reason = match get_str(call, "reason") {
                Ok(v) => v.to_string(),
                Err(e) => return (state.clone(), e),
            };
            let mut next = state.clone();
            let table = next.tables.entry("escalations".into()).or_default();
            let id = format!("e{}", table.len() + 1);
            let mut rec = Record::new();
            rec.insert("reason".into(), FieldValue::Text(reason));
            rec.insert("open".into(), FieldValue::text("true"));
            table.insert(id.clone(), rec);
            (next, ToolResult::success(format!("escalation {id} opened")))
        }
        other => (
            state.clone(),
            ToolResult::error(format!("unknown tool {other}")),
        ),
    }
}

/// Applies a recorded tool-call sequence to an initial state. Used to check
/// replay equivalence against a live execution's final state.
pub fn replay_tool_calls<'a>(
    initial: &EnvState,
    calls: impl IntoIterator<Item = &'a ToolCall>,
) -> EnvState {
    let mut state = initial.clone();
    for call in calls {
        let (next, _) = execute_tool(&state, call);
        state = next;
    }
    state
}

/// Scores a terminated execution: success requires both a clean termination
/// and a final state satisfying the task's expected-final assertion. Budget
/// or provider terminations dominate the predicate.
pub fn evaluate_success(
    task: &Task,
    final_state: &EnvState,
    termination: TerminationReason,
) -> Outcome {
    match termination {
        TerminationReason::TaskDone => {
            if task.expected_final.holds(final_state) {
                Outcome::success()
            } else {
                Outcome::failure()
            }
        }
        other => Outcome::incomplete(other),
    }
}

/// Loads and validates a task suite file, preserving file order.
pub fn load_task_suite(path: &Path) -> Result<TaskSuite, EnvError> {
    let bytes = std::fs::read(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let suite: TaskSuite = serde_json::from_slice(&bytes)?;
    validate_suite(&suite)?;
    Ok(suite)
}

pub fn validate_suite(suite: &TaskSuite) -> Result<(), EnvError> {
    if suite.schema_version != SUITE_SCHEMA_VERSION {
        return Err(EnvError::SchemaVersion {
            found: suite.schema_version,
            supported: SUITE_SCHEMA_VERSION,
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for task in &suite.tasks {
        if !seen.insert(task.task_id.clone()) {
            return Err(EnvError::DuplicateTask {
                task_id: task.task_id.clone(),
            });
        }
        for tool in &task.tool_names {
            if !REGISTERED_TOOLS.contains(&tool.as_str()) {
                return Err(EnvError::UnknownTool {
                    task_id: task.task_id.clone(),
                    tool: tool.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Path-independent access to the bundled mini-orders suite for tests and
/// examples.
pub fn bundled_mini_orders() -> TaskSuite {
    let suite: TaskSuite = serde_json::from_str(include_str!("../suites/mini_orders.json"))
        .expect("bundled suite is valid");
    validate_suite(&suite).expect("bundled suite validates");
    suite
}
