//! Runs one agent–user–environment conversation to termination, emitting a
//! snapshot immediately before every user generation.
//!
//! One `ExecutionState` belongs to exactly one logical thread of execution.
//! Rollouts and branches may run concurrently as long as they share no
//! state and the snapshot sink accepts concurrent saves to distinct paths.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Lineage, Message, Role, TerminationReason, TokenLedger, ToolCall, Trajectory};
use crate::envsim::{evaluate_success, execute_tool, EnvState, Task, ToolResult};
use crate::providers::{ChatMessage, ChatProvider, ChatRequest, ProviderError, RoleTag};
use crate::snapshots::{snapshot_id, Snapshot, SnapshotError, SnapshotSink};

/// The user simulator ends the conversation by emitting this token.
pub const DONE_TOKEN: &str = "###DONE###";
/// Agents signal tool calls with a single line `TOOL <name> <json-args>`.
pub const TOOL_DIRECTIVE_PREFIX: &str = "TOOL ";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// Execution limits and decoding settings. Defaults: seed 42, agent
/// temperature 0.0, user temperature 0.7, 100 steps, 10 errors, 3 attempts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub agent_temperature: f64,
    pub user_temperature: f64,
    pub max_steps: usize,
    pub max_errors: usize,
    pub max_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            agent_temperature: 0.0,
            user_temperature: 0.7,
            max_steps: 100,
            max_errors: 10,
            max_retries: 3,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.max_steps == 0 || self.max_errors == 0 || self.max_retries == 0 {
            return Err(OrchestratorError::InvalidConfig(
                "max_steps, max_errors and max_retries must be positive".into(),
            ));
        }
        if !self.agent_temperature.is_finite()
            || !self.user_temperature.is_finite()
            || self.agent_temperature < 0.0
            || self.user_temperature < 0.0
        {
            return Err(OrchestratorError::InvalidConfig(
                "temperatures must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Complete frozen execution state. Restoring a snapshot of this and
/// continuing is indistinguishable from never pausing, under identical
/// providers and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub task: Task,
    pub env: EnvState,
    pub messages: Vec<Message>,
    pub from_role: Role,
    pub to_role: Role,
    pub pending_message: Option<Message>,
    pub step_count: usize,
    pub error_count: usize,
    pub done: bool,
    pub termination_reason: Option<TerminationReason>,
    pub seed: u64,
    pub ledger: TokenLedger,
    pub lineage: Lineage,
    /// Opaque slot for agent-internal state; empty for stateless chat agents.
    pub agent_scratchpad: String,
    /// Sample nonce for the next user generation; nonzero only on natural
    /// continuations that must re-sample the junction turn.
    pub next_user_nonce: u64,
    pub last_snapshot_id: Option<String>,
}

impl ExecutionState {
    pub fn initial(task: &Task, seed: u64, lineage: Lineage) -> Self {
        let system = Message::new(
            0,
            Role::System,
            agent_system_prompt(task),
            crate::core::TokenUsage::zero(),
        );
        ExecutionState {
            task: task.clone(),
            env: task.initial_env.clone(),
            messages: vec![system],
            from_role: Role::System,
            to_role: Role::User,
            pending_message: None,
            step_count: 0,
            error_count: 0,
            done: false,
            termination_reason: None,
            seed,
            ledger: TokenLedger::zero(),
            lineage,
            agent_scratchpad: String::new(),
            next_user_nonce: 0,
            last_snapshot_id: None,
        }
    }
}

pub fn agent_system_prompt(task: &Task) -> String {
    format!(
        "You are a customer support agent for the {} desk.\n\
         Tools: lookup_order(order_id), cancel_order(order_id), apply_refund(order_id, amount_cents), escalate(reason).\n\
         To call a tool, reply with exactly one line of the form: TOOL <name> <json-arguments>.\n\
         Tool results come back as messages of the form [tool_name] ok: ... or [tool_name] error: ...\n\
         Policy: look an order up before acting on it; orders marked protected=true must never be cancelled — offer escalation instead; refunds require the order to be cancelled first.\n\
         Keep replies short and factual.",
        task.domain
    )
}

pub fn user_system_prompt(task: &Task) -> String {
    format!(
        "You are role-playing a customer talking to a support agent.\n\
         Stay in character and pursue this goal:\n{}\n\
         Speak only as the customer, one message at a time.\n\
         When your goal has been fully handled, reply with the single token {DONE_TOKEN}.",
        task.user_instructions
    )
}

/// Parses a `TOOL <name> <json-args>` directive. `None` when the text is not
/// a directive at all; `Some(Err)` when it is one but malformed.
pub fn parse_tool_directive(content: &str) -> Option<Result<ToolCall, String>> {
    let line = content.trim();
    let rest = line.strip_prefix(TOOL_DIRECTIVE_PREFIX)?;
    let (name, args_text) = match rest.split_once(char::is_whitespace) {
        Some((n, a)) => (n.trim(), a.trim()),
        None => (rest.trim(), ""),
    };
    if name.is_empty() {
        return Some(Err("missing tool name".into()));
    }
    if args_text.is_empty() {
        return Some(Err(format!("missing arguments for tool {name}")));
    }
    match serde_json::from_str::<serde_json::Value>(args_text) {
        Ok(serde_json::Value::Object(map)) => Some(Ok(ToolCall {
            name: name.to_string(),
            arguments: map,
        })),
        Ok(_) => Some(Err(format!(
            "arguments for tool {name} are not a JSON object"
        ))),
        Err(e) => Some(Err(format!("unparseable arguments for tool {name}: {e}"))),
    }
}

fn build_agent_request(state: &ExecutionState, config: &RunConfig) -> ChatRequest {
    let messages = state
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Agent => "assistant",
                Role::Tool => "tool",
            };
            ChatMessage::new(role, m.content.clone())
        })
        .collect();
    ChatRequest::new(
        messages,
        config.agent_temperature,
        config.max_retries,
        RoleTag::Agent,
    )
    .with_seed(state.seed)
}

fn build_user_request(state: &ExecutionState, config: &RunConfig) -> ChatRequest {
    let mut messages = vec![ChatMessage::new("system", user_system_prompt(&state.task))];
    for m in state.messages.iter().skip(1) {
        match m.role {
            Role::User => messages.push(ChatMessage::new("assistant", m.content.clone())),
            Role::Agent => messages.push(ChatMessage::new("user", m.content.clone())),
            // the customer does not see tool internals or the agent preamble
            Role::Tool | Role::System => {}
        }
    }
    ChatRequest::new(
        messages,
        config.user_temperature,
        config.max_retries,
        RoleTag::User,
    )
    .with_seed(state.seed)
    .with_nonce(state.next_user_nonce)
}

/// Builds the snapshot for the current state and threads the snapshot id so
/// a restored continuation chains its next snapshot correctly.
fn emit_snapshot(state: &mut ExecutionState, sink: &dyn SnapshotSink) -> Result<(), SnapshotError> {
    let id = snapshot_id(
        &state.task.task_id,
        &state.lineage.iteration_label,
        state.step_count,
    );
    let parent_id = state.last_snapshot_id.replace(id.clone());
    let snapshot = Snapshot {
        id,
        parent_id,
        iteration_label: state.lineage.iteration_label.clone(),
        step_count: state.step_count,
        seed: state.seed,
        execution_state: state.clone(),
        created_at: chrono::Utc::now().to_rfc3339(),
        augmentation: None,
    };
    sink.save(&snapshot)?;
    Ok(())
}

pub struct FinishedRun {
    pub trajectory: Trajectory,
    pub final_env: EnvState,
}

/// Runs a fresh rollout of `task` to termination.
pub fn run_rollout(
    task: &Task,
    seed: u64,
    lineage: Lineage,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    sink: &dyn SnapshotSink,
) -> Result<Trajectory, OrchestratorError> {
    run_rollout_full(task, seed, lineage, config, chat, sink).map(|run| run.trajectory)
}

pub fn run_rollout_full(
    task: &Task,
    seed: u64,
    lineage: Lineage,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    sink: &dyn SnapshotSink,
) -> Result<FinishedRun, OrchestratorError> {
    config.validate()?;
    let state = ExecutionState::initial(task, seed, lineage);
    drive(state, config, chat, sink)
}

/// Continues a restored execution exactly as `run_rollout` would from that
/// point. Prefix messages are preserved verbatim; only newly generated turns
/// are charged to the ledger.
pub fn resume_execution(
    state: ExecutionState,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    sink: &dyn SnapshotSink,
) -> Result<Trajectory, OrchestratorError> {
    resume_execution_full(state, config, chat, sink).map(|run| run.trajectory)
}

pub fn resume_execution_full(
    state: ExecutionState,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    sink: &dyn SnapshotSink,
) -> Result<FinishedRun, OrchestratorError> {
    config.validate()?;
    if state.done {
        return Err(OrchestratorError::InvalidState(
            "cannot resume a finished execution".into(),
        ));
    }
    drive(state, config, chat, sink)
}

fn drive(
    mut state: ExecutionState,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    sink: &dyn SnapshotSink,
) -> Result<FinishedRun, OrchestratorError> {
    while !state.done {
        match state.to_role {
            Role::User => user_turn(&mut state, config, chat, sink)?,
            Role::Agent => agent_turn(&mut state, config, chat)?,
            Role::Tool => tool_turn(&mut state),
            Role::System => {
                return Err(OrchestratorError::InvalidState(
                    "control routed to the system role".into(),
                ))
            }
        }
        enforce_budgets(&mut state, config);
    }

    let termination = state
        .termination_reason
        .expect("terminated executions carry a reason");
    let outcome = evaluate_success(&state.task, &state.env, termination);
    let trajectory = Trajectory {
        task_id: state.task.task_id.clone(),
        seed: state.seed,
        messages: state.messages,
        outcome,
        ledger: state.ledger,
        lineage: state.lineage,
        step_count: state.step_count,
        error_count: state.error_count,
    };
    Ok(FinishedRun {
        trajectory,
        final_env: state.env,
    })
}

fn append(state: &mut ExecutionState, mut message: Message) {
    message.index = state.messages.len();
    state.from_role = message.role;
    state.messages.push(message);
    state.step_count += 1;
}

fn user_turn(
    state: &mut ExecutionState,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    sink: &dyn SnapshotSink,
) -> Result<(), OrchestratorError> {
    let message = match state.pending_message.take() {
        // injected turn: no generation, no snapshot, no ledger charge; the
        // injection consumes any pending resample nonce exactly like a
        // generation would
        Some(message) => {
            state.next_user_nonce = 0;
            message
        }
        None => {
            emit_snapshot(state, sink)?;
            let request = build_user_request(state, config);
            state.next_user_nonce = 0;
            match chat.chat_complete(&request) {
                Ok(result) => {
                    state.ledger.user = state.ledger.user.saturating_add(result.tokens);
                    Message::new(0, Role::User, result.content, result.tokens)
                }
                Err(ProviderError::Exhausted { tokens, .. }) => {
                    // failed attempts are still real cost
                    state.ledger.user = state.ledger.user.saturating_add(tokens);
                    state.done = true;
                    state.termination_reason = Some(TerminationReason::ProviderError);
                    return Ok(());
                }
                Err(other) => {
                    return Err(OrchestratorError::InvalidState(format!(
                        "user provider: {other}"
                    )))
                }
            }
        }
    };
    let ends = message.content.contains(DONE_TOKEN);
    append(state, message);
    if ends {
        state.done = true;
        state.termination_reason = Some(TerminationReason::TaskDone);
    } else {
        state.to_role = Role::Agent;
    }
    Ok(())
}

fn agent_turn(
    state: &mut ExecutionState,
    config: &RunConfig,
    chat: &dyn ChatProvider,
) -> Result<(), OrchestratorError> {
    let request = build_agent_request(state, config);
    let result = match chat.chat_complete(&request) {
        Ok(result) => result,
        Err(ProviderError::Exhausted { tokens, .. }) => {
            state.ledger.agent = state.ledger.agent.saturating_add(tokens);
            state.done = true;
            state.termination_reason = Some(TerminationReason::ProviderError);
            return Ok(());
        }
        Err(other) => {
            return Err(OrchestratorError::InvalidState(format!(
                "agent provider: {other}"
            )))
        }
    };
    state.ledger.agent = state.ledger.agent.saturating_add(result.tokens);
    let mut message = Message::new(0, Role::Agent, result.content.clone(), result.tokens);
    match parse_tool_directive(&result.content) {
        Some(Ok(call)) => {
            message.tool_call = Some(call);
            append(state, message);
            state.to_role = Role::Tool;
        }
        Some(Err(_)) => {
            // malformed directive: recorded as an errored tool turn below
            append(state, message);
            state.to_role = Role::Tool;
        }
        None => {
            append(state, message);
            state.to_role = Role::User;
        }
    }
    Ok(())
}

fn tool_turn(state: &mut ExecutionState) {
    let last = state
        .messages
        .last()
        .expect("tool turns follow an agent message");
    debug_assert_eq!(last.role, Role::Agent);
    let (name, result) = match &last.tool_call {
        Some(call) => {
            let requested: Vec<&String> = state.task.tool_names.iter().collect();
            if !requested.iter().any(|t| **t == call.name) {
                (
                    call.name.clone(),
                    ToolResult::error(format!("unknown tool {}", call.name)),
                )
            } else {
                let (next_env, result) = execute_tool(&state.env, call);
                state.env = next_env;
                (call.name.clone(), result)
            }
        }
        None => {
            let detail = match parse_tool_directive(&last.content) {
                Some(Err(e)) => e,
                _ => "malformed tool directive".into(),
            };
            ("malformed".into(), ToolResult::error(detail))
        }
    };
    if result.is_error {
        state.error_count += 1;
    }
    let status = if result.ok { "ok" } else { "error" };
    let mut message = Message::new(
        0,
        Role::Tool,
        format!("[{name}] {status}: {}", result.payload),
        crate::core::TokenUsage::zero(),
    );
    message.tool_result = Some(result.payload);
    append(state, message);
    state.to_role = Role::Agent;
}

fn enforce_budgets(state: &mut ExecutionState, config: &RunConfig) {
    if state.done {
        return;
    }
    if state.error_count >= config.max_errors {
        state.done = true;
        state.termination_reason = Some(TerminationReason::MaxErrors);
    } else if state.step_count >= config.max_steps {
        state.done = true;
        state.termination_reason = Some(TerminationReason::MaxSteps);
    }
}
