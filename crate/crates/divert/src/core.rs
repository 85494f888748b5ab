//! Domain types shared by every other module: messages, trajectories,
//! token accounting and experiment-tree labels.
//!
//! Everything here is an immutable value object; trajectories and their
//! parts are safe to clone and share across concurrently running
//! executions without coordination.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid iteration label {label:?}: {detail}")]
    InvalidLabel { label: String, detail: String },
    #[error("invalid child index 0: child indices are 1-based")]
    ZeroChildIndex,
    #[error("invalid message at index {index}: {detail}")]
    InvalidMessage { index: usize, detail: String },
    #[error("trajectory decode error on line {line}: {source}")]
    Decode {
        line: usize,
        source: serde_json::Error,
    },
    #[error("trajectory encode error: {0}")]
    Encode(#[source] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Speaker of a message. Closed enumeration; every message has exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
    System,
    Tool,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::User => "user",
            Role::Agent => "agent",
            Role::System => "system",
            Role::Tool => "tool",
        };
        f.write_str(s)
    }
}

/// Prompt/completion token counts. Addition is componentwise and saturating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens.saturating_add(self.completion_tokens)
    }

    pub fn saturating_add(self, other: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens.saturating_add(other.prompt_tokens),
            completion_tokens: self
                .completion_tokens
                .saturating_add(other.completion_tokens),
        }
    }

    /// Componentwise sum plus a flag reporting whether any component saturated.
    pub fn add_reporting(self, other: TokenUsage) -> (TokenUsage, bool) {
        let saturated = self
            .prompt_tokens
            .checked_add(other.prompt_tokens)
            .is_none()
            || self
                .completion_tokens
                .checked_add(other.completion_tokens)
                .is_none();
        (self.saturating_add(other), saturated)
    }
}

/// Per-role token ledger for one trajectory. A branch's ledger covers only
/// turns generated after the junction plus the framework overhead spent to
/// create the branch; the reused prefix is never re-charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenLedger {
    pub agent: TokenUsage,
    pub user: TokenUsage,
    pub junction_overhead: TokenUsage,
    pub candidate_overhead: TokenUsage,
}

impl TokenLedger {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn overhead(&self) -> TokenUsage {
        self.junction_overhead
            .saturating_add(self.candidate_overhead)
    }

    /// Componentwise merge with saturation reporting.
    pub fn merge_reporting(a: &TokenLedger, b: &TokenLedger) -> (TokenLedger, bool) {
        let (agent, s1) = a.agent.add_reporting(b.agent);
        let (user, s2) = a.user.add_reporting(b.user);
        let (junction_overhead, s3) = a.junction_overhead.add_reporting(b.junction_overhead);
        let (candidate_overhead, s4) = a.candidate_overhead.add_reporting(b.candidate_overhead);
        (
            TokenLedger {
                agent,
                user,
                junction_overhead,
                candidate_overhead,
            },
            s1 || s2 || s3 || s4,
        )
    }
}

/// Componentwise ledger sum; commutative and associative. Counts saturate at
/// `u64::MAX`; use [`TokenLedger::merge_reporting`] to observe saturation.
pub fn ledger_merge(a: &TokenLedger, b: &TokenLedger) -> TokenLedger {
    TokenLedger::merge_reporting(a, b).0
}

/// Why a trajectory stopped executing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    TaskDone,
    MaxSteps,
    MaxErrors,
    ProviderError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeStatus {
    Success,
    Failure,
    Incomplete,
}

/// Final verdict of a trajectory. `incomplete` is kept distinct from
/// `failure` at the type level; the analysis module decides how it counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub status: OutcomeStatus,
    pub termination_reason: TerminationReason,
}

impl Outcome {
    pub fn success() -> Self {
        Outcome {
            status: OutcomeStatus::Success,
            termination_reason: TerminationReason::TaskDone,
        }
    }

    pub fn failure() -> Self {
        Outcome {
            status: OutcomeStatus::Failure,
            termination_reason: TerminationReason::TaskDone,
        }
    }

    pub fn incomplete(reason: TerminationReason) -> Self {
        debug_assert!(reason != TerminationReason::TaskDone);
        Outcome {
            status: OutcomeStatus::Incomplete,
            termination_reason: reason,
        }
    }

    /// Failed for metric purposes: anything that is not a success.
    pub fn is_failed(&self) -> bool {
        self.status != OutcomeStatus::Success
    }
}

/// Tool invocation parsed from an agent turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: serde_json::Map<String, serde_json::Value>,
}

/// One turn of a conversation. `index` is the 0-based position within the
/// trajectory's message list and is strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub index: usize,
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_result: Option<String>,
    pub tokens: TokenUsage,
}

impl Message {
    pub fn new(index: usize, role: Role, content: impl Into<String>, tokens: TokenUsage) -> Self {
        Message {
            index,
            role,
            content: content.into(),
            tool_call: None,
            tool_result: None,
            tokens,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.tool_call.is_some() && self.role != Role::Agent {
            return Err(CoreError::InvalidMessage {
                index: self.index,
                detail: format!("tool_call present on role {}", self.role),
            });
        }
        if self.tool_result.is_some() && self.role != Role::Tool {
            return Err(CoreError::InvalidMessage {
                index: self.index,
                detail: format!("tool_result present on role {}", self.role),
            });
        }
        Ok(())
    }
}

/// Position of a trajectory in the experiment tree.
///
/// Root rollouts carry their 1-based ordinal as label ("1", "2", ...);
/// a branch's label extends its parent's by `_<child index>`. The label
/// encodes the full ancestry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub iteration_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub junction_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub junction_reason: Option<String>,
}

impl Lineage {
    /// Lineage of the r-th root rollout of a task (1-based).
    pub fn root(ordinal: u32) -> Self {
        Lineage {
            iteration_label: ordinal.to_string(),
            parent_label: None,
            junction_index: None,
            junction_reason: None,
        }
    }

    pub fn is_root(&self) -> bool {
        self.parent_label.is_none()
    }

    /// Branch depth: 0 for roots, +1 per `_` segment.
    pub fn depth(&self) -> usize {
        label_depth(&self.iteration_label)
    }
}

/// Extends `parent_label` ancestry by `child_index` (1-based).
///
/// The empty parent label denotes the conceptual task root, so
/// `iteration_child_label("", 3)` is `"3"`.
pub fn iteration_child_label(parent_label: &str, child_index: u32) -> Result<String, CoreError> {
    if child_index == 0 {
        return Err(CoreError::ZeroChildIndex);
    }
    if !parent_label.is_empty() {
        parse_label(parent_label)?;
    }
    if parent_label.is_empty() {
        Ok(child_index.to_string())
    } else {
        Ok(format!("{parent_label}_{child_index}"))
    }
}

/// Splits a label at its last underscore, recovering `(parent_label, child_index)`.
pub fn split_label(label: &str) -> Result<(String, u32), CoreError> {
    let segments = parse_label(label)?;
    let child = *segments.last().expect("parse_label rejects empty labels");
    let parent = match label.rfind('_') {
        Some(pos) => label[..pos].to_string(),
        None => String::new(),
    };
    Ok((parent, child))
}

/// Parses an iteration label into its 1-based segments, validating the
/// underscore-joined-positive-integers grammar.
pub fn parse_label(label: &str) -> Result<Vec<u32>, CoreError> {
    let invalid = |detail: &str| CoreError::InvalidLabel {
        label: label.to_string(),
        detail: detail.to_string(),
    };
    if label.is_empty() {
        return Err(invalid("empty label"));
    }
    let mut segments = Vec::new();
    for part in label.split('_') {
        if part.is_empty() {
            return Err(invalid("empty segment"));
        }
        if part.len() > 1 && part.starts_with('0') {
            return Err(invalid("leading zero"));
        }
        let n: u32 = part
            .parse()
            .map_err(|_| invalid("segment is not an integer"))?;
        if n == 0 {
            return Err(invalid("segment must be >= 1"));
        }
        segments.push(n);
    }
    Ok(segments)
}

pub fn label_depth(label: &str) -> usize {
    if label.is_empty() {
        0
    } else {
        label.matches('_').count()
    }
}

/// The unit of evaluation: one complete rollout or branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub seed: u64,
    pub messages: Vec<Message>,
    pub outcome: Outcome,
    pub ledger: TokenLedger,
    pub lineage: Lineage,
    pub step_count: usize,
    pub error_count: usize,
}

impl Trajectory {
    /// Message indices of user turns, in order.
    pub fn user_turn_indices(&self) -> Vec<usize> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::User)
            .map(|m| m.index)
            .collect()
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        for (pos, msg) in self.messages.iter().enumerate() {
            msg.validate()?;
            if msg.index != pos {
                return Err(CoreError::InvalidMessage {
                    index: msg.index,
                    detail: format!("index does not match position {pos}"),
                });
            }
        }
        Ok(())
    }

    pub fn to_jsonl_line(&self) -> Result<String, CoreError> {
        serde_json::to_string(self).map_err(CoreError::Encode)
    }
}

/// Re-derives a trajectory's ledger's message-attributable part by summing
/// per-message token usage. Prefix messages of a branch are excluded: only
/// messages from the junction onward (exclusive of the injected turn, which
/// carries zero usage) were generated by the branch.
pub fn resum_message_usage(trajectory: &Trajectory) -> BTreeMap<Role, TokenUsage> {
    let start = trajectory.lineage.junction_index.unwrap_or_default();
    let mut sums: BTreeMap<Role, TokenUsage> = BTreeMap::new();
    for msg in trajectory.messages.iter().filter(|m| m.index >= start) {
        let entry = sums.entry(msg.role).or_default();
        *entry = entry.saturating_add(msg.tokens);
    }
    sums
}

impl Ord for Role {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl PartialOrd for Role {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Writes trajectories as JSONL, one object per line, in the given order.
pub fn write_trajectories<W: Write>(
    mut writer: W,
    trajectories: &[Trajectory],
) -> Result<(), CoreError> {
    for t in trajectories {
        writer.write_all(t.to_jsonl_line()?.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_trajectories_file(path: &Path, trajectories: &[Trajectory]) -> Result<(), CoreError> {
    let file = std::fs::File::create(path)?;
    let mut buf = std::io::BufWriter::new(file);
    write_trajectories(&mut buf, trajectories)?;
    buf.flush()?;
    Ok(())
}

pub fn read_trajectories<R: BufRead>(reader: R) -> Result<Vec<Trajectory>, CoreError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| CoreError::Decode {
            line: i + 1,
            source: e,
        })?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn read_trajectories_file(path: &Path) -> Result<Vec<Trajectory>, CoreError> {
    let file = std::fs::File::open(path)?;
    read_trajectories(std::io::BufReader::new(file))
}
