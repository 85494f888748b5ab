//! The branching pipeline: junction selection, directed candidate
//! generation, divergence-based selection, and budgeted iterative branching
//! over a growing trajectory pool.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{
    iteration_child_label, CoreError, Lineage, Message, Role, TokenLedger, TokenUsage, Trajectory,
};
use crate::envsim::{Task, TaskSuite};
use crate::orchestrator::{resume_execution, run_rollout, OrchestratorError, RunConfig};
use crate::providers::{
    cosine_similarity, ChatMessage, ChatProvider, ChatRequest, Embedder, ProviderError, RoleTag,
    UnitVector,
};
use crate::snapshots::{
    load_snapshot, snapshot_id, Augmentation, FsSnapshotStore, NullSink, Snapshot, SnapshotError,
    SnapshotSink,
};

pub const JUNCTION_TEMPLATE: &str = include_str!("../prompts/junction_v1.txt");
pub const CANDIDATE_TEMPLATE: &str = include_str!("../prompts/candidate_v1.txt");
pub const JUNCTION_TEMPLATE_VERSION: &str = "junction_v1";
pub const CANDIDATE_TEMPLATE_VERSION: &str = "candidate_v1";

/// Junction selection and candidate generation both use stochastic decoding
/// at this temperature.
pub const FRAMEWORK_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trajectory {label} has no user turns to branch from")]
    NoUserTurns { label: String },
    #[error("candidate generation failed for candidate {k}: {source}")]
    CandidateGeneration { k: usize, source: ProviderError },
    #[error("no snapshot found for junction turn {junction} of {label} (or any earlier turn)")]
    MissingSnapshot { label: String, junction: usize },
    #[error("no eligible branch parent: every pool member is at the depth budget")]
    DepthBudgetExhausted,
    #[error("round-robin over an empty pool")]
    EmptyPool,
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("invalid candidate set: {0}")]
    InvalidCandidateSet(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Which user turn to modify, why, and what the decision cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionDecision {
    pub index: usize,
    pub reason: String,
    pub overhead: TokenUsage,
    pub fallback_used: bool,
}

/// One alternative user message. Divergence is defined as 1 − similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub text: String,
    pub tokens: TokenUsage,
    pub similarity: Option<f64>,
}

impl Candidate {
    pub fn divergence(&self) -> Option<f64> {
        self.similarity.map(|s| 1.0 - s)
    }
}

/// K alternatives for one junction. `selected_index` is the argmin of
/// similarity (equivalently the argmax of divergence) once selection ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub original_message: String,
    pub candidates: Vec<Candidate>,
    pub selected_index: Option<usize>,
}

impl CandidateSet {
    pub fn total_tokens(&self) -> TokenUsage {
        self.candidates
            .iter()
            .fold(TokenUsage::zero(), |acc, c| acc.saturating_add(c.tokens))
    }

    pub fn selected(&self) -> Option<&Candidate> {
        self.selected_index.and_then(|i| self.candidates.get(i))
    }
}

/// Exploration budget: R rollouts, then B branches drawn from the growing
/// pool, K candidates per junction, and a depth cap per trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DivertBudget {
    pub rollouts: u32,
    pub branches: u32,
    pub candidates_per_junction: u32,
    pub max_branch_depth: u32,
}

impl Default for DivertBudget {
    fn default() -> Self {
        DivertBudget {
            rollouts: 1,
            branches: 0,
            candidates_per_junction: 3,
            max_branch_depth: 3,
        }
    }
}

impl DivertBudget {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.rollouts < 1 {
            return Err(PipelineError::InvalidBudget("rollouts must be >= 1".into()));
        }
        if self.candidates_per_junction < 1 {
            return Err(PipelineError::InvalidBudget(
                "candidates_per_junction must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// How branch parents are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    RoundRobin,
    Uniform,
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    /// Generate directed alternative user messages (off = natural
    /// continuation from the junction).
    pub directed_generation: bool,
    /// Pick the most divergent candidate (off = take candidate 1).
    pub diverse_selection: bool,
    pub sampling: Sampling,
    /// Also resume every non-selected candidate and record suffix
    /// similarities (validation data; costly under real providers).
    pub record_continuations: bool,
    /// Number of tasks processed concurrently.
    pub parallel: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            directed_generation: true,
            diverse_selection: true,
            sampling: Sampling::RoundRobin,
            record_continuations: false,
            parallel: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub text: String,
    pub tokens: TokenUsage,
    pub similarity: Option<f64>,
    pub divergence: Option<f64>,
}

/// Persisted record of one branching attempt's candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSetRecord {
    pub task_id: String,
    pub parent_label: String,
    pub child_label: String,
    pub junction_index: usize,
    pub junction_reason: String,
    pub fallback_used: bool,
    pub original_message: String,
    pub candidates: Vec<CandidateRecord>,
    pub selected_index: Option<usize>,
}

/// Validation record: every candidate of one junction continued to
/// termination, with suffix similarity to the original continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationRecord {
    pub task_id: String,
    pub parent_label: String,
    pub junction_index: usize,
    /// Absent when diverse selection was disabled for the run.
    pub candidate_similarities: Vec<Option<f64>>,
    pub suffix_similarities: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub rollouts: u32,
    pub branches_ok: u32,
    pub branches_failed: u32,
    pub reasons: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub tasks: Vec<TaskReport>,
}

/// Everything a pipeline run produces.
pub struct DivertRun {
    pub pool: Vec<Trajectory>,
    pub candidate_sets: Vec<CandidateSetRecord>,
    pub continuations: Vec<ContinuationRecord>,
    pub report: RunReport,
}

/// One line per turn: `Turn {index} ({role}): {content}`, newlines
/// flattened. Tool calls appear inline because a tool-calling agent turn's
/// content is its directive line.
pub fn format_trajectory_for_prompt(trajectory: &Trajectory) -> String {
    trajectory
        .messages
        .iter()
        .map(|m| {
            format!(
                "Turn {} ({}): {}",
                m.index,
                m.role,
                m.content.replace('\n', " ")
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, PartialEq, Eq)]
pub enum JunctionParseError {
    NoIndex,
    InvalidIndex(usize),
}

/// Extracts the last `Index:` integer; succeeds iff it parses and names a
/// valid user turn.
pub fn parse_junction_output(
    text: &str,
    valid_indices: &BTreeSet<usize>,
) -> Result<usize, JunctionParseError> {
    let tail = text
        .lines()
        .rev()
        .find_map(|line| line.split("Index:").nth(1))
        .ok_or(JunctionParseError::NoIndex)?;
    let token = tail
        .trim()
        .split(|c: char| !c.is_ascii_digit())
        .next()
        .unwrap_or("");
    let index: usize = token.parse().map_err(|_| JunctionParseError::NoIndex)?;
    if valid_indices.contains(&index) {
        Ok(index)
    } else {
        Err(JunctionParseError::InvalidIndex(index))
    }
}

fn extract_reason(text: &str) -> String {
    text.lines()
        .find_map(|line| line.split("Reason:").nth(1))
        .map(|s| s.trim().to_string())
        .unwrap_or_default()
}

pub fn render_junction_prompt(
    user_instructions: &str,
    formatted_trajectory: &str,
    user_turns: &[usize],
) -> String {
    JUNCTION_TEMPLATE
        .replace("{user_instructions}", user_instructions)
        .replace("{formatted_trajectory}", formatted_trajectory)
        .replace("{user_turns}", &format!("{user_turns:?}"))
}

pub fn render_candidate_prompt(
    step_index: usize,
    reason: &str,
    user_instructions: &str,
    purpose: &str,
    formatted_trajectory: &str,
) -> String {
    CANDIDATE_TEMPLATE
        .replace("{step_index}", &step_index.to_string())
        .replace("{reason}", reason)
        .replace("{user_instructions}", user_instructions)
        .replace("{purpose}", purpose)
        .replace("{formatted_trajectory}", formatted_trajectory)
}

/// Asks the chooser for the user turn to modify. Parse and provider
/// failures fall back to the last user turn; the decision's overhead
/// records every token spent either way.
pub fn choose_junction(
    trajectory: &Trajectory,
    user_instructions: &str,
    chat: &dyn ChatProvider,
    config: &RunConfig,
    sample_nonce: u64,
) -> Result<JunctionDecision, PipelineError> {
    let turns = trajectory.user_turn_indices();
    let Some(&last_turn) = turns.last() else {
        return Err(PipelineError::NoUserTurns {
            label: trajectory.lineage.iteration_label.clone(),
        });
    };
    let prompt = render_junction_prompt(
        user_instructions,
        &format_trajectory_for_prompt(trajectory),
        &turns,
    );
    let request = ChatRequest::new(
        vec![ChatMessage::new("system", prompt)],
        FRAMEWORK_TEMPERATURE,
        config.max_retries,
        RoleTag::Junction,
    )
    .with_seed(config.seed)
    .with_nonce(sample_nonce);

    let fallback = |overhead: TokenUsage, why: String| JunctionDecision {
        index: last_turn,
        reason: format!("fallback to last user turn ({why})"),
        overhead,
        fallback_used: true,
    };

    match chat.chat_complete(&request) {
        Ok(result) => {
            let valid: BTreeSet<usize> = turns.iter().copied().collect();
            match parse_junction_output(&result.content, &valid) {
                Ok(index) => Ok(JunctionDecision {
                    index,
                    reason: extract_reason(&result.content),
                    overhead: result.tokens,
                    fallback_used: false,
                }),
                Err(JunctionParseError::NoIndex) => {
                    Ok(fallback(result.tokens, "unparseable output".into()))
                }
                Err(JunctionParseError::InvalidIndex(i)) => {
                    Ok(fallback(result.tokens, format!("index {i} out of range")))
                }
            }
        }
        Err(ProviderError::Exhausted {
            attempts, tokens, ..
        }) => Ok(fallback(
            tokens,
            format!("provider failed after {attempts} attempts"),
        )),
        Err(other) => Err(other.into()),
    }
}

/// Generates K alternative user messages with K independent calls at the
/// framework temperature, aggregating token usage across all of them.
pub fn generate_candidates(
    trajectory: &Trajectory,
    task: &Task,
    junction: &JunctionDecision,
    k: u32,
    chat: &dyn ChatProvider,
    config: &RunConfig,
    nonce_base: u64,
) -> Result<CandidateSet, PipelineError> {
    let original_message = trajectory
        .messages
        .get(junction.index)
        .map(|m| m.content.clone())
        .unwrap_or_default();
    let prompt = render_candidate_prompt(
        junction.index,
        &junction.reason,
        &task.user_instructions,
        &task.purpose,
        &format_trajectory_for_prompt(trajectory),
    );
    let mut candidates = Vec::with_capacity(k as usize);
    for k_i in 0..k {
        let request = ChatRequest::new(
            vec![ChatMessage::new("system", prompt.clone())],
            FRAMEWORK_TEMPERATURE,
            config.max_retries,
            RoleTag::Candidate,
        )
        .with_seed(config.seed)
        .with_nonce(nonce_base + u64::from(k_i));
        let result =
            chat.chat_complete(&request)
                .map_err(|source| PipelineError::CandidateGeneration {
                    k: k_i as usize,
                    source,
                })?;
        candidates.push(Candidate {
            text: result.content.trim().to_string(),
            tokens: result.tokens,
            similarity: None,
        });
    }
    Ok(CandidateSet {
        original_message,
        candidates,
        selected_index: None,
    })
}

/// Scores each candidate's cosine similarity to the original message and
/// selects the argmin (ties broken by lowest index).
pub fn select_most_divergent(
    mut set: CandidateSet,
    embedder: &dyn Embedder,
) -> Result<CandidateSet, PipelineError> {
    if set.original_message.trim().is_empty() {
        return Err(PipelineError::InvalidCandidateSet(
            "original message is empty".into(),
        ));
    }
    if set.candidates.is_empty() {
        return Err(PipelineError::InvalidCandidateSet("no candidates".into()));
    }
    let original = embedder.embed(&set.original_message)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, candidate) in set.candidates.iter_mut().enumerate() {
        let vector = embedder.embed(&candidate.text)?;
        let similarity = cosine_similarity(&vector, &original)?;
        candidate.similarity = Some(similarity);
        let better = match best {
            None => true,
            Some((_, current)) => similarity < current,
        };
        if better {
            best = Some((i, similarity));
        }
    }
    set.selected_index = best.map(|(i, _)| i);
    Ok(set)
}

/// `pool[cursor mod len]` and the advanced cursor. Pool ordering is
/// creation order: rollouts first, then branches as created.
pub fn round_robin_next(
    pool: &[Trajectory],
    cursor: usize,
) -> Result<(&Trajectory, usize), PipelineError> {
    if pool.is_empty() {
        return Err(PipelineError::EmptyPool);
    }
    Ok((&pool[cursor % pool.len()], cursor + 1))
}

/// Mean of per-message embeddings, renormalized.
pub fn suffix_embedding(
    messages: &[Message],
    embedder: &dyn Embedder,
) -> Result<UnitVector, PipelineError> {
    let dim = embedder.dimension().max(2);
    if messages.is_empty() {
        return Ok(UnitVector::basis(dim, 0));
    }
    let mut sum = vec![0.0f64; dim];
    for message in messages {
        let v = embedder.embed(&message.content)?;
        for (acc, x) in sum.iter_mut().zip(v.components()) {
            *acc += x;
        }
    }
    Ok(UnitVector::normalized(sum).unwrap_or_else(|| UnitVector::basis(dim, 0)))
}

/// Snapshot sink wrapper that records where each snapshot landed and which
/// user turn it precedes.
struct RecordingSink<'a> {
    inner: &'a dyn SnapshotSink,
    log: Mutex<Vec<SavedSnapshot>>,
}

#[derive(Clone)]
struct SavedSnapshot {
    label: String,
    pending_turn: usize,
    path: PathBuf,
    id: String,
}

impl<'a> RecordingSink<'a> {
    fn new(inner: &'a dyn SnapshotSink) -> Self {
        RecordingSink {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    fn drain(&self) -> Vec<SavedSnapshot> {
        std::mem::take(&mut self.log.lock().expect("sink log lock"))
    }
}

impl SnapshotSink for RecordingSink<'_> {
    fn save(&self, snapshot: &Snapshot) -> Result<PathBuf, SnapshotError> {
        let path = self.inner.save(snapshot)?;
        self.log.lock().expect("sink log lock").push(SavedSnapshot {
            label: snapshot.iteration_label.clone(),
            pending_turn: snapshot.execution_state.messages.len(),
            path: path.clone(),
            id: snapshot.id.clone(),
        });
        Ok(path)
    }
}

struct TaskPipeline<'a> {
    task: &'a Task,
    budget: DivertBudget,
    config: RunConfig,
    options: PipelineOptions,
    chat: &'a dyn ChatProvider,
    embedder: &'a dyn Embedder,
    store: &'a FsSnapshotStore,
    pool: Vec<Trajectory>,
    /// label -> (pending user turn -> (snapshot dir, snapshot id))
    snapshot_index: BTreeMap<String, BTreeMap<usize, (PathBuf, String)>>,
    child_counters: BTreeMap<String, u32>,
    cursor: usize,
    report: TaskReport,
    candidate_sets: Vec<CandidateSetRecord>,
    continuations: Vec<ContinuationRecord>,
}

struct TaskRunOutput {
    pool: Vec<Trajectory>,
    report: TaskReport,
    candidate_sets: Vec<CandidateSetRecord>,
    continuations: Vec<ContinuationRecord>,
}

impl<'a> TaskPipeline<'a> {
    fn absorb(&mut self, saved: Vec<SavedSnapshot>) {
        for s in saved {
            self.snapshot_index
                .entry(s.label)
                .or_default()
                .insert(s.pending_turn, (s.path, s.id));
        }
    }

    fn run(mut self) -> Result<TaskRunOutput, PipelineError> {
        for r in 1..=self.budget.rollouts {
            let seed = self.config.seed + u64::from(r - 1);
            let sink = RecordingSink::new(self.store);
            let trajectory = run_rollout(
                self.task,
                seed,
                Lineage::root(r),
                &self.config,
                self.chat,
                &sink,
            )?;
            self.absorb(sink.drain());
            self.pool.push(trajectory);
            self.report.rollouts += 1;
        }

        for attempt in 1..=self.budget.branches {
            match self.branch_once(u64::from(attempt)) {
                Ok(child) => {
                    self.pool.push(child);
                    self.report.branches_ok += 1;
                }
                Err(e) => {
                    self.report.branches_failed += 1;
                    self.report.reasons.push(e.to_string());
                }
            }
        }

        Ok(TaskRunOutput {
            pool: self.pool,
            report: self.report,
            candidate_sets: self.candidate_sets,
            continuations: self.continuations,
        })
    }

    /// Picks the next branch parent, skipping trajectories at the depth cap.
    fn select_parent(&mut self) -> Result<usize, PipelineError> {
        let len = self.pool.len();
        if len == 0 {
            return Err(PipelineError::EmptyPool);
        }
        match self.options.sampling {
            Sampling::RoundRobin => {
                for _ in 0..len {
                    let index = self.cursor % len;
                    let (parent, next) = round_robin_next(&self.pool, self.cursor)?;
                    let depth = parent.lineage.depth() as u32;
                    self.cursor = next;
                    if depth < self.budget.max_branch_depth {
                        return Ok(index);
                    }
                }
                Err(PipelineError::DepthBudgetExhausted)
            }
            Sampling::Uniform => {
                let eligible: Vec<usize> = (0..len)
                    .filter(|&i| {
                        (self.pool[i].lineage.depth() as u32) < self.budget.max_branch_depth
                    })
                    .collect();
                if eligible.is_empty() {
                    return Err(PipelineError::DepthBudgetExhausted);
                }
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    self.config.seed ^ (self.cursor as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                self.cursor += 1;
                Ok(eligible[rng.random_range(0..eligible.len())])
            }
        }
    }

    /// Finds the snapshot holding the parent's state immediately before
    /// `junction`, walking up the ancestor chain through shared prefixes and
    /// falling back to the nearest earlier snapshotted user turn.
    fn lookup_snapshot(
        &self,
        parent: &Trajectory,
        junction: usize,
    ) -> Result<(PathBuf, usize, bool), PipelineError> {
        let find_traj = |label: &str| {
            self.pool
                .iter()
                .find(|t| t.lineage.iteration_label == label)
        };

        // exact match along the valid ancestor chain
        let mut current = parent;
        loop {
            if let Some(turns) = self.snapshot_index.get(&current.lineage.iteration_label) {
                if let Some((path, _)) = turns.get(&junction) {
                    return Ok((path.clone(), junction, true));
                }
            }
            match (
                &current.lineage.parent_label,
                current.lineage.junction_index,
            ) {
                (Some(parent_label), Some(cj)) if junction <= cj => match find_traj(parent_label) {
                    Some(t) => current = t,
                    None => break,
                },
                _ => break,
            }
        }

        // nearest earlier snapshotted user turn over the same chain
        let mut best: Option<(PathBuf, usize)> = None;
        let mut current = parent;
        loop {
            if let Some(turns) = self.snapshot_index.get(&current.lineage.iteration_label) {
                for (&turn, (path, _)) in turns.range(..junction) {
                    if best.as_ref().map(|(_, t)| turn > *t).unwrap_or(true) {
                        best = Some((path.clone(), turn));
                    }
                }
            }
            match (
                &current.lineage.parent_label,
                current.lineage.junction_index,
            ) {
                (Some(parent_label), Some(cj)) if junction <= cj => match find_traj(parent_label) {
                    Some(t) => current = t,
                    None => break,
                },
                _ => break,
            }
        }
        match best {
            Some((path, turn)) => Ok((path, turn, false)),
            None => Err(PipelineError::MissingSnapshot {
                label: parent.lineage.iteration_label.clone(),
                junction,
            }),
        }
    }

    fn next_child_label(&mut self, parent_label: &str) -> Result<String, PipelineError> {
        let counter = self
            .child_counters
            .entry(parent_label.to_string())
            .or_insert(0);
        *counter += 1;
        Ok(iteration_child_label(parent_label, *counter)?)
    }

    /// One full branching attempt against the current pool.
    fn branch_once(&mut self, attempt_nonce: u64) -> Result<Trajectory, PipelineError> {
        let parent_index = self.select_parent()?;
        let parent = self.pool[parent_index].clone();
        let parent_label = parent.lineage.iteration_label.clone();

        let junction = choose_junction(
            &parent,
            &self.task.user_instructions,
            self.chat,
            &self.config,
            attempt_nonce,
        )?;

        let k = self.budget.candidates_per_junction;
        let candidate_set = if self.options.directed_generation {
            let nonce_base = attempt_nonce.wrapping_mul(u64::from(k).max(1));
            let set = generate_candidates(
                &parent,
                self.task,
                &junction,
                k,
                self.chat,
                &self.config,
                nonce_base,
            )?;
            let set = if self.options.diverse_selection {
                select_most_divergent(set, self.embedder)?
            } else {
                let mut set = set;
                set.selected_index = Some(0);
                set
            };
            Some(set)
        } else {
            None
        };

        let (snapshot_path, junction_turn, exact) =
            self.lookup_snapshot(&parent, junction.index)?;
        if !exact {
            self.report.notes.push(format!(
                "branch of {parent_label}: junction {} had no snapshot, used turn {junction_turn}",
                junction.index
            ));
        }
        let snapshot = load_snapshot(&snapshot_path)?;
        let mut state = snapshot.execution_state;

        let child_label = self.next_child_label(&parent_label)?;
        let candidate_overhead = candidate_set
            .as_ref()
            .map(|s| s.total_tokens())
            .unwrap_or_default();
        state.lineage = Lineage {
            iteration_label: child_label.clone(),
            parent_label: Some(parent_label.clone()),
            junction_index: Some(junction_turn),
            junction_reason: Some(junction.reason.clone()),
        };
        state.ledger = TokenLedger {
            junction_overhead: junction.overhead,
            candidate_overhead,
            ..TokenLedger::zero()
        };

        match &candidate_set {
            Some(set) => {
                let selected = set
                    .selected()
                    .ok_or_else(|| PipelineError::InvalidCandidateSet("no selection".into()))?;
                // injected turn: its text was paid for in candidate_overhead
                state.pending_message = Some(Message::new(
                    junction_turn,
                    Role::User,
                    selected.text.clone(),
                    TokenUsage::zero(),
                ));
                let branch_start_id =
                    snapshot_id(&self.task.task_id, &child_label, state.step_count);
                state.last_snapshot_id = Some(branch_start_id.clone());
                let original_message = parent
                    .messages
                    .get(junction_turn)
                    .map(|m| m.content.clone())
                    .unwrap_or_default();
                let branch_start = Snapshot {
                    id: branch_start_id,
                    parent_id: Some(snapshot.id.clone()),
                    iteration_label: child_label.clone(),
                    step_count: state.step_count,
                    seed: state.seed,
                    execution_state: state.clone(),
                    created_at: chrono::Utc::now().to_rfc3339(),
                    augmentation: Some(Augmentation {
                        original_message,
                        modified_message: selected.text.clone(),
                        junction_index: junction_turn,
                        junction_reason: junction.reason.clone(),
                        overhead: junction.overhead.saturating_add(candidate_overhead),
                    }),
                };
                let path = self.store.save(&branch_start)?;
                self.absorb(vec![SavedSnapshot {
                    label: child_label.clone(),
                    pending_turn: state.messages.len(),
                    path,
                    id: branch_start.id.clone(),
                }]);
            }
            None => {
                // natural continuation: re-sample the junction turn fresh
                state.pending_message = None;
                state.next_user_nonce = attempt_nonce;
            }
        }

        if self.options.record_continuations {
            if let Some(set) = &candidate_set {
                self.record_continuations(&parent, &state, set, junction_turn)?;
            }
        }

        let sink = RecordingSink::new(self.store);
        let child = resume_execution(state, &self.config, self.chat, &sink)?;
        self.absorb(sink.drain());

        if let Some(set) = candidate_set {
            self.candidate_sets.push(CandidateSetRecord {
                task_id: self.task.task_id.clone(),
                parent_label,
                child_label,
                junction_index: junction_turn,
                junction_reason: junction.reason,
                fallback_used: junction.fallback_used,
                original_message: set.original_message,
                candidates: set
                    .candidates
                    .iter()
                    .map(|c| CandidateRecord {
                        text: c.text.clone(),
                        tokens: c.tokens,
                        similarity: c.similarity,
                        divergence: c.divergence(),
                    })
                    .collect(),
                selected_index: set.selected_index,
            });
        }
        Ok(child)
    }

    /// Continues every candidate from the junction against a null sink and
    /// records how far each continuation drifts from the original suffix.
    fn record_continuations(
        &mut self,
        parent: &Trajectory,
        branch_state: &crate::orchestrator::ExecutionState,
        set: &CandidateSet,
        junction_turn: usize,
    ) -> Result<(), PipelineError> {
        let original_suffix: Vec<Message> = parent.messages[junction_turn..].to_vec();
        let original_vec = suffix_embedding(&original_suffix, self.embedder)?;
        let mut suffix_similarities = Vec::with_capacity(set.candidates.len());
        let mut candidate_similarities: Vec<Option<f64>> =
            Vec::with_capacity(set.candidates.len());
        for candidate in &set.candidates {
            let mut state = branch_state.clone();
            state.pending_message = Some(Message::new(
                junction_turn,
                Role::User,
                candidate.text.clone(),
                TokenUsage::zero(),
            ));
            state.last_snapshot_id = None;
            let continuation = resume_execution(state, &self.config, self.chat, &NullSink)?;
            let suffix = &continuation.messages[junction_turn..];
            let vec = suffix_embedding(suffix, self.embedder)?;
            suffix_similarities.push(cosine_similarity(&vec, &original_vec)?);
            candidate_similarities.push(candidate.similarity);
        }
        self.continuations.push(ContinuationRecord {
            task_id: self.task.task_id.clone(),
            parent_label: parent.lineage.iteration_label.clone(),
            junction_index: junction_turn,
            candidate_similarities,
            suffix_similarities,
        });
        Ok(())
    }
}

/// Runs the full pipeline over a suite: R rollouts per task, then B
/// branching attempts drawn from the growing pool. Per-branch failures are
/// recorded in the report; the run itself keeps going.
pub fn run_divert(
    suite: &TaskSuite,
    budget: &DivertBudget,
    config: &RunConfig,
    chat: &dyn ChatProvider,
    embedder: &dyn Embedder,
    store: &FsSnapshotStore,
    options: &PipelineOptions,
) -> Result<DivertRun, PipelineError> {
    budget.validate()?;
    config.validate().map_err(PipelineError::Orchestrator)?;

    let run_task = |task: &Task| -> Result<TaskRunOutput, PipelineError> {
        TaskPipeline {
            task,
            budget: *budget,
            config: *config,
            options: *options,
            chat,
            embedder,
            store,
            pool: Vec::new(),
            snapshot_index: BTreeMap::new(),
            child_counters: BTreeMap::new(),
            cursor: 0,
            report: TaskReport {
                task_id: task.task_id.clone(),
                ..TaskReport::default()
            },
            candidate_sets: Vec::new(),
            continuations: Vec::new(),
        }
        .run()
    };

    let outputs: Vec<Result<TaskRunOutput, PipelineError>> = if options.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(options.parallel)
            .build()
            .map_err(|e| PipelineError::InvalidBudget(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            suite.tasks.par_iter().map(run_task).collect()
        })
    } else {
        suite.tasks.iter().map(run_task).collect()
    };

    let mut run = DivertRun {
        pool: Vec::new(),
        candidate_sets: Vec::new(),
        continuations: Vec::new(),
        report: RunReport::default(),
    };
    for output in outputs {
        let output = output?;
        run.pool.extend(output.pool);
        run.candidate_sets.extend(output.candidate_sets);
        run.continuations.extend(output.continuations);
        run.report.tasks.push(output.report);
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Outcome;
    use crate::envsim::bundled_mini_orders;
    use crate::providers::mock::{ChargingRule, FixedResponder, MockChatProvider};
    use crate::providers::HashedBowEmbedder;
    use proptest::prelude::*;
    use std::sync::Arc;
    use tempfile::TempDir;

    fn sample_trajectory() -> Trajectory {
        let mut messages = vec![Message::new(0, Role::System, "sys", TokenUsage::zero())];
        messages.push(Message::new(
            1,
            Role::User,
            "Hi, please cancel order o42. I picked the wrong lamp model.",
            TokenUsage::new(3, 12),
        ));
        let mut tool_call = Message::new(
            2,
            Role::Agent,
            "TOOL lookup_order {\"order_id\":\"o42\"}",
            TokenUsage::new(20, 8),
        );
        tool_call.tool_call = Some(crate::core::ToolCall {
            name: "lookup_order".into(),
            arguments: serde_json::json!({"order_id": "o42"})
                .as_object()
                .cloned()
                .unwrap(),
        });
        messages.push(tool_call);
        let mut tool = Message::new(
            3,
            Role::Tool,
            "[lookup_order] ok: order o42: status=open",
            TokenUsage::zero(),
        );
        tool.tool_result = Some("order o42: status=open".into());
        messages.push(tool);
        messages.push(Message::new(
            4,
            Role::User,
            "Thanks, that's everything. ###DONE###",
            TokenUsage::new(5, 6),
        ));
        Trajectory {
            task_id: "cancel_o42".into(),
            seed: 42,
            messages,
            outcome: Outcome::success(),
            ledger: TokenLedger::zero(),
            lineage: Lineage::root(1),
            step_count: 4,
            error_count: 0,
        }
    }

    #[test]
    fn formatting_is_one_line_per_turn_and_deterministic() {
        let t = sample_trajectory();
        let text = format_trajectory_for_prompt(&t);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(
            lines[1],
            "Turn 1 (user): Hi, please cancel order o42. I picked the wrong lamp model."
        );
        // tool call rendered inline with name and args on the agent's line
        assert_eq!(
            lines[2],
            "Turn 2 (agent): TOOL lookup_order {\"order_id\":\"o42\"}"
        );
        assert_eq!(
            lines[3],
            "Turn 3 (tool): [lookup_order] ok: order o42: status=open"
        );
        assert_eq!(text, format_trajectory_for_prompt(&t));
    }

    #[test]
    fn junction_output_parsing_matches_the_contract() {
        let valid: BTreeSet<usize> = [0usize, 2, 4].into_iter().collect();
        assert_eq!(
            parse_junction_output("Reason: insurance ambiguity\nIndex: 4", &valid),
            Ok(4)
        );
        assert_eq!(
            parse_junction_output("Index: 3", &valid),
            Err(JunctionParseError::InvalidIndex(3))
        );
        assert_eq!(
            parse_junction_output("no structured output", &valid),
            Err(JunctionParseError::NoIndex)
        );
        // the last Index: wins
        assert_eq!(
            parse_junction_output("Index: 3\nReason: better\nIndex: 2", &valid),
            Ok(2)
        );
    }

    #[test]
    fn prompt_templates_render_all_placeholders() {
        let prompt = render_junction_prompt("instr", "Turn 0 (user): hi", &[1, 3]);
        assert!(prompt.contains("instr"));
        assert!(prompt.contains("Turn 0 (user): hi"));
        assert!(prompt.contains("[1, 3]"));
        assert!(!prompt.contains("{user_instructions}"));
        let prompt = render_candidate_prompt(3, "why", "instr", "purpose text", "trace");
        assert!(prompt.contains("step 3"));
        assert!(!prompt.contains("{step_index}"));
        assert!(prompt.contains("purpose text"));
    }

    #[test]
    fn choose_junction_uses_the_model_answer() {
        let t = sample_trajectory();
        let chat = MockChatProvider::empty(1).with_responder(
            RoleTag::Junction,
            Arc::new(FixedResponder("Reason: pivotal detail\nIndex: 1".into())),
        );
        let d = choose_junction(&t, "instr", &chat, &RunConfig::default(), 0).unwrap();
        assert_eq!(d.index, 1);
        assert_eq!(d.reason, "pivotal detail");
        assert!(!d.fallback_used);
    }

    #[test]
    fn choose_junction_falls_back_to_the_last_user_turn() {
        let t = sample_trajectory();
        let chat = MockChatProvider::empty(1).with_responder(
            RoleTag::Junction,
            Arc::new(FixedResponder("complete garbage".into())),
        );
        let d = choose_junction(&t, "instr", &chat, &RunConfig::default(), 0).unwrap();
        assert_eq!(d.index, 4);
        assert!(d.fallback_used);
        assert!(
            d.overhead.total() > 0,
            "fallback still records spent tokens"
        );

        // provider failure also falls back
        let chat = crate::providers::FlakyChatProvider::always_failing();
        let d = choose_junction(&t, "instr", &chat, &RunConfig::default(), 0).unwrap();
        assert_eq!(d.index, 4);
        assert!(d.fallback_used);
    }

    #[test]
    fn choose_junction_single_turn_and_empty_cases() {
        let mut t = sample_trajectory();
        t.messages.truncate(2); // system + one user turn
        let chat = MockChatProvider::empty(1).with_responder(
            RoleTag::Junction,
            Arc::new(FixedResponder("garbage".into())),
        );
        let d = choose_junction(&t, "instr", &chat, &RunConfig::default(), 0).unwrap();
        assert_eq!(d.index, 1);
        assert!(d.fallback_used);

        t.messages.truncate(1);
        assert!(matches!(
            choose_junction(&t, "instr", &chat, &RunConfig::default(), 0),
            Err(PipelineError::NoUserTurns { .. })
        ));
    }

    #[test]
    fn candidate_generation_counts_and_overhead() {
        let suite = bundled_mini_orders();
        let task = &suite.tasks[0];
        let t = sample_trajectory();
        let junction = JunctionDecision {
            index: 1,
            reason: "r".into(),
            overhead: TokenUsage::zero(),
            fallback_used: false,
        };
        let mut map = std::collections::BTreeMap::new();
        map.insert(RoleTag::Candidate, TokenUsage::new(0, 109));
        let chat = MockChatProvider::simulator(&suite, 42).with_charging(ChargingRule::Fixed(map));
        let config = RunConfig::default();

        let set = generate_candidates(&t, task, &junction, 3, &chat, &config, 0).unwrap();
        assert_eq!(set.candidates.len(), 3);
        assert_eq!(set.total_tokens().completion_tokens, 327);
        assert_eq!(set.original_message, t.messages[1].content);

        let set1 = generate_candidates(&t, task, &junction, 1, &chat, &config, 10).unwrap();
        assert_eq!(set1.candidates.len(), 1);
    }

    #[test]
    fn candidate_generation_reports_the_failing_call() {
        let suite = bundled_mini_orders();
        let task = &suite.tasks[0];
        let t = sample_trajectory();
        let junction = JunctionDecision {
            index: 1,
            reason: "r".into(),
            overhead: TokenUsage::zero(),
            fallback_used: false,
        };
        let chat = crate::providers::FlakyChatProvider::always_failing();
        match generate_candidates(&t, task, &junction, 3, &chat, &RunConfig::default(), 0) {
            Err(PipelineError::CandidateGeneration { k, .. }) => assert_eq!(k, 0),
            other => panic!("expected candidate-generation error, got {other:?}"),
        }
    }

    /// Embedder mapping known texts to fixed vectors, for exact similarity
    /// control in selection tests.
    struct StubEmbedder(std::collections::BTreeMap<String, Vec<f64>>);

    impl Embedder for StubEmbedder {
        fn embed(&self, text: &str) -> Result<UnitVector, ProviderError> {
            Ok(UnitVector::from_components(self.0[text].clone()).unwrap())
        }
        fn dimension(&self) -> usize {
            3
        }
    }

    fn set_with(texts: &[&str]) -> CandidateSet {
        CandidateSet {
            original_message: "orig".into(),
            candidates: texts
                .iter()
                .map(|t| Candidate {
                    text: (*t).to_string(),
                    tokens: TokenUsage::zero(),
                    similarity: None,
                })
                .collect(),
            selected_index: None,
        }
    }

    fn unit(x: f64) -> Vec<f64> {
        vec![x, (1.0 - x * x).sqrt(), 0.0]
    }

    #[test]
    fn selection_takes_the_argmin_with_index_tie_break() {
        let mut vectors = std::collections::BTreeMap::new();
        vectors.insert("orig".to_string(), vec![1.0, 0.0, 0.0]);
        vectors.insert("a".to_string(), unit(0.9));
        vectors.insert("b".to_string(), unit(0.5));
        vectors.insert("c".to_string(), unit(0.7));
        let embedder = StubEmbedder(vectors);
        let set = select_most_divergent(set_with(&["a", "b", "c"]), &embedder).unwrap();
        assert_eq!(set.selected_index, Some(1));
        let sims: Vec<f64> = set
            .candidates
            .iter()
            .map(|c| c.similarity.unwrap())
            .collect();
        assert!((sims[0] - 0.9).abs() < 1e-9);
        assert!((sims[1] - 0.5).abs() < 1e-9);
        assert!((sims[2] - 0.7).abs() < 1e-9);

        let mut vectors = std::collections::BTreeMap::new();
        vectors.insert("orig".to_string(), vec![1.0, 0.0, 0.0]);
        vectors.insert("a".to_string(), unit(0.5));
        vectors.insert("b".to_string(), unit(0.5));
        vectors.insert("c".to_string(), unit(0.8));
        let embedder = StubEmbedder(vectors);
        let set = select_most_divergent(set_with(&["a", "b", "c"]), &embedder).unwrap();
        assert_eq!(
            set.selected_index,
            Some(0),
            "ties break to the lowest index"
        );
    }

    #[test]
    fn identical_candidate_has_zero_divergence_and_loses() {
        let embedder = HashedBowEmbedder::default();
        let mut set = set_with(&[
            "Hi, please cancel order o42. I picked the wrong lamp model.",
            "a completely different sentence about gardening tulips",
        ]);
        set.original_message = "Hi, please cancel order o42. I picked the wrong lamp model.".into();
        let set = select_most_divergent(set, &embedder).unwrap();
        assert!((set.candidates[0].similarity.unwrap() - 1.0).abs() < 1e-9);
        assert!((set.candidates[0].divergence().unwrap()).abs() < 1e-9);
        assert_eq!(set.selected_index, Some(1));
    }

    #[test]
    fn round_robin_wraps_and_rejects_empty_pools() {
        let pool = vec![
            sample_trajectory(),
            sample_trajectory(),
            sample_trajectory(),
        ];
        let (t, cursor) = round_robin_next(&pool, 0).unwrap();
        assert!(std::ptr::eq(t, &pool[0]));
        assert_eq!(cursor, 1);
        let (t, _) = round_robin_next(&pool, 3).unwrap();
        assert!(std::ptr::eq(t, &pool[0]));
        assert!(matches!(
            round_robin_next(&[], 0),
            Err(PipelineError::EmptyPool)
        ));
    }

    fn run_mini(budget: DivertBudget, tmp: &TempDir) -> DivertRun {
        let suite = bundled_mini_orders();
        let config = RunConfig::default();
        let chat = MockChatProvider::simulator(&suite, 42);
        let embedder = HashedBowEmbedder::default();
        let store = FsSnapshotStore::new(tmp.path(), "mock");
        run_divert(
            &suite,
            &budget,
            &config,
            &chat,
            &embedder,
            &store,
            &PipelineOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn pool_sizes_follow_the_budget() {
        let tmp = TempDir::new().unwrap();
        let run = run_mini(
            DivertBudget {
                rollouts: 1,
                branches: 0,
                ..DivertBudget::default()
            },
            &tmp,
        );
        assert_eq!(run.pool.len(), 6); // one per task

        let tmp = TempDir::new().unwrap();
        let run = run_mini(
            DivertBudget {
                rollouts: 2,
                branches: 2,
                ..DivertBudget::default()
            },
            &tmp,
        );
        assert_eq!(run.pool.len(), 24); // four per task
        for task_id in ["cancel_o42", "guard_o88"] {
            let of_task: Vec<_> = run.pool.iter().filter(|t| t.task_id == task_id).collect();
            assert_eq!(of_task.len(), 4);
            assert_eq!(of_task.iter().filter(|t| !t.lineage.is_root()).count(), 2);
        }
    }

    #[test]
    fn branches_share_the_prefix_and_carry_the_selected_candidate() {
        let tmp = TempDir::new().unwrap();
        let run = run_mini(
            DivertBudget {
                rollouts: 2,
                branches: 2,
                ..DivertBudget::default()
            },
            &tmp,
        );
        let by_label = |task: &str, label: &str| -> Trajectory {
            run.pool
                .iter()
                .find(|t| t.task_id == task && t.lineage.iteration_label == label)
                .cloned()
                .unwrap_or_else(|| panic!("missing {task}/{label}"))
        };
        assert!(!run.candidate_sets.is_empty());
        for record in &run.candidate_sets {
            let child = by_label(&record.task_id, &record.child_label);
            let parent = by_label(&record.task_id, &record.parent_label);
            let j = record.junction_index;
            assert_eq!(child.messages[..j], parent.messages[..j]);
            let selected = &record.candidates[record.selected_index.unwrap()];
            assert_eq!(child.messages[j].content, selected.text);
            // overhead ledger covers exactly the junction call plus the K candidate calls
            let candidate_total: TokenUsage = record
                .candidates
                .iter()
                .fold(TokenUsage::zero(), |acc, c| acc.saturating_add(c.tokens));
            assert_eq!(child.ledger.candidate_overhead, candidate_total);
            assert!(child.ledger.junction_overhead.total() > 0);
            // the selected candidate attains the set minimum similarity
            let min = record
                .candidates
                .iter()
                .filter_map(|c| c.similarity)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(selected.similarity.unwrap(), min);
        }
    }

    #[test]
    fn child_labels_extend_parent_labels() {
        let tmp = TempDir::new().unwrap();
        let run = run_mini(
            DivertBudget {
                rollouts: 2,
                branches: 3,
                ..DivertBudget::default()
            },
            &tmp,
        );
        for t in run.pool.iter().filter(|t| !t.lineage.is_root()) {
            let parent = t.lineage.parent_label.clone().unwrap();
            let (derived_parent, idx) =
                crate::core::split_label(&t.lineage.iteration_label).unwrap();
            assert_eq!(derived_parent, parent);
            assert!(idx >= 1);
        }
        // round-robin over two rollouts: branches land on 1, 2, then wrap to 1_1
        let labels: Vec<&str> = run
            .pool
            .iter()
            .filter(|t| t.task_id == "cancel_o42" && !t.lineage.is_root())
            .map(|t| t.lineage.iteration_label.as_str())
            .collect();
        assert_eq!(labels, ["1_1", "2_1", "1_1_1"]);
    }

    #[test]
    fn divert_runs_are_deterministic() {
        let budget = DivertBudget {
            rollouts: 2,
            branches: 2,
            ..DivertBudget::default()
        };
        let tmp_a = TempDir::new().unwrap();
        let a = run_mini(budget, &tmp_a);
        let tmp_b = TempDir::new().unwrap();
        let b = run_mini(budget, &tmp_b);
        let lines = |run: &DivertRun| -> Vec<String> {
            run.pool
                .iter()
                .map(|t| t.to_jsonl_line().unwrap())
                .collect()
        };
        assert_eq!(lines(&a), lines(&b));
        assert_eq!(a.candidate_sets, b.candidate_sets);
    }

    #[test]
    fn parallel_task_execution_preserves_output_order() {
        let suite = bundled_mini_orders();
        let config = RunConfig::default();
        let chat = MockChatProvider::simulator(&suite, 42);
        let embedder = HashedBowEmbedder::default();
        let budget = DivertBudget {
            rollouts: 2,
            branches: 2,
            ..DivertBudget::default()
        };
        let tmp_seq = TempDir::new().unwrap();
        let store = FsSnapshotStore::new(tmp_seq.path(), "mock");
        let sequential = run_divert(
            &suite,
            &budget,
            &config,
            &chat,
            &embedder,
            &store,
            &PipelineOptions::default(),
        )
        .unwrap();
        let tmp_par = TempDir::new().unwrap();
        let store = FsSnapshotStore::new(tmp_par.path(), "mock");
        let parallel = run_divert(
            &suite,
            &budget,
            &config,
            &chat,
            &embedder,
            &store,
            &PipelineOptions {
                parallel: 4,
                ..PipelineOptions::default()
            },
        )
        .unwrap();
        let lines = |run: &DivertRun| -> Vec<String> {
            run.pool
                .iter()
                .map(|t| t.to_jsonl_line().unwrap())
                .collect()
        };
        assert_eq!(lines(&sequential), lines(&parallel));
    }

    #[test]
    fn budget_conservation_holds_per_task() {
        let tmp = TempDir::new().unwrap();
        let budget = DivertBudget {
            rollouts: 2,
            branches: 4,
            ..DivertBudget::default()
        };
        let run = run_mini(budget, &tmp);
        for task in &run.report.tasks {
            let pool_size = run
                .pool
                .iter()
                .filter(|t| t.task_id == task.task_id)
                .count() as u32;
            assert_eq!(task.rollouts, 2);
            assert_eq!(
                pool_size + task.branches_failed,
                budget.rollouts + budget.branches
            );
        }
    }

    /// Ledger re-summation oracle on real pipeline output: every
    /// trajectory's agent/user buckets equal the brute-force sum over the
    /// messages it generated (branches start at their junction; the
    /// injected turn carries zero usage).
    #[test]
    fn ledgers_resum_from_messages() {
        let tmp = TempDir::new().unwrap();
        let run = run_mini(
            DivertBudget {
                rollouts: 2,
                branches: 6,
                ..DivertBudget::default()
            },
            &tmp,
        );
        let deep = run
            .pool
            .iter()
            .filter(|t| t.lineage.depth() >= 2)
            .count();
        assert!(deep >= 1, "expected at least one branch-of-branch");
        for t in &run.pool {
            let sums = crate::core::resum_message_usage(t);
            assert_eq!(
                t.ledger.agent,
                sums.get(&Role::Agent).copied().unwrap_or_default(),
                "agent ledger of {} must re-sum from its messages",
                t.lineage.iteration_label
            );
            assert_eq!(
                t.ledger.user,
                sums.get(&Role::User).copied().unwrap_or_default(),
                "user ledger of {} must re-sum from its messages",
                t.lineage.iteration_label
            );
            if t.lineage.is_root() {
                assert_eq!(t.ledger.overhead(), TokenUsage::zero());
            } else {
                assert!(t.ledger.junction_overhead.total() > 0);
            }
        }
    }

    #[test]
    fn depth_budget_caps_branch_depth() {
        let suite = TaskSuite {
            schema_version: 1,
            tasks: vec![bundled_mini_orders().tasks[0].clone()],
        };
        let config = RunConfig::default();
        let chat = MockChatProvider::simulator(&suite, 42);
        let embedder = HashedBowEmbedder::default();
        let tmp = TempDir::new().unwrap();
        let store = FsSnapshotStore::new(tmp.path(), "mock");
        let budget = DivertBudget {
            rollouts: 1,
            branches: 4,
            candidates_per_junction: 3,
            max_branch_depth: 1,
        };
        let run = run_divert(
            &suite,
            &budget,
            &config,
            &chat,
            &embedder,
            &store,
            &PipelineOptions::default(),
        )
        .unwrap();
        let report = &run.report.tasks[0];
        assert_eq!(
            run.pool.len() as u32 + report.branches_failed,
            budget.rollouts + budget.branches
        );
        for t in &run.pool {
            assert!(t.lineage.depth() as u32 <= budget.max_branch_depth);
        }
    }

    #[test]
    fn natural_continuation_mode_skips_candidates() {
        let suite = bundled_mini_orders();
        let config = RunConfig::default();
        let chat = MockChatProvider::simulator(&suite, 42);
        let embedder = HashedBowEmbedder::default();
        let tmp = TempDir::new().unwrap();
        let store = FsSnapshotStore::new(tmp.path(), "mock");
        let budget = DivertBudget {
            rollouts: 1,
            branches: 1,
            ..DivertBudget::default()
        };
        let run = run_divert(
            &suite,
            &budget,
            &config,
            &chat,
            &embedder,
            &store,
            &PipelineOptions {
                directed_generation: false,
                ..PipelineOptions::default()
            },
        )
        .unwrap();
        assert!(run.candidate_sets.is_empty());
        let branches: Vec<_> = run
            .pool
            .iter()
            .filter(|t| !t.lineage.is_root())
            .cloned()
            .collect();
        assert!(!branches.is_empty());
        for t in &branches {
            assert_eq!(t.ledger.candidate_overhead, TokenUsage::zero());
            assert!(t.ledger.junction_overhead.total() > 0);
        }

        // natural-continuation snapshots replay their suffix exactly too
        fn find_dirs(
            node: &crate::snapshots::TreeNode,
            label: &str,
            out: &mut Vec<std::path::PathBuf>,
        ) {
            if node.iteration_label == label {
                out.extend(node.snapshot_dirs.iter().cloned());
            }
            for child in &node.children {
                find_dirs(child, label, out);
            }
        }
        for branch in &branches {
            let task = suite
                .tasks
                .iter()
                .find(|t| t.task_id == branch.task_id)
                .unwrap();
            let tree = store.list_tree(&task.domain, &task.task_id).unwrap();
            let mut dirs = Vec::new();
            for root in &tree.roots {
                find_dirs(root, &branch.lineage.iteration_label, &mut dirs);
            }
            assert!(!dirs.is_empty(), "branch must have snapshots of its own");
            for dir in dirs {
                let snapshot = load_snapshot(&dir).unwrap();
                let mut state = snapshot.execution_state;
                let turn = state.messages.len();
                state.pending_message = Some(branch.messages[turn].clone());
                let replay =
                    resume_execution(state, &config, &chat, &crate::snapshots::NullSink).unwrap();
                assert_eq!(replay.messages[turn..], branch.messages[turn..]);
            }
        }
    }

    #[test]
    fn no_diverse_selection_takes_the_first_candidate() {
        let suite = bundled_mini_orders();
        let config = RunConfig::default();
        let chat = MockChatProvider::simulator(&suite, 42);
        let embedder = HashedBowEmbedder::default();
        let tmp = TempDir::new().unwrap();
        let store = FsSnapshotStore::new(tmp.path(), "mock");
        let budget = DivertBudget {
            rollouts: 1,
            branches: 1,
            ..DivertBudget::default()
        };
        let run = run_divert(
            &suite,
            &budget,
            &config,
            &chat,
            &embedder,
            &store,
            &PipelineOptions {
                diverse_selection: false,
                ..PipelineOptions::default()
            },
        )
        .unwrap();
        assert!(!run.candidate_sets.is_empty());
        for record in &run.candidate_sets {
            assert_eq!(record.selected_index, Some(0));
            assert!(record.candidates[0].similarity.is_none());
        }
    }

    proptest! {
        /// argmax of divergence equals argmin of similarity, exactly.
        #[test]
        fn prop_argmin_argmax_duality(sims in proptest::collection::vec(0.0f64..1.0, 1..8)) {
            let candidates: Vec<Candidate> = sims
                .iter()
                .map(|s| Candidate {
                    text: String::new(),
                    tokens: TokenUsage::zero(),
                    similarity: Some(*s),
                })
                .collect();
            let argmin_sim = candidates
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.similarity.partial_cmp(&b.1.similarity).unwrap())
                .unwrap()
                .0;
            let argmax_div = candidates
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.divergence().partial_cmp(&b.1.divergence()).unwrap())
                .unwrap()
                .0;
            prop_assert_eq!(argmin_sim, argmax_div);
        }
    }
}
