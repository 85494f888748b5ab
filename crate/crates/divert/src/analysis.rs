//! Metrics and validation analyses over persisted trajectory pools: failure
//! discovery efficiency, task-level coverage, shared-prefix structure,
//! diversity-selection validation, overhead accounting and the post-hoc
//! intent judge.
//!
//! Everything here is a pure function over immutable pools. Trajectories
//! with `failure` or `incomplete` outcomes both count as failed; "agent
//! tokens" means agent-role completion tokens, with prompt tokens reported
//! separately.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{Role, Trajectory};
use crate::pipeline::{CandidateSetRecord, ContinuationRecord};
use crate::providers::{ChatMessage, ChatProvider, ChatRequest, ProviderError, RoleTag};

pub const JUDGE_SYSTEM_TEMPLATE: &str = include_str!("../prompts/judge_system_v1.txt");
pub const JUDGE_USER_TEMPLATE: &str = include_str!("../prompts/judge_user_v1.txt");
pub const JUDGE_TEMPLATE_VERSION: &str = "judge_v1";

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("unparseable judge verdict: {0:?}")]
    UnparseableVerdict(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Agent completion tokens plus all framework overhead of one trajectory;
/// the x-axis unit of coverage curves.
pub fn trajectory_cost(trajectory: &Trajectory) -> u64 {
    trajectory
        .ledger
        .agent
        .completion_tokens
        .saturating_add(trajectory.ledger.overhead().total())
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskMetrics {
    pub task_id: String,
    pub trajectories: usize,
    pub failures: usize,
    pub agent_completion_tokens: u64,
    pub agent_prompt_tokens: u64,
    pub overhead_tokens: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub errors_per_100k: f64,
    pub task_failure_count: usize,
    pub total_agent_tokens: u64,
    pub total_overhead_tokens: u64,
    /// Agent + user + overhead tokens, prompt and completion alike.
    pub total_tokens: u64,
    pub per_task: Vec<TaskMetrics>,
}

/// Failed trajectories per 100K agent completion tokens.
pub fn errors_per_100k(pool: &[Trajectory]) -> Result<f64, AnalysisError> {
    let agent_tokens: u64 = pool
        .iter()
        .map(|t| t.ledger.agent.completion_tokens)
        .fold(0, u64::saturating_add);
    if agent_tokens == 0 {
        return Err(AnalysisError::UndefinedMetric(
            "errors_per_100k needs nonzero agent completion tokens".into(),
        ));
    }
    let failures = pool.iter().filter(|t| t.outcome.is_failed()).count();
    Ok(failures as f64 / agent_tokens as f64 * 100_000.0)
}

/// Number of distinct tasks with at least one failed trajectory.
pub fn task_failure_count(pool: &[Trajectory]) -> usize {
    pool.iter()
        .filter(|t| t.outcome.is_failed())
        .map(|t| t.task_id.as_str())
        .collect::<BTreeSet<_>>()
        .len()
}

pub fn metrics_report(pool: &[Trajectory]) -> Result<MetricsReport, AnalysisError> {
    let mut per_task: BTreeMap<String, TaskMetrics> = BTreeMap::new();
    let mut total_tokens: u64 = 0;
    for t in pool {
        let entry = per_task
            .entry(t.task_id.clone())
            .or_insert_with(|| TaskMetrics {
                task_id: t.task_id.clone(),
                trajectories: 0,
                failures: 0,
                agent_completion_tokens: 0,
                agent_prompt_tokens: 0,
                overhead_tokens: 0,
            });
        entry.trajectories += 1;
        entry.failures += usize::from(t.outcome.is_failed());
        entry.agent_completion_tokens += t.ledger.agent.completion_tokens;
        entry.agent_prompt_tokens += t.ledger.agent.prompt_tokens;
        entry.overhead_tokens += t.ledger.overhead().total();
        total_tokens = total_tokens
            .saturating_add(t.ledger.agent.total())
            .saturating_add(t.ledger.user.total())
            .saturating_add(t.ledger.overhead().total());
    }
    Ok(MetricsReport {
        errors_per_100k: errors_per_100k(pool)?,
        task_failure_count: task_failure_count(pool),
        total_agent_tokens: pool.iter().map(|t| t.ledger.agent.completion_tokens).sum(),
        total_overhead_tokens: pool.iter().map(|t| t.ledger.overhead().total()).sum(),
        total_tokens,
        per_task: per_task.into_values().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub cumulative_tokens: u64,
    pub unique_failed_tasks: usize,
}

/// Walks the pool in creation order, accumulating token cost and unique
/// failed tasks. Both coordinates are nondecreasing.
pub fn coverage_curve(pool: &[Trajectory]) -> Vec<CoveragePoint> {
    let mut failed: BTreeSet<&str> = BTreeSet::new();
    let mut cumulative: u64 = 0;
    let mut points = Vec::with_capacity(pool.len());
    for t in pool {
        cumulative = cumulative.saturating_add(trajectory_cost(t));
        if t.outcome.is_failed() {
            failed.insert(t.task_id.as_str());
        }
        points.push(CoveragePoint {
            cumulative_tokens: cumulative,
            unique_failed_tasks: failed.len(),
        });
    }
    points
}

/// Step-function value of a curve at token budget `x`.
pub fn curve_value_at(curve: &[CoveragePoint], x: u64) -> usize {
    curve
        .iter()
        .take_while(|p| p.cumulative_tokens <= x)
        .last()
        .map(|p| p.unique_failed_tasks)
        .unwrap_or(0)
}

/// True when `a` finds at least as many unique failed tasks as `b` at every
/// token budget.
pub fn curve_dominates(a: &[CoveragePoint], b: &[CoveragePoint]) -> bool {
    a.iter()
        .chain(b.iter())
        .map(|p| p.cumulative_tokens)
        .all(|x| curve_value_at(a, x) >= curve_value_at(b, x))
}

/// Token stream used for exact-prefix comparison: whitespace tokens of
/// non-system message contents in order. System preambles are static per
/// task and excluded so the stream reflects generated content only.
pub fn trajectory_token_stream(trajectory: &Trajectory) -> Vec<&str> {
    trajectory
        .messages
        .iter()
        .filter(|m| m.role != Role::System)
        .flat_map(|m| m.content.split_whitespace())
        .collect()
}

fn common_prefix_len(a: &[&str], b: &[&str]) -> usize {
    a.iter().zip(b.iter()).take_while(|(x, y)| x == y).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixGroupKind {
    Regular,
    BranchFamily,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrefixGroup {
    pub kind: PrefixGroupKind,
    pub task_id: String,
    pub group_key: String,
    pub size: usize,
    pub mean_fraction: f64,
    pub singleton: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrefixReport {
    pub groups: Vec<PrefixGroup>,
    /// Mean over non-singleton regular-rollout groups.
    pub regular_aggregate: f64,
    /// Mean over non-singleton branch families.
    pub branch_aggregate: f64,
}

fn group_fraction(members: &[&Trajectory]) -> f64 {
    if members.len() < 2 {
        return 0.0;
    }
    let streams: Vec<Vec<&str>> = members.iter().map(|t| trajectory_token_stream(t)).collect();
    let mut fractions = Vec::with_capacity(members.len());
    for (i, stream) in streams.iter().enumerate() {
        if stream.is_empty() {
            fractions.push(0.0);
            continue;
        }
        let best = streams
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, other)| common_prefix_len(stream, other))
            .max()
            .unwrap_or(0);
        fractions.push(best as f64 / stream.len() as f64);
    }
    fractions.iter().sum::<f64>() / fractions.len() as f64
}

fn root_ancestor(label: &str) -> &str {
    label.split('_').next().unwrap_or(label)
}

/// Shared-prefix fractions: regular rollouts grouped per task, branches
/// grouped per (task, root ancestor) family including the root itself.
/// Families without branches are plain rollouts and reported as flagged
/// singletons outside the branch aggregate.
pub fn shared_prefix_fraction(pool: &[Trajectory]) -> PrefixReport {
    let mut regular: BTreeMap<String, Vec<&Trajectory>> = BTreeMap::new();
    let mut families: BTreeMap<(String, String), Vec<&Trajectory>> = BTreeMap::new();
    for t in pool {
        if t.lineage.is_root() {
            regular.entry(t.task_id.clone()).or_default().push(t);
        }
        let root = root_ancestor(&t.lineage.iteration_label).to_string();
        families
            .entry((t.task_id.clone(), root))
            .or_default()
            .push(t);
    }

    let mut groups = Vec::new();
    let mut regular_sum = 0.0;
    let mut regular_n = 0usize;
    for (task_id, members) in &regular {
        let fraction = group_fraction(members);
        let singleton = members.len() < 2;
        if !singleton {
            regular_sum += fraction;
            regular_n += 1;
        }
        groups.push(PrefixGroup {
            kind: PrefixGroupKind::Regular,
            task_id: task_id.clone(),
            group_key: task_id.clone(),
            size: members.len(),
            mean_fraction: fraction,
            singleton,
        });
    }

    let mut branch_sum = 0.0;
    let mut branch_n = 0usize;
    for ((task_id, root), members) in &families {
        let has_branch = members.iter().any(|t| !t.lineage.is_root());
        let fraction = group_fraction(members);
        let singleton = members.len() < 2 || !has_branch;
        if !singleton {
            branch_sum += fraction;
            branch_n += 1;
        }
        groups.push(PrefixGroup {
            kind: PrefixGroupKind::BranchFamily,
            task_id: task_id.clone(),
            group_key: format!("{task_id}/{root}"),
            size: members.len(),
            mean_fraction: fraction,
            singleton,
        });
    }

    PrefixReport {
        groups,
        regular_aggregate: if regular_n > 0 {
            regular_sum / regular_n as f64
        } else {
            0.0
        },
        branch_aggregate: if branch_n > 0 {
            branch_sum / branch_n as f64
        } else {
            0.0
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankStat {
    /// 1 = most dissimilar.
    pub rank: usize,
    pub mean_similarity: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub candidate_ranks: Vec<RankStat>,
    pub trajectory_ranks: Vec<RankStat>,
    /// Sets with fewer candidates than the full rank count.
    pub short_sets: usize,
}

fn rank_means(per_set: impl Iterator<Item = Vec<f64>>, short_sets: &mut usize) -> Vec<RankStat> {
    let cleaned: Vec<Vec<f64>> = per_set
        .map(|mut sims| {
            sims.retain(|s| s.is_finite());
            sims.sort_by(|a, b| a.partial_cmp(b).expect("finite similarities"));
            sims
        })
        .filter(|sims| !sims.is_empty())
        .collect();
    let full_rank = cleaned.iter().map(Vec::len).max().unwrap_or(0);
    let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); full_rank];
    for sims in &cleaned {
        if sims.len() < full_rank {
            *short_sets += 1;
        }
        for (r, s) in sims.iter().enumerate() {
            sums[r].0 += s;
            sums[r].1 += 1;
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(r, (sum, n))| RankStat {
            rank: r + 1,
            mean_similarity: if n > 0 { sum / n as f64 } else { 0.0 },
            n,
        })
        .collect()
}

/// Ranks candidates by ascending similarity within each set and reports
/// per-rank means, at the candidate level and (when continuations are
/// available) at the trajectory-suffix level.
pub fn diversity_rank_report(
    sets: &[CandidateSetRecord],
    continuations: Option<&[ContinuationRecord]>,
) -> DiversityReport {
    let mut short_sets = 0usize;
    let candidate_ranks = rank_means(
        sets.iter()
            .map(|s| s.candidates.iter().filter_map(|c| c.similarity).collect()),
        &mut short_sets,
    );
    let trajectory_ranks = match continuations {
        Some(records) => {
            let mut short = 0usize;
            rank_means(
                records.iter().map(|r| r.suffix_similarities.clone()),
                &mut short,
            )
        }
        None => Vec::new(),
    };
    DiversityReport {
        candidate_ranks,
        trajectory_ranks,
        short_sets,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub rollouts: usize,
    pub branches: usize,
    pub mean_junction_tokens: f64,
    pub mean_candidate_tokens_total: f64,
    pub mean_candidate_tokens_per_candidate: f64,
    /// Junction plus candidate generation, per branch.
    pub mean_branch_overhead: f64,
    pub mean_rollout_agent_tokens: f64,
    pub mean_branch_agent_tokens: f64,
    pub agent_savings: f64,
    pub mean_rollout_user_tokens: f64,
    pub mean_branch_user_tokens: f64,
    pub eval_savings: f64,
    pub gross_savings: f64,
    /// Gross savings minus branch overhead.
    pub net_savings: f64,
}

fn mean(values: impl Iterator<Item = u64>) -> f64 {
    let mut sum: u64 = 0;
    let mut n: usize = 0;
    for v in values {
        sum = sum.saturating_add(v);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

/// Per-branch and aggregate framework overhead, plus the net-savings line
/// item: (agent savings + user-side savings) − branch overhead.
pub fn overhead_report(pool: &[Trajectory], candidates_per_junction: u32) -> OverheadReport {
    let rollouts: Vec<&Trajectory> = pool.iter().filter(|t| t.lineage.is_root()).collect();
    let branches: Vec<&Trajectory> = pool.iter().filter(|t| !t.lineage.is_root()).collect();

    let mean_junction_tokens = mean(branches.iter().map(|t| t.ledger.junction_overhead.total()));
    let mean_candidate_tokens_total =
        mean(branches.iter().map(|t| t.ledger.candidate_overhead.total()));
    let mean_candidate_tokens_per_candidate =
        mean_candidate_tokens_total / f64::from(candidates_per_junction.max(1));
    let mean_branch_overhead = mean_junction_tokens + mean_candidate_tokens_total;

    let mean_rollout_agent_tokens = mean(rollouts.iter().map(|t| t.ledger.agent.completion_tokens));
    let mean_branch_agent_tokens = mean(branches.iter().map(|t| t.ledger.agent.completion_tokens));
    let agent_savings = mean_rollout_agent_tokens - mean_branch_agent_tokens;

    let mean_rollout_user_tokens = mean(rollouts.iter().map(|t| t.ledger.user.completion_tokens));
    let mean_branch_user_tokens = mean(branches.iter().map(|t| t.ledger.user.completion_tokens));
    let eval_savings = mean_rollout_user_tokens - mean_branch_user_tokens;

    let gross_savings = agent_savings + eval_savings;
    OverheadReport {
        rollouts: rollouts.len(),
        branches: branches.len(),
        mean_junction_tokens,
        mean_candidate_tokens_total,
        mean_candidate_tokens_per_candidate,
        mean_branch_overhead,
        mean_rollout_agent_tokens,
        mean_branch_agent_tokens,
        agent_savings,
        mean_rollout_user_tokens,
        mean_branch_user_tokens,
        eval_savings,
        gross_savings,
        net_savings: gross_savings - mean_branch_overhead,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IntentVerdict {
    Preserved,
    Missed,
}

pub fn render_judge_messages(purpose: &str, message: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::new("system", JUDGE_SYSTEM_TEMPLATE.trim_end()),
        ChatMessage::new(
            "user",
            JUDGE_USER_TEMPLATE
                .replace("{purpose}", purpose)
                .replace("{message}", message),
        ),
    ]
}

/// Verdict rule: the first alphabetic token decides, case-insensitively.
pub fn parse_judge_verdict(text: &str) -> Result<IntentVerdict, AnalysisError> {
    let first: String = text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    if first.eq_ignore_ascii_case("yes") {
        Ok(IntentVerdict::Preserved)
    } else if first.eq_ignore_ascii_case("no") {
        Ok(IntentVerdict::Missed)
    } else {
        Err(AnalysisError::UnparseableVerdict(text.to_string()))
    }
}

/// Judges whether a user message still pursues the task purpose, at
/// temperature 0.
pub fn judge_intent(
    purpose: &str,
    message: &str,
    chat: &dyn ChatProvider,
    max_retries: u32,
) -> Result<IntentVerdict, AnalysisError> {
    let request = ChatRequest::new(
        render_judge_messages(purpose, message),
        0.0,
        max_retries,
        RoleTag::Judge,
    );
    let result = chat.chat_complete(&request)?;
    parse_judge_verdict(&result.content)
}

pub fn write_metrics_csv<W: Write>(pool: &[Trajectory], writer: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "task_id",
        "outcome",
        "agent_tokens",
        "overhead_tokens",
        "lineage",
    ])?;
    for t in pool {
        let outcome = match t.outcome.status {
            crate::core::OutcomeStatus::Success => "success",
            crate::core::OutcomeStatus::Failure => "failure",
            crate::core::OutcomeStatus::Incomplete => "incomplete",
        };
        w.write_record([
            t.task_id.as_str(),
            outcome,
            &t.ledger.agent.completion_tokens.to_string(),
            &t.ledger.overhead().total().to_string(),
            t.lineage.iteration_label.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_coverage_csv<W: Write>(
    curve: &[CoveragePoint],
    writer: W,
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["cumulative_tokens", "unique_failed_tasks"])?;
    for p in curve {
        w.write_record([
            p.cumulative_tokens.to_string(),
            p.unique_failed_tasks.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_prefix_csv<W: Write>(report: &PrefixReport, writer: W) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "kind",
        "task_id",
        "group",
        "size",
        "mean_fraction",
        "singleton",
    ])?;
    for g in &report.groups {
        let kind = match g.kind {
            PrefixGroupKind::Regular => "regular",
            PrefixGroupKind::BranchFamily => "branch_family",
        };
        w.write_record([
            kind,
            g.task_id.as_str(),
            g.group_key.as_str(),
            &g.size.to_string(),
            &format!("{}", g.mean_fraction),
            &g.singleton.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diversity_csv<W: Write>(
    report: &DiversityReport,
    writer: W,
) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["level", "rank", "mean_similarity", "n"])?;
    for (level, stats) in [
        ("candidate", &report.candidate_ranks),
        ("trajectory", &report.trajectory_ranks),
    ] {
        for s in stats {
            w.write_record([
                level,
                &s.rank.to_string(),
                &format!("{}", s.mean_similarity),
                &s.n.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
