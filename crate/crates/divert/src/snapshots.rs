//! Durable, versioned snapshot storage and experiment-tree reconstruction.
//!
//! Each snapshot directory holds two files: `state.bin`, a versioned binary
//! payload (fixed header with magic, schema version, payload digest and
//! length, followed by a MessagePack body), and `metadata.json`, a
//! human-readable mirror with the serialized dialogue. Writes stage into a
//! hidden temp directory and rename into place; abandoned stages stay
//! invisible to readers until swept.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::core::{label_depth, split_label, Message, TokenUsage};
use crate::orchestrator::ExecutionState;

pub const STATE_SCHEMA_VERSION: u16 = 1;
const MAGIC: &[u8; 8] = b"DVRTSNAP";
const HEADER_LEN: usize = 8 + 2 + 32 + 8;

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot integrity error at {path}: {detail}")]
    Integrity { path: String, detail: String },
    #[error("snapshot corruption at {path}: {detail}")]
    Corruption { path: String, detail: String },
    #[error("snapshot schema version {found} needs migration (supported: {supported})")]
    VersionMismatch { found: u16, supported: u16 },
    #[error("snapshot encode error: {0}")]
    Encode(String),
}

fn io_err(path: &Path, source: std::io::Error) -> SnapshotError {
    SnapshotError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Record of an injected continuation: what was replaced, with what, where
/// and at what framework cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub original_message: String,
    pub modified_message: String,
    pub junction_index: usize,
    pub junction_reason: String,
    #[serde(rename = "overhead_tokens")]
    pub overhead: TokenUsage,
}

/// Complete frozen execution state taken immediately before a user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub id: String,
    pub parent_id: Option<String>,
    pub iteration_label: String,
    pub step_count: usize,
    pub seed: u64,
    pub execution_state: ExecutionState,
    pub created_at: String,
    pub augmentation: Option<Augmentation>,
}

/// Storage destination for snapshots. Saves must be durable before the
/// following user turn is generated.
pub trait SnapshotSink: Send + Sync {
    fn save(&self, snapshot: &Snapshot) -> Result<PathBuf, SnapshotError>;
}

/// Collects snapshots in memory; test support.
#[derive(Default)]
pub struct VecSink(std::sync::Mutex<Vec<Snapshot>>);

impl VecSink {
    pub fn snapshots(&self) -> Vec<Snapshot> {
        self.0.lock().expect("sink lock").clone()
    }
}

impl SnapshotSink for VecSink {
    fn save(&self, snapshot: &Snapshot) -> Result<PathBuf, SnapshotError> {
        self.0.lock().expect("sink lock").push(snapshot.clone());
        Ok(PathBuf::from(format!(
            "mem://{}/{}",
            snapshot.iteration_label, snapshot.step_count
        )))
    }
}

/// Discards snapshots; used for side runs that must not touch the store.
pub struct NullSink;

impl SnapshotSink for NullSink {
    fn save(&self, snapshot: &Snapshot) -> Result<PathBuf, SnapshotError> {
        Ok(PathBuf::from(format!(
            "null://{}/{}",
            snapshot.iteration_label, snapshot.step_count
        )))
    }
}

/// Deterministic snapshot identifier for (task, label, step).
pub fn snapshot_id(task_id: &str, iteration_label: &str, step_count: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(task_id.as_bytes());
    hasher.update(b"/");
    hasher.update(iteration_label.as_bytes());
    hasher.update(b"/");
    hasher.update(step_count.to_le_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Directory name for a snapshot. The canonical name uses a colon
/// (`iteration_X_step:Y`), which is illegal on some filesystems; the on-disk
/// form replaces it with an underscore and the canonical name is recorded in
/// metadata.
pub fn snapshot_dir_name(iteration_label: &str, step_count: usize) -> String {
    format!("iteration_{iteration_label}_step_{step_count}")
}

pub fn canonical_snapshot_name(iteration_label: &str, step_count: usize) -> String {
    format!("iteration_{iteration_label}_step:{step_count}")
}

fn parse_dir_name(name: &str) -> Option<(String, usize)> {
    let rest = name.strip_prefix("iteration_")?;
    let sep = rest.rfind("_step_")?;
    let label = &rest[..sep];
    let step: usize = rest[sep + "_step_".len()..].parse().ok()?;
    if label.is_empty() || crate::core::parse_label(label).is_err() {
        return None;
    }
    Some((label.to_string(), step))
}

#[derive(Serialize, Deserialize)]
struct StatePayload {
    id: String,
    parent_id: Option<String>,
    iteration_label: String,
    step_count: usize,
    seed: u64,
    execution_state: ExecutionState,
    augmentation: Option<Augmentation>,
}

#[derive(Serialize, Deserialize)]
struct MetadataDoc {
    schema_version: u16,
    id: String,
    parent_id: Option<String>,
    iteration: String,
    step: usize,
    canonical_name: String,
    dialogue: Vec<Message>,
    augmentation: Option<Augmentation>,
    created_at: String,
}

fn encode_state(snapshot: &Snapshot) -> Result<Vec<u8>, SnapshotError> {
    let payload = StatePayload {
        id: snapshot.id.clone(),
        parent_id: snapshot.parent_id.clone(),
        iteration_label: snapshot.iteration_label.clone(),
        step_count: snapshot.step_count,
        seed: snapshot.seed,
        execution_state: snapshot.execution_state.clone(),
        augmentation: snapshot.augmentation.clone(),
    };
    let body =
        rmp_serde::to_vec_named(&payload).map_err(|e| SnapshotError::Encode(e.to_string()))?;
    let digest = Sha256::digest(&body);
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&STATE_SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&digest);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

fn decode_state(path: &Path, bytes: &[u8]) -> Result<StatePayload, SnapshotError> {
    let corrupt = |detail: &str| SnapshotError::Corruption {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != STATE_SCHEMA_VERSION {
        return Err(SnapshotError::VersionMismatch {
            found: version,
            supported: STATE_SCHEMA_VERSION,
        });
    }
    let digest = &bytes[10..42];
    let len = u64::from_le_bytes(bytes[42..50].try_into().expect("fixed slice")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != len {
        return Err(corrupt(&format!(
            "truncated payload: header says {len} bytes, found {}",
            body.len()
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("payload digest mismatch"));
    }
    rmp_serde::from_slice(body).map_err(|e| corrupt(&format!("payload decode: {e}")))
}

fn metadata_doc(snapshot: &Snapshot) -> MetadataDoc {
    MetadataDoc {
        schema_version: STATE_SCHEMA_VERSION,
        id: snapshot.id.clone(),
        parent_id: snapshot.parent_id.clone(),
        iteration: snapshot.iteration_label.clone(),
        step: snapshot.step_count,
        canonical_name: canonical_snapshot_name(&snapshot.iteration_label, snapshot.step_count),
        dialogue: snapshot.execution_state.messages.clone(),
        augmentation: snapshot.augmentation.clone(),
        created_at: snapshot.created_at.clone(),
    }
}

/// A snapshot written to a hidden temp directory but not yet visible.
/// Committing renames it into place atomically; a crash before commit leaves
/// nothing a reader can observe.
pub struct StagedSnapshot {
    tmp_dir: PathBuf,
    final_dir: PathBuf,
    state_bytes: Vec<u8>,
}

impl StagedSnapshot {
    pub fn commit(self) -> Result<PathBuf, SnapshotError> {
        match fs::rename(&self.tmp_dir, &self.final_dir) {
            Ok(()) => Ok(self.final_dir),
            Err(_) if self.final_dir.exists() => {
                // lost a race or re-saving: idempotent only for equal content
                let result = check_existing(&self.final_dir, &self.state_bytes);
                let _ = fs::remove_dir_all(&self.tmp_dir);
                result
            }
            Err(e) => Err(io_err(&self.final_dir, e)),
        }
    }

    pub fn tmp_dir(&self) -> &Path {
        &self.tmp_dir
    }
}

fn check_existing(final_dir: &Path, state_bytes: &[u8]) -> Result<PathBuf, SnapshotError> {
    let existing = fs::read(final_dir.join("state.bin"))
        .map_err(|e| io_err(&final_dir.join("state.bin"), e))?;
    if existing == state_bytes {
        Ok(final_dir.to_path_buf())
    } else {
        Err(SnapshotError::Integrity {
            path: final_dir.display().to_string(),
            detail: "path collision with different content".into(),
        })
    }
}

/// Stages a snapshot without making it visible. `save_snapshot` is
/// stage-then-commit.
pub fn stage_snapshot(
    snapshot: &Snapshot,
    base_dir: &Path,
    domain: &str,
    model: &str,
    task_id: &str,
) -> Result<StagedSnapshot, SnapshotError> {
    let task_dir = base_dir.join(domain).join(model).join(task_id);
    let dir_name = snapshot_dir_name(&snapshot.iteration_label, snapshot.step_count);
    let final_dir = task_dir.join(&dir_name);
    let state_bytes = encode_state(snapshot)?;

    if final_dir.exists() {
        // probe now so callers learn about collisions before staging work
        check_existing(&final_dir, &state_bytes)?;
    }

    fs::create_dir_all(&task_dir).map_err(|e| io_err(&task_dir, e))?;
    let tmp_dir = task_dir.join(format!(".tmp-{}-{}", dir_name, std::process::id()));
    if tmp_dir.exists() {
        fs::remove_dir_all(&tmp_dir).map_err(|e| io_err(&tmp_dir, e))?;
    }
    fs::create_dir_all(&tmp_dir).map_err(|e| io_err(&tmp_dir, e))?;

    let state_path = tmp_dir.join("state.bin");
    let mut f = fs::File::create(&state_path).map_err(|e| io_err(&state_path, e))?;
    f.write_all(&state_bytes)
        .map_err(|e| io_err(&state_path, e))?;
    f.sync_all().map_err(|e| io_err(&state_path, e))?;

    let meta_path = tmp_dir.join("metadata.json");
    let meta = serde_json::to_string_pretty(&metadata_doc(snapshot))
        .map_err(|e| SnapshotError::Encode(e.to_string()))?;
    let mut f = fs::File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    f.write_all(meta.as_bytes())
        .map_err(|e| io_err(&meta_path, e))?;
    f.sync_all().map_err(|e| io_err(&meta_path, e))?;

    Ok(StagedSnapshot {
        tmp_dir,
        final_dir,
        state_bytes,
    })
}

/// Writes a snapshot durably and atomically, returning its directory.
/// Re-saving byte-identical content is idempotent; a collision with
/// different content is an integrity error.
pub fn save_snapshot(
    snapshot: &Snapshot,
    base_dir: &Path,
    domain: &str,
    model: &str,
    task_id: &str,
) -> Result<PathBuf, SnapshotError> {
    stage_snapshot(snapshot, base_dir, domain, model, task_id)?.commit()
}

/// Loads a snapshot directory, cross-checking metadata against the state
/// payload.
pub fn load_snapshot(path: &Path) -> Result<Snapshot, SnapshotError> {
    let state_path = path.join("state.bin");
    let bytes = fs::read(&state_path).map_err(|e| io_err(&state_path, e))?;
    let payload = decode_state(&state_path, &bytes)?;

    let meta_path = path.join("metadata.json");
    let meta_bytes = fs::read(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: MetadataDoc =
        serde_json::from_slice(&meta_bytes).map_err(|e| SnapshotError::Corruption {
            path: meta_path.display().to_string(),
            detail: format!("metadata decode: {e}"),
        })?;

    if meta.id != payload.id
        || meta.iteration != payload.iteration_label
        || meta.step != payload.step_count
    {
        return Err(SnapshotError::Corruption {
            path: path.display().to_string(),
            detail: format!(
                "metadata disagrees with state payload (metadata {}/{}/{} vs state {}/{}/{})",
                meta.id,
                meta.iteration,
                meta.step,
                payload.id,
                payload.iteration_label,
                payload.step_count
            ),
        });
    }

    Ok(Snapshot {
        id: payload.id,
        parent_id: payload.parent_id,
        iteration_label: payload.iteration_label,
        step_count: payload.step_count,
        seed: payload.seed,
        execution_state: payload.execution_state,
        created_at: meta.created_at,
        augmentation: payload.augmentation,
    })
}

/// Filesystem-backed sink rooted at `base_dir`, writing under
/// `base_dir/{task domain}/{model}/{task_id}/`.
pub struct FsSnapshotStore {
    pub base_dir: PathBuf,
    pub model: String,
}

impl FsSnapshotStore {
    pub fn new(base_dir: impl Into<PathBuf>, model: impl Into<String>) -> Self {
        FsSnapshotStore {
            base_dir: base_dir.into(),
            model: model.into(),
        }
    }

    pub fn task_dir(&self, domain: &str, task_id: &str) -> PathBuf {
        self.base_dir.join(domain).join(&self.model).join(task_id)
    }

    pub fn list_tree(&self, domain: &str, task_id: &str) -> Result<ExperimentTree, SnapshotError> {
        list_tree(&self.base_dir, domain, &self.model, task_id)
    }

    pub fn prune(
        &self,
        domain: &str,
        task_id: &str,
        label: &str,
    ) -> Result<Vec<PathBuf>, SnapshotError> {
        prune_label(&self.base_dir, domain, &self.model, task_id, label)
    }
}

impl SnapshotSink for FsSnapshotStore {
    fn save(&self, snapshot: &Snapshot) -> Result<PathBuf, SnapshotError> {
        save_snapshot(
            snapshot,
            &self.base_dir,
            &snapshot.execution_state.task.domain,
            &self.model,
            &snapshot.execution_state.task.task_id,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeNode {
    pub iteration_label: String,
    /// Snapshot directories of this trajectory, ordered by step.
    pub snapshot_dirs: Vec<PathBuf>,
    pub children: Vec<TreeNode>,
}

/// Per-task forest reconstructed purely from directory names.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExperimentTree {
    pub roots: Vec<TreeNode>,
    /// Nodes whose parent label is missing; never silently attached.
    pub orphans: Vec<TreeNode>,
    /// Unparseable directory names, skipped.
    pub diagnostics: Vec<String>,
}

impl ExperimentTree {
    /// All labels attached under roots (not orphans), in depth-first order.
    pub fn attached_labels(&self) -> Vec<String> {
        fn walk(node: &TreeNode, out: &mut Vec<String>) {
            out.push(node.iteration_label.clone());
            for child in &node.children {
                walk(child, out);
            }
        }
        let mut out = Vec::new();
        for root in &self.roots {
            walk(root, &mut out);
        }
        out
    }

    /// (parent, child) label pairs over the attached forest.
    pub fn parent_child_pairs(&self) -> Vec<(String, String)> {
        fn walk(node: &TreeNode, out: &mut Vec<(String, String)>) {
            for child in &node.children {
                out.push((node.iteration_label.clone(), child.iteration_label.clone()));
                walk(child, out);
            }
        }
        let mut out = Vec::new();
        for root in &self.roots {
            walk(root, &mut out);
        }
        out
    }

    pub fn render(&self) -> String {
        fn walk(node: &TreeNode, depth: usize, out: &mut String) {
            out.push_str(&"  ".repeat(depth));
            out.push_str(&node.iteration_label);
            out.push_str(&format!(" ({} snapshot(s))\n", node.snapshot_dirs.len()));
            for child in &node.children {
                walk(child, depth + 1, out);
            }
        }
        let mut out = String::new();
        for root in &self.roots {
            walk(root, 0, &mut out);
        }
        for orphan in &self.orphans {
            out.push_str(&format!(
                "orphan: {} (parent label missing)\n",
                orphan.iteration_label
            ));
        }
        for diag in &self.diagnostics {
            out.push_str(&format!("skipped: {diag}\n"));
        }
        out
    }
}

/// Reconstructs the experiment forest for one task from the on-disk layout.
pub fn list_tree(
    base_dir: &Path,
    domain: &str,
    model: &str,
    task_id: &str,
) -> Result<ExperimentTree, SnapshotError> {
    let task_dir = base_dir.join(domain).join(model).join(task_id);
    let mut tree = ExperimentTree::default();
    if !task_dir.exists() {
        return Ok(tree);
    }

    let mut by_label: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
    let entries = fs::read_dir(&task_dir).map_err(|e| io_err(&task_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&task_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with('.') {
            continue;
        }
        if !entry.path().is_dir() {
            tree.diagnostics.push(format!("{name}: not a directory"));
            continue;
        }
        match parse_dir_name(&name) {
            Some((label, step)) => by_label
                .entry(label)
                .or_default()
                .push((step, entry.path())),
            None => tree.diagnostics.push(format!("{name}: unparseable name")),
        }
    }

    let mut nodes: BTreeMap<String, TreeNode> = by_label
        .into_iter()
        .map(|(label, mut dirs)| {
            dirs.sort();
            (
                label.clone(),
                TreeNode {
                    iteration_label: label,
                    snapshot_dirs: dirs.into_iter().map(|(_, p)| p).collect(),
                    children: Vec::new(),
                },
            )
        })
        .collect();

    // attach deepest labels first so parents are still in the map
    let mut labels: Vec<String> = nodes.keys().cloned().collect();
    labels.sort_by_key(|l| std::cmp::Reverse(label_depth(l)));
    let mut orphan_labels = Vec::new();
    for label in labels {
        if label_depth(&label) == 0 {
            continue;
        }
        let (parent, _) = split_label(&label).expect("parsed labels split cleanly");
        if nodes.contains_key(&parent) {
            let node = nodes.remove(&label).expect("node present");
            nodes
                .get_mut(&parent)
                .expect("parent present")
                .children
                .push(node);
        } else {
            orphan_labels.push(label);
        }
    }

    fn sort_children(node: &mut TreeNode) {
        node.children.sort_by_key(|c| {
            split_label(&c.iteration_label)
                .map(|(_, idx)| idx)
                .unwrap_or(u32::MAX)
        });
        for child in &mut node.children {
            sort_children(child);
        }
    }

    for label in orphan_labels {
        let mut node = nodes.remove(&label).expect("orphan present");
        sort_children(&mut node);
        tree.orphans.push(node);
    }
    let mut roots: Vec<TreeNode> = nodes.into_values().collect();
    roots.sort_by_key(|n| {
        split_label(&n.iteration_label)
            .map(|(_, i)| i)
            .unwrap_or(u32::MAX)
    });
    for root in &mut roots {
        sort_children(root);
    }
    tree.roots = roots;
    tree.orphans.sort_by_key(|n| n.iteration_label.clone());
    Ok(tree)
}

/// Deletes all snapshot directories of `label` and its descendants.
/// Returns the removed directories.
pub fn prune_label(
    base_dir: &Path,
    domain: &str,
    model: &str,
    task_id: &str,
    label: &str,
) -> Result<Vec<PathBuf>, SnapshotError> {
    crate::core::parse_label(label).map_err(|e| SnapshotError::Integrity {
        path: label.to_string(),
        detail: e.to_string(),
    })?;
    let task_dir = base_dir.join(domain).join(model).join(task_id);
    let mut removed = Vec::new();
    if !task_dir.exists() {
        return Ok(removed);
    }
    let descendant_prefix = format!("{label}_");
    let entries = fs::read_dir(&task_dir).map_err(|e| io_err(&task_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(&task_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some((dir_label, _)) = parse_dir_name(&name) {
            if dir_label == label || dir_label.starts_with(&descendant_prefix) {
                fs::remove_dir_all(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
                removed.push(entry.path());
            }
        }
    }
    removed.sort();
    Ok(removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Lineage, Role};
    use crate::envsim::bundled_mini_orders;
    use crate::orchestrator::ExecutionState;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn sample_snapshot(label: &str, step: usize) -> Snapshot {
        let task = &bundled_mini_orders().tasks[0];
        let mut state = ExecutionState::initial(task, 42, Lineage::root(1));
        state.lineage.iteration_label = label.to_string();
        state.step_count = step;
        state.messages.push(Message::new(
            1,
            Role::User,
            "Hi, please cancel order o42.",
            TokenUsage::new(3, 7),
        ));
        Snapshot {
            id: snapshot_id(&task.task_id, label, step),
            parent_id: None,
            iteration_label: label.to_string(),
            step_count: step,
            seed: 42,
            execution_state: state,
            created_at: "2026-01-01T00:00:00+00:00".into(),
            augmentation: None,
        }
    }

    #[test]
    fn save_uses_the_sanitized_directory_layout() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("1", 5);
        let path = save_snapshot(&snapshot, tmp.path(), "mini-orders", "mock", "task_7").unwrap();
        assert!(path.ends_with("mini-orders/mock/task_7/iteration_1_step_5"));
        assert!(path.join("state.bin").is_file());
        assert!(path.join("metadata.json").is_file());
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(path.join("metadata.json")).unwrap()).unwrap();
        assert_eq!(meta["canonical_name"], "iteration_1_step:5");
        assert_eq!(meta["iteration"], "1");
        assert!(meta["dialogue"].is_array());
        for key in ["id", "parent_id", "created_at", "augmentation"] {
            assert!(meta.get(key).is_some(), "metadata missing {key}");
        }
    }

    #[test]
    fn augmentation_metadata_uses_the_documented_keys() {
        let tmp = TempDir::new().unwrap();
        let mut snapshot = sample_snapshot("2_1", 3);
        snapshot.augmentation = Some(Augmentation {
            original_message: "orig".into(),
            modified_message: "mod".into(),
            junction_index: 3,
            junction_reason: "why".into(),
            overhead: TokenUsage::new(100, 330),
        });
        let path = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        let meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(path.join("metadata.json")).unwrap()).unwrap();
        let aug = &meta["augmentation"];
        assert_eq!(aug["original_message"], "orig");
        assert_eq!(aug["modified_message"], "mod");
        assert_eq!(aug["junction_index"], 3);
        assert_eq!(aug["junction_reason"], "why");
        assert_eq!(aug["overhead_tokens"]["completion_tokens"], 330);
        assert_eq!(load_snapshot(&path).unwrap(), snapshot);
    }

    #[test]
    fn resave_is_idempotent_and_collisions_are_integrity_errors() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("1", 5);
        let p1 = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        let p2 = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        assert_eq!(p1, p2);

        let mut different = sample_snapshot("1", 5);
        different.seed = 43;
        let err = save_snapshot(&different, tmp.path(), "d", "m", "t").unwrap_err();
        assert!(matches!(err, SnapshotError::Integrity { .. }), "{err}");
    }

    #[test]
    fn load_round_trips_saved_snapshots() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("2_1", 9);
        let path = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        let loaded = load_snapshot(&path).unwrap();
        assert_eq!(loaded, snapshot);
    }

    #[test]
    fn truncated_state_is_a_corruption_error() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("1", 0);
        let path = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        let state_path = path.join("state.bin");
        let bytes = std::fs::read(&state_path).unwrap();
        std::fs::write(&state_path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(
            load_snapshot(&path),
            Err(SnapshotError::Corruption { .. })
        ));
    }

    #[test]
    fn version_mismatch_names_versions() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("1", 0);
        let path = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        let state_path = path.join("state.bin");
        let mut bytes = std::fs::read(&state_path).unwrap();
        bytes[8] = 99;
        std::fs::write(&state_path, &bytes).unwrap();
        match load_snapshot(&path) {
            Err(SnapshotError::VersionMismatch { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, STATE_SCHEMA_VERSION);
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn metadata_disagreement_is_a_corruption_error() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("1", 0);
        let path = save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        let meta_path = path.join("metadata.json");
        let mut meta: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&meta_path).unwrap()).unwrap();
        meta["iteration"] = serde_json::json!("3_3");
        std::fs::write(&meta_path, serde_json::to_vec(&meta).unwrap()).unwrap();
        assert!(matches!(
            load_snapshot(&path),
            Err(SnapshotError::Corruption { .. })
        ));
    }

    #[test]
    fn tree_reconstruction_follows_the_label_grammar() {
        let tmp = TempDir::new().unwrap();
        for label in ["1", "2", "1_1", "1_2", "1_1_1"] {
            let snapshot = sample_snapshot(label, 0);
            save_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        }
        let tree = list_tree(tmp.path(), "d", "m", "t").unwrap();
        assert_eq!(tree.roots.len(), 2);
        assert_eq!(tree.roots[0].iteration_label, "1");
        assert_eq!(tree.roots[1].iteration_label, "2");
        assert!(tree.roots[1].children.is_empty());
        let one = &tree.roots[0];
        assert_eq!(one.children.len(), 2);
        assert_eq!(one.children[0].iteration_label, "1_1");
        assert_eq!(one.children[0].children[0].iteration_label, "1_1_1");
        assert_eq!(one.children[1].iteration_label, "1_2");
        assert!(tree.orphans.is_empty());
        assert!(tree.diagnostics.is_empty());
    }

    #[test]
    fn empty_task_directory_yields_empty_tree() {
        let tmp = TempDir::new().unwrap();
        std::fs::create_dir_all(tmp.path().join("d/m/t")).unwrap();
        let tree = list_tree(tmp.path(), "d", "m", "t").unwrap();
        assert!(tree.roots.is_empty() && tree.orphans.is_empty());
    }

    #[test]
    fn missing_parent_is_an_orphan_diagnostic() {
        let tmp = TempDir::new().unwrap();
        save_snapshot(&sample_snapshot("1_3", 0), tmp.path(), "d", "m", "t").unwrap();
        let tree = list_tree(tmp.path(), "d", "m", "t").unwrap();
        assert!(tree.roots.is_empty());
        assert_eq!(tree.orphans.len(), 1);
        assert_eq!(tree.orphans[0].iteration_label, "1_3");
    }

    #[test]
    fn unparseable_names_are_skipped_with_diagnostics() {
        let tmp = TempDir::new().unwrap();
        std::fs::create_dir_all(tmp.path().join("d/m/t/iteration_bogus_step_x")).unwrap();
        std::fs::create_dir_all(tmp.path().join("d/m/t/notes")).unwrap();
        let tree = list_tree(tmp.path(), "d", "m", "t").unwrap();
        assert!(tree.roots.is_empty());
        assert_eq!(tree.diagnostics.len(), 2);
    }

    #[test]
    fn abandoned_stage_is_invisible() {
        let tmp = TempDir::new().unwrap();
        let snapshot = sample_snapshot("1", 4);
        let staged = stage_snapshot(&snapshot, tmp.path(), "d", "m", "t").unwrap();
        assert!(staged.tmp_dir().exists());
        drop(staged); // crash before rename: temp dir remains, final dir never appears
        let tree = list_tree(tmp.path(), "d", "m", "t").unwrap();
        assert!(tree.roots.is_empty());
        assert!(tree.diagnostics.is_empty(), "{:?}", tree.diagnostics);
        assert!(!tmp.path().join("d/m/t/iteration_1_step_4").exists());
    }

    #[test]
    fn prune_removes_label_and_descendants() {
        let tmp = TempDir::new().unwrap();
        for label in ["1", "1_1", "1_1_2", "2"] {
            save_snapshot(&sample_snapshot(label, 0), tmp.path(), "d", "m", "t").unwrap();
        }
        let removed = prune_label(tmp.path(), "d", "m", "t", "1_1").unwrap();
        assert_eq!(removed.len(), 2);
        let tree = list_tree(tmp.path(), "d", "m", "t").unwrap();
        let labels = tree.attached_labels();
        assert_eq!(labels, ["1", "2"]);
    }

    fn arb_label() -> impl Strategy<Value = String> {
        proptest::collection::vec(1u32..5, 1..4).prop_map(|segs| {
            segs.iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join("_")
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn prop_snapshot_round_trip(
            label in arb_label(),
            step in 0usize..40,
            seed in 0u64..1000,
            user_text in "[a-z ]{0,40}",
            errors in 0usize..5,
        ) {
            let tmp = TempDir::new().unwrap();
            let task = &bundled_mini_orders().tasks[1];
            let mut state = ExecutionState::initial(task, seed, Lineage::root(1));
            state.lineage.iteration_label = label.clone();
            state.step_count = step;
            state.error_count = errors;
            state.messages.push(Message::new(1, Role::User, user_text.clone(), TokenUsage::new(1, 2)));
            let snapshot = Snapshot {
                id: snapshot_id(&task.task_id, &label, step),
                parent_id: Some("abc".into()),
                iteration_label: label.clone(),
                step_count: step,
                seed,
                execution_state: state,
                created_at: "2026-01-01T00:00:00+00:00".into(),
                augmentation: Some(Augmentation {
                    original_message: "orig".into(),
                    modified_message: user_text,
                    junction_index: 1,
                    junction_reason: "why".into(),
                    overhead: TokenUsage::new(100, 29),
                }),
            };
            let path = save_snapshot(&snapshot, tmp.path(), "d", "m", &task.task_id).unwrap();
            let loaded = load_snapshot(&path).unwrap();
            prop_assert_eq!(loaded, snapshot);
        }
    }
}
