//! Snapshot-based, coverage-guided evaluation engine for multi-turn,
//! tool-using conversational agents.
//!
//! Instead of re-running conversations from the start, the engine snapshots
//! full execution state before every user turn, selects high-leverage
//! junctions, injects maximally divergent but intent-preserving user
//! messages, and resumes from cached state — then measures failure-discovery
//! efficiency and coverage.

pub mod analysis;
pub mod cli;
pub mod core;
pub mod envsim;
pub mod orchestrator;
pub mod pipeline;
pub mod providers;
pub mod snapshots;
