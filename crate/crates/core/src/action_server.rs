//! Simulated tool-execution service with an action buffer.
//!
//! The buffer maps action keys to execution state per task. Identical
//! actions are deduplicated: a second request for an in-progress key
//! attaches to the ongoing execution and resolves at its original
//! completion time; a request for a completed key reuses the stored
//! result with zero added latency. Only absent keys trigger a new
//! external call.
//!
//! Inside the simulator all calls are serialized by the event loop. The
//! contract for a standalone deployment is a thread-safe map with atomic
//! check-and-insert per key.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::engine::TaskId;

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("action key is empty after normalization")]
    EmptyKey,
}

/// Normalized action identity: trimmed, case-folded action text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionKey(String);

impl ActionKey {
    pub fn new(raw: &str) -> Result<Self, ActionError> {
        let normalized = raw.trim().to_lowercase();
        if normalized.is_empty() {
            return Err(ActionError::EmptyKey);
        }
        Ok(ActionKey(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for ActionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionState {
    InProgress,
    Completed,
}

/// One buffer entry. Fixed bookkeeping is accounted at 24 bytes (state,
/// two timestamps, waiter count); key and result bytes are counted at
/// their actual lengths.
#[derive(Debug, Clone)]
pub struct ActionRecord {
    pub key: ActionKey,
    pub state: ActionState,
    pub result: Option<String>,
    pub issue_time: f64,
    pub exec_time: f64,
    pub complete_time: Option<f64>,
    pub waiters: Vec<String>,
}

impl ActionRecord {
    pub const FIXED_BYTES: u64 = 24;

    pub fn footprint_bytes(&self) -> u64 {
        Self::FIXED_BYTES
            + self.key.as_str().len() as u64
            + self.result.as_ref().map_or(0, |r| r.len() as u64)
    }
}

/// Counters over the server lifetime.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct BufferStats {
    pub external_calls: u64,
    pub attaches: u64,
    pub reuses: u64,
    pub main_path_hits: u64,
    pub main_path_lookups: u64,
}

impl BufferStats {
    pub fn hit_rate(&self) -> f64 {
        if self.main_path_lookups == 0 {
            0.0
        } else {
            self.main_path_hits as f64 / self.main_path_lookups as f64
        }
    }
}

/// Outcome of submitting an action for execution.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecuteOutcome {
    /// New external call; completes at the given time.
    Launched { completes_at: f64 },
    /// Attached to an in-flight execution with the original completion time.
    Attached { completes_at: f64 },
    /// Result already available.
    Reused { result: String },
}

/// Outcome of the main agent path resolving its post-reasoning action.
#[derive(Debug, Clone, PartialEq)]
pub enum LookupOutcome {
    HitCompleted { result: String },
    HitInProgress { remaining: f64 },
    Miss,
}

#[derive(Debug, Default)]
struct TaskScope {
    records: BTreeMap<ActionKey, ActionRecord>,
}

/// The action server: per-task buffer scopes plus global stats.
#[derive(Debug, Default)]
pub struct ActionServer {
    scopes: BTreeMap<TaskId, TaskScope>,
    stats: BufferStats,
}

impl ActionServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> &BufferStats {
        &self.stats
    }

    /// Submit an action for execution. `exec_time` must be positive; it is
    /// only consulted when the key is absent (new external call).
    pub fn execute(
        &mut self,
        task: TaskId,
        key: &ActionKey,
        requester: &str,
        now: f64,
        exec_time: f64,
    ) -> ExecuteOutcome {
        assert!(exec_time > 0.0, "exec_time must be positive");
        let scope = self.scopes.entry(task).or_default();
        match scope.records.get_mut(key) {
            None => {
                let completes_at = now + exec_time;
                scope.records.insert(
                    key.clone(),
                    ActionRecord {
                        key: key.clone(),
                        state: ActionState::InProgress,
                        result: None,
                        issue_time: now,
                        exec_time,
                        complete_time: None,
                        waiters: vec![requester.to_string()],
                    },
                );
                self.stats.external_calls += 1;
                ExecuteOutcome::Launched { completes_at }
            }
            Some(rec) if rec.state == ActionState::InProgress => {
                rec.waiters.push(requester.to_string());
                self.stats.attaches += 1;
                ExecuteOutcome::Attached {
                    completes_at: rec.issue_time + rec.exec_time,
                }
            }
            Some(rec) => {
                self.stats.reuses += 1;
                ExecuteOutcome::Reused {
                    result: rec.result.clone().expect("completed record has result"),
                }
            }
        }
    }

    /// Mark an in-flight execution complete with the default observation
    /// token, returning the waiters to notify.
    pub fn complete(&mut self, task: TaskId, key: &ActionKey, now: f64) -> Option<Vec<String>> {
        let result = format!("obs:{key}");
        self.complete_with(task, key, now, result)
    }

    /// Mark an in-flight execution complete with an explicit result token.
    pub fn complete_with(
        &mut self,
        task: TaskId,
        key: &ActionKey,
        now: f64,
        result: String,
    ) -> Option<Vec<String>> {
        let scope = self.scopes.get_mut(&task)?;
        let rec = scope.records.get_mut(key)?;
        if rec.state == ActionState::Completed {
            return None;
        }
        rec.state = ActionState::Completed;
        rec.complete_time = Some(now);
        rec.result = Some(result);
        Some(rec.waiters.clone())
    }

    /// Resolve the reasoned action of a main agent path against the buffer.
    pub fn main_path_lookup(&mut self, task: TaskId, key: &ActionKey, now: f64) -> LookupOutcome {
        self.stats.main_path_lookups += 1;
        let rec = self
            .scopes
            .get(&task)
            .and_then(|scope| scope.records.get(key));
        match rec {
            Some(rec) if rec.state == ActionState::Completed => {
                self.stats.main_path_hits += 1;
                LookupOutcome::HitCompleted {
                    result: rec.result.clone().expect("completed record has result"),
                }
            }
            Some(rec) => {
                self.stats.main_path_hits += 1;
                LookupOutcome::HitInProgress {
                    remaining: (rec.issue_time + rec.exec_time - now).max(0.0),
                }
            }
            None => LookupOutcome::Miss,
        }
    }

    /// Summed record sizes for one task scope.
    pub fn buffer_footprint(&self, task: TaskId) -> u64 {
        self.scopes
            .get(&task)
            .map(|scope| scope.records.values().map(|r| r.footprint_bytes()).sum())
            .unwrap_or(0)
    }

    pub fn record(&self, task: TaskId, key: &ActionKey) -> Option<&ActionRecord> {
        self.scopes.get(&task).and_then(|s| s.records.get(key))
    }

    pub fn external_calls_for(&self, task: TaskId) -> u64 {
        // Per-task external call count equals the record count: one call per key.
        self.scopes
            .get(&task)
            .map(|s| s.records.len() as u64)
            .unwrap_or(0)
    }

    /// Drop a task's buffer scope once the task completes.
    pub fn drop_scope(&mut self, task: TaskId) {
        self.scopes.remove(&task);
    }
}
