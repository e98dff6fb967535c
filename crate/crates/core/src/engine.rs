//! Continuous-batching inference engine.
//!
//! The engine advances in batch steps. At each step boundary it admits
//! waiting requests (policy-dependent order) up to the decode-slot budget;
//! newly admitted requests contribute their input length to the step's
//! prefill set, already-running requests contribute decode slots, and every
//! running request gains one token per step. Prefill and the first decode
//! token are merged into the admitting step, so a request with `n` output
//! tokens occupies exactly `n` batch steps.
//!
//! A request may carry several parallel samples sharing one prefix (one
//! prefill, `parallel_samples` decode slots) — that is how k-sample
//! speculative calls are represented.

use std::collections::HashSet;

use thiserror::Error;

use crate::agent::Phase;
use crate::cost_model::{hybrid_batch_time, CostModelParams, PrefillSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RequestId(pub u64);

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskId(pub u64);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestKind {
    MainReasoning,
    SpeculativeSample,
    ScoreEvaluation,
}

impl RequestKind {
    pub fn short(&self) -> &'static str {
        match self {
            RequestKind::MainReasoning => "main",
            RequestKind::SpeculativeSample => "spec",
            RequestKind::ScoreEvaluation => "score",
        }
    }
}

/// Inter-request scheduling policy of the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Fcfs,
    SpeculationFirst,
}

/// Non-speculative requests that waited longer than this many batch steps
/// are admitted ahead of new speculation, bounding the delay speculation
/// can impose on reasoning requests.
pub const STARVATION_BATCH_LIMIT: u64 = 50;

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub id: RequestId,
    pub kind: RequestKind,
    pub task_id: TaskId,
    pub step_index: usize,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// Decode slots this request occupies (k for k-sample calls).
    pub parallel_samples: u32,
    /// Phase of the issuing task when the request was created.
    pub phase: Phase,
    pub tokens_done: u32,
    pub submit_time: f64,
    pub start_time: Option<f64>,
    pub finish_time: Option<f64>,
    submit_batch: u64,
}

impl InferenceRequest {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: RequestId,
        kind: RequestKind,
        task_id: TaskId,
        step_index: usize,
        input_tokens: u32,
        output_tokens: u32,
        parallel_samples: u32,
        phase: Phase,
    ) -> Self {
        InferenceRequest {
            id,
            kind,
            task_id,
            step_index,
            input_tokens: input_tokens.max(1),
            output_tokens,
            parallel_samples: parallel_samples.max(1),
            phase,
            tokens_done: 0,
            submit_time: 0.0,
            start_time: None,
            finish_time: None,
            submit_batch: 0,
        }
    }

    fn is_speculative(&self) -> bool {
        self.kind == RequestKind::SpeculativeSample
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("duplicate request id {0}")]
    DuplicateRequest(RequestId),
    #[error("request {0} has zero output tokens")]
    ZeroOutputTokens(RequestId),
}

/// Decode-slot counts by request class, over running plus waiting requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadSnapshot {
    pub total: u32,
    pub main: u32,
    pub speculative: u32,
    pub aggressive: u32,
}

/// The batch the engine will execute next: prefill entries of newly admitted
/// requests plus the decode count of previously running ones.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub prefill: PrefillSet,
    pub decode_count: u32,
    pub admitted: Vec<RequestId>,
}

#[derive(Debug)]
pub struct Engine {
    waiting: Vec<InferenceRequest>,
    running: Vec<InferenceRequest>,
    max_batch: u32,
    batches_started: u64,
    seen_ids: HashSet<RequestId>,
}

impl Engine {
    pub fn new(max_batch: u32) -> Self {
        Engine {
            waiting: Vec::new(),
            running: Vec::new(),
            max_batch,
            batches_started: 0,
            seen_ids: HashSet::new(),
        }
    }

    /// Enqueue a request at the current clock.
    pub fn submit(&mut self, mut req: InferenceRequest, now: f64) -> Result<(), EngineError> {
        if req.output_tokens == 0 {
            return Err(EngineError::ZeroOutputTokens(req.id));
        }
        if !self.seen_ids.insert(req.id) {
            return Err(EngineError::DuplicateRequest(req.id));
        }
        req.submit_time = now;
        req.submit_batch = self.batches_started;
        self.waiting.push(req);
        Ok(())
    }

    pub fn has_work(&self) -> bool {
        !self.waiting.is_empty() || !self.running.is_empty()
    }

    pub fn waiting_len(&self) -> usize {
        self.waiting.len()
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    pub fn running_slots(&self) -> u32 {
        self.running.iter().map(|r| r.parallel_samples).sum()
    }

    pub fn batches_started(&self) -> u64 {
        self.batches_started
    }

    /// Slot counts by class over running plus waiting requests. Speculative
    /// and score requests issued while their task was in the aggressive
    /// phase are counted as aggressive-phase load.
    pub fn load_snapshot(&self) -> LoadSnapshot {
        let mut snap = LoadSnapshot {
            total: 0,
            main: 0,
            speculative: 0,
            aggressive: 0,
        };
        for r in self.running.iter().chain(self.waiting.iter()) {
            let slots = r.parallel_samples;
            snap.total += slots;
            match (r.kind, r.phase) {
                (RequestKind::MainReasoning, _) => snap.main += slots,
                (_, Phase::Aggressive) => snap.aggressive += slots,
                (RequestKind::SpeculativeSample, Phase::Verified) => snap.speculative += slots,
                (RequestKind::ScoreEvaluation, Phase::Verified) => snap.aggressive += slots,
            }
        }
        snap
    }

    /// Admission order for the next batch under the given policy.
    fn admission_order(&self, policy: Policy) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.waiting.len()).collect();
        // Waiting is kept in submit order (ids are monotone within a run).
        match policy {
            Policy::Fcfs => order,
            Policy::SpeculationFirst => {
                let starved = |r: &InferenceRequest| {
                    !r.is_speculative()
                        && self.batches_started.saturating_sub(r.submit_batch)
                            > STARVATION_BATCH_LIMIT
                };
                let class = |r: &InferenceRequest| {
                    if starved(r) {
                        0u8
                    } else if r.is_speculative() {
                        1
                    } else {
                        2
                    }
                };
                order.sort_by_key(|&i| (class(&self.waiting[i]), i));
                order
            }
        }
    }

    /// Start the next batch step: admit waiting requests into the running
    /// set and return the batch composition. The caller computes the step
    /// duration from the cost model.
    pub fn form_next_batch(&mut self, policy: Policy, now: f64) -> BatchPlan {
        self.batches_started += 1;
        let decode_count = self.running_slots();
        let mut free = self.max_batch.saturating_sub(decode_count);
        let mut prefill = PrefillSet::empty();
        let mut admitted = Vec::new();
        let mut admitted_idx = Vec::new();
        for i in self.admission_order(policy) {
            let slots = self.waiting[i].parallel_samples;
            if slots > free {
                break;
            }
            free -= slots;
            prefill.add(self.waiting[i].input_tokens, 1);
            admitted.push(self.waiting[i].id);
            admitted_idx.push(i);
        }
        admitted_idx.sort_unstable();
        for &i in admitted_idx.iter().rev() {
            let mut req = self.waiting.remove(i);
            req.start_time = Some(now);
            self.running.push(req);
        }
        // Keep the running set in admission order for deterministic logs.
        self.running.sort_by_key(|r| r.id);
        BatchPlan {
            prefill,
            decode_count,
            admitted,
        }
    }

    /// Finish the in-flight batch step at `now`: every running request gains
    /// one token; completed requests are removed and returned.
    pub fn complete_batch(&mut self, now: f64) -> Vec<InferenceRequest> {
        let mut finished = Vec::new();
        let mut still_running = Vec::with_capacity(self.running.len());
        for mut req in self.running.drain(..) {
            req.tokens_done += 1;
            if req.tokens_done >= req.output_tokens {
                req.finish_time = Some(now);
                finished.push(req);
            } else {
                still_running.push(req);
            }
        }
        self.running = still_running;
        finished
    }

    /// Convenience for engine-level tests: run one batch step end to end,
    /// returning its duration and any completed requests.
    pub fn step(
        &mut self,
        policy: Policy,
        params: &CostModelParams,
        now: f64,
    ) -> (f64, Vec<InferenceRequest>) {
        let plan = self.form_next_batch(policy, now);
        let duration = hybrid_batch_time(&plan.prefill, plan.decode_count, params);
        let finished = self.complete_batch(now + duration);
        (duration, finished)
    }
}
