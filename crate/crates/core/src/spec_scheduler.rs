//! Load-aware selection of speculative launches.
//!
//! Candidates enter a priority queue when their paired main reasoning
//! request is submitted. Each scheduling step greedily pops candidates in
//! priority order and accepts one while doing so strictly increases the
//! expected net latency reduction under the current engine load:
//!
//! ```text
//! net(S, N) = reduction(S) - decode_overhead(S, N) - prefill_overhead(S)
//! reduction(S) = (1 / (N_m + N_a)) * sum over S of t_act * (1 - (1-p)^k)
//! ```
//!
//! Priority: earlier step index first (early-step speculation is adopted
//! more often), then more recently enqueued first (a fresher candidate has
//! a longer overlap window left). Candidates that waited past `t_w` at pop
//! time are discarded permanently; the first rejected candidate ends the
//! step and returns to the queue.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};

use thiserror::Error;

use crate::cost_model::{decode_overhead, hybrid_batch_time, CostModelParams, PrefillSet};
use crate::engine::{LoadSnapshot, TaskId};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("expected reduction undefined: no main or aggressive-phase requests in flight")]
    UndefinedLoad,
}

/// A pending speculation opportunity for one verified-phase step.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecCandidate {
    pub task_id: TaskId,
    pub step_index: usize,
    /// Arrival time of the paired main reasoning request.
    pub enqueue_time: f64,
    pub hit_probability: f64,
    /// Action execution time this candidate could overlap, seconds.
    pub t_act: f64,
    /// Input length of the speculative prefill.
    pub input_tokens: u32,
    /// Speculative output length in tokens.
    pub output_tokens: u32,
}

impl SpecCandidate {
    pub fn wait_time(&self, now: f64) -> f64 {
        (now - self.enqueue_time).max(0.0)
    }
}

/// Strict total order: step index ascending, enqueue time descending
/// (recent first), task id ascending as the final tiebreak.
pub fn compare_priority(a: &SpecCandidate, b: &SpecCandidate) -> Ordering {
    a.step_index
        .cmp(&b.step_index)
        .then_with(|| {
            b.enqueue_time
                .partial_cmp(&a.enqueue_time)
                .expect("enqueue times are finite")
        })
        .then_with(|| a.task_id.cmp(&b.task_id))
}

#[derive(Debug, Clone, Copy)]
pub struct SchedulerConfig {
    pub k: u32,
    /// Maximum queueing age before a candidate is discarded, seconds.
    pub t_w: f64,
    /// Run the selection every this many batch steps.
    pub scheduling_interval: u64,
}

impl SchedulerConfig {
    /// Default wait threshold: twice the time a speculative request of
    /// typical length needs to decode at knee-level load.
    pub fn derive_t_w(params: &CostModelParams, typical_output_tokens: f64) -> f64 {
        2.0 * hybrid_batch_time(&PrefillSet::empty(), params.decode_knee, params)
            * typical_output_tokens
    }

    pub fn new(k: u32, params: &CostModelParams) -> Self {
        SchedulerConfig {
            k,
            t_w: Self::derive_t_w(params, 7.0),
            scheduling_interval: 1,
        }
    }
}

/// Expected latency reduction and the overheads charged against it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainBreakdown {
    pub reduction: f64,
    pub decode_overhead: f64,
    pub prefill_overhead: f64,
    pub net: f64,
}

impl GainBreakdown {
    pub const ZERO: GainBreakdown = GainBreakdown {
        reduction: 0.0,
        decode_overhead: 0.0,
        prefill_overhead: 0.0,
        net: 0.0,
    };
}

/// Expected per-task latency reduction of launching `k` samples for every
/// candidate in `s`, diluted by the number of main and aggressive-phase
/// requests in flight.
pub fn expected_reduction(
    s: &[SpecCandidate],
    n_main: u32,
    n_aggressive: u32,
    k: u32,
) -> Result<f64, SchedulerError> {
    if n_main + n_aggressive == 0 {
        return Err(SchedulerError::UndefinedLoad);
    }
    let denom = (n_main + n_aggressive) as f64;
    let sum: f64 = s
        .iter()
        .map(|c| c.t_act * (1.0 - (1.0 - c.hit_probability).powi(k as i32)))
        .sum();
    Ok(sum / denom)
}

/// Compose reduction and overheads for a tentative selection `s` under the
/// load snapshot. `net = reduction - decode - prefill` exactly.
pub fn net_gain(
    s: &[SpecCandidate],
    load: &LoadSnapshot,
    params: &CostModelParams,
    k: u32,
) -> Result<GainBreakdown, SchedulerError> {
    if s.is_empty() {
        return Ok(GainBreakdown::ZERO);
    }
    let reduction = expected_reduction(s, load.main, load.aggressive, k)?;
    let mean_l_s = s.iter().map(|c| c.output_tokens as f64).sum::<f64>() / s.len() as f64;
    let decode = decode_overhead(s.len() as u32, k, load.total, mean_l_s, params);
    let mut prefill_set = PrefillSet::empty();
    for c in s {
        prefill_set.add(c.input_tokens.max(1), 1);
    }
    let prefill = hybrid_batch_time(&prefill_set, load.total, params)
        - hybrid_batch_time(&PrefillSet::empty(), load.total, params);
    Ok(GainBreakdown {
        reduction,
        decode_overhead: decode,
        prefill_overhead: prefill,
        net: reduction - decode - prefill,
    })
}

/// Max-heap wrapper: highest priority pops first.
#[derive(Debug)]
struct Prioritized(SpecCandidate);

impl PartialEq for Prioritized {
    fn eq(&self, other: &Self) -> bool {
        compare_priority(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Prioritized {}
impl PartialOrd for Prioritized {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Prioritized {
    fn cmp(&self, other: &Self) -> Ordering {
        // compare_priority orders best-first; BinaryHeap pops the maximum.
        compare_priority(&other.0, &self.0)
    }
}

/// Outcome of one scheduling step.
#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub selected: Vec<SpecCandidate>,
    /// Marginal gain of each accepted candidate, in acceptance order.
    pub breakdowns: Vec<GainBreakdown>,
    pub expired: Vec<SpecCandidate>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SchedulerStats {
    pub registered: u64,
    pub launched: u64,
    pub expired: u64,
    pub withdrawn: u64,
    pub decisions: u64,
}

#[derive(Debug)]
pub struct SpecScheduler {
    cfg: SchedulerConfig,
    queue: BinaryHeap<Prioritized>,
    /// Candidates currently in the queue, for withdraw bookkeeping.
    queued: BTreeSet<(TaskId, usize)>,
    withdrawn: BTreeSet<(TaskId, usize)>,
    pub stats: SchedulerStats,
}

impl SpecScheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        SpecScheduler {
            cfg,
            queue: BinaryHeap::new(),
            queued: BTreeSet::new(),
            withdrawn: BTreeSet::new(),
            stats: SchedulerStats::default(),
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn register(&mut self, candidate: SpecCandidate) {
        self.stats.registered += 1;
        self.queued
            .insert((candidate.task_id, candidate.step_index));
        self.queue.push(Prioritized(candidate));
    }

    /// Remove a still-queued candidate whose paired main request has already
    /// finished. Lazy: the entry is skipped when popped.
    pub fn withdraw(&mut self, task: TaskId, step_index: usize) {
        if self.queued.remove(&(task, step_index)) {
            self.withdrawn.insert((task, step_index));
            self.stats.withdrawn += 1;
        }
    }

    /// Run one greedy selection step against the given load snapshot.
    pub fn select_step(
        &mut self,
        now: f64,
        load: &LoadSnapshot,
        params: &CostModelParams,
    ) -> Result<SelectionOutcome, SchedulerError> {
        self.stats.decisions += 1;
        let mut selected: Vec<SpecCandidate> = Vec::new();
        let mut breakdowns = Vec::new();
        let mut expired = Vec::new();
        let mut accepted = GainBreakdown::ZERO;
        while let Some(Prioritized(cand)) = self.queue.pop() {
            if self.withdrawn.remove(&(cand.task_id, cand.step_index)) {
                continue;
            }
            if cand.wait_time(now) > self.cfg.t_w {
                self.stats.expired += 1;
                self.queued.remove(&(cand.task_id, cand.step_index));
                expired.push(cand);
                continue;
            }
            selected.push(cand);
            let gain = net_gain(&selected, load, params, self.cfg.k)?;
            if gain.net > accepted.net {
                let launched = selected.last().expect("just pushed");
                self.queued.remove(&(launched.task_id, launched.step_index));
                breakdowns.push(GainBreakdown {
                    reduction: gain.reduction - accepted.reduction,
                    decode_overhead: gain.decode_overhead - accepted.decode_overhead,
                    prefill_overhead: gain.prefill_overhead - accepted.prefill_overhead,
                    net: gain.net - accepted.net,
                });
                accepted = gain;
            } else {
                let rejected = selected.pop().expect("just pushed");
                self.queue.push(Prioritized(rejected));
                break;
            }
        }
        self.stats.launched += selected.len() as u64;
        Ok(SelectionOutcome {
            selected,
            breakdowns,
            expired,
        })
    }
}
