//! Per-task orchestrator: a two-phase speculation state machine.
//!
//! A task starts in the aggressive phase: instead of reasoning, the agent
//! samples k candidate actions directly (one short inference call), executes
//! the distinct ones through the action server, and scores their
//! plausibility with a second short call. When all k scores fall below the
//! threshold the task switches — permanently — to the verified phase, where
//! every step runs full reasoning on the main path while speculation
//! executes candidate actions in parallel; the reasoned action is
//! authoritative and reuses a speculative result when the keys match.
//!
//! The orchestrator is driven by the simulator's event loop through
//! [`TaskAgent::on_request_finished`] and [`TaskAgent::on_action_done`].

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::action_server::{ActionKey, ExecuteOutcome, LookupOutcome};
use crate::engine::{RequestKind, TaskId};
use crate::rng::{self, tag};
use crate::sim::SimServices;
use crate::spec_scheduler::SpecCandidate;
use crate::workload::{StepSpec, TaskTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Aggressive,
    Verified,
}

/// Phase progress of one task. The transition is one-way.
#[derive(Debug, Clone, Copy)]
pub struct PhaseState {
    pub phase: Phase,
    /// Current 1-based step index.
    pub step_index: usize,
    /// Step whose evaluation triggered the switch to the verified phase.
    pub transitioned_at_step: Option<usize>,
}

impl PhaseState {
    pub fn starting(phase: Phase) -> Self {
        PhaseState {
            phase,
            step_index: 1,
            transitioned_at_step: None,
        }
    }

    /// Apply the transition rule: switch to the verified phase iff every
    /// score fell below the threshold.
    pub fn evaluate_and_maybe_transition(&self, outcome: &SpecOutcome, cfg: &AgentConfig) -> Self {
        assert_eq!(
            self.phase,
            Phase::Aggressive,
            "scores only exist in the aggressive phase"
        );
        let max_score = outcome.scores.iter().copied().max().unwrap_or(0);
        if max_score < cfg.beta {
            PhaseState {
                phase: Phase::Verified,
                step_index: self.step_index,
                transitioned_at_step: Some(self.step_index),
            }
        } else {
            *self
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AgentConfig {
    /// Speculative samples per step.
    pub k: u32,
    /// Plausibility-score threshold on the 1..=5 scale.
    pub beta: u8,
    pub evaluation_enabled: bool,
    /// Append observations of every distinct executed action in aggressive
    /// steps; when false only one observation enters the context.
    pub append_all_observations: bool,
    /// Run the plausibility-score call after action execution instead of
    /// overlapping it.
    pub serialize_evaluation: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            k: 3,
            beta: 3,
            evaluation_enabled: true,
            append_all_observations: true,
            serialize_evaluation: false,
        }
    }
}

/// Result of sampling and scoring one step's speculative actions.
#[derive(Debug, Clone)]
pub struct SpecOutcome {
    pub sampled_keys: Vec<ActionKey>,
    pub scores: Vec<u8>,
    /// Whether any sampled key equals the step's true action key.
    pub hit: bool,
}

/// Draw k speculative action keys. Each sample independently equals the
/// step's true key with the step's hit probability, otherwise one of a
/// small pool of wrong-but-plausible keys. Deterministic per
/// (seed, task, step); in particular the same keys are drawn whether the
/// step runs aggressively or verified.
pub fn sample_speculative_actions(
    step: &StepSpec,
    step_index: usize,
    task: TaskId,
    k: u32,
    master_seed: u64,
) -> Vec<ActionKey> {
    let mut rng = rng::stream(master_seed, &[tag::SAMPLE_KEYS, task.0, step_index as u64]);
    let true_key = ActionKey::new(&step.true_action_key).expect("trace keys are non-empty");
    (0..k)
        .map(|_| {
            let u: f64 = rng.gen();
            let wrong: u32 = rng.gen_range(0..step.wrong_key_pool.max(1));
            if u < step.hit_probability {
                true_key.clone()
            } else {
                ActionKey::new(&format!("{}:a{}", step.true_action_key, wrong)).expect("non-empty")
            }
        })
        .collect()
}

/// Plausibility scores for the sampled actions: `1 + Binomial(4, q)` with
/// `q` affine in the step's hit probability, so the score mean rises with
/// it. Calibrated so that, with the default threshold of 3, tasks under the
/// default hit profile typically switch phases once the per-step hit
/// probability drops below ~0.3.
pub fn score_model(
    sampled_keys: &[ActionKey],
    step: &StepSpec,
    step_index: usize,
    task: TaskId,
    master_seed: u64,
) -> Vec<u8> {
    let mut rng = rng::stream(master_seed, &[tag::SCORES, task.0, step_index as u64]);
    let q = (0.06 + 0.74 * step.hit_probability).clamp(0.0, 1.0);
    let bin = Binomial::new(4, q).expect("valid binomial");
    sampled_keys
        .iter()
        .map(|_| 1 + bin.sample(&mut rng) as u8)
        .collect()
}

/// How the orchestrator launches verified-phase speculation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecLaunchMode {
    /// Never speculate (plain reason-act loop).
    Disabled,
    /// Launch speculation for every step as soon as the main request is
    /// submitted.
    Immediate,
    /// Hand a candidate to the speculation scheduler; it decides.
    Scheduled,
}

/// Orchestrator behavior knobs set by the experiment mode.
#[derive(Debug, Clone, Copy)]
pub struct ModeBehavior {
    pub aggressive_enabled: bool,
    pub spec_launch: SpecLaunchMode,
    /// Whether the main path resolves actions through the buffer.
    pub buffer_lookup: bool,
}

/// Per-step bookkeeping while a step is in flight.
#[derive(Debug, Default)]
struct StepRuntime {
    start: f64,
    llm_finish: Option<f64>,
    pending_actions: BTreeSet<ActionKey>,
    actions_latest: f64,
    score_outstanding: bool,
    /// Score call waiting for action execution to finish first.
    score_deferred: bool,
    awaiting_main_action: Option<ActionKey>,
    sampled: Vec<ActionKey>,
    distinct: usize,
}

/// Latency decomposition and counters for a finished task.
#[derive(Debug, Clone, Copy, Default)]
pub struct TaskTotals {
    pub llm_s: f64,
    pub action_s: f64,
    pub other_s: f64,
    pub hits: u64,
    pub lookups: u64,
    pub aggressive_steps: u64,
    pub buffer_bytes: u64,
}

#[derive(Debug)]
pub struct TaskAgent {
    pub trace: TaskTrace,
    cfg: AgentConfig,
    behavior: ModeBehavior,
    observation_tokens: u32,
    master_seed: u64,
    pub phase: PhaseState,
    context_tokens: u32,
    step: StepRuntime,
    pub totals: TaskTotals,
    pub done: bool,
    pub arrival: f64,
    pub completion: f64,
}

impl TaskAgent {
    pub fn new(
        trace: TaskTrace,
        cfg: AgentConfig,
        behavior: ModeBehavior,
        observation_tokens: u32,
        master_seed: u64,
    ) -> Self {
        let start_phase = if behavior.aggressive_enabled {
            Phase::Aggressive
        } else {
            Phase::Verified
        };
        let context_tokens = trace.steps[0].input_tokens;
        TaskAgent {
            trace,
            cfg,
            behavior,
            observation_tokens,
            master_seed,
            phase: PhaseState::starting(start_phase),
            context_tokens,
            step: StepRuntime::default(),
            totals: TaskTotals::default(),
            done: false,
            arrival: 0.0,
            completion: 0.0,
        }
    }

    pub fn task_id(&self) -> TaskId {
        TaskId(self.trace.task_id)
    }

    /// Transition step, or the task length when the task never transitioned.
    pub fn transition_step_or_end(&self) -> usize {
        self.phase
            .transitioned_at_step
            .unwrap_or(self.trace.steps.len())
    }

    fn current_step(&self) -> &StepSpec {
        self.trace.step(self.phase.step_index)
    }

    fn in_aggressive_step(&self) -> bool {
        self.behavior.aggressive_enabled && self.phase.phase == Phase::Aggressive
    }

    /// Begin the task at its arrival time.
    pub fn start(&mut self, sv: &mut SimServices) {
        self.arrival = sv.now;
        self.begin_step(sv);
    }

    fn begin_step(&mut self, sv: &mut SimServices) {
        let idx = self.phase.step_index;
        let step = self.trace.step(idx).clone();
        self.step = StepRuntime {
            start: sv.now,
            ..StepRuntime::default()
        };
        let task = self.task_id();
        if self.trace.is_terminal(idx) {
            sv.submit_request(
                RequestKind::MainReasoning,
                task,
                idx,
                self.context_tokens,
                step.reasoning_output_tokens,
                1,
                self.phase.phase,
            );
        } else if self.in_aggressive_step() {
            sv.submit_request(
                RequestKind::SpeculativeSample,
                task,
                idx,
                self.context_tokens,
                step.speculative_output_tokens,
                self.cfg.k,
                Phase::Aggressive,
            );
        } else {
            sv.submit_request(
                RequestKind::MainReasoning,
                task,
                idx,
                self.context_tokens,
                step.reasoning_output_tokens,
                1,
                Phase::Verified,
            );
            match self.behavior.spec_launch {
                SpecLaunchMode::Disabled => {}
                SpecLaunchMode::Immediate => {
                    sv.submit_request(
                        RequestKind::SpeculativeSample,
                        task,
                        idx,
                        self.context_tokens,
                        step.speculative_output_tokens,
                        self.cfg.k,
                        Phase::Verified,
                    );
                }
                SpecLaunchMode::Scheduled => {
                    sv.register_candidate(SpecCandidate {
                        task_id: task,
                        step_index: idx,
                        enqueue_time: sv.now,
                        hit_probability: step.hit_probability,
                        t_act: step.action_exec_time,
                        input_tokens: self.context_tokens,
                        output_tokens: step.speculative_output_tokens,
                    });
                }
            }
        }
    }

    pub fn on_request_finished(
        &mut self,
        kind: RequestKind,
        req_phase: Phase,
        step_index: usize,
        sv: &mut SimServices,
    ) {
        if self.done {
            return;
        }
        match kind {
            RequestKind::ScoreEvaluation => {
                if step_index == self.phase.step_index {
                    self.step.score_outstanding = false;
                    self.maybe_finish_aggressive_step(sv);
                }
            }
            RequestKind::SpeculativeSample => {
                if req_phase == Phase::Aggressive {
                    self.on_aggressive_samples_ready(sv);
                } else {
                    self.on_verified_speculation_ready(step_index, sv);
                }
            }
            RequestKind::MainReasoning => {
                debug_assert_eq!(step_index, self.phase.step_index);
                self.on_main_finished(sv);
            }
        }
    }

    /// Aggressive phase: the k-sample call finished. Execute distinct keys
    /// and, if enabled, fire the plausibility-score call.
    fn on_aggressive_samples_ready(&mut self, sv: &mut SimServices) {
        let idx = self.phase.step_index;
        let step = self.current_step().clone();
        let task = self.task_id();
        self.step.llm_finish = Some(sv.now);
        self.step.actions_latest = sv.now;
        self.totals.aggressive_steps += 1;

        let sampled = sample_speculative_actions(&step, idx, task, self.cfg.k, self.master_seed);
        let distinct: BTreeSet<ActionKey> = sampled.iter().cloned().collect();
        self.step.sampled = sampled;
        self.step.distinct = distinct.len();
        for key in distinct {
            match sv.execute_action(task, idx, &key, step.action_exec_time, "agg") {
                ExecuteOutcome::Launched { .. } | ExecuteOutcome::Attached { .. } => {
                    self.step.pending_actions.insert(key);
                }
                ExecuteOutcome::Reused { .. } => {}
            }
        }
        if self.cfg.evaluation_enabled {
            if self.cfg.serialize_evaluation {
                self.step.score_deferred = true;
            } else {
                self.step.score_outstanding = true;
                sv.submit_request(
                    RequestKind::ScoreEvaluation,
                    task,
                    idx,
                    step.evaluation_input_tokens,
                    step.evaluation_output_tokens,
                    1,
                    Phase::Aggressive,
                );
            }
        }
        self.maybe_finish_aggressive_step(sv);
    }

    /// Verified phase: a scheduled or immediate speculative call finished.
    /// Execute its distinct keys; the buffer absorbs the results whether or
    /// not the main path still needs them.
    fn on_verified_speculation_ready(&mut self, step_index: usize, sv: &mut SimServices) {
        let step = self.trace.step(step_index).clone();
        let task = self.task_id();
        let sampled =
            sample_speculative_actions(&step, step_index, task, self.cfg.k, self.master_seed);
        let distinct: BTreeSet<ActionKey> = sampled.into_iter().collect();
        for key in distinct {
            let _ = sv.execute_action(task, step_index, &key, step.action_exec_time, "spec");
        }
    }

    fn on_main_finished(&mut self, sv: &mut SimServices) {
        let idx = self.phase.step_index;
        let now = sv.now;
        self.step.llm_finish = Some(now);
        self.totals.llm_s += now - self.step.start;
        if self.trace.is_terminal(idx) {
            self.finish_task(sv);
            return;
        }
        if self.behavior.spec_launch == SpecLaunchMode::Scheduled {
            sv.withdraw_candidate(self.task_id(), idx);
        }
        let step = self.current_step().clone();
        let task = self.task_id();
        let true_key = ActionKey::new(&step.true_action_key).expect("non-empty");
        if self.behavior.buffer_lookup {
            self.totals.lookups += 1;
            match sv.main_path_lookup(task, &true_key) {
                LookupOutcome::HitCompleted { .. } => {
                    self.totals.hits += 1;
                    self.end_verified_step(sv);
                    return;
                }
                LookupOutcome::HitInProgress { .. } => {
                    self.totals.hits += 1;
                    self.step.awaiting_main_action = Some(true_key);
                    return;
                }
                LookupOutcome::Miss => {}
            }
        }
        match sv.execute_action(task, idx, &true_key, step.action_exec_time, "main") {
            ExecuteOutcome::Launched { .. } | ExecuteOutcome::Attached { .. } => {
                self.step.awaiting_main_action = Some(true_key);
            }
            ExecuteOutcome::Reused { .. } => self.end_verified_step(sv),
        }
    }

    pub fn on_action_done(&mut self, key: &ActionKey, sv: &mut SimServices) {
        if self.done {
            return;
        }
        if self.step.awaiting_main_action.as_ref() == Some(key) {
            self.step.awaiting_main_action = None;
            self.end_verified_step(sv);
            return;
        }
        if self.step.pending_actions.remove(key) {
            self.step.actions_latest = sv.now;
            self.maybe_finish_aggressive_step(sv);
        }
    }

    fn end_verified_step(&mut self, sv: &mut SimServices) {
        let llm_finish = self.step.llm_finish.expect("main finished");
        self.totals.action_s += sv.now - llm_finish;
        let step = self.current_step();
        self.context_tokens = self
            .context_tokens
            .saturating_add(step.reasoning_output_tokens)
            .saturating_add(self.observation_tokens);
        self.advance(sv);
    }

    fn maybe_finish_aggressive_step(&mut self, sv: &mut SimServices) {
        let Some(llm_finish) = self.step.llm_finish else {
            return;
        };
        if !self.step.pending_actions.is_empty() || self.step.score_outstanding {
            return;
        }
        let idx = self.phase.step_index;
        let step = self.current_step().clone();
        if self.step.score_deferred {
            // Serialized evaluation: actions are done, score the samples now.
            self.step.score_deferred = false;
            self.step.score_outstanding = true;
            sv.submit_request(
                RequestKind::ScoreEvaluation,
                self.task_id(),
                idx,
                step.evaluation_input_tokens,
                step.evaluation_output_tokens,
                1,
                Phase::Aggressive,
            );
            return;
        }
        let now = sv.now;
        self.totals.llm_s += llm_finish - self.step.start;
        self.totals.action_s += (self.step.actions_latest - llm_finish).max(0.0);
        self.totals.other_s += (now - self.step.actions_latest.max(llm_finish)).max(0.0);

        let appended = if self.cfg.append_all_observations {
            self.step.distinct as u32
        } else {
            1
        };
        self.context_tokens = self
            .context_tokens
            .saturating_add(step.speculative_output_tokens)
            .saturating_add(appended * self.observation_tokens);

        if self.cfg.evaluation_enabled {
            let true_key = ActionKey::new(&step.true_action_key).expect("non-empty");
            let hit = self.step.sampled.contains(&true_key);
            let scores = score_model(
                &self.step.sampled,
                &step,
                idx,
                self.task_id(),
                self.master_seed,
            );
            let outcome = SpecOutcome {
                sampled_keys: self.step.sampled.clone(),
                scores,
                hit,
            };
            let next = self
                .phase
                .evaluate_and_maybe_transition(&outcome, &self.cfg);
            if next.phase == Phase::Verified {
                sv.log(
                    "phase_transition",
                    "-",
                    &self.task_id().to_string(),
                    idx,
                    &format!("max_score_below={}", self.cfg.beta),
                );
            }
            self.phase = next;
        }
        self.advance(sv);
    }

    fn advance(&mut self, sv: &mut SimServices) {
        self.phase.step_index += 1;
        debug_assert!(self.phase.step_index <= self.trace.steps.len());
        self.begin_step(sv);
    }

    fn finish_task(&mut self, sv: &mut SimServices) {
        self.done = true;
        self.completion = sv.now;
        self.totals.buffer_bytes = sv.buffer_footprint(self.task_id());
        sv.log(
            "task_done",
            "-",
            &self.task_id().to_string(),
            self.phase.step_index,
            &format!("steps={}", self.trace.steps.len()),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{generate_hit_profile, generate_task, TaskShapeConfig};

    fn step_with_p(p: f64) -> StepSpec {
        StepSpec {
            reasoning_output_tokens: 250,
            speculative_output_tokens: 8,
            evaluation_output_tokens: 8,
            evaluation_input_tokens: 64,
            input_tokens: 600,
            action_exec_time: 1.5,
            true_action_key: "act:t0:s1:gold".into(),
            hit_probability: p,
            wrong_key_pool: 4,
        }
    }

    #[test]
    fn certain_hit_samples_all_true() {
        let step = step_with_p(1.0);
        let keys = sample_speculative_actions(&step, 1, TaskId(0), 3, 7);
        assert!(keys.iter().all(|k| k.as_str() == "act:t0:s1:gold"));
    }

    #[test]
    fn certain_miss_samples_no_true() {
        let step = step_with_p(0.0);
        let keys = sample_speculative_actions(&step, 1, TaskId(0), 3, 7);
        assert!(keys.iter().all(|k| k.as_str() != "act:t0:s1:gold"));
    }

    #[test]
    fn any_hit_rate_matches_closed_form() {
        let step = step_with_p(0.4);
        let trials = 100_000u64;
        let mut any_hit = 0u64;
        for t in 0..trials {
            let keys = sample_speculative_actions(&step, 1, TaskId(t), 3, 11);
            if keys.iter().any(|k| k.as_str() == "act:t0:s1:gold") {
                any_hit += 1;
            }
        }
        let frac = any_hit as f64 / trials as f64;
        let expected = 1.0 - 0.6f64.powi(3);
        assert!(
            (frac - expected).abs() < 0.01,
            "any-hit {frac} vs {expected}"
        );
    }

    #[test]
    fn per_sample_hit_rate_tracks_profile_first_step() {
        let profile = generate_hit_profile(0.734, 0.11, 0.40, 6).unwrap();
        let shape = TaskShapeConfig::default();
        let mut hits = 0u64;
        let mut samples = 0u64;
        for t in 0..10_000u64 {
            let trace = generate_task(5, t, &profile, &shape);
            let step = trace.step(1);
            let keys = sample_speculative_actions(step, 1, TaskId(t), 3, 5);
            for k in keys {
                samples += 1;
                if k.as_str() == step.true_action_key {
                    hits += 1;
                }
            }
        }
        let frac = hits as f64 / samples as f64;
        assert!(
            (frac - profile.probability(1)).abs() <= 0.02,
            "per-sample hit fraction {frac}"
        );
    }

    #[test]
    fn scores_are_deterministic_and_calibrated_at_extremes() {
        let step_hi = step_with_p(1.0);
        let step_lo = step_with_p(0.0);
        let keys = sample_speculative_actions(&step_hi, 1, TaskId(0), 3, 7);
        let s1 = score_model(&keys, &step_hi, 1, TaskId(0), 7);
        let s2 = score_model(&keys, &step_hi, 1, TaskId(0), 7);
        assert_eq!(s1, s2);

        let mut low_scores_hi_p = 0u64;
        let mut all_low_lo_p = 0u64;
        let trials = 10_000u64;
        for t in 0..trials {
            let s = score_model(&keys, &step_hi, 1, TaskId(t), 13);
            low_scores_hi_p += s.iter().filter(|&&x| x < 3).count() as u64;
            let s = score_model(&keys, &step_lo, 1, TaskId(t), 13);
            if s.iter().all(|&x| x < 3) {
                all_low_lo_p += 1;
            }
        }
        let p_low = low_scores_hi_p as f64 / (3 * trials) as f64;
        assert!(p_low < 0.05, "P(score<3 | p=1) = {p_low}");
        let p_all_low = all_low_lo_p as f64 / trials as f64;
        assert!(p_all_low > 0.9, "P(all scores<3 | p=0) = {p_all_low}");
    }

    #[test]
    fn transition_rule_examples() {
        let cfg = AgentConfig::default();
        let state = PhaseState::starting(Phase::Aggressive);
        let outcome = |scores: Vec<u8>| SpecOutcome {
            sampled_keys: vec![],
            scores,
            hit: false,
        };
        let next = state.evaluate_and_maybe_transition(&outcome(vec![2, 2, 1]), &cfg);
        assert_eq!(next.phase, Phase::Verified);
        assert_eq!(next.transitioned_at_step, Some(1));

        let next = state.evaluate_and_maybe_transition(&outcome(vec![4, 2, 1]), &cfg);
        assert_eq!(next.phase, Phase::Aggressive);

        let cfg1 = AgentConfig {
            beta: 1,
            ..AgentConfig::default()
        };
        for scores in [vec![1, 1, 1], vec![5, 1, 2], vec![2, 3, 4]] {
            let next = state.evaluate_and_maybe_transition(&outcome(scores), &cfg1);
            assert_eq!(next.phase, Phase::Aggressive, "beta=1 never transitions");
        }
    }

    #[test]
    fn median_transition_tracks_profile_knee() {
        // Long tasks so every transition step is reachable; the median must
        // land at the first step whose hit probability drops below 0.3.
        let profile = generate_hit_profile(0.734, 0.11, 0.40, 6).unwrap();
        let expected = profile.first_step_below(0.3).unwrap();
        let cfg = AgentConfig::default();
        let shape = TaskShapeConfig {
            min_steps: 12,
            max_steps: 12,
            ..TaskShapeConfig::default()
        };
        let mut transitions = Vec::new();
        for t in 0..1000u64 {
            let trace = generate_task(21, t, &profile, &shape);
            let mut state = PhaseState::starting(Phase::Aggressive);
            for idx in 1..trace.steps.len() {
                let step = trace.step(idx);
                let keys = sample_speculative_actions(step, idx, TaskId(t), cfg.k, 21);
                let scores = score_model(&keys, step, idx, TaskId(t), 21);
                state.step_index = idx;
                state = state.evaluate_and_maybe_transition(
                    &SpecOutcome {
                        sampled_keys: keys,
                        scores,
                        hit: false,
                    },
                    &cfg,
                );
                if state.phase == Phase::Verified {
                    break;
                }
            }
            transitions.push(state.transitioned_at_step.unwrap_or(trace.steps.len()));
        }
        transitions.sort_unstable();
        let median = transitions[transitions.len() / 2];
        assert_eq!(
            median, expected,
            "median transition {median}, profile knee {expected}"
        );
    }
}
