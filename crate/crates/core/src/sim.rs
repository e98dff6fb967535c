//! The deterministic event loop.
//!
//! A single min-heap of timestamped events drives task arrivals, engine
//! batch steps, and action completions. All mutation happens inside the
//! loop; two runs with the same configuration and seed replay the exact
//! same event sequence and produce byte-identical logs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::action_server::{ActionKey, ActionServer, ExecuteOutcome, LookupOutcome};
use crate::agent::{AgentConfig, ModeBehavior, Phase, TaskAgent};
use crate::cost_model::{hybrid_batch_time, CostModelParams};
use crate::engine::{Engine, InferenceRequest, Policy, RequestId, RequestKind, TaskId};
use crate::spec_scheduler::{SchedulerStats, SpecCandidate, SpecScheduler};
use crate::summary::TaskRecord;
use crate::workload::TaskTrace;

#[derive(Debug, Clone)]
enum Ev {
    Arrival(usize),
    BatchDone,
    ActionDone { task: TaskId, key: ActionKey },
    Kick,
}

#[derive(Debug)]
struct TimedEvent {
    time: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for TimedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for TimedEvent {}
impl PartialOrd for TimedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for TimedEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we pop earliest first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<TimedEvent>,
    seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: f64, ev: Ev) {
        self.heap.push(TimedEvent {
            time,
            seq: self.seq,
            ev,
        });
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<TimedEvent> {
        self.heap.pop()
    }
}

/// Newline-delimited structured records:
/// `time,event_kind,request_id,task_id,step,detail`.
#[derive(Debug, Default)]
pub struct EventLog {
    enabled: bool,
    buf: String,
}

impl EventLog {
    fn line(&mut self, time: f64, kind: &str, req: &str, task: &str, step: usize, detail: &str) {
        if !self.enabled {
            return;
        }
        use std::fmt::Write;
        let _ = writeln!(self.buf, "{time:.6},{kind},{req},{task},{step},{detail}");
    }
}

/// Mutable view of the simulator passed to agent callbacks.
pub struct SimServices<'a> {
    pub now: f64,
    engine: &'a mut Engine,
    actions: &'a mut ActionServer,
    scheduler: Option<&'a mut SpecScheduler>,
    events: &'a mut EventQueue,
    log: &'a mut EventLog,
    next_request_id: &'a mut u64,
}

impl<'a> SimServices<'a> {
    /// Submit an inference request; the engine picks it up at the next
    /// batch boundary.
    #[allow(clippy::too_many_arguments)]
    pub fn submit_request(
        &mut self,
        kind: RequestKind,
        task: TaskId,
        step_index: usize,
        input_tokens: u32,
        output_tokens: u32,
        parallel_samples: u32,
        phase: Phase,
    ) -> RequestId {
        let id = RequestId(*self.next_request_id);
        *self.next_request_id += 1;
        let req = InferenceRequest::new(
            id,
            kind,
            task,
            step_index,
            input_tokens,
            output_tokens,
            parallel_samples,
            phase,
        );
        self.engine
            .submit(req, self.now)
            .expect("simulator-issued requests are unique and non-empty");
        self.log.line(
            self.now,
            "submit",
            &id.to_string(),
            &task.to_string(),
            step_index,
            &format!(
                "kind={};in={};out={};slots={}",
                kind.short(),
                input_tokens,
                output_tokens,
                parallel_samples
            ),
        );
        self.events.push(self.now, Ev::Kick);
        id
    }

    /// Run an action through the buffer; new external calls schedule their
    /// completion event.
    pub fn execute_action(
        &mut self,
        task: TaskId,
        step_index: usize,
        key: &ActionKey,
        exec_time: f64,
        who: &str,
    ) -> ExecuteOutcome {
        let requester = format!("{who}:{task}:{step_index}");
        let outcome = self
            .actions
            .execute(task, key, &requester, self.now, exec_time);
        let (kind, detail) = match &outcome {
            ExecuteOutcome::Launched { completes_at } => {
                self.events.push(
                    *completes_at,
                    Ev::ActionDone {
                        task,
                        key: key.clone(),
                    },
                );
                ("action_exec", format!("key={key};eta={completes_at:.6}"))
            }
            ExecuteOutcome::Attached { completes_at } => {
                ("action_attach", format!("key={key};eta={completes_at:.6}"))
            }
            ExecuteOutcome::Reused { .. } => ("action_reuse", format!("key={key}")),
        };
        self.log
            .line(self.now, kind, "-", &task.to_string(), step_index, &detail);
        outcome
    }

    pub fn main_path_lookup(&mut self, task: TaskId, key: &ActionKey) -> LookupOutcome {
        let outcome = self.actions.main_path_lookup(task, key, self.now);
        let detail = match &outcome {
            LookupOutcome::HitCompleted { .. } => format!("key={key};hit=completed"),
            LookupOutcome::HitInProgress { remaining } => {
                format!("key={key};hit=inprogress;remaining={remaining:.6}")
            }
            LookupOutcome::Miss => format!("key={key};miss"),
        };
        self.log
            .line(self.now, "lookup", "-", &task.to_string(), 0, &detail);
        outcome
    }

    pub fn register_candidate(&mut self, candidate: SpecCandidate) {
        let task = candidate.task_id.to_string();
        let step = candidate.step_index;
        if let Some(sched) = self.scheduler.as_deref_mut() {
            sched.register(candidate);
            self.log
                .line(self.now, "spec_enqueue", "-", &task, step, "-");
        }
    }

    pub fn withdraw_candidate(&mut self, task: TaskId, step_index: usize) {
        if let Some(sched) = self.scheduler.as_deref_mut() {
            sched.withdraw(task, step_index);
        }
    }

    pub fn buffer_footprint(&self, task: TaskId) -> u64 {
        self.actions.buffer_footprint(task)
    }

    pub fn log(&mut self, kind: &str, req: &str, task: &str, step: usize, detail: &str) {
        self.log.line(self.now, kind, req, task, step, detail);
    }
}

/// Everything needed to run one simulation.
pub struct SimConfig {
    pub traces: Vec<TaskTrace>,
    pub cost: CostModelParams,
    pub policy: Policy,
    pub agent: AgentConfig,
    pub behavior: ModeBehavior,
    pub scheduler: Option<SpecScheduler>,
    /// Closed-loop single-task mode: task i+1 arrives when task i completes.
    pub sequential: bool,
    pub observation_tokens: u32,
    pub master_seed: u64,
    pub max_batch: u32,
    pub capture_log: bool,
}

/// Results of one simulation run.
#[derive(Debug)]
pub struct SimOutput {
    pub records: Vec<TaskRecord>,
    pub event_log: String,
    pub buffer_stats: crate::action_server::BufferStats,
    pub scheduler_stats: Option<SchedulerStats>,
    pub batches: u64,
}

pub struct Simulation {
    engine: Engine,
    actions: ActionServer,
    scheduler: Option<SpecScheduler>,
    agents: Vec<Option<TaskAgent>>,
    events: EventQueue,
    log: EventLog,
    clock: f64,
    next_request_id: u64,
    cost: CostModelParams,
    policy: Policy,
    engine_busy: bool,
    sequential: bool,
    next_sequential: usize,
    records: Vec<TaskRecord>,
}

impl Simulation {
    /// Trace task ids must equal their position in `cfg.traces`; completion
    /// events are routed back to agents by that index.
    pub fn new(cfg: SimConfig) -> Self {
        let agents = cfg
            .traces
            .into_iter()
            .enumerate()
            .map(|(i, trace)| {
                assert_eq!(
                    trace.task_id, i as u64,
                    "trace task ids must be 0..n in order"
                );
                Some(TaskAgent::new(
                    trace,
                    cfg.agent,
                    cfg.behavior,
                    cfg.observation_tokens,
                    cfg.master_seed,
                ))
            })
            .collect();
        Simulation {
            engine: Engine::new(cfg.max_batch),
            actions: ActionServer::new(),
            scheduler: cfg.scheduler,
            agents,
            events: EventQueue::default(),
            log: EventLog {
                enabled: cfg.capture_log,
                buf: String::new(),
            },
            clock: 0.0,
            next_request_id: 0,
            cost: cfg.cost,
            policy: cfg.policy,
            engine_busy: false,
            sequential: cfg.sequential,
            next_sequential: 0,
            records: Vec::new(),
        }
    }

    pub fn run(mut self) -> SimOutput {
        if self.sequential {
            if !self.agents.is_empty() {
                self.events.push(0.0, Ev::Arrival(0));
                self.next_sequential = 1;
            }
        } else {
            for (i, agent) in self.agents.iter().enumerate() {
                let t = agent.as_ref().expect("fresh agent").trace.arrival_time;
                self.events.push(t, Ev::Arrival(i));
            }
        }

        while let Some(TimedEvent { time, ev, .. }) = self.events.pop() {
            debug_assert!(time >= self.clock - 1e-9, "clock must not run backwards");
            self.clock = time;
            match ev {
                Ev::Arrival(i) => self.handle_arrival(i),
                Ev::Kick => {
                    if !self.engine_busy && self.engine.has_work() {
                        self.start_batch();
                    }
                }
                Ev::BatchDone => self.handle_batch_done(),
                Ev::ActionDone { task, key } => self.handle_action_done(task, key),
            }
        }

        // Work conservation: the event queue only drains once every
        // submitted request has been batched to completion.
        debug_assert!(!self.engine.has_work(), "stranded engine work at shutdown");

        SimOutput {
            records: self.records,
            event_log: self.log.buf,
            buffer_stats: *self.actions.stats(),
            scheduler_stats: self.scheduler.map(|s| s.stats),
            batches: self.engine.batches_started(),
        }
    }

    fn with_agent(&mut self, index: usize, f: impl FnOnce(&mut TaskAgent, &mut SimServices)) {
        let Some(mut agent) = self.agents[index].take() else {
            return;
        };
        {
            let mut sv = SimServices {
                now: self.clock,
                engine: &mut self.engine,
                actions: &mut self.actions,
                scheduler: self.scheduler.as_mut(),
                events: &mut self.events,
                log: &mut self.log,
                next_request_id: &mut self.next_request_id,
            };
            f(&mut agent, &mut sv);
        }
        if agent.done {
            self.finish_task(agent);
        } else {
            self.agents[index] = Some(agent);
        }
    }

    fn handle_arrival(&mut self, index: usize) {
        let task_id = self.agents[index]
            .as_ref()
            .map(|a| a.task_id().to_string())
            .unwrap_or_default();
        self.log
            .line(self.clock, "task_arrival", "-", &task_id, 1, "-");
        self.with_agent(index, |agent, sv| agent.start(sv));
    }

    fn handle_batch_done(&mut self) {
        let finished = self.engine.complete_batch(self.clock);
        for req in finished {
            self.log.line(
                self.clock,
                "finish",
                &req.id.to_string(),
                &req.task_id.to_string(),
                req.step_index,
                &format!("kind={}", req.kind.short()),
            );
            let index = req.task_id.0 as usize;
            self.with_agent(index, |agent, sv| {
                agent.on_request_finished(req.kind, req.phase, req.step_index, sv)
            });
        }
        if self.engine.has_work() {
            self.start_batch();
        } else {
            self.engine_busy = false;
        }
    }

    fn handle_action_done(&mut self, task: TaskId, key: ActionKey) {
        if self.actions.complete(task, &key, self.clock).is_some() {
            self.log.line(
                self.clock,
                "action_done",
                "-",
                &task.to_string(),
                0,
                &format!("key={key}"),
            );
            let index = task.0 as usize;
            self.with_agent(index, |agent, sv| agent.on_action_done(&key, sv));
        }
    }

    fn start_batch(&mut self) {
        self.engine_busy = true;
        self.run_scheduler_step();
        let plan = self.engine.form_next_batch(self.policy, self.clock);
        let duration = hybrid_batch_time(&plan.prefill, plan.decode_count, &self.cost);
        for id in &plan.admitted {
            self.log.line(
                self.clock,
                "start",
                &id.to_string(),
                "-",
                0,
                &format!("decode={}", plan.decode_count),
            );
        }
        self.events.push(self.clock + duration, Ev::BatchDone);
    }

    /// Run the speculation scheduler at its configured cadence, launching
    /// the selected candidates as engine requests.
    fn run_scheduler_step(&mut self) {
        let Some(sched) = self.scheduler.as_mut() else {
            return;
        };
        if sched.is_empty() {
            return;
        }
        if !self
            .engine
            .batches_started()
            .is_multiple_of(sched.config().scheduling_interval)
        {
            return;
        }
        let load = self.engine.load_snapshot();
        if load.main + load.aggressive == 0 {
            return;
        }
        let queue_before = sched.len();
        let k = sched.config().k;
        let outcome = sched
            .select_step(self.clock, &load, &self.cost)
            .expect("load checked non-zero");
        if outcome.selected.is_empty() && outcome.expired.is_empty() {
            return;
        }
        self.log.line(
            self.clock,
            "sched_decision",
            "-",
            "-",
            0,
            &format!(
                "queue={};n={};nm={};na={};selected={};expired={}",
                queue_before,
                load.total,
                load.main,
                load.aggressive,
                outcome.selected.len(),
                outcome.expired.len()
            ),
        );
        for (cand, gain) in outcome.selected.iter().zip(outcome.breakdowns.iter()) {
            let mut sv = SimServices {
                now: self.clock,
                engine: &mut self.engine,
                actions: &mut self.actions,
                scheduler: None,
                events: &mut self.events,
                log: &mut self.log,
                next_request_id: &mut self.next_request_id,
            };
            let id = sv.submit_request(
                RequestKind::SpeculativeSample,
                cand.task_id,
                cand.step_index,
                cand.input_tokens,
                cand.output_tokens,
                k,
                Phase::Verified,
            );
            self.log.line(
                self.clock,
                "spec_launch",
                &id.to_string(),
                &cand.task_id.to_string(),
                cand.step_index,
                &format!(
                    "net={:.9};reduction={:.9};decode={:.9};prefill={:.9}",
                    gain.net, gain.reduction, gain.decode_overhead, gain.prefill_overhead
                ),
            );
        }
    }

    fn finish_task(&mut self, agent: TaskAgent) {
        let task = agent.task_id();
        self.actions.drop_scope(task);
        self.records.push(TaskRecord {
            task_id: agent.trace.task_id,
            arrival: agent.arrival,
            completion: agent.completion,
            steps: agent.trace.steps.len(),
            transition_step: agent.phase.transitioned_at_step,
            llm_s: agent.totals.llm_s,
            action_s: agent.totals.action_s,
            other_s: agent.totals.other_s,
            total_s: agent.completion - agent.arrival,
            hits: agent.totals.hits,
            lookups: agent.totals.lookups,
            aggressive_steps: agent.totals.aggressive_steps,
            buffer_bytes: agent.totals.buffer_bytes,
        });
        if self.sequential && self.next_sequential < self.agents.len() {
            let i = self.next_sequential;
            self.next_sequential += 1;
            self.events.push(self.clock, Ev::Arrival(i));
        }
    }
}
