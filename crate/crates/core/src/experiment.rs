//! Experiment presets and drivers.
//!
//! Four modes:
//! - `naive`: plain reason-act loop, no speculation, FCFS engine.
//! - `verified-only`: speculation alongside reasoning on every step,
//!   launched unconditionally, FCFS engine (the predict-verify baseline).
//! - `spagent-nosched`: two-phase speculation, unconditional launches,
//!   speculation-first engine.
//! - `spagent-full`: two-phase speculation with the load-aware launch
//!   scheduler, speculation-first engine.

use std::str::FromStr;

use crate::action_server::BufferStats;
use crate::agent::{AgentConfig, ModeBehavior, SpecLaunchMode};
use crate::cost_model::CostModelParams;
use crate::engine::Policy;
use crate::rng::{self, tag};
use crate::sim::{SimConfig, Simulation};
use crate::spec_scheduler::{SchedulerConfig, SchedulerStats, SpecScheduler};
use crate::summary::{RunSummary, SweepRow, SweepTable};
use crate::workload::{generate_arrivals, generate_task, HitProfile, TaskShapeConfig, TaskTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Naive,
    VerifiedOnly,
    SpagentNoSched,
    SpagentFull,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Naive,
        Mode::VerifiedOnly,
        Mode::SpagentNoSched,
        Mode::SpagentFull,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::VerifiedOnly => "verified-only",
            Mode::SpagentNoSched => "spagent-nosched",
            Mode::SpagentFull => "spagent-full",
        }
    }

    pub fn behavior(&self) -> ModeBehavior {
        match self {
            Mode::Naive => ModeBehavior {
                aggressive_enabled: false,
                spec_launch: SpecLaunchMode::Disabled,
                buffer_lookup: false,
            },
            Mode::VerifiedOnly => ModeBehavior {
                aggressive_enabled: false,
                spec_launch: SpecLaunchMode::Immediate,
                buffer_lookup: true,
            },
            Mode::SpagentNoSched => ModeBehavior {
                aggressive_enabled: true,
                spec_launch: SpecLaunchMode::Immediate,
                buffer_lookup: true,
            },
            Mode::SpagentFull => ModeBehavior {
                aggressive_enabled: true,
                spec_launch: SpecLaunchMode::Scheduled,
                buffer_lookup: true,
            },
        }
    }

    /// Engine policy when the config leaves it on `auto`. The baselines ship
    /// without the inter-request scheduling co-design.
    pub fn default_policy(&self) -> Policy {
        match self {
            Mode::Naive | Mode::VerifiedOnly => Policy::Fcfs,
            Mode::SpagentNoSched | Mode::SpagentFull => Policy::SpeculationFirst,
        }
    }

    pub fn uses_scheduler(&self) -> bool {
        matches!(self, Mode::SpagentFull)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(Mode::Naive),
            "verified-only" => Ok(Mode::VerifiedOnly),
            "spagent-nosched" => Ok(Mode::SpagentNoSched),
            "spagent-full" => Ok(Mode::SpagentFull),
            other => Err(format!(
                "unknown mode `{other}` (expected naive, verified-only, spagent-nosched, spagent-full)"
            )),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arrival {
    /// Closed loop: each task arrives when the previous one completes.
    Sequential,
    /// Open loop: Poisson arrivals at the given rate.
    Poisson { rate: f64 },
}

/// Fully resolved configuration for `run`.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub tasks: usize,
    pub seed: u64,
    pub arrival: Arrival,
    pub profile: HitProfile,
    pub shape: TaskShapeConfig,
    pub cost: CostModelParams,
    pub agent: AgentConfig,
    /// Candidate wait threshold; None derives it from the cost model.
    pub t_w: Option<f64>,
    pub scheduling_interval: u64,
    pub max_batch: u32,
    /// None = the mode's default policy.
    pub policy: Option<Policy>,
    pub replications: u32,
    pub capture_log: bool,
}

impl RunConfig {
    /// A ready-to-run default configuration for the given mode.
    pub fn preset(mode: Mode) -> Self {
        RunConfig {
            mode,
            tasks: 200,
            seed: 42,
            arrival: Arrival::Sequential,
            profile: crate::workload::generate_hit_profile(0.734, 0.11, 0.40, 6)
                .expect("default anchors are feasible"),
            shape: TaskShapeConfig::default(),
            cost: CostModelParams::default(),
            agent: AgentConfig::default(),
            t_w: None,
            scheduling_interval: 1,
            max_batch: 256,
            policy: None,
            replications: 1,
            capture_log: false,
        }
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            k: self.agent.k,
            t_w: self
                .t_w
                .unwrap_or_else(|| SchedulerConfig::derive_t_w(&self.cost, 7.0)),
            scheduling_interval: self.scheduling_interval.max(1),
        }
    }

    fn traces_for_replication(&self, replication: u32) -> Vec<TaskTrace> {
        let rep_seed = rng::mix(self.seed, rng::mix(tag::REPLICATION, replication as u64));
        let mut traces: Vec<TaskTrace> = (0..self.tasks as u64)
            .map(|i| generate_task(rep_seed, i, &self.profile, &self.shape))
            .collect();
        if let Arrival::Poisson { rate } = self.arrival {
            let schedule = generate_arrivals(rate, self.tasks, rep_seed);
            for (trace, t) in traces.iter_mut().zip(schedule.arrivals) {
                trace.arrival_time = t;
            }
        }
        traces
    }
}

/// Run one mode, aggregating over replications. Deterministic for a fixed
/// configuration and seed.
pub fn run(cfg: &RunConfig) -> RunSummary {
    let behavior = cfg.mode.behavior();
    let policy = cfg.policy.unwrap_or_else(|| cfg.mode.default_policy());
    let mut records = Vec::new();
    let mut replication_means = Vec::new();
    let mut buffer = BufferStats::default();
    let mut scheduler_total: Option<SchedulerStats> = None;
    let mut event_log = None;

    for rep in 0..cfg.replications {
        let rep_seed = rng::mix(cfg.seed, rng::mix(tag::REPLICATION, rep as u64));
        let scheduler = cfg
            .mode
            .uses_scheduler()
            .then(|| SpecScheduler::new(cfg.scheduler_config()));
        let sim = Simulation::new(SimConfig {
            traces: cfg.traces_for_replication(rep),
            cost: cfg.cost,
            policy,
            agent: cfg.agent,
            behavior,
            scheduler,
            sequential: cfg.arrival == Arrival::Sequential,
            observation_tokens: cfg.shape.observation_tokens,
            master_seed: rep_seed,
            max_batch: cfg.max_batch,
            capture_log: cfg.capture_log && rep == 0,
        });
        let out = sim.run();
        if rep == 0 && cfg.capture_log {
            event_log = Some(out.event_log);
        }
        let n = out.records.len().max(1) as f64;
        replication_means.push(out.records.iter().map(|r| r.total_s).sum::<f64>() / n);
        records.extend(out.records);
        buffer.external_calls += out.buffer_stats.external_calls;
        buffer.attaches += out.buffer_stats.attaches;
        buffer.reuses += out.buffer_stats.reuses;
        buffer.main_path_hits += out.buffer_stats.main_path_hits;
        buffer.main_path_lookups += out.buffer_stats.main_path_lookups;
        if let Some(s) = out.scheduler_stats {
            let total = scheduler_total.get_or_insert(SchedulerStats::default());
            total.registered += s.registered;
            total.launched += s.launched;
            total.expired += s.expired;
            total.withdrawn += s.withdrawn;
            total.decisions += s.decisions;
        }
    }

    let rate = match cfg.arrival {
        Arrival::Poisson { rate } => Some(rate),
        Arrival::Sequential => None,
    };
    RunSummary::from_records(
        cfg.mode.label().to_string(),
        rate,
        records,
        replication_means,
        buffer,
        scheduler_total,
        event_log,
    )
}

/// Run each mode at each rate with common seeds and collect the comparison
/// table alongside the full summaries.
pub fn sweep(rates: &[f64], base: &RunConfig, modes: &[Mode]) -> (SweepTable, Vec<RunSummary>) {
    assert!(!rates.is_empty(), "sweep needs at least one rate");
    let mut table = SweepTable::default();
    let mut summaries = Vec::new();
    for &mode in modes {
        for &rate in rates {
            let mut cfg = base.clone();
            cfg.mode = mode;
            cfg.arrival = Arrival::Poisson { rate };
            let summary = run(&cfg);
            table.rows.push(SweepRow {
                mode: mode.label().to_string(),
                rate,
                mean_s: summary.mean_latency,
                p95_s: summary.p95_latency,
                main_path_hits: summary.buffer.main_path_hits,
                main_path_lookups: summary.buffer.main_path_lookups,
                hit_rate: summary.hit_rate(),
            });
            summaries.push(summary);
        }
    }
    (table, summaries)
}
