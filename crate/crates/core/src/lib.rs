//! Discrete-event simulator for speculation-based LLM search-agent serving.
//!
//! The crate models a continuous-batching inference engine, a tool-execution
//! service with an action-dedup buffer, and per-task agent state machines
//! that speculate actions in two phases (aggressive sampling without
//! reasoning, then verified speculation alongside full reasoning). A
//! load-aware scheduler decides which speculative requests are worth
//! launching, and a speculation-first engine policy keeps short speculative
//! requests from queueing behind long reasoning requests.
//!
//! Everything is driven by a single-threaded, seeded event loop: two runs
//! with the same configuration and seed produce byte-identical event logs.
//!
//! Module map:
//! - [`workload`] — reproducible task traces, hit-rate profiles, Poisson arrivals
//! - [`cost_model`] — hybrid-batch timing `T_h` plus speculation overhead formulas
//! - [`engine`] — continuous-batching engine with FCFS / speculation-first policies
//! - [`action_server`] — action buffer with in-flight dedup and result reuse
//! - [`agent`] — per-task two-phase orchestrator
//! - [`spec_scheduler`] — greedy cost/benefit selection of speculative launches
//! - [`sim`] — the event loop wiring all of the above
//! - [`experiment`] — experiment presets (`run`, `sweep`) and metric emission

pub mod action_server;
pub mod agent;
pub mod config;
pub mod cost_model;
pub mod engine;
pub mod experiment;
pub mod rng;
pub mod sim;
pub mod spec_scheduler;
pub mod summary;
pub mod workload;

pub use action_server::{ActionKey, ActionServer, BufferStats};
pub use agent::{AgentConfig, Phase, PhaseState};
pub use config::FileConfig;
pub use cost_model::{CostModelParams, PrefillSet};
pub use engine::{Engine, InferenceRequest, Policy, RequestId, RequestKind, TaskId};
pub use experiment::{run, sweep, Mode, RunConfig};
pub use spec_scheduler::{SchedulerConfig, SpecCandidate, SpecScheduler};
pub use summary::{RunSummary, TaskRecord};
pub use workload::{HitProfile, StepSpec, TaskShapeConfig, TaskTrace};
