//! Configuration file handling.
//!
//! Runs are configured by a TOML file with nested sections. Documented keys:
//!
//! ```toml
//! [workload]
//! arrival = "sequential"   # or "poisson"
//! rate = 1.0               # tasks per second (poisson only)
//! tasks = 200
//! seed = 42
//!
//! [profile]
//! first = 0.734            # first-step speculative hit probability
//! floor = 0.11             # late-step floor
//! mean = 0.40              # target mean over the listed steps
//! max_steps = 6
//!
//! [shape]                  # task shape; see TaskShapeConfig for fields
//!
//! [cost_model]
//! preset = "default"       # or "stress"; or inline params / table = "file"
//!
//! [agent]
//! k = 3
//! beta = 3
//! evaluation_enabled = true
//!
//! [scheduler]
//! scheduling_interval = 1  # t_w defaults to a derived value
//!
//! [engine]
//! max_batch = 256
//! policy = "auto"          # or "fcfs" / "speculation-first"
//!
//! [experiment]
//! mode = "spagent-full"
//! replications = 5
//! capture_log = false
//! ```
//!
//! Unknown keys anywhere are rejected with the offending key named.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::cost_model::{self, CostModelParams};
use crate::engine::Policy;
use crate::experiment::{Arrival, Mode, RunConfig};
use crate::workload::{generate_hit_profile, TaskShapeConfig, WorkloadError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value at {key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("profile: {0}")]
    Profile(#[from] WorkloadError),
    #[error("cost model table: {0}")]
    CostModel(#[from] cost_model::CostModelError),
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub arrival: String,
    pub rate: f64,
    pub tasks: usize,
    pub seed: u64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            arrival: "sequential".into(),
            rate: 1.0,
            tasks: 200,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub first: f64,
    pub floor: f64,
    pub mean: f64,
    pub max_steps: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            first: 0.734,
            floor: 0.11,
            mean: 0.40,
            max_steps: 6,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelSection {
    /// "default" or "stress". Ignored when `table` or inline values are set.
    pub preset: Option<String>,
    /// Path to a profiling table (`prefill_len,prefill_count,decode_count,seconds`);
    /// parameters are calibrated from it.
    pub table: Option<String>,
    pub base_step_time: Option<f64>,
    pub decode_cost_per_request: Option<f64>,
    pub decode_knee: Option<u32>,
    pub decode_slowdown: Option<f64>,
    pub prefill_fixed_cost: Option<f64>,
    pub prefill_cost_per_token: Option<f64>,
}

impl CostModelSection {
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<CostModelParams, ConfigError> {
        if let Some(table_path) = &self.table {
            let path = match base_dir {
                Some(dir) => dir.join(table_path),
                None => Path::new(table_path).to_path_buf(),
            };
            let text = fs::read_to_string(&path)?;
            let rows = cost_model::parse_profile_table(&text)?;
            let report = cost_model::calibrate(&rows)?;
            return Ok(report.params);
        }
        let mut params = match self.preset.as_deref() {
            None | Some("default") => CostModelParams::default(),
            Some("stress") => CostModelParams::stress(),
            Some(other) => {
                return Err(invalid(
                    "cost_model.preset",
                    format!("unknown preset `{other}` (expected `default` or `stress`)"),
                ))
            }
        };
        if let Some(v) = self.base_step_time {
            params.base_step_time = v;
        }
        if let Some(v) = self.decode_cost_per_request {
            params.decode_cost_per_request = v;
        }
        if let Some(v) = self.decode_knee {
            params.decode_knee = v;
        }
        if let Some(v) = self.decode_slowdown {
            params.decode_slowdown = v;
        }
        if let Some(v) = self.prefill_fixed_cost {
            params.prefill_fixed_cost = v;
        }
        if let Some(v) = self.prefill_cost_per_token {
            params.prefill_cost_per_token = v;
        }
        if params.base_step_time <= 0.0 {
            return Err(invalid("cost_model.base_step_time", "must be positive"));
        }
        Ok(params)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentSection {
    pub k: u32,
    pub beta: u8,
    pub evaluation_enabled: bool,
    pub append_all_observations: bool,
    pub serialize_evaluation: bool,
}

impl Default for AgentSection {
    fn default() -> Self {
        AgentSection {
            k: 3,
            beta: 3,
            evaluation_enabled: true,
            append_all_observations: true,
            serialize_evaluation: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub t_w: Option<f64>,
    pub scheduling_interval: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub max_batch: u32,
    pub policy: String,
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            max_batch: 256,
            policy: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub mode: String,
    pub replications: u32,
    pub capture_log: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            mode: "spagent-full".into(),
            replications: 5,
            capture_log: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub workload: WorkloadSection,
    pub profile: ProfileSection,
    pub shape: TaskShapeConfig,
    pub cost_model: CostModelSection,
    pub agent: AgentSection,
    pub scheduler: SchedulerSection,
    pub engine: EngineSection,
    pub experiment: ExperimentSection,
}

impl std::str::FromStr for FileConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        fs::read_to_string(path)?.parse()
    }

    /// Build the runtime configuration. `base_dir` resolves relative table
    /// paths; mode and seed can be overridden by the caller (CLI flags).
    pub fn to_run_config(
        &self,
        base_dir: Option<&Path>,
        mode_override: Option<Mode>,
        seed_override: Option<u64>,
    ) -> Result<RunConfig, ConfigError> {
        let mode = match mode_override {
            Some(m) => m,
            None => self
                .experiment
                .mode
                .parse::<Mode>()
                .map_err(|e| invalid("experiment.mode", e))?,
        };
        let arrival = match self.workload.arrival.as_str() {
            "sequential" => Arrival::Sequential,
            "poisson" => {
                if self.workload.rate <= 0.0 {
                    return Err(invalid("workload.rate", "must be positive"));
                }
                Arrival::Poisson {
                    rate: self.workload.rate,
                }
            }
            other => {
                return Err(invalid(
                    "workload.arrival",
                    format!("unknown arrival `{other}` (expected `sequential` or `poisson`)"),
                ))
            }
        };
        if self.workload.tasks == 0 {
            return Err(invalid("workload.tasks", "must be at least 1"));
        }
        if !(1..=5).contains(&self.agent.beta) {
            return Err(invalid("agent.beta", "must be in 1..=5"));
        }
        if self.agent.k == 0 {
            return Err(invalid("agent.k", "must be at least 1"));
        }
        if self.shape.min_steps == 0 || self.shape.min_steps > self.shape.max_steps {
            return Err(invalid(
                "shape.min_steps",
                "need 1 <= min_steps <= max_steps",
            ));
        }
        if let Some(t_w) = self.scheduler.t_w {
            if t_w <= 0.0 {
                return Err(invalid("scheduler.t_w", "must be positive"));
            }
        }
        let policy = match self.engine.policy.as_str() {
            "auto" => None,
            "fcfs" => Some(Policy::Fcfs),
            "speculation-first" => Some(Policy::SpeculationFirst),
            other => {
                return Err(invalid(
                    "engine.policy",
                    format!(
                        "unknown policy `{other}` (expected `auto`, `fcfs`, or `speculation-first`)"
                    ),
                ))
            }
        };
        let profile = generate_hit_profile(
            self.profile.first,
            self.profile.floor,
            self.profile.mean,
            self.profile.max_steps,
        )?;
        let cost = self.cost_model.resolve(base_dir)?;
        Ok(RunConfig {
            mode,
            tasks: self.workload.tasks,
            seed: seed_override.unwrap_or(self.workload.seed),
            arrival,
            profile,
            shape: self.shape.clone(),
            cost,
            agent: crate::agent::AgentConfig {
                k: self.agent.k,
                beta: self.agent.beta,
                evaluation_enabled: self.agent.evaluation_enabled,
                append_all_observations: self.agent.append_all_observations,
                serialize_evaluation: self.agent.serialize_evaluation,
            },
            t_w: self.scheduler.t_w,
            scheduling_interval: self.scheduler.scheduling_interval.unwrap_or(1),
            max_batch: self.engine.max_batch.max(1),
            policy,
            replications: self.experiment.replications.max(1),
            capture_log: self.experiment.capture_log,
        })
    }
}
