//! Workload generation: task traces, hit-rate profiles, arrival schedules.
//!
//! Generators are pure functions of (seed, config). Traces carry everything
//! the agent needs per step: token counts, action-execution time, the true
//! action key, and the per-step probability that a speculative sample
//! matches it.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, tag};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("infeasible hit profile: no decay in (0,1] reaches mean {target} (achievable range [{min:.4}, {max:.4}])")]
    InfeasibleProfile { target: f64, min: f64, max: f64 },
    #[error("invalid profile anchors: require 0 <= floor <= mean <= first <= 1, got first={first} floor={floor} mean={mean}")]
    InvalidAnchors { first: f64, floor: f64, mean: f64 },
}

/// Per-step probability that a directly sampled action matches the action a
/// full reasoning pass would produce. Steps beyond the listed ones use the
/// floor probability.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HitProfile {
    pub per_step_probability: Vec<f64>,
    pub floor_probability: f64,
}

impl HitProfile {
    /// Probability for a 1-based step index.
    pub fn probability(&self, step: usize) -> f64 {
        assert!(step >= 1, "step indices are 1-based");
        self.per_step_probability
            .get(step - 1)
            .copied()
            .unwrap_or(self.floor_probability)
    }

    /// Constant profile, mainly for tests and degenerate configs.
    pub fn flat(p: f64, steps: usize) -> Self {
        HitProfile {
            per_step_probability: vec![p; steps],
            floor_probability: p,
        }
    }

    pub fn mean(&self) -> f64 {
        self.per_step_probability.iter().sum::<f64>() / self.per_step_probability.len() as f64
    }

    /// First 1-based step whose probability drops below `threshold`,
    /// searching past the listed steps into the floor region.
    pub fn first_step_below(&self, threshold: f64) -> Option<usize> {
        for (i, p) in self.per_step_probability.iter().enumerate() {
            if *p < threshold {
                return Some(i + 1);
            }
        }
        if self.floor_probability < threshold {
            Some(self.per_step_probability.len() + 1)
        } else {
            None
        }
    }
}

fn geometric_profile(first: f64, floor: f64, rho: f64, max_steps: usize) -> Vec<f64> {
    (0..max_steps)
        .map(|i| (first * rho.powi(i as i32)).max(floor))
        .collect()
}

fn profile_mean(first: f64, floor: f64, rho: f64, max_steps: usize) -> f64 {
    geometric_profile(first, floor, rho, max_steps)
        .iter()
        .sum::<f64>()
        / max_steps as f64
}

/// Fit a geometric-decay profile `p(step) = max(floor, first * rho^(step-1))`
/// with the decay chosen by bisection so the mean over `max_steps` matches
/// `mean_target` (to well within the 0.01 contract).
pub fn generate_hit_profile(
    first: f64,
    floor: f64,
    mean_target: f64,
    max_steps: usize,
) -> Result<HitProfile, WorkloadError> {
    if !(0.0..=1.0).contains(&first)
        || !(0.0..=1.0).contains(&floor)
        || floor > mean_target
        || mean_target > first
    {
        return Err(WorkloadError::InvalidAnchors {
            first,
            floor,
            mean: mean_target,
        });
    }
    assert!(max_steps >= 1);

    // Mean is non-decreasing in rho. rho -> 0 gives the minimum (first step
    // only, floor elsewhere); rho = 1 gives a flat profile at `first`.
    let mean_min = (first + (max_steps as f64 - 1.0) * floor) / max_steps as f64;
    let mean_max = first;
    const FIT_TOLERANCE: f64 = 0.01;
    if mean_target < mean_min - FIT_TOLERANCE || mean_target > mean_max + FIT_TOLERANCE {
        return Err(WorkloadError::InfeasibleProfile {
            target: mean_target,
            min: mean_min,
            max: mean_max,
        });
    }

    let mut lo = 0.0_f64;
    let mut hi = 1.0_f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile_mean(first, floor, mid, max_steps) < mean_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let rho = 0.5 * (lo + hi);
    Ok(HitProfile {
        per_step_probability: geometric_profile(first, floor, rho, max_steps),
        floor_probability: floor,
    })
}

/// Distributions and constants shaping generated tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskShapeConfig {
    /// Steps per task, uniform over [min_steps, max_steps] inclusive.
    pub min_steps: usize,
    pub max_steps: usize,
    /// Reasoning output length: lognormal with this mean, clamped below/above.
    pub reasoning_token_mean: f64,
    pub reasoning_token_sigma: f64,
    pub reasoning_token_min: u32,
    pub reasoning_token_max: u32,
    /// Speculative sampling output length, uniform inclusive range.
    pub speculative_tokens_min: u32,
    pub speculative_tokens_max: u32,
    /// Plausibility-score call shape. Input is short: the score call reads
    /// the sampled actions against a prefix-cached context.
    pub evaluation_output_tokens: u32,
    pub evaluation_input_tokens: u32,
    /// Action execution time: lognormal with this mean, clamped to min.
    pub action_time_mean: f64,
    pub action_time_sigma: f64,
    pub action_time_min: f64,
    /// Context accounting: initial prompt length and per-observation length.
    pub initial_context_tokens: u32,
    pub observation_tokens: u32,
    /// Number of distinct wrong action candidates per step.
    pub wrong_key_pool: u32,
}

impl Default for TaskShapeConfig {
    fn default() -> Self {
        TaskShapeConfig {
            min_steps: 6,
            max_steps: 10,
            reasoning_token_mean: 250.0,
            reasoning_token_sigma: 0.3,
            reasoning_token_min: 24,
            reasoning_token_max: 1200,
            speculative_tokens_min: 4,
            speculative_tokens_max: 10,
            evaluation_output_tokens: 8,
            evaluation_input_tokens: 64,
            action_time_mean: 1.5,
            action_time_sigma: 0.2,
            action_time_min: 0.2,
            initial_context_tokens: 600,
            observation_tokens: 300,
            wrong_key_pool: 4,
        }
    }
}

/// One step of a task trace. `input_tokens` is the context length a plain
/// reason-act agent would see at this step; orchestrators that append extra
/// observations track their own context on top of this baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepSpec {
    pub reasoning_output_tokens: u32,
    pub speculative_output_tokens: u32,
    pub evaluation_output_tokens: u32,
    pub evaluation_input_tokens: u32,
    pub input_tokens: u32,
    /// Seconds to execute this step's action; 0 on the terminal step.
    pub action_exec_time: f64,
    pub true_action_key: String,
    pub hit_probability: f64,
    pub wrong_key_pool: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskTrace {
    pub task_id: u64,
    pub steps: Vec<StepSpec>,
    pub arrival_time: f64,
}

impl TaskTrace {
    pub fn is_terminal(&self, step_1based: usize) -> bool {
        step_1based == self.steps.len()
    }

    pub fn step(&self, step_1based: usize) -> &StepSpec {
        &self.steps[step_1based - 1]
    }
}

/// Generate one task trace. Deterministic for a fixed (seed, task_id, config).
pub fn generate_task(
    seed: u64,
    task_id: u64,
    profile: &HitProfile,
    shape: &TaskShapeConfig,
) -> TaskTrace {
    let mut rng = rng::stream(seed, &[tag::TASK_SHAPE, task_id]);
    let n_steps = rng.gen_range(shape.min_steps..=shape.max_steps);

    // Lognormal parameterized so the distribution mean hits the configured mean.
    let sigma = shape.reasoning_token_sigma.max(1e-6);
    let mu = shape.reasoning_token_mean.ln() - 0.5 * sigma * sigma;
    let reasoning_dist = LogNormal::new(mu, sigma).expect("valid lognormal");
    let act_sigma = shape.action_time_sigma.max(1e-6);
    let act_mu = shape.action_time_mean.ln() - 0.5 * act_sigma * act_sigma;
    let action_dist = LogNormal::new(act_mu, act_sigma).expect("valid lognormal");

    let mut steps = Vec::with_capacity(n_steps);
    let mut context = shape.initial_context_tokens;
    for i in 1..=n_steps {
        let reasoning = (reasoning_dist.sample(&mut rng) as u32)
            .clamp(shape.reasoning_token_min.max(2), shape.reasoning_token_max);
        let speculative = rng
            .gen_range(shape.speculative_tokens_min..=shape.speculative_tokens_max)
            .max(1);
        let terminal = i == n_steps;
        let action_exec_time = if terminal {
            // The final step produces the answer; it has no action. The draw
            // still advances the stream so earlier steps are unaffected by
            // the task length.
            let _ = action_dist.sample(&mut rng);
            0.0
        } else {
            action_dist.sample(&mut rng).max(shape.action_time_min)
        };
        steps.push(StepSpec {
            reasoning_output_tokens: reasoning,
            speculative_output_tokens: speculative.min(reasoning - 1).max(1),
            evaluation_output_tokens: shape.evaluation_output_tokens,
            evaluation_input_tokens: shape.evaluation_input_tokens,
            input_tokens: context,
            action_exec_time,
            true_action_key: format!("t{task_id}:s{i}:g"),
            hit_probability: profile.probability(i),
            wrong_key_pool: shape.wrong_key_pool.max(1),
        });
        // Baseline context evolution: previous outputs plus one observation.
        context = context
            .saturating_add(reasoning)
            .saturating_add(shape.observation_tokens);
    }

    TaskTrace {
        task_id,
        steps,
        arrival_time: 0.0,
    }
}

/// Poisson arrival schedule: cumulative sums of i.i.d. exponential gaps.
#[derive(Debug, Clone)]
pub struct ArrivalSchedule {
    pub rate: f64,
    pub seed: u64,
    pub arrivals: Vec<f64>,
}

pub fn generate_arrivals(rate: f64, count: usize, seed: u64) -> ArrivalSchedule {
    assert!(rate > 0.0 && count > 0);
    let mut rng = rng::stream(seed, &[tag::ARRIVALS]);
    let exp = Exp::new(rate).expect("rate > 0");
    let mut t = 0.0;
    let arrivals = (0..count)
        .map(|_| {
            t += exp.sample(&mut rng);
            t
        })
        .collect();
    ArrivalSchedule {
        rate,
        seed,
        arrivals,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_matches_anchors() {
        let p = generate_hit_profile(0.734, 0.11, 0.40, 6).unwrap();
        assert_eq!(p.per_step_probability.len(), 6);
        assert!((p.probability(1) - 0.734).abs() < 1e-12);
        assert!((p.floor_probability - 0.11).abs() < 1e-12);
        // Beyond the listed steps the floor applies.
        assert!((p.probability(7) - 0.11).abs() < 1e-12);
        let mean = p.mean();
        assert!((0.39..=0.41).contains(&mean), "mean {mean} out of band");
        // Non-increasing after step 1.
        for w in p.per_step_probability.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn flat_profile_when_floor_equals_first() {
        let p = generate_hit_profile(0.5, 0.5, 0.5, 4).unwrap();
        assert_eq!(p.per_step_probability, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn no_decay_when_mean_equals_first() {
        let p = generate_hit_profile(1.0, 0.0, 1.0, 3).unwrap();
        for s in 1..=3 {
            assert!((p.probability(s) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn infeasible_mean_is_rejected() {
        // floor = 0.4 forces mean >= (0.9 + 5*0.4)/6 = 0.4833; 0.41 is in the
        // anchor order but below the achievable range.
        let err = generate_hit_profile(0.9, 0.4, 0.41, 6).unwrap_err();
        assert!(matches!(err, WorkloadError::InfeasibleProfile { .. }));
        let err = generate_hit_profile(0.3, 0.4, 0.35, 6).unwrap_err();
        assert!(matches!(err, WorkloadError::InvalidAnchors { .. }));
    }

    #[test]
    fn tasks_are_deterministic() {
        let profile = generate_hit_profile(0.734, 0.11, 0.40, 6).unwrap();
        let shape = TaskShapeConfig::default();
        let a = generate_task(1, 0, &profile, &shape);
        let b = generate_task(1, 0, &profile, &shape);
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        let c = generate_task(2, 0, &profile, &shape);
        assert_ne!(format!("{a:?}"), format!("{c:?}"));
    }

    #[test]
    fn task_statistics_match_configured_distributions() {
        let profile = generate_hit_profile(0.734, 0.11, 0.40, 6).unwrap();
        let shape = TaskShapeConfig::default();
        let mut act_sum = 0.0;
        let mut act_n = 0usize;
        for id in 0..10_000u64 {
            let t = generate_task(99, id, &profile, &shape);
            assert!(!t.steps.is_empty());
            assert_eq!(t.steps.last().unwrap().action_exec_time, 0.0);
            for (i, s) in t.steps.iter().enumerate() {
                assert!(s.speculative_output_tokens <= 10);
                assert!(s.speculative_output_tokens < s.reasoning_output_tokens);
                if i + 1 < t.steps.len() {
                    assert!(s.action_exec_time > 0.0);
                    act_sum += s.action_exec_time;
                    act_n += 1;
                }
            }
        }
        let mean_act = act_sum / act_n as f64;
        assert!(
            (1.4..=1.6).contains(&mean_act),
            "mean action time {mean_act}"
        );
    }

    #[test]
    fn step_probabilities_follow_profile() {
        let profile = generate_hit_profile(0.734, 0.11, 0.40, 6).unwrap();
        let shape = TaskShapeConfig::default();
        let t = generate_task(5, 3, &profile, &shape);
        for (i, s) in t.steps.iter().enumerate() {
            assert_eq!(s.hit_probability, profile.probability(i + 1));
        }
    }

    #[test]
    fn arrivals_reproducible_and_calibrated() {
        let a = generate_arrivals(2.0, 10_000, 7);
        let b = generate_arrivals(2.0, 10_000, 7);
        assert_eq!(a.arrivals, b.arrivals);
        for w in a.arrivals.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let mean_gap = a.arrivals.last().unwrap() / a.arrivals.len() as f64;
        assert!(
            (0.49..=0.51).contains(&mean_gap),
            "mean inter-arrival {mean_gap}"
        );
    }

    #[test]
    fn single_arrival_is_one_exponential_draw() {
        let a = generate_arrivals(1.0, 1, 3);
        assert_eq!(a.arrivals.len(), 1);
        assert!(a.arrivals[0] > 0.0);
    }
}
