//! Run summaries and metric artifacts.
//!
//! Per-task records carry an end-to-end latency decomposition into three
//! categories: LLM time (inference on the step's critical path), action
//! time (tool execution not overlapped by inference), and other (mostly
//! plausibility-score calls that outlast action execution). The three
//! components sum to the task's end-to-end latency.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use crate::action_server::BufferStats;
use crate::spec_scheduler::SchedulerStats;

#[derive(Debug, Clone)]
pub struct TaskRecord {
    pub task_id: u64,
    pub arrival: f64,
    pub completion: f64,
    pub steps: usize,
    pub transition_step: Option<usize>,
    pub llm_s: f64,
    pub action_s: f64,
    pub other_s: f64,
    pub total_s: f64,
    pub hits: u64,
    pub lookups: u64,
    pub aggressive_steps: u64,
    pub buffer_bytes: u64,
}

/// Aggregate of one mode at one rate, across replications.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub mode: String,
    /// Tasks per second; None for closed-loop single-task runs.
    pub rate: Option<f64>,
    pub records: Vec<TaskRecord>,
    /// Mean end-to-end latency of each replication.
    pub replication_means: Vec<f64>,
    pub mean_latency: f64,
    pub median_latency: f64,
    pub p95_latency: f64,
    pub mean_llm_s: f64,
    pub mean_action_s: f64,
    pub mean_other_s: f64,
    pub buffer: BufferStats,
    pub scheduler: Option<SchedulerStats>,
    /// Event log of the first replication, when captured.
    pub event_log: Option<String>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl RunSummary {
    pub fn from_records(
        mode: String,
        rate: Option<f64>,
        records: Vec<TaskRecord>,
        replication_means: Vec<f64>,
        buffer: BufferStats,
        scheduler: Option<SchedulerStats>,
        event_log: Option<String>,
    ) -> Self {
        let mut latencies: Vec<f64> = records.iter().map(|r| r.total_s).collect();
        latencies.sort_by(f64::total_cmp);
        let n = latencies.len().max(1) as f64;
        let mean_latency = latencies.iter().sum::<f64>() / n;
        let median_latency = percentile(&latencies, 0.5);
        let p95_latency = percentile(&latencies, 0.95);
        let mean_llm_s = records.iter().map(|r| r.llm_s).sum::<f64>() / n;
        let mean_action_s = records.iter().map(|r| r.action_s).sum::<f64>() / n;
        let mean_other_s = records.iter().map(|r| r.other_s).sum::<f64>() / n;
        RunSummary {
            mode,
            rate,
            records,
            replication_means,
            mean_latency,
            median_latency,
            p95_latency,
            mean_llm_s,
            mean_action_s,
            mean_other_s,
            buffer,
            scheduler,
            event_log,
        }
    }

    pub fn hit_rate(&self) -> f64 {
        self.buffer.hit_rate()
    }

    pub fn mean_buffer_bytes(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records
            .iter()
            .map(|r| r.buffer_bytes as f64)
            .sum::<f64>()
            / self.records.len() as f64
    }

    pub fn mean_transition_step(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records
            .iter()
            .map(|r| r.transition_step.unwrap_or(r.steps) as f64)
            .sum::<f64>()
            / self.records.len() as f64
    }

    /// `mode,task_id,llm_s,action_s,other_s,total_s`
    pub fn breakdown_csv(&self) -> String {
        let mut out = String::from("mode,task_id,llm_s,action_s,other_s,total_s\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                self.mode, r.task_id, r.llm_s, r.action_s, r.other_s, r.total_s
            );
        }
        out
    }

    pub fn text_report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        match self.rate {
            Some(rate) => {
                let _ = writeln!(out, "arrival: poisson rate={rate}");
            }
            None => {
                let _ = writeln!(out, "arrival: sequential");
            }
        }
        let _ = writeln!(out, "tasks: {}", self.records.len());
        let _ = writeln!(
            out,
            "latency_s: mean={:.6} median={:.6} p95={:.6}",
            self.mean_latency, self.median_latency, self.p95_latency
        );
        if !self.replication_means.is_empty() {
            let lo = self
                .replication_means
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let hi = self
                .replication_means
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "replications: {} mean_band=[{:.6}, {:.6}]",
                self.replication_means.len(),
                lo,
                hi
            );
        }
        let _ = writeln!(
            out,
            "breakdown_s: llm={:.6} action={:.6} other={:.6}",
            self.mean_llm_s, self.mean_action_s, self.mean_other_s
        );
        let _ = writeln!(
            out,
            "buffer: hits={} lookups={} hit_rate={:.4} external_calls={} attaches={} reuses={} mean_task_bytes={:.1}",
            self.buffer.main_path_hits,
            self.buffer.main_path_lookups,
            self.hit_rate(),
            self.buffer.external_calls,
            self.buffer.attaches,
            self.buffer.reuses,
            self.mean_buffer_bytes(),
        );
        if let Some(s) = &self.scheduler {
            let _ = writeln!(
                out,
                "scheduler: registered={} launched={} expired={} withdrawn={} decisions={}",
                s.registered, s.launched, s.expired, s.withdrawn, s.decisions
            );
        }
        let _ = writeln!(
            out,
            "mean_transition_step: {:.3}",
            self.mean_transition_step()
        );
        out
    }

    /// Write `breakdown.csv`, `summary.txt`, and (if captured) `events.log`
    /// into the directory. File names are prefixed with the mode.
    pub fn emit(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let prefix = self.mode.replace([' ', '/'], "_");
        fs::write(
            dir.join(format!("{prefix}_breakdown.csv")),
            self.breakdown_csv(),
        )?;
        fs::write(
            dir.join(format!("{prefix}_summary.txt")),
            self.text_report(),
        )?;
        if let Some(log) = &self.event_log {
            fs::write(dir.join(format!("{prefix}_events.log")), log)?;
        }
        Ok(())
    }
}

/// One row of the per-rate sweep table.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub mode: String,
    pub rate: f64,
    pub mean_s: f64,
    pub p95_s: f64,
    pub main_path_hits: u64,
    pub main_path_lookups: u64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `mode,rate,mean_s,p95_s`, sorted by (mode, rate).
    pub fn sweep_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.rate.total_cmp(&b.rate)));
        let mut out = String::from("mode,rate,mean_s,p95_s\n");
        for r in rows {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", r.mode, r.rate, r.mean_s, r.p95_s);
        }
        out
    }

    /// `mode,rate,main_path_hits,main_path_lookups,hit_rate`
    pub fn hit_rate_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.mode.cmp(&b.mode).then(a.rate.total_cmp(&b.rate)));
        let mut out = String::from("mode,rate,main_path_hits,main_path_lookups,hit_rate\n");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4}",
                r.mode, r.rate, r.main_path_hits, r.main_path_lookups, r.hit_rate
            );
        }
        out
    }

    pub fn emit(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("sweep.csv"), self.sweep_csv())?;
        fs::write(dir.join("hit_rate.csv"), self.hit_rate_csv())?;
        Ok(())
    }
}
