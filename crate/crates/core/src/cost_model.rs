//! Hybrid-batch timing model and speculation overhead formulas.
//!
//! A batch step of the engine contains a set of prefill requests plus N
//! concurrent decode requests. Its duration is modeled as an affine decode
//! term with a knee (decode slows once concurrency passes `decode_knee`)
//! plus a per-request affine prefill term:
//!
//! ```text
//! T_h(P, N) = base_step_time
//!           + decode_cost_per_request * min(N, knee)
//!           + decode_cost_per_request * (1 + slowdown) * max(0, N - knee)
//!           + sum over prefill entries of count * (fixed + per_token * len)
//! ```
//!
//! The speculation overhead formulas charge a candidate set S with
//! `k` samples each: the decode side pays `l_s` steps of the marginal batch
//! slowdown from `k*|S|` extra decode slots, and the prefill side pays one
//! shared-prefix prefill per selected request.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostModelError {
    #[error("calibration table underdetermined: {0}")]
    Underdetermined(String),
    #[error("calibration residual too large: row {row} relative error {rel:.3} exceeds 10%")]
    ResidualTooLarge { row: usize, rel: f64 },
    #[error("malformed profile table line {line}: {reason}")]
    MalformedTable { line: usize, reason: String },
}

/// Parameters of the hybrid-batch timing function.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    /// Fixed cost of one batch step, seconds.
    pub base_step_time: f64,
    /// Marginal decode cost per concurrent request, seconds.
    pub decode_cost_per_request: f64,
    /// Concurrency beyond which decode slows down.
    pub decode_knee: u32,
    /// Fractional extra decode cost per request past the knee.
    pub decode_slowdown: f64,
    /// Fixed cost per prefill request, seconds.
    pub prefill_fixed_cost: f64,
    /// Prefill cost per input token, seconds.
    pub prefill_cost_per_token: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        // Defaults are calibration targets, not measurements. The decode
        // terms are sized so a full batch (N=128) runs ~20% slower per step
        // than a lone request.
        CostModelParams {
            base_step_time: 0.0065,
            decode_cost_per_request: 9.2e-6,
            decode_knee: 64,
            decode_slowdown: 0.2,
            prefill_fixed_cost: 0.002,
            prefill_cost_per_token: 5.0e-5,
        }
    }
}

impl CostModelParams {
    /// A deliberately contention-heavy parameter set: lower knee, steep
    /// slowdown. Used by serving stress sweeps.
    pub fn stress() -> Self {
        CostModelParams {
            base_step_time: 0.0065,
            decode_cost_per_request: 1.0e-4,
            decode_knee: 32,
            decode_slowdown: 1.0,
            prefill_fixed_cost: 0.002,
            prefill_cost_per_token: 2.0e-5,
        }
    }
}

/// Multiset of prefill entries `(input_length, count)` in one batch step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrefillSet {
    entries: Vec<(u32, u32)>,
}

impl PrefillSet {
    pub fn empty() -> Self {
        PrefillSet::default()
    }

    pub fn single(input_length: u32, count: u32) -> Self {
        let mut s = PrefillSet::default();
        s.add(input_length, count);
        s
    }

    pub fn add(&mut self, input_length: u32, count: u32) {
        assert!(input_length >= 1 && count >= 1, "lengths and counts >= 1");
        self.entries.push((input_length, count));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn request_count(&self) -> u32 {
        self.entries.iter().map(|(_, c)| c).sum()
    }

    pub fn entries(&self) -> &[(u32, u32)] {
        &self.entries
    }
}

/// Duration of one batch step with the given prefill set and decode count.
pub fn hybrid_batch_time(prefill: &PrefillSet, decode_count: u32, params: &CostModelParams) -> f64 {
    let n = decode_count as f64;
    let knee = params.decode_knee as f64;
    let decode = if n <= knee {
        params.decode_cost_per_request * n
    } else {
        params.decode_cost_per_request * knee
            + params.decode_cost_per_request * (1.0 + params.decode_slowdown) * (n - knee)
    };
    let prefill_cost: f64 = prefill
        .entries
        .iter()
        .map(|&(len, count)| {
            count as f64 * (params.prefill_fixed_cost + params.prefill_cost_per_token * len as f64)
        })
        .sum();
    params.base_step_time + decode + prefill_cost
}

/// Decode-phase overhead of launching `spec_count` speculative requests with
/// `k` samples each while `n` requests are decoding: `l_s` steps of the
/// marginal slowdown.
pub fn decode_overhead(spec_count: u32, k: u32, n: u32, l_s: f64, params: &CostModelParams) -> f64 {
    if spec_count == 0 {
        return 0.0;
    }
    let inflated = n + k * spec_count;
    l_s * (hybrid_batch_time(&PrefillSet::empty(), inflated, params)
        - hybrid_batch_time(&PrefillSet::empty(), n, params))
}

/// Prefill-phase overhead: one shared-prefix prefill of `input_tokens` per
/// speculative request. Decode terms cancel, so the result does not depend
/// on `n`.
pub fn prefill_overhead(
    spec_count: u32,
    input_tokens: u32,
    n: u32,
    params: &CostModelParams,
) -> f64 {
    if spec_count == 0 {
        return 0.0;
    }
    hybrid_batch_time(&PrefillSet::single(input_tokens, spec_count), n, params)
        - hybrid_batch_time(&PrefillSet::empty(), n, params)
}

/// One measured row of an engine profiling table.
#[derive(Debug, Clone)]
pub struct ProfileRow {
    pub prefill: PrefillSet,
    pub decode_count: u32,
    pub measured_seconds: f64,
}

/// Calibration report: fitted parameters plus per-row residuals.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub params: CostModelParams,
    /// (measured, fitted, relative error) per row.
    pub residuals: Vec<(f64, f64, f64)>,
    pub max_relative_error: f64,
}

/// Least-squares fit of the timing parameters from a profiling table.
///
/// The knee is selected by grid search over the decode counts present in the
/// table; the remaining five parameters are linear given the knee and are
/// solved by SVD. Fails if the table cannot pin the parameters down or if
/// any row is reproduced worse than 10% relative error.
pub fn calibrate(table: &[ProfileRow]) -> Result<CalibrationReport, CostModelError> {
    if table.len() < 6 {
        return Err(CostModelError::Underdetermined(format!(
            "{} rows; need at least 6 spanning decode-only and hybrid batches",
            table.len()
        )));
    }
    let decode_only = table.iter().filter(|r| r.prefill.is_empty()).count();
    if decode_only == 0 {
        return Err(CostModelError::Underdetermined(
            "no decode-only rows (empty prefill set)".into(),
        ));
    }
    if decode_only == table.len() {
        return Err(CostModelError::Underdetermined(
            "no hybrid rows; prefill costs cannot be fitted".into(),
        ));
    }
    let mut decode_counts: Vec<u32> = table.iter().map(|r| r.decode_count).collect();
    decode_counts.sort_unstable();
    decode_counts.dedup();
    if decode_counts.len() < 2 {
        return Err(CostModelError::Underdetermined(
            "all rows share one decode count; decode cost cannot be separated from the base step time".into(),
        ));
    }

    let mut best: Option<(f64, u32, DVector<f64>)> = None;
    for &knee in &decode_counts {
        if knee == 0 {
            continue;
        }
        let rows = table.len();
        let mut a = DMatrix::zeros(rows, 5);
        let mut b = DVector::zeros(rows);
        for (i, row) in table.iter().enumerate() {
            let n = row.decode_count as f64;
            let kf = knee as f64;
            a[(i, 0)] = 1.0;
            a[(i, 1)] = n.min(kf);
            a[(i, 2)] = (n - kf).max(0.0);
            let (count, count_len) = row
                .prefill
                .entries()
                .iter()
                .fold((0.0, 0.0), |(c, cl), &(len, cnt)| {
                    (c + cnt as f64, cl + (cnt as f64) * (len as f64))
                });
            a[(i, 3)] = count;
            a[(i, 4)] = count_len;
            b[i] = row.measured_seconds;
        }
        let svd = a.clone().svd(true, true);
        let sol = match svd.solve(&b, 1e-12) {
            Ok(s) => s,
            Err(_) => continue,
        };
        let sse = (&a * &sol - &b).norm_squared();
        if best.as_ref().is_none_or(|(s, _, _)| sse < *s) {
            best = Some((sse, knee, sol));
        }
    }
    let (_, knee, sol) = best.ok_or_else(|| {
        CostModelError::Underdetermined("no knee candidate admits a least-squares solution".into())
    })?;

    let gamma = sol[1].max(0.0);
    let gamma_post = sol[2].max(0.0);
    // Past-knee slope only identified if the table has rows beyond the knee.
    let has_post = table.iter().any(|r| r.decode_count > knee);
    let slowdown = if has_post && gamma > 1e-15 {
        (gamma_post / gamma - 1.0).max(0.0)
    } else {
        0.0
    };
    let params = CostModelParams {
        base_step_time: sol[0].max(0.0),
        decode_cost_per_request: gamma,
        decode_knee: knee,
        decode_slowdown: slowdown,
        prefill_fixed_cost: sol[3].max(0.0),
        prefill_cost_per_token: sol[4].max(0.0),
    };

    let mut residuals = Vec::with_capacity(table.len());
    let mut max_rel = 0.0_f64;
    for (i, row) in table.iter().enumerate() {
        let fitted = hybrid_batch_time(&row.prefill, row.decode_count, &params);
        let rel = if row.measured_seconds.abs() > 0.0 {
            ((fitted - row.measured_seconds) / row.measured_seconds).abs()
        } else {
            fitted.abs()
        };
        if rel > max_rel {
            max_rel = rel;
        }
        residuals.push((row.measured_seconds, fitted, rel));
        if rel > 0.10 {
            return Err(CostModelError::ResidualTooLarge { row: i, rel });
        }
    }

    Ok(CalibrationReport {
        params,
        residuals,
        max_relative_error: max_rel,
    })
}

/// The default shipped profiling table, synthesized from the default
/// parameters over a grid spanning decode-only and hybrid batches.
pub fn default_profile_table() -> Vec<ProfileRow> {
    let p = CostModelParams::default();
    let mut rows = Vec::new();
    for n in [0u32, 1, 8, 16, 32, 64, 96, 128, 192, 256] {
        rows.push(ProfileRow {
            prefill: PrefillSet::empty(),
            decode_count: n,
            measured_seconds: hybrid_batch_time(&PrefillSet::empty(), n, &p),
        });
    }
    for (len, count, n) in [
        (256u32, 1u32, 8u32),
        (512, 1, 16),
        (512, 2, 16),
        (1024, 1, 64),
        (2048, 1, 32),
        (1024, 4, 96),
    ] {
        let prefill = PrefillSet::single(len, count);
        rows.push(ProfileRow {
            prefill: prefill.clone(),
            decode_count: n,
            measured_seconds: hybrid_batch_time(&prefill, n, &p),
        });
    }
    rows
}

/// Parse a profiling table from comma-separated text with the header
/// `prefill_len,prefill_count,decode_count,seconds`. A prefill count of 0
/// denotes a decode-only row.
pub fn parse_profile_table(text: &str) -> Result<Vec<ProfileRow>, CostModelError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            let expect = "prefill_len,prefill_count,decode_count,seconds";
            if line != expect {
                return Err(CostModelError::MalformedTable {
                    line: 1,
                    reason: format!("header must be `{expect}`"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CostModelError::MalformedTable {
                line: idx + 1,
                reason: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_u32 = |s: &str, what: &str| {
            s.trim()
                .parse::<u32>()
                .map_err(|e| CostModelError::MalformedTable {
                    line: idx + 1,
                    reason: format!("{what}: {e}"),
                })
        };
        let len = parse_u32(fields[0], "prefill_len")?;
        let count = parse_u32(fields[1], "prefill_count")?;
        let decode = parse_u32(fields[2], "decode_count")?;
        let seconds =
            fields[3]
                .trim()
                .parse::<f64>()
                .map_err(|e| CostModelError::MalformedTable {
                    line: idx + 1,
                    reason: format!("seconds: {e}"),
                })?;
        let prefill = if count == 0 {
            PrefillSet::empty()
        } else {
            PrefillSet::single(len.max(1), count)
        };
        rows.push(ProfileRow {
            prefill,
            decode_count: decode,
            measured_seconds: seconds,
        });
    }
    Ok(rows)
}

/// Render a profiling table in the accepted text format.
pub fn format_profile_table(rows: &[ProfileRow]) -> String {
    let mut out = String::from("prefill_len,prefill_count,decode_count,seconds\n");
    for r in rows {
        let (len, count) = r.prefill.entries().first().copied().unwrap_or((0, 0));
        out.push_str(&format!(
            "{},{},{},{:.9}\n",
            len, count, r.decode_count, r.measured_seconds
        ));
    }
    out
}
