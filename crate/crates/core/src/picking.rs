//! STA/LTA first-break picking and pick-consistency statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetics::Gather;

/// Added to the long-term average before dividing.
pub const RATIO_EPS: f64 = 1e-12;
/// Traces with less energy than this get no pick.
pub const MIN_TRACE_ENERGY: f64 = 1e-12;

pub const DEFAULT_STA_S: f64 = 0.02;
pub const DEFAULT_LTA_S: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PickMode {
    /// Index of the global ratio maximum.
    Argmax,
    /// First index where the ratio reaches the threshold.
    Threshold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PickSet {
    /// Per-trace first-break sample index; `None` when no pick was made.
    pub picks: Vec<Option<usize>>,
    pub sta_len: usize,
    pub lta_len: usize,
    pub mode: PickMode,
    pub threshold: f64,
    /// Per-trace maximum of the STA/LTA ratio.
    pub ratio_max: Vec<f64>,
    pub dt: f64,
}

/// Means over trailing windows `(i - len, i]`, truncated at the start of the
/// trace. The running sum is recomputed exactly once per window length so
/// rounding does not accumulate across the trace.
fn trailing_means(cf: &[f64], len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cf.len());
    let mut sum = 0.0f64;
    for i in 0..cf.len() {
        let start = (i + 1).saturating_sub(len);
        if i % len == 0 {
            sum = cf[start..=i].iter().sum();
        } else {
            sum += cf[i];
            if i >= len {
                sum -= cf[i - len];
            }
        }
        out.push(sum.max(0.0) / (i + 1 - start) as f64);
    }
    out
}

/// Ratio of short- to long-term trailing averages of the squared amplitude.
pub fn sta_lta_ratio(trace: &[f32], sta_len: usize, lta_len: usize) -> Result<Vec<f64>> {
    if sta_len < 1 {
        return Err(Error::config("sta", "window must span at least 1 sample"));
    }
    if lta_len <= sta_len {
        return Err(Error::config(
            "lta",
            format!("window ({lta_len} samples) must be longer than sta ({sta_len})"),
        ));
    }
    if lta_len > trace.len() {
        return Err(Error::config(
            "lta",
            format!(
                "window ({lta_len} samples) exceeds trace length {}",
                trace.len()
            ),
        ));
    }
    let cf: Vec<f64> = trace.iter().map(|&v| (v as f64) * (v as f64)).collect();
    let sta = trailing_means(&cf, sta_len);
    let lta = trailing_means(&cf, lta_len);
    Ok(sta
        .iter()
        .zip(&lta)
        .map(|(s, l)| s / (l + RATIO_EPS))
        .collect())
}

/// Converts window lengths in seconds to samples (rounded).
pub fn window_samples(seconds: f64, dt: f64, field: &'static str) -> Result<usize> {
    if !(seconds.is_finite() && seconds > 0.0) {
        return Err(Error::config(field, "window must be positive"));
    }
    let n = (seconds / dt).round();
    if n < 1.0 {
        return Err(Error::config(
            field,
            format!("{seconds} s is shorter than one sample"),
        ));
    }
    Ok(n as usize)
}

pub fn pick_first_breaks(
    gather: &Gather,
    sta_s: f64,
    lta_s: f64,
    mode: PickMode,
    threshold: f64,
) -> Result<PickSet> {
    let sta_len = window_samples(sta_s, gather.dt, "sta")?;
    let lta_len = window_samples(lta_s, gather.dt, "lta")?;
    let mut picks = Vec::with_capacity(gather.n_x());
    let mut ratio_max = Vec::with_capacity(gather.n_x());
    for tr in gather.traces() {
        let ratio = sta_lta_ratio(tr, sta_len, lta_len)?;
        let peak = ratio.iter().cloned().fold(0.0f64, f64::max);
        ratio_max.push(peak);
        let energy: f64 = tr.iter().map(|&v| (v as f64).powi(2)).sum();
        let pick = if energy < MIN_TRACE_ENERGY {
            None
        } else {
            match mode {
                // first index attaining the maximum
                PickMode::Argmax => ratio
                    .iter()
                    .enumerate()
                    .fold(None, |best: Option<(usize, f64)>, (i, &r)| match best {
                        Some((_, b)) if b >= r => best,
                        _ => Some((i, r)),
                    })
                    .map(|(i, _)| i),
                PickMode::Threshold => ratio.iter().position(|&r| r >= threshold),
            }
        };
        picks.push(pick);
    }
    Ok(PickSet {
        picks,
        sta_len,
        lta_len,
        mode,
        threshold,
        ratio_max,
        dt: gather.dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Mean |pick[j+1] - pick[j]| in samples over adjacent traces that both
    /// have picks; absent when no such pair exists.
    pub mad_adjacent: Option<f64>,
    /// Fraction of traces with a pick.
    pub coverage: f64,
}

pub fn pick_consistency(picks: &PickSet) -> Consistency {
    let n = picks.picks.len();
    let present = picks.picks.iter().filter(|p| p.is_some()).count();
    let coverage = if n == 0 {
        0.0
    } else {
        present as f64 / n as f64
    };
    let diffs: Vec<f64> = picks
        .picks
        .windows(2)
        .filter_map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some((a as f64 - b as f64).abs()),
            _ => None,
        })
        .collect();
    let mad_adjacent = if present < 2 || diffs.is_empty() {
        None
    } else {
        Some(diffs.iter().sum::<f64>() / diffs.len() as f64)
    };
    Consistency {
        mad_adjacent,
        coverage,
    }
}

/// Mean |pick - truth| in samples over traces where both exist.
pub fn mean_abs_error(picks: &PickSet, truth: &[Option<usize>]) -> Option<f64> {
    let errs: Vec<f64> = picks
        .picks
        .iter()
        .zip(truth)
        .filter_map(|(p, t)| Some((p.as_ref()?.abs_diff(*t.as_ref()?)) as f64))
        .collect();
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}
