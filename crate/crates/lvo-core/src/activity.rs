//! Time-step activity analysis.
//!
//! A dataset sweep records, per (sample, time-step), the set of features with
//! the top-k activations. A feature's activity profile is the frequency with
//! which it appears in those sets at each time-step; its peaks, local maxima
//! under a minimum-separation constraint, become independent visualization
//! conditions.

use serde::{Deserialize, Serialize};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_MAX_PEAKS: usize = 3;

/// Peak separation scaled to the schedule length: `round(100 * T / 1000)`,
/// at least 1.
pub fn default_min_separation(t_total: usize) -> usize {
    (((100 * t_total) as f64 / 1000.0).round() as usize).max(1)
}

/// One dataset observation: the top-k feature set at `(sample_id, t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopKRecord {
    pub sample_id: usize,
    pub t: usize,
    /// Feature ids, ascending, no duplicates, exactly `min(k, #features)`.
    pub features: Vec<usize>,
}

/// Ids of the `k` largest activations; ties toward the lower index. Returned
/// ascending (set semantics).
pub fn record_topk(activations: &[f64], k: usize) -> Vec<usize> {
    assert!(k >= 1, "top-k requires k >= 1");
    let mut idx: Vec<usize> = (0..activations.len()).collect();
    idx.sort_by(|&i, &j| activations[j].total_cmp(&activations[i]).then(i.cmp(&j)));
    let mut out: Vec<usize> = idx.into_iter().take(k.min(activations.len())).collect();
    out.sort_unstable();
    out
}

/// Per-feature appearance frequency over the sweep, indexed by time-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub feature: usize,
    /// Fraction of records at `t` containing the feature; 0 where no records.
    pub frequency: Vec<f64>,
    /// Number of records at each `t`.
    pub samples: Vec<usize>,
}

/// Build one profile per feature id in `0..num_features`.
pub fn build_profiles(
    records: &[TopKRecord],
    num_features: usize,
    t_total: usize,
) -> Vec<ActivityProfile> {
    let mut totals = vec![0usize; t_total];
    let mut counts = vec![vec![0usize; t_total]; num_features];
    for rec in records {
        totals[rec.t] += 1;
        for &f in &rec.features {
            counts[f][rec.t] += 1;
        }
    }
    (0..num_features)
        .map(|feature| ActivityProfile {
            feature,
            frequency: (0..t_total)
                .map(|t| {
                    if totals[t] == 0 {
                        0.0
                    } else {
                        counts[feature][t] as f64 / totals[t] as f64
                    }
                })
                .collect(),
            samples: totals.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub t: usize,
    pub activity: f64,
}

/// A feature's selected peaks, sorted by descending activity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeakSet {
    pub feature: usize,
    pub peaks: Vec<Peak>,
}

/// Strict interior local maxima; a plateau counts once, at its leftmost
/// index, and only when both flanking values are strictly lower.
fn peak_candidates(y: &[f64]) -> Vec<usize> {
    let n = y.len();
    let mut out = Vec::new();
    let mut a = 0;
    while a < n {
        let mut b = a;
        while b + 1 < n && y[b + 1] == y[a] {
            b += 1;
        }
        if a > 0 && b + 1 < n && y[a - 1] < y[a] && y[b + 1] < y[a] {
            out.push(a);
        }
        a = b + 1;
    }
    out
}

/// Greedy peak selection: candidates in descending activity (ties toward
/// smaller `t`), rejecting any within `min_separation` of an accepted peak,
/// stopping at `p`.
pub fn select_peaks(frequency: &[f64], p: usize, min_separation: usize) -> Vec<Peak> {
    assert!(min_separation >= 1, "min_separation must be >= 1");
    let mut cands = peak_candidates(frequency);
    cands.sort_by(|&i, &j| frequency[j].total_cmp(&frequency[i]).then(i.cmp(&j)));
    let mut out: Vec<Peak> = Vec::new();
    for t in cands {
        if out.len() >= p {
            break;
        }
        if out.iter().all(|pk| pk.t.abs_diff(t) >= min_separation) {
            out.push(Peak {
                t,
                activity: frequency[t],
            });
        }
    }
    out
}

/// Time-steps with nonzero activity, ascending.
pub fn active_timesteps(frequency: &[f64]) -> Vec<usize> {
    frequency
        .iter()
        .enumerate()
        .filter(|(_, &f)| f > 0.0)
        .map(|(t, _)| t)
        .collect()
}

/// Element-wise max over per-sample activation traces of one feature.
pub fn max_activation_profile(traces: &[Vec<f64>]) -> Vec<f64> {
    assert!(!traces.is_empty(), "max activation needs at least one trace");
    let len = traces[0].len();
    let mut out = vec![f64::NEG_INFINITY; len];
    for trace in traces {
        assert_eq!(trace.len(), len, "traces must share the time axis");
        for (o, &v) in out.iter_mut().zip(trace) {
            *o = o.max(v);
        }
    }
    out
}
