//! Regression and ranking metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(op: &str, y: &[f64], p: &[f64]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::Metric(format!("{op}: length mismatch {} vs {}", y.len(), p.len())));
    }
    if y.len() < 2 {
        return Err(Error::Metric(format!("{op}: need at least 2 points, got {}", y.len())));
    }
    if y.iter().chain(p).any(|v| !v.is_finite()) {
        return Err(Error::Metric(format!("{op}: non-finite input")));
    }
    Ok(())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson correlation. Constant input is an error.
pub fn pearson(y: &[f64], p: &[f64]) -> Result<f64> {
    check_pair("pearson", y, p)?;
    let (my, mp) = (mean(y), mean(p));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(p) {
        let (da, db) = (a - my, b - mp);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Metric("pearson: constant input".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn rmse(y: &[f64], p: &[f64]) -> Result<f64> {
    check_pair("rmse", y, p)?;
    Ok((y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

pub fn mae(y: &[f64], p: &[f64]) -> Result<f64> {
    check_pair("mae", y, p)?;
    Ok(y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Number of tied pairs among runs of equal values in a sorted slice.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut last = None;
    for v in sorted {
        if Some(v) == last {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
            last = Some(v);
        }
    }
    total + run * run.saturating_sub(1) / 2
}

/// Merge sort returning the number of inversions.
fn sort_counting_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_counting_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall τ-b in O(n log n) (Knight's algorithm). Errors when either input
/// is constant.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("kendall_tau_b", x, y)?;
    let n = x.len() as u64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));
    let total = n * (n - 1) / 2;
    let x_ties = tied_pairs(order.iter().map(|&i| x[i]));
    let mut joint = 0u64;
    let mut run = 1u64;
    for w in order.windows(2) {
        if x[w[0]] == x[w[1]] && y[w[0]] == y[w[1]] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint += run * (run - 1) / 2;
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let y_ties = tied_pairs(ys.iter().copied());
    if x_ties == total || y_ties == total {
        return Err(Error::Metric("kendall_tau_b: constant input".into()));
    }
    let numer = total as f64 - x_ties as f64 - y_ties as f64 + joint as f64 - 2.0 * swaps as f64;
    let denom = ((total - x_ties) as f64 * (total - y_ties) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

/// Area under the ROC curve from mid-ranks. `None` when only one class is present.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<Option<f64>> {
    if labels.len() != scores.len() {
        return Err(Error::Metric(format!("auroc: length mismatch {} vs {}", labels.len(), scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("auroc: non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAuroc {
    pub value: f64,
    pub counted: usize,
    /// Label columns left out because only one class was present.
    pub skipped: Vec<usize>,
}

/// Mean AUROC across label columns of row-major `[n, labels]` matrices.
pub fn macro_auroc(labels: &[bool], scores: &[f64], num_labels: usize) -> Result<MacroAuroc> {
    if labels.len() != scores.len() || num_labels == 0 || labels.len() % num_labels != 0 {
        return Err(Error::Metric(format!(
            "macro_auroc: {} labels and {} scores do not form rows of {num_labels}",
            labels.len(),
            scores.len()
        )));
    }
    let n = labels.len() / num_labels;
    let (mut sum, mut counted, mut skipped) = (0.0, 0, Vec::new());
    for c in 0..num_labels {
        let l: Vec<bool> = (0..n).map(|r| labels[r * num_labels + c]).collect();
        let s: Vec<f64> = (0..n).map(|r| scores[r * num_labels + c]).collect();
        match auroc(&l, &s)? {
            Some(a) => {
                sum += a;
                counted += 1;
            }
            None => skipped.push(c),
        }
    }
    if !skipped.is_empty() {
        log::warn!("macro AUROC skips {} single-class label(s)", skipped.len());
    }
    if counted == 0 {
        return Err(Error::Metric("macro_auroc: no label has both classes".into()));
    }
    Ok(MacroAuroc { value: sum / counted as f64, counted, skipped })
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Undefined correlations (constant predictions) are NaN, written as `null`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(deserialize_with = "null_as_nan")]
    pub pearson: f64,
    pub rmse: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub kendall_tau: f64,
    pub n: usize,
}

impl MetricReport {
    pub fn compute(y: &[f64], p: &[f64]) -> Result<Self> {
        Ok(MetricReport { pearson: pearson(y, p)?, rmse: rmse(y, p)?, kendall_tau: kendall_tau_b(y, p)?, n: y.len() })
    }

    /// As [`MetricReport::compute`], but a constant side leaves the
    /// correlations NaN instead of failing.
    pub fn lenient(y: &[f64], p: &[f64]) -> Result<Self> {
        let rmse = rmse(y, p)?;
        let or_nan = |r: Result<f64>| match r {
            Ok(v) => v,
            Err(e) => {
                log::warn!("{e}; reported as undefined");
                f64::NAN
            }
        };
        Ok(MetricReport { pearson: or_nan(pearson(y, p)), rmse, kendall_tau: or_nan(kendall_tau_b(y, p)), n: y.len() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(deserialize_with = "null_as_nan")]
    pub mean: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub std: f64,
}

impl MeanStd {
    pub fn of(x: &[f64]) -> Self {
        MeanStd { mean: mean(x), std: std_dev(x) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pearson: MeanStd,
    pub rmse: MeanStd,
    pub kendall_tau: MeanStd,
}

impl MetricSummary {
    pub fn of(reports: &[MetricReport]) -> Self {
        let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
        MetricSummary { pearson: col(|r| r.pearson), rmse: col(|r| r.rmse), kendall_tau: col(|r| r.kendall_tau) }
    }
}
