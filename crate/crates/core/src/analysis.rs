//! Post-hoc analyses of trained mixture models and the plot-ready tables
//! derived from them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Corpus;
use crate::error::{Error, Result};
use crate::metrics::{pearson, MeanStd, MetricReport, MetricSummary};

pub const INTERACTION_CUTOFFS: [f64; 3] = [0.3, 0.4, 0.5];
/// Queries whose strongest weight exceeds this count as interacting.
pub const STRONG_QUERY: f64 = 0.5;

/// Writes serializable rows as CSV with a header.
pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub pair: usize,
    pub geometric_mean_size: f64,
    pub predicted_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteNoiseReport {
    pub rows: Vec<SizeRow>,
    /// Correlation of log size with predicted distance; `None` when every
    /// pair has the same size or the predictions are constant.
    pub trend: Option<f64>,
}

pub fn white_noise(corpus: &Corpus, predictions: &[(usize, f64)]) -> WhiteNoiseReport {
    let rows: Vec<SizeRow> = predictions
        .iter()
        .map(|&(pair, d)| SizeRow { pair, geometric_mean_size: corpus.pair_size(pair), predicted_distance: d })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.geometric_mean_size.ln()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.predicted_distance).collect();
    WhiteNoiseReport { trend: pearson(&x, &y).ok(), rows }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub identical_pairs: usize,
    pub nonzero_labels: usize,
    pub label: MeanStd,
    pub by_dataset: BTreeMap<String, MeanStd>,
    /// Learned head bias of each fold's model.
    pub learned_bias: Vec<f64>,
    pub learned: MeanStd,
}

/// Label statistics of identical-composition pairs next to the learned biases.
pub fn identical_pair_bias(corpus: &Corpus, learned_bias: &[f64]) -> BiasReport {
    let idx = corpus.identical_pairs();
    let labels: Vec<f64> = idx.iter().map(|&i| corpus.pairs[i].distance).collect();
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &i in &idx {
        by.entry(corpus.pairs[i].dataset.clone()).or_default().push(corpus.pairs[i].distance);
    }
    let stats = |v: &[f64]| if v.is_empty() { MeanStd { mean: f64::NAN, std: f64::NAN } } else { MeanStd::of(v) };
    BiasReport {
        identical_pairs: idx.len(),
        nonzero_labels: labels.iter().filter(|&&l| l != 0.0).count(),
        label: stats(&labels),
        by_dataset: by.iter().map(|(k, v)| (k.clone(), stats(v))).collect(),
        learned_bias: learned_bias.to_vec(),
        learned: stats(learned_bias),
    }
}

/// Entries at or above `cutoff`, divided by the number of molecules.
pub fn interactions_per_compound(map: &[Vec<f64>], cutoff: f64) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    let hits = map.iter().flatten().filter(|&&w| w >= cutoff).count();
    hits as f64 / map.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub mixture_id: String,
    pub smiles: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRow {
    pub mixture_id: String,
    pub size: usize,
    pub cutoff: f64,
    pub interactions_per_compound: f64,
}

pub fn interaction_table(maps: &[AttentionMap], cutoffs: &[f64]) -> Vec<InteractionRow> {
    let mut rows = Vec::new();
    for m in maps {
        for &c in cutoffs {
            rows.push(InteractionRow {
                mixture_id: m.mixture_id.clone(),
                size: m.smiles.len(),
                cutoff: c,
                interactions_per_compound: interactions_per_compound(&m.weights, c),
            });
        }
    }
    rows
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyRole {
    Strong,
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyHit {
    pub mixture_id: String,
    pub query: String,
    pub key: String,
    pub role: KeyRole,
    pub weight: f64,
}

/// For every query whose strongest weight exceeds [`STRONG_QUERY`], the
/// key with the largest weight (strong) and the smallest (weak).
pub fn extract_keys(maps: &[AttentionMap]) -> Vec<KeyHit> {
    let mut hits = Vec::new();
    for m in maps {
        for (q, row) in m.weights.iter().enumerate() {
            let Some(max) = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])) else {
                continue;
            };
            if row[max] <= STRONG_QUERY {
                continue;
            }
            let min = (0..row.len()).min_by(|&a, &b| row[a].total_cmp(&row[b])).expect("nonempty row");
            for (k, role) in [(max, KeyRole::Strong), (min, KeyRole::Weak)] {
                hits.push(KeyHit {
                    mixture_id: m.mixture_id.clone(),
                    query: m.smiles[q].clone(),
                    key: m.smiles[k].clone(),
                    role,
                    weight: row[k],
                });
            }
        }
    }
    hits
}

/// Molecules that only ever appear as strong keys, and those only ever weak.
pub fn exclusive_keys(hits: &[KeyHit]) -> (Vec<String>, Vec<String>) {
    let mut roles: BTreeMap<&str, BTreeSet<KeyRole>> = BTreeMap::new();
    for h in hits {
        roles.entry(h.key.as_str()).or_default().insert(h.role);
    }
    let only = |r: KeyRole| {
        roles
            .iter()
            .filter(|(_, s)| s.len() == 1 && s.contains(&r))
            .map(|(k, _)| k.to_string())
            .collect::<Vec<_>>()
    };
    (only(KeyRole::Strong), only(KeyRole::Weak))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    pub pearson_mean: f64,
    pub pearson_std: f64,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub kendall_mean: f64,
    pub kendall_std: f64,
}

impl ModelRow {
    pub fn new(model: &str, folds: &[MetricReport]) -> Self {
        let s = MetricSummary::of(folds);
        ModelRow {
            model: model.into(),
            pearson_mean: s.pearson.mean,
            pearson_std: s.pearson.std,
            rmse_mean: s.rmse.mean,
            rmse_std: s.rmse.std,
            kendall_mean: s.kendall_tau.mean,
            kendall_std: s.kendall_tau.std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub pearson: f64,
    pub rmse: f64,
    pub kendall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: String,
    pub fold: usize,
    pub pearson: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub quantity: String,
    pub mean: f64,
    pub std: f64,
}

impl BiasReport {
    pub fn rows(&self) -> Vec<BiasRow> {
        vec![
            BiasRow { quantity: "identical_pair_label".into(), mean: self.label.mean, std: self.label.std },
            BiasRow { quantity: "learned_bias".into(), mean: self.learned.mean, std: self.learned.std },
        ]
    }
}

/// Whether `values` never decreases, allowing `inversions` steps down.
pub fn nearly_non_decreasing(values: &[f64], inversions: usize) -> bool {
    values.windows(2).filter(|w| w[1] < w[0]).count() <= inversions
}
