//! Descriptor-selection baseline: mixtures are averaged descriptor vectors,
//! the predicted distance is the angle between them, and the descriptor
//! subset is chosen by random search on the training pairs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Corpus;
use crate::descriptors::DescriptorTable;
use crate::error::{Error, Result};
use crate::metrics::{mean, std_dev, MetricReport};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnitzConfig {
    pub min_features: usize,
    pub max_features: usize,
    /// Random subsets per candidate size.
    pub size_samples: usize,
    /// Random companion subsets when scoring single descriptors.
    pub feature_samples: usize,
    /// Random subsets drawn from the positively scored descriptors.
    pub final_samples: usize,
    pub seed: u64,
}

impl Default for SnitzConfig {
    fn default() -> Self {
        SnitzConfig {
            min_features: 2,
            max_features: 200,
            size_samples: 20_000,
            feature_samples: 2_000,
            final_samples: 4_000,
            seed: 0,
        }
    }
}

/// `arccos(cos)/π`, or `None` when either vector is zero.
pub fn angle_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((dot / (aa * bb).sqrt()).clamp(-1.0, 1.0).acos() / std::f64::consts::PI)
}

/// Mean descriptor vector of every mixture.
pub fn mixture_vectors(corpus: &Corpus, table: &DescriptorTable) -> Result<Vec<Vec<f64>>> {
    corpus
        .mixtures
        .iter()
        .map(|m| {
            let mut acc = vec![0.0; table.width()];
            for c in &m.components {
                for (a, x) in acc.iter_mut().zip(table.get(c)?) {
                    *a += x;
                }
            }
            acc.iter_mut().for_each(|a| *a /= m.components.len() as f64);
            Ok(acc)
        })
        .collect()
}

/// `max(0, -(rmse - mean) / std)`; zero when the spread is zero.
pub fn descriptor_score(rmse: f64, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    (-(rmse - mean) / std).max(0.0)
}

/// Per-pair products of the two mixture vectors, laid out for scoring many
/// weighted descriptor subsets with matrix products.
pub struct PairFeatures {
    width: usize,
    cross: Vec<f32>,
    left: Vec<f32>,
    right: Vec<f32>,
    targets: Vec<f64>,
}

impl PairFeatures {
    pub fn new(a: &[&[f64]], b: &[&[f64]], targets: &[f64]) -> Result<Self> {
        if a.len() != b.len() || a.len() != targets.len() || a.is_empty() {
            return Err(Error::Data("pair features need equal, nonzero numbers of rows".into()));
        }
        let width = a[0].len();
        let mut cross = Vec::with_capacity(a.len() * width);
        let mut left = Vec::with_capacity(a.len() * width);
        let mut right = Vec::with_capacity(a.len() * width);
        for (x, y) in a.iter().zip(b) {
            if x.len() != width || y.len() != width {
                return Err(Error::Data("descriptor vectors differ in width".into()));
            }
            for k in 0..width {
                cross.push((x[k] * y[k]) as f32);
                left.push((x[k] * x[k]) as f32);
                right.push((y[k] * y[k]) as f32);
            }
        }
        Ok(PairFeatures { width, cross, left, right, targets: targets.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// RMSE of the angle model for each row of `weights` (`[s, width]`,
    /// descriptor multiplicities). Pairs with a zero vector are skipped;
    /// a subset that leaves no pair gives NaN.
    pub fn rmse_for(&self, weights: &[f32]) -> Vec<f64> {
        let (p, k) = (self.len(), self.width);
        let s = weights.len() / k;
        let mut dot = vec![0f32; p * s];
        let mut aa = vec![0f32; p * s];
        let mut bb = vec![0f32; p * s];
        f32::gemm(p, k, s, &self.cross, false, weights, true, &mut dot, 0.0);
        f32::gemm(p, k, s, &self.left, false, weights, true, &mut aa, 0.0);
        f32::gemm(p, k, s, &self.right, false, weights, true, &mut bb, 0.0);
        let mut sq = vec![0.0f64; s];
        let mut count = vec![0usize; s];
        for i in 0..p {
            for j in 0..s {
                let (d, x, y) = (dot[i * s + j] as f64, aa[i * s + j] as f64, bb[i * s + j] as f64);
                if x <= 0.0 || y <= 0.0 {
                    continue;
                }
                let pred = (d / (x * y).sqrt()).clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
                sq[j] += (pred - self.targets[i]).powi(2);
                count[j] += 1;
            }
        }
        sq.iter().zip(&count).map(|(e, &c)| if c == 0 { f64::NAN } else { (e / c as f64).sqrt() }).collect()
    }

    /// Scores subsets in chunks to bound memory.
    fn rmse_for_subsets(&self, subsets: &[Vec<usize>]) -> Vec<f64> {
        const CHUNK: usize = 256;
        let mut out = Vec::with_capacity(subsets.len());
        for chunk in subsets.chunks(CHUNK) {
            let mut w = vec![0f32; chunk.len() * self.width];
            for (r, subset) in chunk.iter().enumerate() {
                for &f in subset {
                    w[r * self.width + f] += 1.0;
                }
            }
            out.extend(self.rmse_for(&w));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeStat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnitzSelection {
    /// Chosen subset size.
    pub n: usize,
    pub size_curve: Vec<SizeStat>,
    pub feature_rmse: Vec<f64>,
    pub scores: Vec<f64>,
    pub features: Vec<usize>,
    pub train_rmse: f64,
}

fn finite(v: &[f64]) -> Vec<f64> {
    v.iter().copied().filter(|x| x.is_finite()).collect()
}

/// Three-stage random search over descriptor subsets using training pairs only.
pub fn select_features(train: &PairFeatures, cfg: &SnitzConfig) -> Result<SnitzSelection> {
    let k = train.width;
    let lo = cfg.min_features.max(1);
    let hi = cfg.max_features.min(k);
    if lo > hi {
        return Err(Error::Config(format!("descriptor count range {lo}..={hi} is empty")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut size_curve = Vec::new();
    for n in lo..=hi {
        let subsets: Vec<Vec<usize>> = (0..cfg.size_samples).map(|_| sample(&mut rng, k, n).into_vec()).collect();
        let r = finite(&train.rmse_for_subsets(&subsets));
        if r.is_empty() {
            continue;
        }
        size_curve.push(SizeStat { n, mean: mean(&r), std: std_dev(&r) });
    }
    let n = size_curve
        .iter()
        .min_by(|a, b| (a.mean - a.std).total_cmp(&(b.mean - b.std)))
        .map(|s| s.n)
        .ok_or_else(|| Error::Data("no descriptor subset gave a usable prediction".into()))?;

    let companions: Vec<Vec<usize>> =
        (0..cfg.feature_samples).map(|_| sample(&mut rng, k, n - 1).into_vec()).collect();
    let mut feature_rmse = Vec::with_capacity(k);
    for f in 0..k {
        let subsets: Vec<Vec<usize>> = companions
            .iter()
            .map(|c| {
                let mut s = c.clone();
                s.push(f);
                s
            })
            .collect();
        let r = finite(&train.rmse_for_subsets(&subsets));
        feature_rmse.push(if r.is_empty() { f64::NAN } else { mean(&r) });
    }
    let usable = finite(&feature_rmse);
    let (mu, sigma) = (mean(&usable), std_dev(&usable));
    let scores: Vec<f64> =
        feature_rmse.iter().map(|&r| if r.is_finite() { descriptor_score(r, mu, sigma) } else { 0.0 }).collect();
    let mut pool: Vec<usize> = (0..k).filter(|&f| scores[f] > 0.0).collect();
    if pool.is_empty() {
        log::warn!("no descriptor scored above average; drawing from all of them");
        pool = (0..k).collect();
    }
    let take = n.min(pool.len());
    let candidates: Vec<Vec<usize>> = (0..cfg.final_samples.max(1))
        .map(|_| {
            let mut s: Vec<usize> = sample(&mut rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
            s.sort_unstable();
            s
        })
        .collect();
    let r = train.rmse_for_subsets(&candidates);
    let best = (0..candidates.len())
        .filter(|&i| r[i].is_finite())
        .min_by(|&a, &b| r[a].total_cmp(&r[b]))
        .ok_or_else(|| Error::Data("no final descriptor subset gave a usable prediction".into()))?;
    Ok(SnitzSelection { n, size_curve, feature_rmse, scores, features: candidates[best].clone(), train_rmse: r[best] })
}

/// Angle distance restricted to the selected descriptors.
pub fn predict(selection: &SnitzSelection, a: &[f64], b: &[f64]) -> Option<f64> {
    let pick = |v: &[f64]| selection.features.iter().map(|&f| v[f]).collect::<Vec<_>>();
    angle_distance(&pick(a), &pick(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnitzReport {
    pub selection: SnitzSelection,
    pub feature_names: Vec<String>,
    pub metrics: MetricReport,
    pub predictions: Vec<(usize, f64)>,
    pub skipped: Vec<usize>,
}

/// Selects descriptors on `train` pairs, then scores `test` pairs.
pub fn snitz_baseline(
    corpus: &Corpus,
    vectors: &[Vec<f64>],
    feature_names: &[String],
    train: &[usize],
    test: &[usize],
    cfg: &SnitzConfig,
) -> Result<SnitzReport> {
    let rows = |idx: &[usize]| -> (Vec<&[f64]>, Vec<&[f64]>, Vec<f64>) {
        let a = idx.iter().map(|&i| vectors[corpus.pairs[i].a].as_slice()).collect();
        let b = idx.iter().map(|&i| vectors[corpus.pairs[i].b].as_slice()).collect();
        let t = idx.iter().map(|&i| corpus.pairs[i].distance).collect();
        (a, b, t)
    };
    let (a, b, t) = rows(train);
    let selection = select_features(&PairFeatures::new(&a, &b, &t)?, cfg)?;
    let (mut y, mut p, mut predictions, mut skipped) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in test {
        let pair = &corpus.pairs[i];
        match predict(&selection, &vectors[pair.a], &vectors[pair.b]) {
            Some(d) => {
                y.push(pair.distance);
                p.push(d);
                predictions.push((i, d));
            }
            None => {
                log::warn!("pair {i} has a zero descriptor vector; skipped");
                skipped.push(i);
            }
        }
    }
    let metrics = MetricReport::lenient(&y, &p)?;
    let feature_names = selection.features.iter().map(|&f| feature_names.get(f).cloned().unwrap_or_default()).collect();
    Ok(SnitzReport { selection, feature_names, metrics, predictions, skipped })
}
