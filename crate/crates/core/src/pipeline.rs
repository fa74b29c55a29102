//! End-to-end runs over prepared data directories: data preparation, encoder
//! pre-training, per-fold mixture training, evaluation, the descriptor
//! baseline and the post-hoc analyses. Models train in f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pommix_smiles::parse_smiles;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AttentionMap, BiasReport, KeyHit, ModelRow, SplitRow, ThresholdRow, WhiteNoiseReport};
use crate::checkpoint::{self, Manifest};
use crate::chemix::{Chemix, ChemixConfig, HeadKind, MixtureLayout};
use crate::datasets::{
    augment_with_jaccard, filter_labels, make_cv_splits, make_lmo_splits, make_size_threshold_splits,
    read_raw_labels, Corpus, FilterReport, MonoDataset, SplitKind, SplitSpec, DEFAULT_THRESHOLDS,
};
use crate::descriptors::{DescriptorTable, NormStats};
use crate::error::{Error, Result};
use crate::featurize::{build_graph_tensors, GraphTensors, DESCRIPTOR_DIM};
use crate::graph::Graph;
use crate::metrics::{macro_auroc, MetricReport, MetricSummary};
use crate::params::ParamStore;
use crate::pom::{embed_molecules, Glm, Pom, PomConfig};
use crate::snitz::{mixture_vectors, snitz_baseline, SnitzConfig, SnitzReport};
use crate::tensor::Tensor;
use crate::training::{
    self, finetune, pretrain_pom, step_seed, train_chemix, write_log, LabeledMolecules, MixtureSet, Molecules,
    PairBatch, TrainOutcome, TrainPlan,
};

pub const RAW_LABELS: &str = "gslf.csv";
pub const MOLECULES: &str = "molecules.csv";
pub const METRICS: &str = "metrics.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const LOG: &str = "log.csv";
const EMBED_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitParams {
    pub cv_folds: usize,
    pub lmo_folds: usize,
    pub lmo_test_frac: f64,
    pub thresholds: Vec<f64>,
}

impl Default for SplitParams {
    fn default() -> Self {
        SplitParams { cv_folds: 5, lmo_folds: 5, lmo_test_frac: 0.2, thresholds: DEFAULT_THRESHOLDS.to_vec() }
    }
}

/// Everything a run needs besides paths. Stage plans take their seeds from
/// `seed`; the `seed` keys inside them are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub augment_jaccard: bool,
    pub pom: PomConfig,
    pub chemix: ChemixConfig,
    pub pretrain: TrainPlan,
    pub train: TrainPlan,
    pub finetune: TrainPlan,
    pub snitz: SnitzConfig,
    pub splits: SplitParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            augment_jaccard: false,
            pom: PomConfig::default(),
            chemix: ChemixConfig::default(),
            pretrain: TrainPlan::pretrain_pom(0),
            train: TrainPlan::train_chemix(0),
            finetune: TrainPlan::finetune(0),
            snitz: SnitzConfig::default(),
            splits: SplitParams::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value, path: &str) -> Result<()> {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    // learning-rate maps may name new groups
                    Some(slot) if !(here.ends_with(".lr") && v.is_table()) => merge(slot, v, &here)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown config key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

impl RunConfig {
    /// Parses a TOML file laid over the defaults; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let over: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))?;
        let mut base = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, over, "")?;
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.pom.validate()?;
        self.chemix.validate()?;
        for plan in [&self.pretrain, &self.train, &self.finetune] {
            plan.validate()?;
        }
        Ok(())
    }

    fn plan(&self, plan: &TrainPlan, salt: usize) -> TrainPlan {
        TrainPlan { seed: step_seed(self.seed, salt, 0), ..plan.clone() }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub mixtures: usize,
    pub pairs: usize,
    pub molecules: usize,
    pub identical_pairs: usize,
    pub identical_nonzero: usize,
    pub pairs_by_source: BTreeMap<String, usize>,
}

impl CorpusReport {
    pub fn of(corpus: &Corpus) -> Self {
        let identical = corpus.identical_pairs();
        let mut pairs_by_source = BTreeMap::new();
        for p in &corpus.pairs {
            *pairs_by_source.entry(p.dataset.clone()).or_insert(0) += 1;
        }
        CorpusReport {
            mixtures: corpus.mixtures.len(),
            pairs: corpus.pairs.len(),
            molecules: corpus.molecules().len(),
            identical_nonzero: identical.iter().filter(|&&i| corpus.pairs[i].distance != 0.0).count(),
            identical_pairs: identical.len(),
            pairs_by_source,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub filter: Option<FilterReport>,
    pub retained_molecules: Option<usize>,
    pub retained_labels: Option<usize>,
    pub corpus: Option<CorpusReport>,
}

/// Filters `gslf.csv` and compiles `mixtures.csv` + `pairs.csv` from `raw`
/// into `out`. Either input may be absent but not both. With a descriptor
/// table, every mixture molecule must have a row.
pub fn prepare_data(raw: &Path, out: &Path, descriptors: Option<&DescriptorTable>) -> Result<PrepareReport> {
    let labels = raw.join(RAW_LABELS);
    let has_corpus = raw.join("mixtures.csv").exists() || raw.join("pairs.csv").exists();
    if !labels.exists() && !has_corpus {
        return Err(Error::Data(format!(
            "{}: neither {RAW_LABELS} nor mixtures.csv/pairs.csv found",
            raw.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut report = PrepareReport { filter: None, retained_molecules: None, retained_labels: None, corpus: None };
    if labels.exists() {
        let (names, rows) = read_raw_labels(&labels)?;
        let (mono, filter) = filter_labels(&names, &rows)?;
        mono.write_csv(&out.join(MOLECULES))?;
        report.retained_molecules = Some(mono.len());
        report.retained_labels = Some(mono.label_names.len());
        report.filter = Some(filter);
    }
    if has_corpus {
        let corpus = Corpus::load(raw)?;
        if let Some(table) = descriptors {
            let missing: Vec<String> = corpus.molecules().into_iter().filter(|m| !table.contains(m)).collect();
            if !missing.is_empty() {
                return Err(Error::Data(format!(
                    "{} mixture molecules lack descriptors, first {}",
                    missing.len(),
                    missing[0]
                )));
            }
        }
        corpus.write(out)?;
        report.corpus = Some(CorpusReport::of(&corpus));
    }
    write_json(&out.join("prepare_report.json"), &report)?;
    Ok(report)
}

/// A prepared data directory.
pub struct Prepared {
    pub mono: Option<MonoDataset>,
    pub corpus: Option<Corpus>,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        let m = dir.join(MOLECULES);
        let mono = if m.exists() { Some(MonoDataset::read_csv(&m)?) } else { None };
        let corpus = if dir.join("pairs.csv").exists() { Some(Corpus::load(dir)?) } else { None };
        if mono.is_none() && corpus.is_none() {
            return Err(Error::Data(format!("{}: no prepared data found", dir.display())));
        }
        Ok(Prepared { mono, corpus })
    }

    pub fn mono(&self) -> Result<&MonoDataset> {
        self.mono.as_ref().ok_or_else(|| Error::Data(format!("prepared data has no {MOLECULES}")))
    }

    pub fn corpus(&self) -> Result<&Corpus> {
        self.corpus.as_ref().ok_or_else(|| Error::Data("prepared data has no mixture corpus".into()))
    }
}

pub fn make_splits(corpus: &Corpus, params: &SplitParams, seed: u64) -> Result<Vec<SplitSpec>> {
    Ok(vec![
        make_cv_splits(corpus, params.cv_folds, seed)?,
        make_lmo_splits(corpus, params.lmo_folds, params.lmo_test_frac, seed)?,
        make_size_threshold_splits(corpus, &params.thresholds, seed)?,
    ])
}

pub fn split_file_name(kind: SplitKind) -> &'static str {
    match kind {
        SplitKind::Cv5 => "cv5.json",
        SplitKind::Lmo => "lmo.json",
        SplitKind::SizeThreshold => "size_threshold.json",
    }
}

fn check_width(table: &DescriptorTable) -> Result<()> {
    if table.width() != DESCRIPTOR_DIM {
        return Err(Error::Data(format!(
            "descriptor table has {} columns, the encoder expects {DESCRIPTOR_DIM}",
            table.width()
        )));
    }
    Ok(())
}

/// Graph tensors for canonical SMILES, with descriptors already normalized.
pub fn featurize(smiles: &[String], normalized: &DescriptorTable) -> Result<Vec<GraphTensors>> {
    smiles
        .iter()
        .map(|s| build_graph_tensors(&parse_smiles(s)?, normalized))
        .collect()
}

pub struct EncoderRun {
    pub pom: Pom,
    pub glm: Glm,
    pub store: ParamStore<f32>,
    pub manifest: Manifest,
    pub outcome: TrainOutcome,
    pub metrics: EncoderMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderMetrics {
    pub molecules: usize,
    pub labels: usize,
    pub train: usize,
    pub val: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val_macro_auroc: f64,
    pub labels_scored: usize,
    pub labels_skipped: usize,
}

/// Fits descriptor normalization on the labeled molecules and pre-trains the
/// encoder with its label head.
pub fn pretrain_encoder(mono: &MonoDataset, raw_table: &DescriptorTable, config: &RunConfig) -> Result<EncoderRun> {
    check_width(raw_table)?;
    if mono.is_empty() {
        return Err(Error::Data("no labeled molecules to pre-train on".into()));
    }
    let smiles: Vec<String> = mono.records.iter().map(|r| r.smiles.clone()).collect();
    let norm = NormStats::fit(raw_table, smiles.iter().map(String::as_str))?;
    let graphs = featurize(&smiles, &raw_table.normalized(&norm)?)?;
    let labels = mono.label_matrix();
    let num_labels = mono.label_names.len();
    let plan = config.plan(&config.pretrain, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut store = ParamStore::<f32>::new();
    let pom = Pom::new(&mut store, config.pom.clone(), &mut rng)?;
    let glm = Glm::new(&mut store, config.pom.embedding_dim, num_labels, &mut rng)?;
    let data = LabeledMolecules { graphs: &graphs, labels: &labels, num_labels };
    let run = pretrain_pom(&pom, &glm, &mut store, &data, &plan)?;
    let scored = if run.val.is_empty() { &run.train } else { &run.val };
    let refs: Vec<&GraphTensors> = scored.iter().map(|&i| &graphs[i]).collect();
    let scores = training::predict_labels(&pom, &glm, &store, &refs, EMBED_BATCH)?;
    let truth: Vec<bool> =
        scored.iter().flat_map(|&i| labels[i * num_labels..(i + 1) * num_labels].iter().copied()).collect();
    let auroc = macro_auroc(&truth, &scores, num_labels)?;
    let metrics = EncoderMetrics {
        molecules: smiles.len(),
        labels: num_labels,
        train: run.train.len(),
        val: run.val.len(),
        best_epoch: run.outcome.best_epoch,
        epochs_run: run.outcome.epochs_run,
        val_macro_auroc: auroc.value,
        labels_scored: auroc.counted,
        labels_skipped: auroc.skipped.len(),
    };
    let mut manifest = Manifest::new("pom", config.seed);
    manifest.pom = Some(config.pom.clone());
    manifest.label_names = mono.label_names.clone();
    manifest.norm = Some(norm);
    manifest.wiring = config.pom.wiring();
    manifest.notes.insert("plan".into(), serde_json::to_value(&plan)?);
    manifest.notes.insert("best_epoch".into(), run.outcome.best_epoch.into());
    Ok(EncoderRun { pom, glm, store, manifest, outcome: run.outcome, metrics })
}

impl EncoderRun {
    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.manifest, &self.store)?;
        write_log(&dir.join(LOG), &self.outcome.log)?;
        write_json(&dir.join(METRICS), &self.metrics)
    }
}

/// Encoder weights and normalization from any checkpoint that has them.
pub struct Encoder {
    pub pom: Pom,
    pub store: ParamStore<f32>,
    pub norm: NormStats,
    pub label_names: Vec<String>,
}

impl Encoder {
    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, saved) = checkpoint::load::<f32>(dir)?;
        let config = manifest
            .pom
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no molecule encoder", dir.display())))?;
        let norm = manifest
            .norm
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no descriptor normalization", dir.display())))?;
        let mut store = ParamStore::new();
        let pom = Pom::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0))?;
        checkpoint::restore_into(&mut store, &saved)?;
        Ok(Encoder { pom, store, norm, label_names: manifest.label_names })
    }

    /// Embeddings of `smiles` in input order.
    pub fn embed(&self, smiles: &[String], raw_table: &DescriptorTable) -> Result<Tensor<f32>> {
        check_width(raw_table)?;
        let graphs = featurize(smiles, &raw_table.normalized(&self.norm)?)?;
        let refs: Vec<&GraphTensors> = graphs.iter().collect();
        embed_molecules(&self.pom, &self.store, &refs, EMBED_BATCH)
    }
}

pub fn write_embeddings(path: &Path, smiles: &[String], emb: &Tensor<f32>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["smiles".to_string()];
    header.extend((0..emb.width()).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (i, s) in smiles.iter().enumerate() {
        let mut rec = vec![s.clone()];
        rec.extend(emb.row(i).iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Corpus molecules featurized with an encoder's normalization.
pub struct MixtureData<'a> {
    pub corpus: &'a Corpus,
    pub molecules: Vec<String>,
    pub graphs: Vec<GraphTensors>,
    pub set: MixtureSet,
    pub mono: Option<&'a MonoDataset>,
}

impl<'a> MixtureData<'a> {
    pub fn new(
        corpus: &'a Corpus,
        mono: Option<&'a MonoDataset>,
        raw_table: &DescriptorTable,
        norm: &NormStats,
    ) -> Result<Self> {
        check_width(raw_table)?;
        let molecules = corpus.molecules();
        let graphs = featurize(&molecules, &raw_table.normalized(norm)?)?;
        let set = MixtureSet::from_corpus(corpus, &molecules)?;
        Ok(MixtureData { corpus, molecules, graphs, set, mono })
    }
}

/// Encoder plus mixture model sharing one store.
pub struct MixtureModel {
    pub pom: Pom,
    pub chemix: Chemix,
    pub store: ParamStore<f32>,
    pub manifest: Manifest,
}

impl MixtureModel {
    fn fresh(encoder: &Encoder, config: &ChemixConfig, seed: u64) -> Result<Self> {
        let mut store = encoder.store.clone();
        let config = ChemixConfig { input_dim: encoder.pom.config.embedding_dim, ..config.clone() };
        let chemix = Chemix::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut manifest = Manifest::new("chemix", seed);
        manifest.pom = Some(encoder.pom.config.clone());
        manifest.chemix = Some(chemix.config.clone());
        manifest.norm = Some(encoder.norm.clone());
        manifest.label_names = encoder.label_names.clone();
        manifest.wiring = encoder.pom.config.wiring();
        manifest.wiring.extend(chemix.config.wiring());
        Ok(MixtureModel { pom: encoder.pom.clone(), chemix, store, manifest })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, saved) = checkpoint::load::<f32>(dir)?;
        let missing = || Error::Checkpoint(format!("{}: not a mixture model checkpoint", dir.display()));
        let pom_config = manifest.pom.clone().ok_or_else(missing)?;
        let chemix_config = manifest.chemix.clone().ok_or_else(missing)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pom = Pom::new(&mut store, pom_config, &mut rng)?;
        let chemix = Chemix::new(&mut store, chemix_config, &mut rng)?;
        checkpoint::restore_into(&mut store, &saved)?;
        Ok(MixtureModel { pom, chemix, store, manifest })
    }

    pub fn norm(&self) -> Result<&NormStats> {
        self.manifest.norm.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no descriptor normalization".into()))
    }

    pub fn embeddings(&self, data: &MixtureData) -> Result<Tensor<f32>> {
        let refs: Vec<&GraphTensors> = data.graphs.iter().collect();
        embed_molecules(&self.pom, &self.store, &refs, EMBED_BATCH)
    }

    /// Predicted distances for corpus pairs, in the given order.
    pub fn predict(&self, data: &MixtureData, pairs: &[usize]) -> Result<Vec<f64>> {
        let emb = self.embeddings(data)?;
        PairBatch::new(&data.set, pairs, &Molecules::Embedded(&emb), false)?.predict(&self.store, &self.chemix, None)
    }

    /// The learned constant of the distance head, if it has one.
    pub fn head_bias(&self) -> Option<f64> {
        let name = match self.chemix.config.head {
            HeadKind::ScaledCosine => self.chemix.head.bias.clone()?,
            HeadKind::Cosine => return None,
            _ => self.chemix.head.linear.as_ref()?.bias.clone()?,
        };
        self.store.value(&name).ok().map(|t| t.item() as f64)
    }

    /// Head-averaged weights of the last attention layer for every mixture.
    pub fn attention_maps(&self, data: &MixtureData) -> Result<Vec<AttentionMap>> {
        if self.chemix.config.attention_layers == 0 {
            return Err(Error::Config("the mixture model has no attention layers".into()));
        }
        let emb = self.embeddings(data)?;
        let layer = self.chemix.config.attention_layers - 1;
        let mut out = Vec::with_capacity(data.set.mixtures.len());
        let all: Vec<usize> = (0..data.set.mixtures.len()).collect();
        for chunk in all.chunks(64) {
            let mixtures: Vec<&[usize]> = chunk.iter().map(|&m| data.set.mixtures[m].as_slice()).collect();
            let layout = MixtureLayout::new(&mixtures, None)?;
            let mut g = Graph::eval();
            let rows = g.constant(emb.clone());
            let enc = self.chemix.encode(&mut g, &self.store, rows, &layout)?;
            for (k, &m) in chunk.iter().enumerate() {
                let mixture = &data.corpus.mixtures[m];
                out.push(AttentionMap {
                    mixture_id: mixture.id.clone(),
                    smiles: mixture.components.clone(),
                    weights: self.chemix.attention_map(&g, &enc, &layout, k, layer),
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.manifest, &self.store)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureStage {
    /// Mixture model on frozen encoder embeddings.
    Chemix,
    /// Encoder and mixture model trained together.
    Pommix,
}

/// Where the models of a run start from.
pub enum Init<'a> {
    Encoder(&'a Encoder),
    /// Per-fold mixture checkpoints of an earlier run.
    Folds(&'a Path),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub threshold: Option<f64>,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub test: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub model: String,
    pub split_kind: SplitKind,
    pub folds: Vec<FoldMetrics>,
    pub summary: MetricSummary,
}

impl RunMetrics {
    fn new(model: &str, split_kind: SplitKind, folds: Vec<FoldMetrics>) -> Self {
        let reports: Vec<MetricReport> = folds.iter().map(|f| f.test).collect();
        RunMetrics { model: model.into(), split_kind, summary: MetricSummary::of(&reports), folds }
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        self.folds.iter().map(|f| f.test).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: usize,
    pub pair: usize,
    pub dataset: String,
    pub target: f64,
    pub prediction: f64,
}

pub struct RunResult {
    pub metrics: RunMetrics,
    pub predictions: Vec<PredictionRow>,
}

impl RunResult {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(METRICS), &self.metrics)?;
        analysis::write_rows(&dir.join(PREDICTIONS), &self.predictions)
    }
}

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold{fold}"))
}

fn thresholds(splits: &SplitSpec) -> Vec<Option<f64>> {
    let listed: Vec<f64> = splits.params["thresholds"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
        .unwrap_or_default();
    (0..splits.folds.len()).map(|f| listed.get(f).copied()).collect()
}

fn test_rows(data: &MixtureData, fold: usize, pairs: &[usize], pred: &[f64]) -> Vec<PredictionRow> {
    pairs
        .iter()
        .zip(pred)
        .map(|(&p, &d)| PredictionRow {
            fold,
            pair: p,
            dataset: data.corpus.pairs[p].dataset.clone(),
            target: data.corpus.pairs[p].distance,
            prediction: d,
        })
        .collect()
}

fn score(fold: usize, pred: &[f64], targets: &[f64]) -> Result<MetricReport> {
    MetricReport::lenient(targets, pred).map_err(|e| Error::Metric(format!("fold {fold}: {e}")))
}

/// Trains one model per fold and scores it on the fold's test pairs. With
/// `out`, each fold's checkpoint and log go to `out/fold{k}`.
pub fn train_folds(
    stage: MixtureStage,
    data: &MixtureData,
    init: &Init,
    splits: &SplitSpec,
    config: &RunConfig,
    out: Option<&Path>,
) -> Result<RunResult> {
    splits.validate(data.corpus.pairs.len())?;
    let augmented = match (config.augment_jaccard, data.mono) {
        (false, _) => None,
        (true, None) => return Err(Error::Data(format!("label augmentation needs {MOLECULES}"))),
        (true, Some(mono)) => {
            let pairs = augment_with_jaccard(mono, Some(&data.molecules));
            log::info!("{} label-similarity pairs for mixture pre-training", pairs.len());
            if pairs.is_empty() { None } else { Some(MixtureSet::from_augmented(&pairs, &data.molecules)?) }
        }
    };
    let cuts = thresholds(splits);
    let mut folds = Vec::new();
    let mut predictions = Vec::new();
    for (f, fold) in splits.folds.iter().enumerate() {
        let seed = step_seed(config.seed, 100 + f, 0);
        let mut model = match init {
            Init::Encoder(enc) => MixtureModel::fresh(enc, &config.chemix, seed)?,
            Init::Folds(dir) => MixtureModel::load(&fold_dir(dir, f))?,
        };
        let mut notes = BTreeMap::new();
        if let Some(aug) = &augmented {
            if matches!(init, Init::Encoder(_)) {
                let emb = model.embeddings(data)?;
                let all: Vec<usize> = (0..aug.pairs.len()).collect();
                let plan = TrainPlan { seed: step_seed(seed, 1, 0), ..config.train.clone() };
                let o = train_chemix(&model.chemix, &mut model.store, aug, &emb, &all, &[], &plan)?;
                notes.insert("augmentation_best_epoch".to_string(), serde_json::Value::from(o.best_epoch));
            }
        }
        let outcome = match stage {
            MixtureStage::Chemix => {
                let emb = model.embeddings(data)?;
                let plan = TrainPlan { seed, ..config.train.clone() };
                notes.insert("plan".into(), serde_json::to_value(&plan)?);
                train_chemix(&model.chemix, &mut model.store, &data.set, &emb, &fold.train, &fold.val, &plan)?
            }
            MixtureStage::Pommix => {
                let plan = TrainPlan { seed, ..config.finetune.clone() };
                notes.insert("plan".into(), serde_json::to_value(&plan)?);
                finetune(&model.pom, &model.chemix, &mut model.store, &data.set, &data.graphs, &fold.train, &fold.val, &plan)?
            }
        };
        let pred = model.predict(data, &fold.test)?;
        let targets: Vec<f64> = fold.test.iter().map(|&p| data.corpus.pairs[p].distance).collect();
        folds.push(FoldMetrics {
            fold: f,
            threshold: cuts[f],
            train_pairs: fold.train.len(),
            val_pairs: fold.val.len(),
            best_epoch: Some(outcome.best_epoch),
            epochs_run: Some(outcome.epochs_run),
            test: score(f, &pred, &targets)?,
        });
        predictions.extend(test_rows(data, f, &fold.test, &pred));
        if let Some(out) = out {
            let dir = fold_dir(out, f);
            model.manifest.kind = match stage {
                MixtureStage::Chemix => "chemix",
                MixtureStage::Pommix => "pommix",
            }
            .into();
            model.manifest.seed = seed;
            notes.insert("fold".into(), f.into());
            notes.insert("split_kind".into(), serde_json::to_value(splits.kind)?);
            notes.insert("best_epoch".into(), outcome.best_epoch.into());
            model.manifest.notes.extend(notes);
            model.save(&dir)?;
            write_log(&dir.join(LOG), &outcome.log)?;
        }
    }
    let name = match stage {
        MixtureStage::Chemix => "chemix",
        MixtureStage::Pommix => "pommix",
    };
    Ok(RunResult { metrics: RunMetrics::new(name, splits.kind, folds), predictions })
}

/// Mixture models of a run directory: `fold{k}` subdirectories, or a single
/// checkpoint used for every fold.
pub struct TrainedRun {
    pub name: String,
    folds: Vec<MixtureModel>,
}

impl TrainedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "model".into());
        if dir.join(checkpoint::MANIFEST).exists() {
            return Ok(TrainedRun { name, folds: vec![MixtureModel::load(dir)?] });
        }
        let mut folds = Vec::new();
        while fold_dir(dir, folds.len()).join(checkpoint::MANIFEST).exists() {
            folds.push(MixtureModel::load(&fold_dir(dir, folds.len()))?);
        }
        if folds.is_empty() {
            return Err(Error::Checkpoint(format!("{}: no checkpoint or fold directories", dir.display())));
        }
        Ok(TrainedRun { name, folds })
    }

    pub fn num_models(&self) -> usize {
        self.folds.len()
    }

    pub fn model(&self, fold: usize) -> Result<&MixtureModel> {
        if self.folds.len() == 1 {
            return Ok(&self.folds[0]);
        }
        self.folds.get(fold).ok_or_else(|| {
            Error::Checkpoint(format!("{}: no model for fold {fold} ({} folds saved)", self.name, self.folds.len()))
        })
    }

    pub fn data<'a>(&self, corpus: &'a Corpus, raw_table: &DescriptorTable) -> Result<MixtureData<'a>> {
        MixtureData::new(corpus, None, raw_table, self.folds[0].norm()?)
    }

    /// Each fold's model on its test pairs.
    pub fn evaluate(&self, data: &MixtureData, splits: &SplitSpec) -> Result<RunResult> {
        splits.validate(data.corpus.pairs.len())?;
        let cuts = thresholds(splits);
        let mut folds = Vec::new();
        let mut predictions = Vec::new();
        for (f, fold) in splits.folds.iter().enumerate() {
            let model = self.model(f)?;
            let pred = model.predict(data, &fold.test)?;
            let targets: Vec<f64> = fold.test.iter().map(|&p| data.corpus.pairs[p].distance).collect();
            folds.push(FoldMetrics {
                fold: f,
                threshold: cuts[f],
                train_pairs: fold.train.len(),
                val_pairs: fold.val.len(),
                best_epoch: model.manifest.notes.get("best_epoch").and_then(|v| v.as_u64()).map(|v| v as usize),
                epochs_run: None,
                test: score(f, &pred, &targets)?,
            });
            predictions.extend(test_rows(data, f, &fold.test, &pred));
        }
        Ok(RunResult { metrics: RunMetrics::new(&self.name, splits.kind, folds), predictions })
    }

    /// Out-of-fold predictions: every test pair scored by its fold's model,
    /// the first fold winning when test sets overlap.
    pub fn out_of_fold(&self, data: &MixtureData, splits: &SplitSpec) -> Result<Vec<(usize, f64)>> {
        let mut seen = std::collections::BTreeMap::new();
        for (f, fold) in splits.folds.iter().enumerate() {
            let todo: Vec<usize> = fold.test.iter().copied().filter(|p| !seen.contains_key(p)).collect();
            if todo.is_empty() {
                continue;
            }
            for (p, d) in todo.iter().zip(self.model(f)?.predict(data, &todo)?) {
                seen.insert(*p, d);
            }
        }
        Ok(seen.into_iter().collect())
    }

    pub fn head_biases(&self) -> Vec<f64> {
        self.folds.iter().filter_map(|m| m.head_bias()).collect()
    }
}

pub fn fig3_rows(runs: &[RunMetrics]) -> Vec<ModelRow> {
    runs.iter().map(|r| ModelRow::new(&r.model, &r.reports())).collect()
}

pub fn fig4a_rows(run: &RunMetrics) -> Vec<ThresholdRow> {
    run.folds
        .iter()
        .map(|f| ThresholdRow {
            threshold: f.threshold.unwrap_or(f64::NAN),
            train_pairs: f.train_pairs,
            test_pairs: f.test.n,
            pearson: f.test.pearson,
            rmse: f.test.rmse,
            kendall: f.test.kendall_tau,
        })
        .collect()
}

pub fn fig4b_rows(run: &RunMetrics) -> Vec<SplitRow> {
    let split = match run.split_kind {
        SplitKind::Cv5 => "cv",
        SplitKind::Lmo => "lmo",
        SplitKind::SizeThreshold => "size_threshold",
    };
    run.folds.iter().map(|f| SplitRow { split: split.into(), fold: f.fold, pearson: f.test.pearson }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub models: Vec<RunMetrics>,
}

/// Writes `metrics.json` and the figure tables that fit the split kind.
pub fn write_evaluation(dir: &Path, runs: &[RunResult]) -> Result<()> {
    let models: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    write_json(&dir.join(METRICS), &EvaluationReport { models: models.clone() })?;
    let mut preds = Vec::new();
    for r in runs {
        preds.extend(r.predictions.iter().cloned().map(|p| (r.metrics.model.clone(), p)));
    }
    #[derive(Serialize)]
    struct Row {
        model: String,
        #[serde(flatten)]
        row: PredictionRow,
    }
    let rows: Vec<Row> = preds.into_iter().map(|(model, row)| Row { model, row }).collect();
    let mut w = csv::Writer::from_path(dir.join(PREDICTIONS))?;
    w.write_record(["model", "fold", "pair", "dataset", "target", "prediction"])?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.row.fold.to_string(),
            r.row.pair.to_string(),
            r.row.dataset.clone(),
            r.row.target.to_string(),
            r.row.prediction.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(PREDICTIONS), e))?;
    analysis::write_rows(&dir.join("fig3.csv"), &fig3_rows(&models))?;
    let thresholded: Vec<ThresholdRow> =
        models.iter().filter(|m| m.split_kind == SplitKind::SizeThreshold).flat_map(fig4a_rows).collect();
    if !thresholded.is_empty() {
        analysis::write_rows(&dir.join("fig4a.csv"), &thresholded)?;
    }
    let boxes: Vec<SplitRow> =
        models.iter().filter(|m| m.split_kind != SplitKind::SizeThreshold).flat_map(fig4b_rows).collect();
    if !boxes.is_empty() {
        analysis::write_rows(&dir.join("fig4b.csv"), &boxes)?;
    }
    Ok(())
}

pub fn read_run_metrics(dir: &Path) -> Result<RunMetrics> {
    read_json(&dir.join(METRICS))
}

pub struct SnitzRun {
    pub folds: Vec<SnitzReport>,
    pub metrics: RunMetrics,
}

/// Descriptors normalized over the corpus molecules, then the selection
/// baseline on each fold.
pub fn snitz_run(corpus: &Corpus, raw_table: &DescriptorTable, splits: &SplitSpec, config: &RunConfig) -> Result<SnitzRun> {
    splits.validate(corpus.pairs.len())?;
    let molecules = corpus.molecules();
    let norm = NormStats::fit(raw_table, molecules.iter().map(String::as_str))?;
    let vectors = mixture_vectors(corpus, &raw_table.normalized(&norm)?)?;
    let cuts = thresholds(splits);
    let mut reports = Vec::new();
    let mut folds = Vec::new();
    for (f, fold) in splits.folds.iter().enumerate() {
        let cfg = SnitzConfig { seed: step_seed(config.seed, 200 + f, 0), ..config.snitz.clone() };
        let mut train = fold.train.clone();
        train.extend(&fold.val);
        train.sort_unstable();
        let report = snitz_baseline(corpus, &vectors, &raw_table.names, &train, &fold.test, &cfg)?;
        folds.push(FoldMetrics {
            fold: f,
            threshold: cuts[f],
            train_pairs: train.len(),
            val_pairs: 0,
            best_epoch: None,
            epochs_run: None,
            test: report.metrics,
        });
        reports.push(report);
    }
    Ok(SnitzRun { metrics: RunMetrics::new("snitz", splits.kind, folds), folds: reports })
}

impl SnitzRun {
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(METRICS), &self.metrics)?;
        write_json(&dir.join("selection.json"), &self.folds)
    }
}

pub fn white_noise_run(run: &TrainedRun, data: &MixtureData, splits: &SplitSpec) -> Result<WhiteNoiseReport> {
    Ok(analysis::white_noise(data.corpus, &run.out_of_fold(data, splits)?))
}

pub fn write_white_noise(dir: &Path, report: &WhiteNoiseReport) -> Result<()> {
    write_json(&dir.join("white_noise.json"), &serde_json::json!({ "trend": report.trend, "pairs": report.rows.len() }))?;
    analysis::write_rows(&dir.join("fig5a.csv"), &report.rows)
}

pub fn bias_run(run: &TrainedRun, corpus: &Corpus) -> BiasReport {
    analysis::identical_pair_bias(corpus, &run.head_biases())
}

pub fn write_bias(dir: &Path, report: &BiasReport) -> Result<()> {
    write_json(&dir.join("bias.json"), report)?;
    analysis::write_rows(&dir.join("fig5b.csv"), &report.rows())
}

pub struct AttentionReport {
    pub maps: Vec<AttentionMap>,
    pub keys: Vec<KeyHit>,
    pub strong_only: Vec<String>,
    pub weak_only: Vec<String>,
}

pub fn attention_run(run: &TrainedRun, data: &MixtureData, fold: usize) -> Result<AttentionReport> {
    let model = run.model(fold)?;
    if model.chemix.config.attention != crate::chemix::AttentionKind::Sigmoidal {
        log::warn!("softmax attention weights are not independent per pair; interaction counts are not comparable");
    }
    let maps = model.attention_maps(data)?;
    let keys = analysis::extract_keys(&maps);
    let (strong_only, weak_only) = analysis::exclusive_keys(&keys);
    Ok(AttentionReport { maps, keys, strong_only, weak_only })
}

pub fn write_attention(dir: &Path, report: &AttentionReport) -> Result<()> {
    let maps_dir = dir.join("attention");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    for m in &report.maps {
        write_json(&maps_dir.join(format!("{}.json", m.mixture_id)), m)?;
    }
    analysis::write_rows(
        &dir.join("fig6c.csv"),
        &analysis::interaction_table(&report.maps, &analysis::INTERACTION_CUTOFFS),
    )?;
    analysis::write_rows(&dir.join("keys.csv"), &report.keys)?;
    write_json(
        &dir.join("exclusive_keys.json"),
        &serde_json::json!({ "strong_only": report.strong_only, "weak_only": report.weak_only }),
    )
}
