//! Training loops with early stopping: molecule encoder pre-training, mixture
//! model training on frozen embeddings, and end-to-end fine-tuning.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chemix::{Chemix, LossKind, MixtureLayout, CHEMIX_GROUP};
use crate::error::{Error, Result};
use crate::featurize::GraphTensors;
use crate::graph::{Graph, Var};
use crate::metrics::{macro_auroc, pearson};
use crate::params::{Adam, ParamStore};
use crate::pom::{embed_molecules, Glm, GraphBatch, Pom, GLM_GROUP, POM_GROUP};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainPom,
    TrainChemix,
    FinetunePommix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub stage: Stage,
    pub max_epochs: usize,
    pub patience: usize,
    /// Learning rate per parameter group; absent groups stay frozen.
    pub lr: BTreeMap<String, f64>,
    pub batch_size: usize,
    /// Held-out share for the molecule stage.
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan::train_chemix(0)
    }
}

impl TrainPlan {
    pub fn pretrain_pom(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::PretrainPom,
            max_epochs: 500,
            patience: 20,
            lr: BTreeMap::from([(POM_GROUP.to_string(), 1e-4), (GLM_GROUP.to_string(), 1e-4)]),
            batch_size: 64,
            val_frac: 0.2,
            seed,
        }
    }

    pub fn train_chemix(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::TrainChemix,
            max_epochs: 2000,
            patience: 100,
            lr: BTreeMap::from([(CHEMIX_GROUP.to_string(), 8e-5)]),
            batch_size: 0,
            val_frac: 0.0,
            seed,
        }
    }

    pub fn finetune(seed: u64) -> Self {
        TrainPlan {
            stage: Stage::FinetunePommix,
            lr: BTreeMap::from([(POM_GROUP.to_string(), 1e-5), (CHEMIX_GROUP.to_string(), 8e-5)]),
            ..TrainPlan::train_chemix(seed)
        }
    }

    pub fn rate(&self, group: &str) -> f64 {
        self.lr.get(group).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be positive and below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if let Some((g, r)) = self.lr.iter().find(|(_, r)| !r.is_finite() || **r < 0.0) {
            return Err(Error::Config(format!("learning rate {r} for group {g} is invalid")));
        }
        if self.stage == Stage::PretrainPom && (self.batch_size == 0 || !(0.0..1.0).contains(&self.val_frac)) {
            return Err(Error::Config("molecule pre-training needs a batch size and a validation share in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Independent random stream for one (epoch, batch) of a run.
pub fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (batch as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub monitor: f64,
}

/// Epoch 0 is the starting point; `best_epoch == 0` means no update helped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_monitor: f64,
    pub epochs_run: usize,
    pub log: Vec<LogRow>,
}

pub fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "monitor"])?;
    for r in log {
        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), r.monitor.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tracks the best monitor value and the parameters that produced it.
struct EarlyStopper<T> {
    best: f64,
    best_epoch: usize,
    snapshot: ParamStore<T>,
    patience: usize,
}

impl<T: Scalar> EarlyStopper<T> {
    fn new(store: &ParamStore<T>, initial: f64, patience: usize) -> Self {
        EarlyStopper { best: initial, best_epoch: 0, snapshot: store.clone(), patience }
    }

    /// Returns false once `patience` epochs have passed without improvement.
    fn observe(&mut self, epoch: usize, monitor: f64, store: &ParamStore<T>) -> bool {
        if monitor > self.best {
            self.best = monitor;
            self.best_epoch = epoch;
            self.snapshot = store.clone();
        }
        epoch - self.best_epoch < self.patience
    }
}

fn monitor_or_floor(v: Result<f64>) -> f64 {
    match v {
        Ok(x) if x.is_finite() => x,
        _ => f64::NEG_INFINITY,
    }
}

/// Multi-label molecules for encoder pre-training.
pub struct LabeledMolecules<'a> {
    pub graphs: &'a [GraphTensors],
    /// Row-major `[n, num_labels]`.
    pub labels: &'a [bool],
    pub num_labels: usize,
}

impl LabeledMolecules<'_> {
    fn targets<T: Scalar>(&self, rows: &[usize]) -> Tensor<T> {
        let l = self.num_labels;
        Tensor::from_fn(&[rows.len(), l], |k| {
            if self.labels[rows[k / l] * l + k % l] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Random train/validation partition of `n` items.
pub fn random_split(n: usize, val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nval = (n as f64 * val_frac).round() as usize;
    let mut val = idx[..nval].to_vec();
    let mut train = idx[nval..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Label probabilities `[rows, labels]` in evaluation mode.
pub fn predict_labels<T: Scalar>(
    pom: &Pom,
    glm: &Glm,
    store: &ParamStore<T>,
    graphs: &[&GraphTensors],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for chunk in graphs.chunks(batch_size.max(1)) {
        let batch = GraphBatch::<T>::new(chunk)?;
        let mut g = Graph::eval();
        let e = pom.forward(&mut g, store, &batch)?;
        let p = glm.predict(&mut g, store, e)?;
        out.extend(g.value(p).data().iter().map(|x| x.as_f64()));
    }
    Ok(out)
}

pub struct PomOutcome {
    pub outcome: TrainOutcome,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Mini-batch BCE training of encoder plus label head, monitoring
/// validation macro-AUROC (training AUROC when nothing is held out) and
/// restoring the best epoch.
pub fn pretrain_pom<T: Scalar>(
    pom: &Pom,
    glm: &Glm,
    store: &mut ParamStore<T>,
    data: &LabeledMolecules,
    plan: &TrainPlan,
) -> Result<PomOutcome> {
    let n = data.graphs.len();
    if data.labels.len() != n * data.num_labels {
        return Err(Error::Data(format!("{} label entries for {n} molecules of {} labels", data.labels.len(), data.num_labels)));
    }
    let (train, val) = random_split(n, plan.val_frac, plan.seed);
    let batch_size = plan.batch_size.max(1);
    let monitored = if val.is_empty() { &train } else { &val };
    let val_graphs: Vec<&GraphTensors> = monitored.iter().map(|&i| &data.graphs[i]).collect();
    let val_labels: Vec<bool> = monitored
        .iter().flat_map(|&i| data.labels[i * data.num_labels..(i + 1) * data.num_labels].iter().copied()).collect();
    let monitor = |store: &ParamStore<T>| -> f64 {
        let scores = predict_labels(pom, glm, store, &val_graphs, 256);
        monitor_or_floor(scores.and_then(|s| macro_auroc(&val_labels, &s, data.num_labels).map(|m| m.value)))
    };
    let mut stopper = EarlyStopper::new(store, monitor(store), plan.patience);
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=plan.max_epochs {
        let mut order = train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(step_seed(plan.seed, epoch, usize::MAX)));
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(batch_size).enumerate() {
            let graphs: Vec<&GraphTensors> = rows.iter().map(|&i| &data.graphs[i]).collect();
            let batch = GraphBatch::<T>::new(&graphs)?;
            let mut g = Graph::new(true, step_seed(plan.seed, epoch, b));
            let e = pom.forward(&mut g, store, &batch)?;
            let z = glm.logits(&mut g, store, e)?;
            let loss = g.bce_with_logits(z, &data.targets(rows))?;
            loss_sum += g.value(loss).item().as_f64() * rows.len() as f64;
            g.backward(loss)?;
            store.zero_grad();
            store.accumulate(&g);
            store.adam_step(&plan.lr, Adam::default())?;
        }
        let m = monitor(store);
        log.push(LogRow { epoch, train_loss: loss_sum / train.len().max(1) as f64, monitor: m });
        epochs_run = epoch;
        if !stopper.observe(epoch, m, store) {
            break;
        }
    }
    let outcome = TrainOutcome { best_epoch: stopper.best_epoch, best_monitor: stopper.best, epochs_run, log };
    *store = stopper.snapshot;
    Ok(PomOutcome { outcome, train, val })
}

/// Mixtures as lists of molecule indices, and labeled pairs of mixtures.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MixtureSet {
    pub mixtures: Vec<Vec<usize>>,
    pub pairs: Vec<(usize, usize)>,
    pub targets: Vec<f64>,
}

impl MixtureSet {
    pub fn from_corpus(corpus: &crate::datasets::Corpus, molecules: &[String]) -> Result<Self> {
        let index: std::collections::HashMap<&str, usize> =
            molecules.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mixtures = corpus
            .mixtures
            .iter()
            .map(|m| {
                m.components
                    .iter()
                    .map(|c| index.get(c.as_str()).copied().ok_or_else(|| Error::MissingDescriptor(c.clone())))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureSet {
            mixtures,
            pairs: corpus.pairs.iter().map(|p| (p.a, p.b)).collect(),
            targets: corpus.pairs.iter().map(|p| p.distance).collect(),
        })
    }

    /// Singleton-mixture pairs from label-similarity augmentation.
    pub fn from_augmented(pairs: &[crate::datasets::AugmentedPair], molecules: &[String]) -> Result<Self> {
        let index: std::collections::HashMap<&str, usize> =
            molecules.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let find = |s: &str| index.get(s).copied().ok_or_else(|| Error::MissingDescriptor(s.to_string()));
        let mut set = MixtureSet::default();
        let mut singleton = std::collections::HashMap::new();
        for p in pairs {
            let mut mix = |s: &str| -> Result<usize> {
                let m = find(s)?;
                Ok(*singleton.entry(m).or_insert_with(|| {
                    set.mixtures.push(vec![m]);
                    set.mixtures.len() - 1
                }))
            };
            let (a, b) = (mix(&p.a)?, mix(&p.b)?);
            set.pairs.push((a, b));
            set.targets.push(p.distance);
        }
        Ok(set)
    }
}

/// Where molecule embeddings come from.
pub enum Molecules<'a, T> {
    /// Precomputed rows, one per molecule index.
    Embedded(&'a Tensor<T>),
    /// Computed by the encoder on every step.
    Graphs { pom: &'a Pom, graphs: &'a [GraphTensors] },
}

enum BatchInput<T> {
    Rows(Tensor<T>),
    Graphs(GraphBatch<T>),
}

/// A fixed set of pairs with only the mixtures and molecules they use.
pub struct PairBatch<T> {
    layout: MixtureLayout,
    pairs: Vec<(usize, usize)>,
    pub targets: Tensor<T>,
    input: BatchInput<T>,
}

impl<T: Scalar> PairBatch<T> {
    /// With `both_orders`, each pair also appears reversed.
    pub fn new(set: &MixtureSet, pairs: &[usize], molecules: &Molecules<T>, both_orders: bool) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("no pairs selected".into()));
        }
        let mut mix_local = std::collections::BTreeMap::new();
        for &p in pairs {
            let (a, b) = set.pairs[p];
            mix_local.insert(a, 0);
            mix_local.insert(b, 0);
        }
        let mut mol_local = std::collections::BTreeMap::new();
        for (k, (m, slot)) in mix_local.iter_mut().enumerate() {
            *slot = k;
            for &mol in &set.mixtures[*m] {
                mol_local.insert(mol, 0);
            }
        }
        for (k, slot) in mol_local.values_mut().enumerate() {
            *slot = k;
        }
        let local: Vec<Vec<usize>> =
            mix_local.keys().map(|&m| set.mixtures[m].iter().map(|x| mol_local[x]).collect()).collect();
        let refs: Vec<&[usize]> = local.iter().map(|v| v.as_slice()).collect();
        let layout = MixtureLayout::new(&refs, None)?;
        let mut local_pairs = Vec::new();
        let mut targets = Vec::new();
        for &p in pairs {
            let (a, b) = set.pairs[p];
            local_pairs.push((mix_local[&a], mix_local[&b]));
            targets.push(T::of(set.targets[p]));
            if both_orders {
                local_pairs.push((mix_local[&b], mix_local[&a]));
                targets.push(T::of(set.targets[p]));
            }
        }
        let rows: Vec<usize> = mol_local.keys().copied().collect();
        let input = match molecules {
            Molecules::Embedded(t) => {
                let w = t.width();
                BatchInput::Rows(Tensor::new(&[rows.len(), w], rows.iter().flat_map(|&r| t.row(r).to_vec()).collect())?)
            }
            Molecules::Graphs { graphs, .. } => {
                let gs: Vec<&GraphTensors> = rows.iter().map(|&r| &graphs[r]).collect();
                BatchInput::Graphs(GraphBatch::new(&gs)?)
            }
        };
        let n = targets.len();
        Ok(PairBatch { layout, pairs: local_pairs, targets: Tensor::new(&[n], targets)?, input })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Predicted distances `[pairs]`.
    pub fn forward(&self, g: &mut Graph<T>, store: &ParamStore<T>, chemix: &Chemix, pom: Option<&Pom>) -> Result<Var> {
        let mol = match (&self.input, pom) {
            (BatchInput::Rows(t), _) => g.constant(t.clone()),
            (BatchInput::Graphs(b), Some(pom)) => pom.forward(g, store, b)?,
            (BatchInput::Graphs(_), None) => return Err(Error::Config("graph inputs need a molecule encoder".into())),
        };
        let enc = chemix.encode(g, store, mol, &self.layout)?;
        chemix.predict(g, store, enc.mixtures, &self.pairs)
    }

    pub fn predict(&self, store: &ParamStore<T>, chemix: &Chemix, pom: Option<&Pom>) -> Result<Vec<f64>> {
        let mut g = Graph::eval();
        let p = self.forward(&mut g, store, chemix, pom)?;
        Ok(g.value(p).data().iter().map(|x| x.as_f64()).collect())
    }

    pub fn targets_f64(&self) -> Vec<f64> {
        self.targets.data().iter().map(|x| x.as_f64()).collect()
    }
}

fn pom_of<'a, T>(molecules: &Molecules<'a, T>) -> Option<&'a Pom> {
    match molecules {
        Molecules::Embedded(_) => None,
        Molecules::Graphs { pom, .. } => Some(pom),
    }
}

/// Full-batch training of the mixture model, monitoring validation Pearson
/// correlation (on the training pairs when `val` is empty) and restoring the
/// best epoch.
pub fn train_pairs<T: Scalar>(
    chemix: &Chemix,
    store: &mut ParamStore<T>,
    set: &MixtureSet,
    molecules: &Molecules<T>,
    train: &[usize],
    val: &[usize],
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    let pom = pom_of(molecules);
    let train_batch = PairBatch::new(set, train, molecules, chemix.config.head.is_ordered())?;
    let val_batch = PairBatch::new(set, if val.is_empty() { train } else { val }, molecules, false)?;
    let monitor = |store: &ParamStore<T>| -> f64 {
        let b = &val_batch;
        monitor_or_floor(b.predict(store, chemix, pom).and_then(|p| pearson(&b.targets_f64(), &p)))
    };
    let mut stopper = EarlyStopper::new(store, monitor(store), plan.patience);
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=plan.max_epochs {
        let mut g = Graph::new(true, step_seed(plan.seed, epoch, 0));
        let pred = train_batch.forward(&mut g, store, chemix, pom)?;
        let loss = match chemix.config.loss {
            LossKind::Mae => g.mae(pred, &train_batch.targets)?,
            LossKind::Mse => g.mse(pred, &train_batch.targets)?,
        };
        let train_loss = g.value(loss).item().as_f64();
        g.backward(loss)?;
        store.zero_grad();
        store.accumulate(&g);
        store.adam_step(&plan.lr, Adam::default())?;
        let m = monitor(store);
        log.push(LogRow { epoch, train_loss, monitor: m });
        epochs_run = epoch;
        if !stopper.observe(epoch, m, store) {
            break;
        }
    }
    *store = stopper.snapshot;
    Ok(TrainOutcome { best_epoch: stopper.best_epoch, best_monitor: stopper.best, epochs_run, log })
}

/// Mixture model on frozen encoder embeddings.
pub fn train_chemix<T: Scalar>(
    chemix: &Chemix,
    store: &mut ParamStore<T>,
    set: &MixtureSet,
    embeddings: &Tensor<T>,
    train: &[usize],
    val: &[usize],
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    let mut plan = plan.clone();
    plan.lr.retain(|g, _| g == CHEMIX_GROUP);
    train_pairs(chemix, store, set, &Molecules::Embedded(embeddings), train, val, &plan)
}

/// Joint training of encoder and mixture model. With a zero encoder rate
/// this is exactly [`train_chemix`] on the encoder's embeddings.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Scalar>(
    pom: &Pom,
    chemix: &Chemix,
    store: &mut ParamStore<T>,
    set: &MixtureSet,
    graphs: &[GraphTensors],
    train: &[usize],
    val: &[usize],
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    if pom.config.embedding_dim != chemix.config.input_dim {
        return Err(Error::Config(format!(
            "encoder embeds into {} dimensions but the mixture model expects {}",
            pom.config.embedding_dim, chemix.config.input_dim
        )));
    }
    if plan.rate(POM_GROUP) == 0.0 {
        let refs: Vec<&GraphTensors> = graphs.iter().collect();
        let emb = embed_molecules(pom, store, &refs, 256)?;
        return train_chemix(chemix, store, set, &emb, train, val, plan);
    }
    let mut plan = plan.clone();
    plan.lr.retain(|g, _| g == CHEMIX_GROUP || g == POM_GROUP);
    train_pairs(chemix, store, set, &Molecules::Graphs { pom, graphs }, train, val, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemix::{AttentionKind, ChemixConfig};
    use crate::featurize::DESCRIPTOR_DIM;
    use crate::metrics::mae;
    use crate::pom::PomConfig;
    use pommix_smiles::parse_smiles;
    use rand::Rng;

    const SMILES: [&str; 20] = [
        "CCO", "CCCO", "CC(C)O", "CCCCO", "CC=O", "CCC=O", "c1ccccc1", "Cc1ccccc1", "Oc1ccccc1", "CC(=O)OC",
        "CCOC(=O)C", "CCN", "CCCN", "CS", "CCS", "C1CCCCC1", "C1CCOC1", "CC(C)=O", "OCC(O)CO", "C#CC",
    ];

    fn graphs(seed: u64) -> Vec<GraphTensors> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SMILES
            .iter()
            .map(|s| {
                let global = (0..DESCRIPTOR_DIM).map(|_| rng.gen::<f32>()).collect();
                GraphTensors::from_graph(&parse_smiles(s).unwrap(), global)
            })
            .collect()
    }

    fn tiny_pom() -> PomConfig {
        PomConfig { num_layers: 2, hidden: 16, embedding_dim: 12, dropout: 0.0, ..PomConfig::default() }
    }

    fn tiny_chemix(input_dim: usize) -> ChemixConfig {
        ChemixConfig { input_dim, embed_dim: 8, heads: 2, dropout: 0.0, ..ChemixConfig::default() }
    }

    fn toy_mixtures(num_pairs: usize, seed: u64) -> MixtureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixtures: Vec<Vec<usize>> = (0..12)
            .map(|_| {
                let mut m: Vec<usize> = (0..20).collect();
                m.shuffle(&mut rng);
                m.truncate(rng.gen_range(1..5));
                m
            })
            .collect();
        let pairs: Vec<(usize, usize)> = (0..num_pairs).map(|_| (rng.gen_range(0..12), rng.gen_range(0..12))).collect();
        let targets = pairs.iter().map(|_| rng.gen_range(0.1..0.9)).collect();
        MixtureSet { mixtures, pairs, targets }
    }

    fn random_embeddings(seed: u64, width: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[20, width], |_| rng.gen_range(-1.0..1.0))
    }

    fn chemix_model(seed: u64, input: usize) -> (Chemix, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let c = Chemix::new(&mut store, tiny_chemix(input), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (c, store)
    }

    fn quick_plan(epochs: usize, patience: usize, lr: f64) -> TrainPlan {
        let mut p = TrainPlan::train_chemix(3);
        p.max_epochs = epochs;
        p.patience = patience;
        p.lr.insert(CHEMIX_GROUP.into(), lr);
        p
    }

    #[test]
    fn step_seeds_differ() {
        let s: std::collections::HashSet<u64> =
            (0..50).flat_map(|e| (0..4).map(move |b| step_seed(1, e, b))).collect();
        assert_eq!(s.len(), 200);
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::pretrain_pom(0).validate().is_ok());
        assert!(TrainPlan::finetune(0).validate().is_ok());
        assert!(quick_plan(10, 10, 1e-3).validate().is_err());
        assert!(quick_plan(10, 5, -1.0).validate().is_err());
        assert_eq!(TrainPlan::finetune(0).rate(POM_GROUP), 1e-5);
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let (chemix, mut store) = chemix_model(1, 6);
        let init = store.clone();
        let set = toy_mixtures(12, 2);
        let emb = random_embeddings(3, 6);
        let out = train_chemix(&chemix, &mut store, &set, &emb, &(0..8).collect::<Vec<_>>(), &[8, 9, 10, 11], &quick_plan(0, 5, 1e-2)).unwrap();
        assert_eq!(out.best_epoch, 0);
        assert!(out.log.is_empty());
        assert!(store.bitwise_eq(&init));
    }

    #[test]
    fn ten_pairs_overfit() {
        let (chemix, mut store) = chemix_model(4, 6);
        let set = toy_mixtures(10, 5);
        let emb = random_embeddings(6, 6);
        let all: Vec<usize> = (0..10).collect();
        let out = train_chemix(&chemix, &mut store, &set, &emb, &all, &all, &quick_plan(1500, 1500, 3e-3)).unwrap();
        let batch = PairBatch::new(&set, &all, &Molecules::Embedded(&emb), false).unwrap();
        let pred = batch.predict(&store, &chemix, None).unwrap();
        let err = mae(&batch.targets_f64(), &pred).unwrap();
        assert!(err < 0.02, "training MAE {err} after {} epochs", out.epochs_run);
    }

    #[test]
    fn loss_mostly_decreases_over_ten_steps() {
        let (chemix, mut store) = chemix_model(7, 6);
        let set = toy_mixtures(30, 8);
        let emb = random_embeddings(9, 6);
        let all: Vec<usize> = (0..30).collect();
        let out = train_chemix(&chemix, &mut store, &set, &emb, &all, &all, &quick_plan(200, 200, 1e-3)).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
        let windows = losses.len() - 10;
        let good = (0..windows).filter(|&i| losses[i + 10] <= losses[i]).count();
        assert!(good as f64 >= 0.9 * windows as f64, "{good}/{windows}");
    }

    #[test]
    fn early_stopping_restores_the_best_epoch() {
        let set = toy_mixtures(40, 10);
        let emb = random_embeddings(11, 6);
        let train: Vec<usize> = (0..30).collect();
        let val: Vec<usize> = (30..40).collect();
        let (chemix, init) = chemix_model(12, 6);
        let mut store = init.clone();
        let out = train_chemix(&chemix, &mut store, &set, &emb, &train, &val, &quick_plan(120, 15, 1e-2)).unwrap();
        assert!(out.best_epoch > 0);
        assert!(out.epochs_run >= out.best_epoch);
        let best = out.log.iter().map(|r| r.monitor).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_monitor, best);
        let mut again = init.clone();
        train_chemix(&chemix, &mut again, &set, &emb, &train, &val, &quick_plan(out.best_epoch, 15, 1e-2)).unwrap();
        assert!(again.bitwise_eq(&store));
    }

    #[test]
    fn seeded_runs_are_bitwise_identical() {
        let set = toy_mixtures(20, 13);
        let emb = random_embeddings(14, 6);
        let train: Vec<usize> = (0..15).collect();
        let run = || {
            let mut store = ParamStore::<f32>::new();
            let cfg = ChemixConfig { dropout: 0.1, ..tiny_chemix(6) };
            let chemix = Chemix::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
            train_chemix(&chemix, &mut store, &set, &emb, &train, &[15, 16, 17, 18, 19], &quick_plan(50, 50, 1e-3)).unwrap();
            store
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn frozen_groups_stay_bitwise_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pom = Pom::new(&mut store, tiny_pom(), &mut rng).unwrap();
        let chemix = Chemix::new(&mut store, tiny_chemix(12), &mut rng).unwrap();
        let before = store.subset(POM_GROUP);
        let gs = graphs(17);
        let refs: Vec<&GraphTensors> = gs.iter().collect();
        let emb = embed_molecules(&pom, &store, &refs, 8).unwrap();
        let set = toy_mixtures(12, 18);
        let mut plan = quick_plan(20, 19, 1e-2);
        plan.lr.insert(POM_GROUP.into(), 1e-2);
        train_chemix(&chemix, &mut store, &set, &emb, &(0..8).collect::<Vec<_>>(), &[8, 9, 10, 11], &plan).unwrap();
        assert!(store.subset(POM_GROUP).bitwise_eq(&before));
    }

    fn joint_model(seed: u64) -> (Pom, Chemix, ParamStore<f32>) {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pom = Pom::new(&mut store, tiny_pom(), &mut rng).unwrap();
        let chemix = Chemix::new(&mut store, tiny_chemix(12), &mut rng).unwrap();
        (pom, chemix, store)
    }

    #[test]
    fn finetune_without_encoder_rate_matches_frozen_training() {
        let (pom, chemix, init) = joint_model(19);
        let gs = graphs(20);
        let set = toy_mixtures(20, 21);
        let train: Vec<usize> = (0..15).collect();
        let val: Vec<usize> = (15..20).collect();
        let mut plan = TrainPlan::finetune(4);
        plan.max_epochs = 30;
        plan.patience = 29;
        plan.lr.insert(POM_GROUP.into(), 0.0);
        let mut a = init.clone();
        let out_a = finetune(&pom, &chemix, &mut a, &set, &gs, &train, &val, &plan).unwrap();
        let refs: Vec<&GraphTensors> = gs.iter().collect();
        let emb = embed_molecules(&pom, &init, &refs, 7).unwrap();
        let mut b = init.clone();
        let out_b = train_chemix(&chemix, &mut b, &set, &emb, &train, &val, &plan).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn finetune_gradient_reaches_edge_layers() {
        let (pom, chemix, mut store) = joint_model(22);
        let gs = graphs(23);
        let set = toy_mixtures(8, 24);
        let all: Vec<usize> = (0..8).collect();
        let batch = PairBatch::new(&set, &all, &Molecules::Graphs { pom: &pom, graphs: &gs }, false).unwrap();
        let mut g = Graph::new(true, 0);
        let p = batch.forward(&mut g, &store, &chemix, Some(&pom)).unwrap();
        let loss = g.mae(p, &batch.targets).unwrap();
        g.backward(loss).unwrap();
        store.accumulate(&g);
        for name in ["pom.block0.edge.message.weight", "pom.encode.edge.weight"] {
            let grad = store.get(name).unwrap().grad.as_ref().unwrap();
            let norm: f32 = grad.data().iter().map(|x| x * x).sum();
            assert!(norm > 0.0, "{name}");
        }
        let mut plan = TrainPlan::finetune(1);
        plan.max_epochs = 3;
        plan.patience = 3;
        plan.lr.insert(POM_GROUP.into(), 1e-2);
        let out = finetune(&pom, &chemix, &mut store, &set, &gs, &all[..6], &all[6..], &plan).unwrap();
        assert_eq!(out.epochs_run, 3);
        assert!(store.get("pom.block0.edge.message.weight").unwrap().steps() > 0);
    }

    #[test]
    fn finetune_rejects_mismatched_widths() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let pom = Pom::new(&mut store, tiny_pom(), &mut rng).unwrap();
        let chemix = Chemix::new(&mut store, tiny_chemix(7), &mut rng).unwrap();
        let err = finetune(&pom, &chemix, &mut store, &toy_mixtures(4, 1), &graphs(1), &[0, 1], &[2, 3], &TrainPlan::finetune(0));
        assert!(err.is_err());
    }

    #[test]
    fn ordered_head_trains_on_both_orders() {
        let set = toy_mixtures(5, 26);
        let emb = random_embeddings(27, 6);
        let b = PairBatch::new(&set, &[0, 1, 2], &Molecules::Embedded(&emb), true).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(b.pairs[0], (b.pairs[1].1, b.pairs[1].0));
    }

    #[test]
    fn constant_validation_predictions_do_not_count() {
        let (chemix, mut store) = chemix_model(28, 6);
        // a zero slope and frozen bias make every prediction equal
        for (name, p) in store.iter_mut() {
            if name.starts_with("chemix.head") {
                p.value = p.value.map(|_| if name.ends_with("slope") { 0.0 } else { 0.5 });
                p.trainable = false;
            }
        }
        let set = toy_mixtures(12, 29);
        let emb = random_embeddings(30, 6);
        let out = train_chemix(&chemix, &mut store, &set, &emb, &(0..8).collect::<Vec<_>>(), &[8, 9, 10, 11], &quick_plan(5, 4, 1e-2)).unwrap();
        assert!(out.log.iter().all(|r| r.monitor == f64::NEG_INFINITY));
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn pretraining_overfits_twenty_molecules() {
        let gs = graphs(31);
        let num_labels = 3;
        let labels: Vec<bool> = (0..20 * num_labels).map(|k| (k * 7 + k / 3) % 5 < 2).collect();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pom = Pom::new(&mut store, tiny_pom(), &mut rng).unwrap();
        let glm = Glm::new(&mut store, 12, num_labels, &mut rng).unwrap();
        let data = LabeledMolecules { graphs: &gs, labels: &labels, num_labels };
        let mut plan = TrainPlan::pretrain_pom(33);
        plan.max_epochs = 150;
        plan.patience = 150;
        plan.val_frac = 0.0;
        plan.batch_size = 8;
        plan.lr = BTreeMap::from([(POM_GROUP.into(), 3e-3), (GLM_GROUP.into(), 3e-3)]);
        let out = pretrain_pom(&pom, &glm, &mut store, &data, &plan).unwrap();
        assert!(out.val.is_empty());
        assert_eq!(out.outcome.best_monitor, 1.0);
        let refs: Vec<&GraphTensors> = gs.iter().collect();
        let scores = predict_labels(&pom, &glm, &store, &refs, 64).unwrap();
        assert_eq!(macro_auroc(&labels, &scores, num_labels).unwrap().value, 1.0);
    }

    #[test]
    fn pretraining_split_and_zero_epochs() {
        let gs = graphs(37);
        let labels: Vec<bool> = (0..40).map(|k| k % 3 == 0).collect();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let pom = Pom::new(&mut store, tiny_pom(), &mut rng).unwrap();
        let glm = Glm::new(&mut store, 12, 2, &mut rng).unwrap();
        let init = store.clone();
        let mut plan = TrainPlan::pretrain_pom(39);
        plan.max_epochs = 0;
        let data = LabeledMolecules { graphs: &gs, labels: &labels, num_labels: 2 };
        let out = pretrain_pom(&pom, &glm, &mut store, &data, &plan).unwrap();
        assert_eq!((out.train.len(), out.val.len()), (16, 4));
        assert!(store.bitwise_eq(&init));
    }

    #[test]
    fn attention_kinds_both_train() {
        for kind in AttentionKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let cfg = ChemixConfig { attention: *kind, ..tiny_chemix(6) };
            let chemix = Chemix::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(34)).unwrap();
            let set = toy_mixtures(16, 35);
            let emb = random_embeddings(36, 6);
            let out = train_chemix(&chemix, &mut store, &set, &emb, &(0..12).collect::<Vec<_>>(), &[12, 13, 14, 15], &quick_plan(30, 29, 1e-3)).unwrap();
            assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
        }
    }
}
