//! Odor-label and mixture corpora: ingestion, filtering, pair compilation,
//! split generation and label-similarity augmentation.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use pommix_smiles::{canonicalize, parse_smiles, Element, MolecularGraph};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INORGANIC_ELEMENTS: [&str; 15] =
    ["He", "Na", "Mg", "Al", "Si", "K", "Ca", "Ti", "V", "Cr", "Fe", "Co", "Cu", "Zn", "Bi"];
pub const MIN_LABEL_COUNT: usize = 20;
pub const MIN_WEIGHT: f64 = 20.0;
pub const MAX_WEIGHT: f64 = 600.0;
pub const DEFAULT_THRESHOLDS: [f64; 5] = [5.0, 10.0, 15.0, 20.0, 30.0];

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.trim() {
        "1" | "1.0" | "True" | "true" => Some(true),
        "0" | "0.0" | "False" | "false" | "" => Some(false),
        _ => None,
    }
}

/// One row of an unfiltered odor-label table. `line` is 1-based in the file.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMolecule {
    pub line: usize,
    pub smiles: String,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonoRecord {
    pub smiles: String,
    pub labels: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonoDataset {
    pub label_names: Vec<String>,
    pub records: Vec<MonoRecord>,
}

/// Reads a raw odor-label table. The structure column may be named `smiles`
/// or `nonStereoSMILES`; a `descriptors` column is ignored and every other
/// column is a 0/1 label.
pub fn read_raw_labels(path: &Path) -> Result<(Vec<String>, Vec<RawMolecule>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers()?.clone();
    let smiles_col = headers
        .iter()
        .position(|h| h == "smiles" || h == "nonStereoSMILES")
        .ok_or_else(|| Error::Data(format!("{}: no `smiles` or `nonStereoSMILES` column", path.display())))?;
    let label_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != smiles_col && &headers[c] != "descriptors").collect();
    let names = label_cols.iter().map(|&c| headers[c].to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{}:{line}: {e}", path.display())))?;
        let mut labels = Vec::with_capacity(label_cols.len());
        for &c in &label_cols {
            let v = rec.get(c).unwrap_or("");
            labels.push(parse_flag(v).ok_or_else(|| {
                Error::Data(format!("{}:{line}: label `{}` has non-binary value `{v}`", path.display(), &headers[c]))
            })?);
        }
        rows.push(RawMolecule { line, smiles: rec[smiles_col].trim().to_string(), labels });
    }
    Ok((names, rows))
}

impl MonoDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads `smiles,label...`. Structures are taken as written.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let (label_names, raw) = read_raw_labels(path)?;
        let records = raw.into_iter().map(|r| MonoRecord { smiles: r.smiles, labels: r.labels }).collect();
        Ok(MonoDataset { label_names, records })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["smiles"];
        header.extend(self.label_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &self.records {
            let mut rec = vec![r.smiles.clone()];
            rec.extend(r.labels.iter().map(|&l| if l { "1" } else { "0" }.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Row-major `[n, labels]` label matrix.
    pub fn label_matrix(&self) -> Vec<bool> {
        self.records.iter().flat_map(|r| r.labels.iter().copied()).collect()
    }
}

/// Molecules removed by each filter, in the order the filters run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub unparseable: Vec<String>,
    pub inorganic: usize,
    pub duplicate: usize,
    pub charged: usize,
    pub multi_fragment: usize,
    pub low_weight: usize,
    pub high_weight: usize,
    pub carbon_free: usize,
    pub labels_dropped: Vec<String>,
    pub unlabeled: usize,
    pub output: usize,
}

impl FilterReport {
    pub fn weight(&self) -> usize {
        self.low_weight + self.high_weight
    }

    /// Removal counts in filter order: inorganic, duplicate, charged,
    /// multi-fragment, weight, carbon-free.
    pub fn counts(&self) -> [usize; 6] {
        [self.inorganic, self.duplicate, self.charged, self.multi_fragment, self.weight(), self.carbon_free]
    }
}

fn is_inorganic(g: &MolecularGraph) -> bool {
    INORGANIC_ELEMENTS
        .iter()
        .any(|s| Element::from_symbol(s).is_some_and(|e| g.contains_element(e)))
}

/// Nonzero net charge, or charged atoms spread over several fragments
/// (salts). Neutral zwitterions such as nitro groups are kept.
fn is_charged(g: &MolecularGraph) -> bool {
    g.net_charge() != 0 || (g.fragment_count > 1 && g.has_charged_atom())
}

/// Structural filters in fixed order, then label-frequency pruning.
/// Unparseable structures are listed in the report with their line numbers.
pub fn filter_labels(label_names: &[String], rows: &[RawMolecule]) -> Result<(MonoDataset, FilterReport)> {
    let mut report = FilterReport { input: rows.len(), ..FilterReport::default() };
    let mut seen = HashSet::new();
    let mut kept: Vec<MonoRecord> = Vec::new();
    let carbon = Element::from_symbol("C").expect("carbon");
    for row in rows {
        if row.labels.len() != label_names.len() {
            return Err(Error::Data(format!(
                "line {}: {} labels, expected {}",
                row.line,
                row.labels.len(),
                label_names.len()
            )));
        }
        let g = match parse_smiles(&row.smiles) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("line {}: cannot parse `{}`: {e}", row.line, row.smiles);
                report.unparseable.push(format!("line {}: {}", row.line, row.smiles));
                continue;
            }
        };
        let smiles = canonicalize(&g);
        let weight = g.molecular_weight();
        if is_inorganic(&g) {
            report.inorganic += 1;
        } else if !seen.insert(smiles.clone()) {
            report.duplicate += 1;
        } else if is_charged(&g) {
            report.charged += 1;
        } else if g.fragment_count > 1 {
            report.multi_fragment += 1;
        } else if weight < MIN_WEIGHT {
            report.low_weight += 1;
        } else if weight > MAX_WEIGHT {
            report.high_weight += 1;
        } else if !g.contains_element(carbon) {
            report.carbon_free += 1;
        } else {
            kept.push(MonoRecord { smiles, labels: row.labels.clone() });
        }
    }
    let counts: Vec<usize> =
        (0..label_names.len()).map(|c| kept.iter().filter(|r| r.labels[c]).count()).collect();
    let keep_cols: Vec<usize> = (0..label_names.len()).filter(|&c| counts[c] >= MIN_LABEL_COUNT).collect();
    report.labels_dropped =
        (0..label_names.len()).filter(|c| !keep_cols.contains(c)).map(|c| label_names[c].clone()).collect();
    let mut records = Vec::with_capacity(kept.len());
    for r in kept {
        let labels: Vec<bool> = keep_cols.iter().map(|&c| r.labels[c]).collect();
        if labels.iter().any(|&l| l) {
            records.push(MonoRecord { smiles: r.smiles, labels });
        } else {
            report.unlabeled += 1;
        }
    }
    report.output = records.len();
    let names = keep_cols.iter().map(|&c| label_names[c].clone()).collect();
    Ok((MonoDataset { label_names: names, records }, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentType {
    Explicit,
    Triangle,
}

impl fmt::Display for ExperimentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExperimentType::Explicit => "explicit",
            ExperimentType::Triangle => "triangle",
        })
    }
}

impl FromStr for ExperimentType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "explicit" => Ok(ExperimentType::Explicit),
            "triangle" => Ok(ExperimentType::Triangle),
            other => Err(Error::Data(format!("unknown experiment type `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawMixture {
    pub dataset: String,
    pub id: String,
    pub smiles: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    pub dataset: String,
    pub a: String,
    pub b: String,
    pub distance: f64,
    pub experiment_type: ExperimentType,
}

/// A set of molecules, stored as sorted canonical SMILES. `datasets` lists
/// every source that used it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub id: String,
    pub datasets: Vec<String>,
    pub components: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub dataset: String,
    pub a: usize,
    pub b: usize,
    /// Perceptual distance, 0 for indistinguishable.
    pub distance: f64,
    pub experiment_type: ExperimentType,
    pub is_identical: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub mixtures: Vec<Mixture>,
    pub pairs: Vec<Pair>,
}

/// Reads `dataset,mixture_id,smiles_list` with `;`-separated components.
pub fn read_raw_mixtures(path: &Path) -> Result<Vec<RawMixture>> {
    let mut rdr = open_csv(path)?;
    expect_headers(path, &rdr.headers()?.clone(), &["dataset", "mixture_id", "smiles_list"])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 2)))?;
        out.push(RawMixture {
            dataset: rec[0].trim().to_string(),
            id: rec[1].trim().to_string(),
            smiles: rec[2].split(';').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        });
    }
    Ok(out)
}

/// Reads `dataset,mixture_id_a,mixture_id_b,distance,experiment_type`.
pub fn read_raw_pairs(path: &Path) -> Result<Vec<RawPair>> {
    let mut rdr = open_csv(path)?;
    expect_headers(
        path,
        &rdr.headers()?.clone(),
        &["dataset", "mixture_id_a", "mixture_id_b", "distance", "experiment_type"],
    )?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let at = format!("{}:{}", path.display(), i + 2);
        let rec = rec.map_err(|e| Error::Data(format!("{at}: {e}")))?;
        let distance = rec[3].trim().parse::<f64>().map_err(|e| Error::Data(format!("{at}: distance: {e}")))?;
        let experiment_type = rec[4].parse().map_err(|e| Error::Data(format!("{at}: {e}")))?;
        out.push(RawPair {
            dataset: rec[0].trim().to_string(),
            a: rec[1].trim().to_string(),
            b: rec[2].trim().to_string(),
            distance,
            experiment_type,
        });
    }
    Ok(out)
}

fn expect_headers(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = got.iter().map(str::trim).collect();
    if got.len() < want.len() || got[..want.len()] != *want {
        return Err(Error::Data(format!("{}: expected columns {}, found {}", path.display(), want.join(","), got.join(","))));
    }
    Ok(())
}

impl Corpus {
    /// Merges mixtures with the same set of molecules and resolves pair
    /// references. A pair `(dataset, id)` matches the mixture row with that
    /// id whose dataset tag (possibly `a+b` joined) includes `dataset`.
    pub fn compile(raw_mixtures: &[RawMixture], raw_pairs: &[RawPair]) -> Result<Self> {
        let mut by_set: IndexMap<Vec<String>, BTreeSet<String>> = IndexMap::new();
        let mut refs: HashMap<(String, String), usize> = HashMap::new();
        for (row, m) in raw_mixtures.iter().enumerate() {
            if m.smiles.is_empty() {
                return Err(Error::Data(format!("mixture {}/{} is empty", m.dataset, m.id)));
            }
            let mut set = BTreeSet::new();
            for s in &m.smiles {
                let c = pommix_smiles::canonicalize_str(s)
                    .map_err(|e| Error::Data(format!("mixture {}/{} (row {}): {e}", m.dataset, m.id, row + 2)))?;
                if !set.insert(c) {
                    log::warn!("mixture {}/{} lists `{s}` twice", m.dataset, m.id);
                }
            }
            let key: Vec<String> = set.into_iter().collect();
            let entry = by_set.entry(key);
            let index = entry.index();
            let tags = entry.or_default();
            for tag in m.dataset.split('+') {
                tags.insert(tag.to_string());
                if let Some(prev) = refs.insert((tag.to_string(), m.id.clone()), index) {
                    if prev != index {
                        return Err(Error::Data(format!("mixture id {tag}/{} names two different mixtures", m.id)));
                    }
                }
            }
        }
        let mixtures: Vec<Mixture> = by_set
            .into_iter()
            .enumerate()
            .map(|(i, (components, tags))| Mixture {
                id: format!("mix{i:04}"),
                datasets: tags.into_iter().collect(),
                components,
            })
            .collect();
        let mut pairs = Vec::with_capacity(raw_pairs.len());
        for (row, p) in raw_pairs.iter().enumerate() {
            let find = |id: &str| {
                refs.get(&(p.dataset.clone(), id.to_string())).copied().ok_or_else(|| {
                    Error::Data(format!("pair row {}: unknown mixture {}/{id}", row + 2, p.dataset))
                })
            };
            let (a, b) = (find(&p.a)?, find(&p.b)?);
            if !(0.0..=1.0).contains(&p.distance) {
                return Err(Error::Data(format!("pair row {}: distance {} outside [0, 1]", row + 2, p.distance)));
            }
            pairs.push(Pair {
                dataset: p.dataset.clone(),
                a,
                b,
                distance: p.distance,
                experiment_type: p.experiment_type,
                is_identical: a == b,
            });
        }
        Ok(Corpus { mixtures, pairs })
    }

    /// Loads `mixtures.csv` and `pairs.csv` from `dir`, raw or compiled.
    pub fn load(dir: &Path) -> Result<Self> {
        let m = read_raw_mixtures(&dir.join("mixtures.csv"))?;
        let p = read_raw_pairs(&dir.join("pairs.csv"))?;
        Corpus::compile(&m, &p)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("mixtures.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["dataset", "mixture_id", "smiles_list"])?;
        for m in &self.mixtures {
            w.write_record([m.datasets.join("+"), m.id.clone(), m.components.join(";")])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("pairs.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["dataset", "mixture_id_a", "mixture_id_b", "distance", "experiment_type"])?;
        for p in &self.pairs {
            w.write_record([
                p.dataset.clone(),
                self.mixtures[p.a].id.clone(),
                self.mixtures[p.b].id.clone(),
                p.distance.to_string(),
                p.experiment_type.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// Distinct molecules in first-seen order.
    pub fn molecules(&self) -> Vec<String> {
        let mut seen = IndexMap::new();
        for m in &self.mixtures {
            for c in &m.components {
                seen.entry(c.clone()).or_insert(());
            }
        }
        seen.into_keys().collect()
    }

    pub fn identical_pairs(&self) -> Vec<usize> {
        (0..self.pairs.len()).filter(|&i| self.pairs[i].is_identical).collect()
    }

    /// Geometric mean of the two mixture sizes.
    pub fn pair_size(&self, pair: usize) -> f64 {
        let p = &self.pairs[pair];
        ((self.mixtures[p.a].components.len() * self.mixtures[p.b].components.len()) as f64).sqrt()
    }

    pub fn sources(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.pairs.iter().map(|p| p.dataset.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Cv5,
    Lmo,
    SizeThreshold,
}

/// Folds of indices into the pair list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub seed: u64,
    pub params: serde_json::Value,
    pub folds: Vec<Fold>,
}

impl SplitSpec {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Every fold has disjoint parts and indices below `num_pairs`.
    pub fn validate(&self, num_pairs: usize) -> Result<()> {
        for (f, fold) in self.folds.iter().enumerate() {
            let mut seen = HashSet::new();
            for &i in fold.train.iter().chain(&fold.val).chain(&fold.test) {
                if i >= num_pairs {
                    return Err(Error::Data(format!("fold {f}: pair {i} out of range ({num_pairs} pairs)")));
                }
                if !seen.insert(i) {
                    return Err(Error::Data(format!("fold {f}: pair {i} appears twice")));
                }
            }
        }
        Ok(())
    }
}

fn fold_rng(seed: u64, fold: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold + 1);
    rng
}

/// Splits `rest` 7:1 into (train, val) within each source so every source
/// keeps its share of validation pairs.
fn train_val(corpus: &Corpus, rest: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut by_source: IndexMap<&str, Vec<usize>> = IndexMap::new();
    for &i in rest {
        by_source.entry(corpus.pairs[i].dataset.as_str()).or_default().push(i);
    }
    by_source.sort_keys();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (_, mut idx) in by_source {
        idx.shuffle(rng);
        let nval = ((idx.len() as f64) / 8.0).round() as usize;
        val.extend_from_slice(&idx[..nval]);
        train.extend_from_slice(&idx[nval..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Stratified k-fold: each source is shuffled and dealt round-robin into the
/// test folds, the deal continuing across sources so fold sizes differ by at
/// most one.
pub fn make_cv_splits(corpus: &Corpus, k: usize, seed: u64) -> Result<SplitSpec> {
    if k < 2 {
        return Err(Error::Config(format!("cross-validation needs k >= 2, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests = vec![Vec::new(); k];
    let mut always_train = Vec::new();
    let mut deal = 0;
    for source in corpus.sources() {
        let mut idx: Vec<usize> = (0..corpus.pairs.len()).filter(|&i| corpus.pairs[i].dataset == source).collect();
        if idx.len() < k {
            log::warn!("source {source} has {} pairs (< {k}); all go to training", idx.len());
            always_train.extend(idx);
            continue;
        }
        idx.shuffle(&mut rng);
        for i in idx {
            tests[deal % k].push(i);
            deal += 1;
        }
    }
    let mut folds = Vec::with_capacity(k);
    for (f, test) in tests.iter().enumerate() {
        let in_test: HashSet<usize> = test.iter().copied().collect();
        let rest: Vec<usize> =
            (0..corpus.pairs.len()).filter(|i| !in_test.contains(i) && !always_train.contains(i)).collect();
        let (mut train, val) = train_val(corpus, &rest, &mut fold_rng(seed, f as u64));
        train.extend(&always_train);
        train.sort_unstable();
        let mut test = test.clone();
        test.sort_unstable();
        folds.push(Fold { train, val, test });
    }
    Ok(SplitSpec { kind: SplitKind::Cv5, seed, params: serde_json::json!({ "k": k }), folds })
}

/// Leave-molecules-out folds: molecules are held out at random until the
/// pairs touching them reach `test_frac` of the corpus.
pub fn make_lmo_splits(corpus: &Corpus, folds: usize, test_frac: f64, seed: u64) -> Result<SplitSpec> {
    if folds == 0 || !(0.0..1.0).contains(&test_frac) {
        return Err(Error::Config(format!("bad leave-molecules-out setup: {folds} folds, fraction {test_frac}")));
    }
    let molecules = corpus.molecules();
    let index: HashMap<&str, usize> = molecules.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut touching = vec![Vec::new(); molecules.len()];
    for (p, pair) in corpus.pairs.iter().enumerate() {
        let mut mols: BTreeSet<usize> = BTreeSet::new();
        for m in [pair.a, pair.b] {
            mols.extend(corpus.mixtures[m].components.iter().map(|c| index[c.as_str()]));
        }
        for m in mols {
            touching[m].push(p);
        }
    }
    let total = corpus.pairs.len();
    if let Some(m) = (0..molecules.len()).find(|&m| touching[m].len() * 2 > total) {
        log::warn!("molecule {} touches more than half of all pairs", molecules[m]);
    }
    let target = (test_frac * total as f64).round() as usize;
    let mut out = Vec::with_capacity(folds);
    let mut held_sets = Vec::with_capacity(folds);
    for f in 0..folds {
        let mut rng = fold_rng(seed, f as u64);
        let mut order: Vec<usize> = (0..molecules.len()).collect();
        order.shuffle(&mut rng);
        let mut test: BTreeSet<usize> = BTreeSet::new();
        let mut held = Vec::new();
        for m in order {
            if test.len() >= target {
                break;
            }
            held.push(molecules[m].clone());
            test.extend(&touching[m]);
        }
        let rest: Vec<usize> = (0..total).filter(|i| !test.contains(i)).collect();
        let (train, val) = train_val(corpus, &rest, &mut rng);
        out.push(Fold { train, val, test: test.into_iter().collect() });
        held_sets.push(held);
    }
    Ok(SplitSpec {
        kind: SplitKind::Lmo,
        seed,
        params: serde_json::json!({ "test_frac": test_frac, "held_out": held_sets }),
        folds: out,
    })
}

/// One fold per threshold: pairs whose size statistic is below the threshold
/// train (with a stratified eighth held for validation), the rest test.
pub fn make_size_threshold_splits(corpus: &Corpus, thresholds: &[f64], seed: u64) -> Result<SplitSpec> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("size thresholds must be strictly ascending".into()));
    }
    let mut folds = Vec::new();
    let mut used = Vec::new();
    for (f, &t) in thresholds.iter().enumerate() {
        let (below, test): (Vec<usize>, Vec<usize>) = (0..corpus.pairs.len()).partition(|&i| corpus.pair_size(i) < t);
        if below.is_empty() || test.is_empty() {
            log::warn!("size threshold {t} leaves an empty side; skipped");
            continue;
        }
        let (train, val) = train_val(corpus, &below, &mut fold_rng(seed, f as u64));
        folds.push(Fold { train, val, test });
        used.push(t);
    }
    Ok(SplitSpec {
        kind: SplitKind::SizeThreshold,
        seed,
        params: serde_json::json!({ "thresholds": used }),
        folds,
    })
}

/// `1 - |A∩B| / |A∪B|`; `None` when both sets are empty.
pub fn jaccard_distance(a: &[bool], b: &[bool]) -> Option<f64> {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    (union > 0).then(|| 1.0 - inter as f64 / union as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub a: String,
    pub b: String,
    pub distance: f64,
}

/// Single-molecule pairs labeled by label-set distance, over every unordered
/// pair of labeled molecules (restricted to `universe` when given).
pub fn augment_with_jaccard(mono: &MonoDataset, universe: Option<&[String]>) -> Vec<AugmentedPair> {
    let allowed: Option<HashSet<&str>> = universe.map(|u| u.iter().map(String::as_str).collect());
    let eligible: Vec<&MonoRecord> = mono
        .records
        .iter()
        .filter(|r| r.labels.iter().any(|&l| l))
        .filter(|r| allowed.as_ref().is_none_or(|s| s.contains(r.smiles.as_str())))
        .collect();
    let mut out = Vec::new();
    for i in 0..eligible.len() {
        for j in i + 1..eligible.len() {
            if let Some(d) = jaccard_distance(&eligible[i].labels, &eligible[j].labels) {
                out.push(AugmentedPair { a: eligible[i].smiles.clone(), b: eligible[j].smiles.clone(), distance: d });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(line: usize, smiles: &str, labels: &[u8]) -> RawMolecule {
        RawMolecule { line, smiles: smiles.into(), labels: labels.iter().map(|&l| l == 1).collect() }
    }

    #[test]
    fn filters_credit_the_first_match() {
        let names = vec!["fruity".to_string()];
        let rows = vec![
            raw(2, "[Na+].[Cl-]", &[1]),
            raw(3, "CCO", &[1]),
            raw(4, "OCC", &[1]),
            raw(5, "CC(=O)[O-]", &[1]),
            raw(6, "CCO.CC", &[1]),
            raw(7, "C", &[1]),
            raw(8, "O=N", &[1]),
            raw(9, "C[N+](=O)[O-]", &[1]),
            raw(10, "CCCC[Si](C)(C)C", &[1]),
            raw(11, "[NH4+].CC(=O)[O-]", &[1]),
        ];
        let (data, report) = filter_labels(&names, &rows).unwrap();
        assert_eq!(report.inorganic, 2);
        assert_eq!(report.duplicate, 1);
        assert_eq!(report.charged, 2);
        assert_eq!(report.multi_fragment, 1);
        assert_eq!(report.low_weight, 1);
        assert_eq!(report.carbon_free, 1);
        // 2 molecules survive, below the label floor, so the label goes
        assert_eq!(report.labels_dropped, vec!["fruity".to_string()]);
        assert_eq!(report.unlabeled, 2);
        assert!(data.is_empty());
    }

    #[test]
    fn heavy_molecules_are_removed() {
        let long = "C".repeat(45);
        let (_, report) = filter_labels(&["x".into()], &[raw(2, &long, &[1])]).unwrap();
        assert_eq!(report.high_weight, 1);
    }

    #[test]
    fn empty_input_gives_zero_counts() {
        let (data, report) = filter_labels(&[], &[]).unwrap();
        assert!(data.is_empty());
        assert_eq!(report.counts(), [0; 6]);
        assert_eq!(report.output, 0);
    }

    fn label_rows(n: usize) -> (Vec<String>, Vec<RawMolecule>) {
        let names = vec!["a".to_string(), "b".to_string(), "rare".to_string()];
        let rows = (0..n)
            .map(|i| {
                let smiles = format!("C{}O", "C".repeat(i));
                raw(i + 2, &smiles, &[1, (i % 2 == 0) as u8, (i == 0) as u8])
            })
            .collect();
        (names, rows)
    }

    #[test]
    fn rare_labels_are_dropped_and_filter_is_idempotent() {
        let (names, rows) = label_rows(40);
        let (data, report) = filter_labels(&names, &rows).unwrap();
        assert_eq!(report.labels_dropped, vec!["rare".to_string()]);
        assert_eq!(data.label_names, vec!["a".to_string(), "b".to_string()]);
        assert_eq!(data.len(), 40);
        let again: Vec<RawMolecule> =
            data.records.iter().enumerate().map(|(i, r)| RawMolecule { line: i + 2, smiles: r.smiles.clone(), labels: r.labels.clone() }).collect();
        let (twice, report2) = filter_labels(&data.label_names, &again).unwrap();
        assert_eq!(twice, data);
        assert_eq!(report2.counts(), [0; 6]);
    }

    #[test]
    fn unparseable_rows_are_reported_with_lines() {
        let (_, report) = filter_labels(&["x".into()], &[raw(17, "C1CC", &[1])]).unwrap();
        assert_eq!(report.unparseable, vec!["line 17: C1CC".to_string()]);
    }

    #[test]
    fn raw_label_table_reads_either_structure_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.csv");
        std::fs::write(&path, "nonStereoSMILES,descriptors,fruity,green\nCCO,fruity,1,0\nCCCO,green,0,1\n").unwrap();
        let (names, rows) = read_raw_labels(&path).unwrap();
        assert_eq!(names, vec!["fruity", "green"]);
        assert_eq!(rows[1].labels, vec![false, true]);
        std::fs::write(&path, "smiles,fruity\nCCO,2\n").unwrap();
        let err = read_raw_labels(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    fn toy_raw() -> (Vec<RawMixture>, Vec<RawPair>) {
        let m = |d: &str, id: &str, s: &[&str]| RawMixture {
            dataset: d.into(),
            id: id.into(),
            smiles: s.iter().map(|x| x.to_string()).collect(),
        };
        let p = |d: &str, a: &str, b: &str, x: f64, t| RawPair { dataset: d.into(), a: a.into(), b: b.into(), distance: x, experiment_type: t };
        let mixtures = vec![
            m("snitz", "1", &["CCO", "CC=O"]),
            m("snitz", "2", &["O=CC", "OCC"]),
            m("ravia", "1", &["CCCCO"]),
            m("bushdid", "7", &["OCCCC"]),
            m("bushdid", "8", &["CCO", "CCCCO", "c1ccccc1"]),
        ];
        let pairs = vec![
            p("snitz", "1", "2", 0.3, ExperimentType::Explicit),
            p("ravia", "1", "1", 0.1, ExperimentType::Explicit),
            p("bushdid", "7", "8", 0.6, ExperimentType::Triangle),
        ];
        (mixtures, pairs)
    }

    #[test]
    fn compile_merges_equal_sets() {
        let (m, p) = toy_raw();
        let c = Corpus::compile(&m, &p).unwrap();
        assert_eq!(c.mixtures.len(), 3);
        assert_eq!(c.mixtures[0].datasets, vec!["snitz".to_string()]);
        assert_eq!(c.mixtures[1].datasets, vec!["bushdid".to_string(), "ravia".to_string()]);
        assert!(c.pairs[0].is_identical);
        assert!(c.pairs[1].is_identical);
        assert!(!c.pairs[2].is_identical);
        assert_eq!(c.identical_pairs(), vec![0, 1]);
        assert_eq!(c.pairs[2].distance, 0.6);
        assert_eq!(c.molecules().len(), 4);
    }

    #[test]
    fn compiled_corpus_round_trips() {
        let (m, p) = toy_raw();
        let c = Corpus::compile(&m, &p).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn compile_rejects_bad_pairs() {
        let (m, mut p) = toy_raw();
        p[0].b = "9".into();
        assert!(Corpus::compile(&m, &p).unwrap_err().to_string().contains("unknown mixture"));
        let (m, mut p) = toy_raw();
        p[0].distance = 1.5;
        assert!(Corpus::compile(&m, &p).is_err());
    }

    fn synthetic_corpus(sizes: &[(usize, usize)], sources: &[&str]) -> Corpus {
        let mut mixtures = Vec::new();
        let mut pairs = Vec::new();
        let mut next = 0;
        let mut mix = |n: usize| {
            let comps: Vec<String> = (0..n).map(|k| format!("C{}", "C".repeat((next + k) % 40))).collect();
            next += 3;
            mixtures.push(Mixture { id: format!("m{}", mixtures.len()), datasets: vec![], components: comps });
            mixtures.len() - 1
        };
        for (i, &(na, nb)) in sizes.iter().enumerate() {
            let a = mix(na);
            let b = mix(nb);
            pairs.push(Pair {
                dataset: sources[i % sources.len()].into(),
                a,
                b,
                distance: 0.5,
                experiment_type: ExperimentType::Explicit,
                is_identical: false,
            });
        }
        Corpus { mixtures, pairs }
    }

    #[test]
    fn cv_folds_are_balanced_and_exclusive() {
        let sizes: Vec<(usize, usize)> = (0..865).map(|i| (1 + i % 7, 1 + i % 5)).collect();
        let mut sources = vec!["snitz"; 3];
        sources.extend(["ravia", "bushdid", "bushdid", "bushdid"]);
        let c = synthetic_corpus(&sizes, &sources);
        let spec = make_cv_splits(&c, 5, 11).unwrap();
        spec.validate(c.pairs.len()).unwrap();
        let mut all_test: Vec<usize> = spec.folds.iter().flat_map(|f| f.test.clone()).collect();
        all_test.sort_unstable();
        assert_eq!(all_test, (0..865).collect::<Vec<_>>());
        for fold in &spec.folds {
            assert!((172..=174).contains(&fold.test.len()));
            assert_eq!(fold.train.len() + fold.val.len() + fold.test.len(), 865);
            for s in c.sources() {
                let global = c.pairs.iter().filter(|p| p.dataset == s).count() as f64 / 865.0;
                let here = fold.test.iter().filter(|&&i| c.pairs[i].dataset == s).count() as f64;
                assert!((here - global * fold.test.len() as f64).abs() <= 2.0);
            }
        }
        assert_eq!(spec, make_cv_splits(&c, 5, 11).unwrap());
        assert!(make_cv_splits(&c, 1, 0).is_err());
    }

    #[test]
    fn tiny_source_stays_in_training() {
        let c = synthetic_corpus(&[(1, 2); 20], &["a", "a", "a", "a", "a", "a", "a", "a", "a", "b"]);
        let spec = make_cv_splits(&c, 5, 3).unwrap();
        let b: Vec<usize> = (0..20).filter(|&i| c.pairs[i].dataset == "b").collect();
        for fold in &spec.folds {
            assert!(b.iter().all(|i| fold.train.contains(i)));
        }
    }

    #[test]
    fn lmo_holds_molecules_out() {
        let sizes: Vec<(usize, usize)> = (0..200).map(|i| (1 + i % 4, 1 + i % 3)).collect();
        let c = synthetic_corpus(&sizes, &["s", "r", "b"]);
        let spec = make_lmo_splits(&c, 5, 0.2, 5).unwrap();
        spec.validate(c.pairs.len()).unwrap();
        let held: Vec<Vec<String>> = serde_json::from_value(spec.params["held_out"].clone()).unwrap();
        let mols = |p: usize| -> Vec<String> {
            let pair = &c.pairs[p];
            let mut v = c.mixtures[pair.a].components.clone();
            v.extend(c.mixtures[pair.b].components.clone());
            v
        };
        for (fold, held) in spec.folds.iter().zip(&held) {
            assert!(fold.test.iter().all(|&p| mols(p).iter().any(|m| held.contains(m))));
            assert!(fold.train.iter().chain(&fold.val).all(|&p| mols(p).iter().all(|m| !held.contains(m))));
            assert!(fold.test.len() >= 40);
        }
        let overlap = spec.folds[0].train.iter().filter(|i| spec.folds[1].train.contains(i)).count();
        assert!(overlap > 0);
    }

    #[test]
    fn size_statistic_and_thresholds() {
        let c = synthetic_corpus(&[(4, 9), (1, 43), (2, 2), (30, 30)], &["s"]);
        assert_eq!(c.pair_size(0), 6.0);
        assert!((c.pair_size(1) - 43f64.sqrt()).abs() < 1e-12);
        let spec = make_size_threshold_splits(&c, &[5.0, 10.0, 40.0], 0).unwrap();
        // 40 leaves nothing to test
        assert_eq!(spec.folds.len(), 2);
        assert_eq!(spec.folds[0].test, vec![0, 1, 3]);
        assert_eq!(spec.folds[1].test, vec![3]);
        assert!(make_size_threshold_splits(&c, &[10.0, 5.0], 0).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let s = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
        assert_eq!(jaccard_distance(&s(&[1, 1, 0]), &s(&[1, 1, 0])), Some(0.0));
        assert_eq!(jaccard_distance(&s(&[1, 0, 0]), &s(&[0, 1, 1])), Some(1.0));
        let d = jaccard_distance(&s(&[1, 1, 0]), &s(&[0, 1, 1])).unwrap();
        assert!((d - 2.0 / 3.0).abs() < 1e-15);
        let mono = MonoDataset {
            label_names: vec!["a".into(), "b".into()],
            records: vec![
                MonoRecord { smiles: "CCO".into(), labels: s(&[1, 0]) },
                MonoRecord { smiles: "CC".into(), labels: s(&[0, 0]) },
                MonoRecord { smiles: "CCC".into(), labels: s(&[1, 1]) },
                MonoRecord { smiles: "CCCC".into(), labels: s(&[0, 1]) },
            ],
        };
        assert_eq!(augment_with_jaccard(&mono, None).len(), 3);
        let only = augment_with_jaccard(&mono, Some(&["CCO".to_string(), "CCC".to_string()]));
        assert_eq!(only, vec![AugmentedPair { a: "CCO".into(), b: "CCC".into(), distance: 0.5 }]);
    }

    proptest! {
        #[test]
        fn jaccard_is_a_bounded_symmetric_distance(a in prop::collection::vec(any::<bool>(), 8), b in prop::collection::vec(any::<bool>(), 8)) {
            if let Some(d) = jaccard_distance(&a, &b) {
                prop_assert!((0.0..=1.0).contains(&d));
                prop_assert_eq!(Some(d), jaccard_distance(&b, &a));
            }
            if a.iter().any(|&x| x) {
                prop_assert_eq!(jaccard_distance(&a, &a), Some(0.0));
            }
        }
    }
}
