//! Molecule-level descriptor table and rank-based normalization.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw or normalized descriptor rows keyed by canonical SMILES.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorTable {
    pub names: Vec<String>,
    rows: IndexMap<String, Vec<f64>>,
}

impl DescriptorTable {
    pub fn new(names: Vec<String>) -> Self {
        DescriptorTable { names, rows: IndexMap::new() }
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, key: String, row: Vec<f64>) -> Result<()> {
        if row.len() != self.width() {
            return Err(Error::Data(format!(
                "descriptor row for {key} has {} values, expected {}",
                row.len(),
                self.width()
            )));
        }
        if let Some(bad) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("descriptor {} of {key} is not finite", self.names[bad])));
        }
        self.rows.entry(key).or_insert(row);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&[f64]> {
        self.rows
            .get(key)
            .map(|r| r.as_slice())
            .ok_or_else(|| Error::MissingDescriptor(key.to_string()))
    }

    pub fn contains(&self, key: &str) -> bool {
        self.rows.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(|k| k.as_str())
    }

    /// Reads `smiles,<name>,...`; keys are re-canonicalized so any valid
    /// spelling of a molecule resolves. Later duplicates are ignored.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("smiles") {
            return Err(Error::Data(format!("{}: first column must be `smiles`", path.display())));
        }
        let mut table = DescriptorTable::new(headers.iter().skip(1).map(str::to_string).collect());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let at = || format!("{}:{}", path.display(), line + 2);
            let key = pommix_smiles::canonicalize_str(&rec[0]).map_err(|e| Error::Data(format!("{}: {e}", at())))?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("{}: {e}", at())))?;
            table.insert(key, row).map_err(|e| Error::Data(format!("{}: {e}", at())))?;
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["smiles".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (k, row) in &self.rows {
            let mut rec = vec![k.clone()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// A new table with every row passed through `stats`.
    pub fn normalized(&self, stats: &NormStats) -> Result<Self> {
        let mut out = DescriptorTable::new(self.names.clone());
        for (k, row) in &self.rows {
            out.rows.insert(k.clone(), stats.transform(row)?);
        }
        Ok(out)
    }
}

/// Empirical CDF of one feature: sorted distinct fit values and their
/// mid-rank levels `rank / (n + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureCdf {
    pub breaks: Vec<f64>,
    pub levels: Vec<f64>,
}

impl FeatureCdf {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit a CDF on zero molecules".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len() as f64;
        let mut breaks = Vec::new();
        let mut levels = Vec::new();
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j + 1 < v.len() && v[j + 1] == v[i] {
                j += 1;
            }
            // 1-based ranks i+1..=j+1
            let mid = (i + j + 2) as f64 / 2.0;
            breaks.push(v[i]);
            levels.push(mid / (n + 1.0));
            i = j + 1;
        }
        Ok(FeatureCdf { breaks, levels })
    }

    /// Piecewise-linear CDF lookup, flat beyond the fitted range. A feature
    /// with one distinct value maps everything to 0.5.
    pub fn apply(&self, x: f64) -> f64 {
        let b = &self.breaks;
        if b.len() == 1 {
            return 0.5;
        }
        let k = b.partition_point(|&v| v <= x);
        if k == 0 {
            return self.levels[0];
        }
        if k == b.len() {
            return *self.levels.last().expect("nonempty");
        }
        let (x0, x1) = (b[k - 1], b[k]);
        let (y0, y1) = (self.levels[k - 1], self.levels[k]);
        y0 + (x - x0) / (x1 - x0) * (y1 - y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub method: String,
    pub features: Vec<FeatureCdf>,
}

impl NormStats {
    /// Fits one CDF per column on the rows of `fit_set`.
    pub fn fit<'a>(table: &DescriptorTable, fit_set: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let rows: Vec<&[f64]> = fit_set.into_iter().map(|k| table.get(k)).collect::<Result<_>>()?;
        let features = (0..table.width())
            .map(|j| FeatureCdf::fit(&rows.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        Ok(NormStats { method: "midrank_cdf".into(), features })
    }

    pub fn transform(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.features.len() {
            return Err(Error::Data(format!(
                "descriptor row has {} values, normalization expects {}",
                row.len(),
                self.features.len()
            )));
        }
        Ok(row.iter().zip(&self.features).map(|(&x, f)| f.apply(x)).collect())
    }
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorTable> {
    DescriptorTable::read_csv(path)
}
