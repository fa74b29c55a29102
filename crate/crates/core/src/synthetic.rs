//! Small generated corpora in the raw input formats, for smoke runs and
//! tests that need a whole pipeline without the real data.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::descriptors::DescriptorTable;
use crate::error::{Error, Result};
use crate::featurize::DESCRIPTOR_DIM;

pub const MOLECULES: [&str; 44] = [
    "CCO", "CCCO", "CCCCO", "CCCCCO", "CC(C)O", "CC(C)CO", "CC=O", "CCC=O", "CCCC=O", "CCCCC=O", "CC(C)=O",
    "CCC(C)=O", "c1ccccc1", "Cc1ccccc1", "CCc1ccccc1", "Oc1ccccc1", "Nc1ccccc1", "COc1ccccc1", "O=Cc1ccccc1",
    "CC(=O)OC", "CCOC(=O)C", "CCCOC(=O)C", "CCOC(=O)CC", "CCN", "CCCN", "CCCCN", "CS", "CCS", "CCCS", "CSC",
    "C1CCCCC1", "C1CCCC1", "C1CCOC1", "C1CCNCC1", "OCC(O)CO", "C#CC", "CC=CC", "C=CCO", "CCOCC", "CC(C)C",
    "CCCCCC", "CCCCCCC", "CC(C)(C)O", "c1ccncc1",
];

/// Rows the label filters remove: a salt, a duplicate and a carbon-free
/// molecule below the weight floor.
pub const REJECTED: [&str; 3] = ["[Na+].[Cl-]", "OCC", "O"];

pub const LABELS: [&str; 3] = ["even", "odd", "common"];
const HIDDEN: usize = 8;

pub struct Synthetic {
    pub mixtures: usize,
    pub pairs: usize,
    pub identical: usize,
    pub max_size: usize,
    pub seed: u64,
}

impl Default for Synthetic {
    fn default() -> Self {
        Synthetic { mixtures: 36, pairs: 90, identical: 4, max_size: 8, seed: 7 }
    }
}

fn descriptor_row(i: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
    (0..DESCRIPTOR_DIM).map(|j| if j == 0 { MOLECULES[i].len() as f64 } else { rng.gen::<f64>() }).collect()
}

/// Descriptors keyed by canonical SMILES; column 0 is the string length,
/// the rest are uniform noise fixed per molecule.
pub fn descriptors() -> Result<DescriptorTable> {
    let mut t = DescriptorTable::new((0..DESCRIPTOR_DIM).map(|j| format!("d{j}")).collect());
    for i in 0..MOLECULES.len() {
        t.insert(pommix_smiles::canonicalize_str(MOLECULES[i])?, descriptor_row(i))?;
    }
    Ok(t)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl Synthetic {
    /// Writes `gslf.csv`, `mixtures.csv` and `pairs.csv` into `dir`. Pair
    /// distances follow the cosine distance of averaged hidden molecule
    /// vectors plus a little noise.
    pub fn write_raw(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let path = dir.join("gslf.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(std::iter::once("smiles").chain(LABELS))?;
        for (i, s) in MOLECULES.iter().enumerate() {
            let flags = [i % 2 == 0, i % 2 == 1, i % 3 != 0];
            w.write_record(std::iter::once(s.to_string()).chain(flags.iter().map(|&f| u8::from(f).to_string())))?;
        }
        for s in REJECTED {
            w.write_record([s, "1", "0", "1"])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let hidden: Vec<Vec<f64>> =
            (0..MOLECULES.len()).map(|_| (0..HIDDEN).map(|_| rng.gen::<f64>() - 0.5).collect()).collect();
        let mut members = Vec::with_capacity(self.mixtures);
        let path = dir.join("mixtures.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["dataset", "mixture_id", "smiles_list"])?;
        for m in 0..self.mixtures {
            let n = rng.gen_range(1..=self.max_size.min(MOLECULES.len()));
            let set = sample(&mut rng, MOLECULES.len(), n).into_vec();
            let list: Vec<&str> = set.iter().map(|&i| MOLECULES[i]).collect();
            w.write_record(["snitz+ravia+bushdid", &m.to_string(), &list.join(";")])?;
            members.push(set);
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let centroid = |set: &[usize]| -> Vec<f64> {
            (0..HIDDEN).map(|k| set.iter().map(|&i| hidden[i][k]).sum::<f64>() / set.len() as f64).collect()
        };
        let sources = [("snitz", "explicit"), ("ravia", "explicit"), ("bushdid", "triangle")];
        let path = dir.join("pairs.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["dataset", "mixture_id_a", "mixture_id_b", "distance", "experiment_type"])?;
        for p in 0..self.pairs + self.identical {
            let (a, b) = if p < self.pairs {
                let ab = sample(&mut rng, self.mixtures, 2);
                (ab.index(0), ab.index(1))
            } else {
                let a = rng.gen_range(0..self.mixtures);
                (a, a)
            };
            let d = 0.15 + 0.7 * (1.0 - cosine(&centroid(&members[a]), &centroid(&members[b]))) / 2.0;
            let d = (d + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            let (source, kind) = sources[p % sources.len()];
            w.write_record([source, &a.to_string(), &b.to_string(), &format!("{d:.4}"), kind])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

pub fn write_descriptors(path: &Path) -> Result<()> {
    descriptors()?.write_csv(path)
}
