//! One-hot atom and bond features and assembled per-molecule graph tensors.

use pommix_smiles::{canonicalize, BondOrder, BondStereo, Chirality, Hybridization, MolecularGraph};

use crate::descriptors::DescriptorTable;
use crate::error::Result;

/// Atomic number 1..=54 plus a catch-all.
pub const ATOMIC_NUMBER_SLOTS: usize = 55;
/// Heavy-atom degree 0..=5 plus a catch-all.
pub const DEGREE_SLOTS: usize = 7;
/// Formal charge -2..=2 plus a catch-all.
pub const CHARGE_SLOTS: usize = 6;
/// Unspecified, clockwise, counter-clockwise, other, catch-all.
pub const CHIRALITY_SLOTS: usize = 5;
/// Total hydrogens 0..=8 plus a catch-all.
pub const HYDROGEN_SLOTS: usize = 10;
/// sp, sp2, sp3, sp3d, sp3d2, catch-all.
pub const HYBRIDIZATION_SLOTS: usize = 6;

/// (name, width) of each node feature block in layout order. The aromatic
/// block is a single flag rather than a one-hot block.
pub const NODE_BLOCKS: [(&str, usize); 7] = [
    ("atomic_number", ATOMIC_NUMBER_SLOTS),
    ("degree", DEGREE_SLOTS),
    ("formal_charge", CHARGE_SLOTS),
    ("chirality", CHIRALITY_SLOTS),
    ("hydrogens", HYDROGEN_SLOTS),
    ("hybridization", HYBRIDIZATION_SLOTS),
    ("aromatic", 1),
];

pub const NODE_DIM: usize = ATOMIC_NUMBER_SLOTS
    + DEGREE_SLOTS
    + CHARGE_SLOTS
    + CHIRALITY_SLOTS
    + HYDROGEN_SLOTS
    + HYBRIDIZATION_SLOTS
    + 1;

/// Bond type (single, double, triple, aromatic, catch-all), conjugated flag,
/// ring flag, stereo (none, Z, E, cis, trans, any, catch-all).
pub const EDGE_BLOCKS: [(&str, usize); 4] = [("bond_type", 5), ("conjugated", 1), ("in_ring", 1), ("stereo", 7)];

pub const EDGE_DIM: usize = 5 + 1 + 1 + 7;

/// Number of molecule-level descriptors fed to the global state.
pub const DESCRIPTOR_DIM: usize = 200;

const _: () = assert!(NODE_DIM == 90);
const _: () = assert!(EDGE_DIM == 14);

fn slot(value: i64, lo: i64, slots: usize) -> usize {
    let k = value - lo;
    if k >= 0 && (k as usize) < slots - 1 {
        k as usize
    } else {
        slots - 1
    }
}

pub fn node_feature_vector(g: &MolecularGraph, atom: usize) -> Vec<f32> {
    let a = &g.atoms[atom];
    let mut v = vec![0.0f32; NODE_DIM];
    let mut base = 0;
    let mut set = |width: usize, k: usize| {
        v[base + k] = 1.0;
        base += width;
    };
    set(ATOMIC_NUMBER_SLOTS, slot(a.atomic_number() as i64, 1, ATOMIC_NUMBER_SLOTS));
    set(DEGREE_SLOTS, slot(g.degree(atom) as i64, 0, DEGREE_SLOTS));
    set(CHARGE_SLOTS, slot(a.charge as i64, -2, CHARGE_SLOTS));
    let chir = match a.chirality {
        Chirality::Unspecified => 0,
        Chirality::Clockwise => 1,
        Chirality::CounterClockwise => 2,
        Chirality::Other => 3,
    };
    set(CHIRALITY_SLOTS, chir);
    set(HYDROGEN_SLOTS, slot(a.total_h() as i64, 0, HYDROGEN_SLOTS));
    let hyb = match g.hybridization(atom) {
        Hybridization::Sp => 0,
        Hybridization::Sp2 => 1,
        Hybridization::Sp3 => 2,
        Hybridization::Sp3d => 3,
        Hybridization::Sp3d2 => 4,
        Hybridization::Unknown => 5,
    };
    set(HYBRIDIZATION_SLOTS, hyb);
    if a.aromatic {
        v[NODE_DIM - 1] = 1.0;
    }
    v
}

pub fn edge_feature_vector(g: &MolecularGraph, bond: usize) -> Vec<f32> {
    let b = &g.bonds[bond];
    let mut v = vec![0.0f32; EDGE_DIM];
    let kind = match b.order {
        BondOrder::Single => 0,
        BondOrder::Double => 1,
        BondOrder::Triple => 2,
        BondOrder::Aromatic => 3,
    };
    v[kind] = 1.0;
    v[5] = if b.conjugated { 1.0 } else { 0.0 };
    v[6] = if b.in_ring { 1.0 } else { 0.0 };
    let stereo = match b.stereo {
        BondStereo::None => 0,
        BondStereo::Z => 1,
        BondStereo::E => 2,
        BondStereo::Cis => 3,
        BondStereo::Trans => 4,
        BondStereo::Any => 5,
    };
    v[7 + stereo] = 1.0;
    v
}

/// Numeric form of one molecule: row-major node and edge feature matrices,
/// directed edges as `(source, target)`, and the normalized descriptors.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphTensors {
    pub num_nodes: usize,
    pub node_features: Vec<f32>,
    pub edge_features: Vec<f32>,
    pub edge_index: Vec<(usize, usize)>,
    pub global: Vec<f32>,
}

impl GraphTensors {
    pub fn num_edges(&self) -> usize {
        self.edge_index.len()
    }

    /// Features without a descriptor lookup; `global` is supplied directly.
    pub fn from_graph(g: &MolecularGraph, global: Vec<f32>) -> Self {
        let mut node_features = Vec::with_capacity(g.num_atoms() * NODE_DIM);
        for i in 0..g.num_atoms() {
            node_features.extend(node_feature_vector(g, i));
        }
        let mut edge_features = Vec::with_capacity(2 * g.num_bonds() * EDGE_DIM);
        let mut edge_index = Vec::with_capacity(2 * g.num_bonds());
        for (k, b) in g.bonds.iter().enumerate() {
            let f = edge_feature_vector(g, k);
            edge_index.push((b.begin, b.end));
            edge_features.extend_from_slice(&f);
            edge_index.push((b.end, b.begin));
            edge_features.extend(f);
        }
        GraphTensors { num_nodes: g.num_atoms(), node_features, edge_features, edge_index, global }
    }
}

/// Assembles tensors for `g`, looking its descriptors up by canonical SMILES
/// in an already normalized table.
pub fn build_graph_tensors(g: &MolecularGraph, table: &DescriptorTable) -> Result<GraphTensors> {
    let key = canonicalize(g);
    let global = table.get(&key)?.iter().map(|&x| x as f32).collect();
    Ok(GraphTensors::from_graph(g, global))
}
