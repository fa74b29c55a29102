//! SMILES reading and canonical writing for small organic molecules.
//!
//! ```
//! let g = pommix_smiles::parse_smiles("CCO").unwrap();
//! assert_eq!(g.num_atoms(), 3);
//! assert_eq!(pommix_smiles::canonicalize(&g), pommix_smiles::canonicalize_str("OCC").unwrap());
//! ```

mod canon;
mod element;
mod error;
mod graph;
mod parser;
mod perceive;

pub use canon::{canonical_ranks, canonical_smiles, refined_classes, write_smiles};
pub use element::Element;
pub use error::{ParseError, ParseErrorKind};
pub use graph::{Atom, Bond, BondOrder, BondStereo, Chirality, Hybridization, MolecularGraph};

/// Parses a SMILES string into a molecular graph with perceived rings,
/// aromaticity, implicit hydrogens and conjugation.
pub fn parse_smiles(text: &str) -> Result<MolecularGraph, ParseError> {
    let raw = parser::parse_raw(text)?;
    perceive::build(raw)
}

/// Canonical SMILES for a parsed molecule.
pub fn canonicalize(g: &MolecularGraph) -> String {
    canonical_smiles(g)
}

/// Parses then canonicalizes.
pub fn canonicalize_str(text: &str) -> Result<String, ParseError> {
    parse_smiles(text).map(|g| canonical_smiles(&g))
}

/// Molecular weight in daltons including hydrogens.
pub fn molecular_weight(g: &MolecularGraph) -> f64 {
    g.molecular_weight()
}
