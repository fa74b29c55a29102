//! Writes a small generated corpus (raw label table, mixtures, pairs and
//! descriptors) into the directory given as the only argument.

use std::path::PathBuf;

use pommix::synthetic::{write_descriptors, Synthetic};

fn main() -> pommix::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic".into()));
    Synthetic::default().write_raw(&dir)?;
    write_descriptors(&dir.join("descriptors.csv"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
