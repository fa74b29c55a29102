//! Output directories that appear only when a command succeeds, plus the
//! run record written next to the results.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use pommix::pipeline::RunConfig;
use pommix::{Error, Result};
use serde::Serialize;

use crate::Opts;

pub const CONFIG: &str = "config.toml";
pub const RECORD: &str = "run.json";

/// Results are written into a hidden sibling directory and moved into place
/// by [`Output::finish`]; dropping it unfinished removes everything.
pub struct Output {
    target: PathBuf,
    staging: tempfile::TempDir,
}

impl Output {
    pub fn begin(target: &Path) -> Result<Self> {
        if target.is_file() {
            return Err(Error::Config(format!("--out {} is a file", target.display())));
        }
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let staging = tempfile::Builder::new()
            .prefix(".pommix-partial-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        Ok(Output { target: target.to_path_buf(), staging })
    }

    pub fn path(&self) -> &Path {
        self.staging.path()
    }

    /// Writes the config and run record, then moves every entry into the
    /// target directory, replacing same-named entries.
    pub fn finish(self, config: &RunConfig, record: &RunRecord) -> Result<()> {
        let dir = self.staging.path();
        let path = dir.join(CONFIG);
        fs::write(&path, config.to_toml()?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(RECORD);
        fs::write(&path, serde_json::to_string_pretty(record)? + "\n").map_err(|e| Error::io(&path, e))?;
        fs::create_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let to = self.target.join(entry.file_name());
            if to.is_dir() {
                fs::remove_dir_all(&to).map_err(|e| Error::io(&to, e))?;
            } else if to.exists() {
                fs::remove_file(&to).map_err(|e| Error::io(&to, e))?;
            }
            fs::rename(entry.path(), &to).map_err(|e| Error::io(&to, e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
pub struct RunRecord {
    pub command: String,
    pub seed: u64,
    pub version: &'static str,
    pub git_describe: String,
    pub wall_time_secs: f64,
    pub arguments: Opts,
}

impl RunRecord {
    pub fn new(command: &str, config: &RunConfig, opts: &Opts, wall_time_secs: f64) -> Self {
        RunRecord {
            command: command.into(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION"),
            git_describe: git_describe(),
            wall_time_secs,
            arguments: opts.clone(),
        }
    }
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
