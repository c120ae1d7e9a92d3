//! Run outputs and the manifest.

use crate::config::{serialize, RunConfig};
use kinetics_core::audit::{Check, Outcome};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub version: &'static str,
    pub wall_clock: Duration,
    pub checks: Vec<Check>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# kinetics run manifest\n");
        s.push_str(&format!("version = {}\n", self.version));
        s.push_str(&format!("wall_clock_seconds = {:.3}\n", self.wall_clock.as_secs_f64()));
        s.push_str("\n[config]\n");
        s.push_str(&serialize(&self.config));
        s.push_str("\n[checks]\n");
        for c in &self.checks {
            s.push_str(&c.row());
            s.push('\n');
        }
        s.push_str("\n[files]\n");
        for f in &self.files {
            s.push_str(f);
            s.push('\n');
        }
        s.push_str(&format!("\nstatus = {}\n", if self.passed() { "PASS" } else { "FAIL" }));
        s
    }
}

/// Write to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Write the tables, a `checks.tsv`, then the manifest last.
pub fn write_outputs(
    dir: &Path,
    config: &RunConfig,
    outcome: &Outcome,
    wall_clock: Duration,
) -> io::Result<RunManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for t in &outcome.tables {
        write_atomic(&dir.join(&t.file), &t.body)?;
        files.push(t.file.clone());
    }
    write_atomic(&dir.join("checks.tsv"), &outcome.checks_tsv())?;
    files.push("checks.tsv".into());
    files.push("manifest.txt".into());
    let manifest = RunManifest {
        config: config.clone(),
        version: env!("CARGO_PKG_VERSION"),
        wall_clock,
        checks: outcome.checks.clone(),
        files,
    };
    write_atomic(&manifest_path(dir), &manifest.render())?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}
