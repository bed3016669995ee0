//! Experiment directories: CSV artifacts with a provenance header, plus a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One CSV cell. Floats are written with 17 significant digits so they
/// round-trip exactly.
pub enum Cell {
    F(f64),
    U(u64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::F(v) if v.is_nan() => "NaN".into(),
            Cell::F(v) if v.is_infinite() => if *v > 0.0 { "inf" } else { "-inf" }.into(),
            Cell::F(v) => format!("{v:.16e}"),
            Cell::U(v) => v.to_string(),
            Cell::S(s) => s.clone(),
        }
    }
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    rows: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    spec_sha256: &'a str,
    seed: u64,
    mcs_cli: &'a str,
    mcs_core: &'a str,
    files: &'a [FileEntry],
    summary: &'a toml::Table,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Collects the artifacts of one experiment in `dir`.
pub struct Artifacts {
    dir: PathBuf,
    command: String,
    spec_hash: String,
    seed: u64,
    header: String,
    files: Vec<FileEntry>,
    pub summary: toml::Table,
}

impl Artifacts {
    /// Creates `dir` and writes the resolved spec into it.
    pub fn create(dir: &Path, command: &str, spec_text: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let spec_hash = sha256_hex(spec_text.as_bytes());
        let spec_path = dir.join("spec.toml");
        fs::write(&spec_path, spec_text).map_err(|e| CliError::io(&spec_path, e))?;
        let header = format!(
            "# mcs {command}; spec_sha256={spec_hash}; seed={seed}; mcs-cli={}; mcs-core={}\n",
            env!("CARGO_PKG_VERSION"),
            mcs_core::VERSION
        );
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            spec_hash,
            seed,
            header,
            files: Vec::new(),
            summary: toml::Table::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn csv<I, R>(&mut self, name: &str, columns: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = Cell>,
    {
        let mut buf = self.header.clone().into_bytes();
        let mut count = 0;
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(columns).map_err(CliError::csv)?;
            for row in rows {
                let cells: Vec<String> = row.into_iter().map(|c| c.render()).collect();
                w.write_record(&cells).map_err(CliError::csv)?;
                count += 1;
            }
            w.flush().map_err(|e| CliError::io(&self.dir.join(name), e))?;
        }
        let path = self.dir.join(name);
        fs::write(&path, &buf).map_err(|e| CliError::io(&path, e))?;
        self.files.push(FileEntry {
            name: name.to_string(),
            rows: count,
            sha256: sha256_hex(&buf),
        });
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Into<toml::Value>) {
        self.summary.insert(key.to_string(), value.into());
    }

    /// Writes `manifest.toml`; floats in the summary must be finite.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            command: &self.command,
            spec_sha256: &self.spec_hash,
            seed: self.seed,
            mcs_cli: env!("CARGO_PKG_VERSION"),
            mcs_core: mcs_core::VERSION,
            files: &self.files,
            summary: &self.summary,
        };
        let text = toml::to_string(&manifest).map_err(|e| CliError::Output(e.to_string()))?;
        let path = self.dir.join("manifest.toml");
        let mut f = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| CliError::io(&path, e))?;
        Ok(self.dir)
    }
}

/// Finite floats only, so the manifest stays valid TOML.
pub fn finite(v: f64) -> toml::Value {
    if v.is_finite() {
        toml::Value::Float(v)
    } else {
        toml::Value::String(format!("{v}"))
    }
}
