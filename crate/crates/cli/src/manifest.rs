//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use kite_core::training::sha256_hex;
use kite_core::{write_atomic, CoreError, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

/// Everything needed to repeat a run: command line, effective config
/// fingerprint, seed, thread count and checksums of every input and output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub version: String,
    pub seed: u64,
    pub threads: usize,
    pub config_fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub summary: serde_json::Value,
}

/// One subcommand invocation writing into `out_dir`.
pub struct Run {
    pub out_dir: PathBuf,
    pub config: RunConfig,
    pub threads: usize,
    pub quiet: bool,
    command: String,
    args: Vec<String>,
    config_text: String,
    inputs: BTreeMap<String, String>,
    input_paths: Vec<PathBuf>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

fn canonical(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Run {
    pub fn start(command: &str, args: Vec<String>, out_dir: &Path, config: RunConfig, threads: usize, quiet: bool) -> Result<Self> {
        if threads == 0 {
            return Err(CoreError::Config("--threads must be at least 1".into()));
        }
        fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
        let config_text = config.to_toml()?;
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            config,
            threads,
            quiet,
            command: command.to_string(),
            args,
            config_text,
            inputs: BTreeMap::new(),
            input_paths: Vec::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(self.config_text.as_bytes())
    }

    pub fn progress(&self, line: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}: {}", self.command, line.as_ref());
        }
    }

    /// Reads an input file, recording its checksum.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        self.input_paths.push(canonical(path));
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).map_err(|_| CoreError::at(path, 0, "file is not UTF-8"))
    }

    /// Checksum of an input that a library function opens itself.
    pub fn note_input(&mut self, path: &Path) -> Result<String> {
        self.read(path).map(|b| sha256_hex(&b))
    }

    pub fn output_path(&self, name: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        if path.exists() && self.input_paths.contains(&canonical(&path)) {
            return Err(CoreError::Config(format!(
                "output {} would overwrite an input; choose another --out-dir",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.output_path(name)?;
        write_atomic(&path, bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    /// Records a file some library call already wrote into the output dir.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
        self.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Echoes the effective config and writes the manifest last.
    pub fn finish(mut self, summary: serde_json::Value) -> Result<RunManifest> {
        let text = self.config_text.clone();
        self.write(CONFIG_ECHO_FILE, text.as_bytes())?;
        let manifest = RunManifest {
            command: self.command.clone(),
            args: self.args.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            threads: self.threads,
            config_fingerprint: self.fingerprint(),
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            summary,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.out_dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }
}
