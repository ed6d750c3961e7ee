//! Run manifests: provenance written next to every command's outputs.
//!
//! Directory outputs get `run_manifest.json` inside the directory; a file
//! output `name.ext` gets `name.run.json` beside it. JSON artifacts carry the
//! manifest's file name in their `run_manifest` field.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CliResult, Stage, StageExt};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const DIR_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// SHA-256 of the effective settings.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

/// Collects provenance while a command runs.
pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_hash: String, seed: Option<u64>) -> ManifestBuilder {
        ManifestBuilder {
            command: command.to_string(),
            config_hash,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Writes the manifest to `path` and returns it.
    pub fn write(self, path: &Path, stage: Stage) -> CliResult<RunManifest> {
        let m = self.finish();
        write_json(path, &m, stage)?;
        Ok(m)
    }
}

/// Manifest path for a single-file output.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.run.json"))
}

/// File name component, for the `run_manifest` field of JSON artifacts.
pub fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T, stage: Stage) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).stage(stage)?;
        }
    }
    let text = serde_json::to_string_pretty(value).stage(stage)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| crate::error::CliError::msg(stage, format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_manifest_sits_beside_output() {
        assert_eq!(manifest_for_file(Path::new("out/report.json")), PathBuf::from("out/report.run.json"));
        assert_eq!(manifest_for_file(Path::new("t.json")), PathBuf::from("t.run.json"));
    }

    #[test]
    fn builder_records_paths() {
        let mut b = ManifestBuilder::new("eval", "ab".into(), Some(3));
        b.input(Path::new("cohort"));
        b.output(Path::new("report.json"));
        let m = b.finish();
        assert_eq!(m.inputs, vec!["cohort"]);
        assert_eq!(m.outputs, vec!["report.json"]);
        assert_eq!(m.seed, Some(3));
        assert!(m.wall_time_s >= 0.0);
    }
}
