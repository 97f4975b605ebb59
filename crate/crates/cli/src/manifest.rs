//! Run manifests: one JSON file per command invocation recording what ran,
//! with which effective configuration, and which files it produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

/// Written beside the outputs as `<command>.manifest.json`. Every path in
/// `outputs` is verified to exist before the manifest itself is written.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// FNV-1a hash of the canonical JSON of the effective configuration.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub timings_ms: Vec<(String, f64)>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> RunManifest {
        let mut versions = BTreeMap::new();
        versions.insert("gausssurf-cli".into(), env!("CARGO_PKG_VERSION").into());
        versions.insert("gausssurf".into(), gausssurf::VERSION.into());
        RunManifest {
            command: command.into(),
            config_hash: fnv1a_hex(config.to_string().as_bytes()),
            config,
            seed,
            versions,
            timings_ms: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Runs `f`, recording its wall time under `name`.
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .push((name.into(), start.elapsed().as_secs_f64() * 1e3));
        out
    }

    pub fn record_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Verifies every recorded output exists, then writes the manifest as
    /// `<command>.manifest.json` inside `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for out in &self.outputs {
            if !Path::new(out).exists() {
                bail!("declared output missing at exit: {out}");
            }
        }
        let path = dir.join(format!("{}.manifest.json", self.command));
        let body = serde_json::to_string_pretty(self).context("serialize manifest")?;
        fs::write(&path, body + "\n")
            .with_context(|| format!("write manifest {}", path.display()))?;
        Ok(path)
    }
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rejects_missing_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({"a": 1}), 7);
        m.record_output(&dir.path().join("nope.bin"));
        assert!(m.write(dir.path()).is_err());
    }

    #[test]
    fn manifest_round_trip_and_hash_stability() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.txt");
        fs::write(&out, "hi").unwrap();
        let mut m = RunManifest::new("test", serde_json::json!({"a": 1}), 7);
        m.record_output(&out);
        let p = m.write(dir.path()).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["command"], "test");
        assert_eq!(v["seed"], 7);
        assert_eq!(
            v["config_hash"],
            RunManifest::new("test", serde_json::json!({"a": 1}), 7).config_hash
        );
        assert!(v["versions"]["gausssurf"].is_string());
    }
}
