//! Run manifests: what ran, with which resolved configuration, on which
//! inputs (by SHA-256), producing which files, and how long it took.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cotrans_core::config::{TrainConfig, KEYS};
use cotrans_core::data::DatasetPaths;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub error: Option<String>,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub best_epoch: Option<usize>,
    pub extra: BTreeMap<String, String>,
    pub timings: Timings,
    #[serde(skip)]
    clock: Option<Instant>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("not a file path: {}", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

/// Role-tagged dataset files.
pub fn dataset_inputs(paths: &DatasetPaths) -> Vec<(&'static str, &Path)> {
    let mut out = vec![("source", paths.source.as_path()), ("target", paths.target.as_path())];
    for (role, p) in [
        ("kg", &paths.kg),
        ("map_source", &paths.map_source),
        ("map_target", &paths.map_target),
    ] {
        if let Some(p) = p {
            out.push((role, p.as_path()));
        }
    }
    out
}

impl Manifest {
    pub fn start(command: &str, cfg: &TrainConfig, inputs: Vec<(&str, &Path)>) -> Result<Self> {
        let inputs = inputs
            .into_iter()
            .map(|(role, p)| {
                let sha256 = digest_file(p)?;
                let path = std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
                Ok(InputFile {
                    role: role.to_string(),
                    path,
                    sha256,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let config = KEYS
            .iter()
            .map(|k| (k.to_string(), cfg.get(k).expect("known key")))
            .collect();
        Ok(Manifest {
            command: command.to_string(),
            status: "running".into(),
            error: None,
            seed: cfg.seed,
            config,
            inputs,
            outputs: Vec::new(),
            best_epoch: None,
            extra: BTreeMap::new(),
            timings: Timings {
                started_unix: unix_now(),
                ..Default::default()
            },
            clock: Some(Instant::now()),
        })
    }

    fn stop_clock(&mut self) {
        self.timings.finished_unix = Some(unix_now());
        self.timings.wall_seconds = self.clock.map(|c| c.elapsed().as_secs_f64());
    }

    pub fn finish(&mut self) {
        self.status = "completed".into();
        self.stop_clock();
    }

    pub fn fail(&mut self, error: &str) {
        self.status = "failed".into();
        self.error = Some(error.to_string());
        self.stop_clock();
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("manifest.json"), self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &self.config {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_paths(&self) -> Result<DatasetPaths> {
        let find = |role: &str| self.inputs.iter().find(|i| i.role == role).map(|i| i.path.clone());
        let (Some(source), Some(target)) = (find("source"), find("target")) else {
            bail!("manifest lists no source/target inputs");
        };
        Ok(DatasetPaths {
            source,
            target,
            kg: find("kg"),
            map_source: find("map_source"),
            map_target: find("map_target"),
            id_maps: None,
        })
    }

    /// Fails if any recorded input changed since the run.
    pub fn verify_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = digest_file(&input.path)?;
            if now != input.sha256 {
                bail!(
                    "{} changed since training (sha256 {} != recorded {})",
                    input.path.display(),
                    now,
                    input.sha256
                );
            }
        }
        Ok(())
    }
}
