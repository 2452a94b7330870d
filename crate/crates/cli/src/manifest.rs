//! The experiment manifest written by `prepare` and read by every later command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use srnn_core::{Error, Result};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Artifact locations are stored relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub corpus_roots: Vec<PathBuf>,
    /// Fully resolved configuration used by downstream commands.
    pub config: PathBuf,
    pub split_plan: PathBuf,
    pub speaker_stats: PathBuf,
    pub cache_dir: PathBuf,
    pub report: PathBuf,
    /// Seed used for the split plan.
    pub seed: u64,
    pub desk_scale: bool,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Where each command leaves its outputs under the manifest directory.
pub mod artifacts {
    pub const ENCODER: &str = "encoder.ckpt";
    pub const ENCODER_LOSS: &str = "encoder_loss.csv";
    pub const EMBEDDINGS: &str = "embeddings.json";
    pub const RUNS: &str = "runs";
    pub const SYNTH: &str = "synth";
    pub const EVAL: &str = "eval";
    pub const ADAPT: &str = "adapt";
    pub const FIGURES: &str = "figures";
}

impl ExperimentManifest {
    pub fn new(root: &Path, corpus_roots: Vec<PathBuf>, seed: u64, desk_scale: bool) -> Self {
        Self {
            corpus_roots,
            config: "config.toml".into(),
            split_plan: "split.tsv".into(),
            speaker_stats: "speaker_stats.tsv".into(),
            cache_dir: "cache".into(),
            report: "prepare_report.tsv".into(),
            seed,
            desk_scale,
            root: root.to_path_buf(),
        }
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self) -> Result<bool> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        crate::cache::write_if_changed(&self.path(MANIFEST_FILE), text.as_bytes())
    }

    /// Loads a manifest and checks that the artifacts `prepare` produces are all present.
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        if !path.exists() {
            return Err(Error::Insufficient(format!(
                "{} is missing; run `srnn prepare` to produce it",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for rel in [&m.config, &m.split_plan, &m.speaker_stats, &m.cache_dir] {
            let p = m.path(rel);
            if !p.exists() {
                return Err(Error::Insufficient(format!(
                    "{} is missing; run `srnn prepare` to produce it",
                    p.display()
                )));
            }
        }
        Ok(m)
    }

    /// The resolved configuration, or `override_path` overlaid on the manifest's preset.
    pub fn config(&self, override_path: Option<&Path>) -> Result<ExperimentConfig> {
        match override_path {
            Some(p) => ExperimentConfig::load(Some(p), self.desk_scale),
            None => ExperimentConfig::load(Some(&self.path(&self.config)), false),
        }
    }

    /// Path to an upstream artifact, or an error naming the command that makes it.
    pub fn require(&self, path: PathBuf, producer: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::Insufficient(format!(
                "{} is missing; run `srnn {producer}` first",
                path.display()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_artifacts_name_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let err = ExperimentManifest::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("srnn prepare"), "{err}");
        let m = ExperimentManifest::new(dir.path(), vec![], 7, true);
        m.write().unwrap();
        let err = ExperimentManifest::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("srnn prepare"), "{err}");
        for f in ["config.toml", "split.tsv", "speaker_stats.tsv"] {
            std::fs::write(dir.path().join(f), "").unwrap();
        }
        std::fs::create_dir(dir.path().join("cache")).unwrap();
        let back = ExperimentManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.root, dir.path());
        let err = back.require(back.path(artifacts::ENCODER), "train-encoder").unwrap_err();
        assert!(err.to_string().contains("srnn train-encoder"));
    }
}
