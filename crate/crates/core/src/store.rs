//! File plumbing: JSON Lines corpora, content hashes and run manifests.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CORPUS: &str = "corpus.jsonl";
pub const WORLD_MODEL: &str = "world_model.json";
pub const WM_EVAL: &str = "wm_eval.csv";
pub const WM_CURVE: &str = "wm_curve.csv";
pub const CLASSIFIER: &str = "classifier.json";
pub const CLF_EVAL: &str = "clf_eval.csv";
pub const QNET: &str = "qnet.json";
pub const LEARNING_CURVE: &str = "learning_curve.csv";
pub const EPISODES: &str = "episodes.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const HISTOGRAM: &str = "histogram.csv";

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Fails with a message naming `what` when `path` does not exist.
pub fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{what} not found at {}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// What one command read and wrote, keyed to the config hash and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub duration_secs: f64,
    pub version: String,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest.{command}.json")
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(Self::file_name(&self.command));
        write_text(&path, &serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes every listed hash; returns the paths that no longer match.
    pub fn verify(&self) -> Result<Vec<PathBuf>> {
        let mut stale = Vec::new();
        for a in self.inputs.iter().chain(&self.outputs) {
            if !a.path.exists() || sha256_file(&a.path)? != a.sha256 {
                stale.push(a.path.clone());
            }
        }
        Ok(stale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_line_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        write_jsonl(&p, &[vec![1, 2], vec![3]]).unwrap();
        assert_eq!(read_jsonl::<Vec<i32>>(&p).unwrap(), vec![vec![1, 2], vec![3]]);
        fs::write(&p, "[1]\nnot json\n").unwrap();
        let err = read_jsonl::<Vec<i32>>(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_text(&p, "a").unwrap();
        let m = RunManifest {
            command: "collect".into(),
            config_hash: "h".into(),
            seed: 1,
            inputs: vec![],
            outputs: vec![Artifact::of(&p).unwrap()],
            duration_secs: 0.0,
            version: "0".into(),
        };
        let saved = m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(&saved).unwrap(), m);
        assert!(m.verify().unwrap().is_empty());
        write_text(&p, "b").unwrap();
        assert_eq!(m.verify().unwrap(), vec![p]);
    }

    #[test]
    fn missing_artifact_is_named() {
        let err = require(Path::new("/nonexistent/qnet.json"), "Q-network checkpoint").unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
        assert!(err.to_string().contains("qnet.json"));
    }
}
