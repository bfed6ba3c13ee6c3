//! Whole-pipeline configuration: one TOML document with a table per stage.
//! Missing keys take their defaults, unknown keys are rejected, and
//! validation reports every violation at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacker::DqnConfig;
use crate::classifier::ClassifierConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::harness::Setting;
use crate::policies::PolicyConfig;
use crate::world_model::WorldModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_episodes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { n_episodes: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub n_episodes: usize,
    pub settings: Vec<Setting>,
    /// Share of corpus episodes held out from world-model and classifier training.
    pub held_out_fraction: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            n_episodes: 50,
            settings: Setting::ALL.to_vec(),
            held_out_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub corpus: CorpusConfig,
    pub world_model: WorldModelConfig,
    pub classifier: ClassifierConfig,
    pub dqn: DqnConfig,
    pub harness: HarnessConfig,
}

pub const DESK_PRESET: &str = include_str!("../../../configs/desk.toml");
pub const FULL_PRESET: &str = include_str!("../../../configs/full.toml");

impl Config {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.env.validate("env", &mut errors);
        self.policy.validate("policy", &mut errors);
        if self.corpus.n_episodes == 0 {
            errors.push("corpus.n_episodes must be positive".into());
        }
        self.world_model.validate("world_model", &mut errors);
        self.classifier.validate("classifier", &mut errors);
        self.dqn.validate("dqn", &mut errors);
        if self.harness.n_episodes == 0 {
            errors.push("harness.n_episodes must be positive".into());
        }
        if self.harness.settings.is_empty() {
            errors.push("harness.settings must name at least one setting".into());
        }
        if !(self.harness.held_out_fraction > 0.0 && self.harness.held_out_fraction < 1.0) {
            errors.push("harness.held_out_fraction must lie in (0, 1)".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string() + &span_hint(text, e.span())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name (`default`, `desk`, `full`) or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        match spec {
            "default" => Ok(Config::default()),
            "desk" => Config::from_toml(DESK_PRESET),
            "full" => Config::from_toml(FULL_PRESET),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Config::from_toml(&text).map_err(|e| match e {
                    Error::Config(v) => Error::Config(v.into_iter().map(|m| format!("{}: {m}", Path::new(path).display())).collect()),
                    other => other,
                })
            }
        }
    }

    /// Canonical TOML rendering; parsing it back yields the same value.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}
