use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use shaper::gbt::GbtParams;
use shaper::latency::BenchParams;
use shaper::search::SearchConfig;
use shaper::synth::SynthConfig;
use shaper::train::TrainingConfig;
use shaper::{BackboneConfig, Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Single JSON document configuring every command. Omitted sections take
/// the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    /// Overrides the seed of every section when set.
    pub seed: Option<u64>,
    pub backbone: BackboneConfig,
    pub training: TrainingConfig,
    pub search: SearchConfig,
    pub gbt: GbtParams,
    pub bench: BenchParams,
    pub synth: SynthConfig,
    /// Every `eval_every`-th document of the corpus is held out.
    pub eval_every: usize,
    pub paths: Paths,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: FORMAT_VERSION,
            seed: None,
            backbone: BackboneConfig::desk(),
            training: TrainingConfig::desk(),
            search: SearchConfig::default(),
            gbt: GbtParams::default(),
            bench: BenchParams::default(),
            synth: SynthConfig::default(),
            eval_every: 20,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        if cfg.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "config format_version {} is not supported (expected {FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    /// Pushes the top-level seed into every section and validates.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.training.seed = seed;
            self.search.seed = seed;
            self.synth.seed = seed;
        }
        if self.eval_every < 2 {
            return Err(Error::Config("eval_every must be at least 2".into()));
        }
        self.backbone.validate()?;
        self.training.validate()?;
        self.search.validate()?;
        self.gbt.validate()?;
        self.bench.validate()?;
        Ok(self)
    }

    /// The seed used by commands that have no section of their own.
    pub fn base_seed(&self) -> u64 {
        self.seed.unwrap_or(self.training.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// SHA-256 of the effective config JSON with the output directory
    /// cleared, hex encoded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = None;
        Sha256::digest(c.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

pub fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what} path (flag or config paths section)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainig": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"training": {"step": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"training": {"steps": 3}, "seed": 9}"#).unwrap();
        let c = c.resolve().unwrap();
        assert_eq!(c.training.steps, 3);
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.search.seed, 9);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.hash().len(), 64);
    }
}
