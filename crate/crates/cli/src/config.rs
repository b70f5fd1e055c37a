use std::path::{Path, PathBuf};

use a2i::cbow::{CbowConfig, DEFAULT_WINDOW};
use a2i::classifier::A2IConfig;
use a2i::eval::DEFAULT_TPR;
use a2i::posteriors::synth::SynthConfig;
use a2i::scenarios::{derive_seed, SplitRatios};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// Input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub intended_grammar: Option<PathBuf>,
    pub unintended_grammar: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub per_class: usize,
    pub intended: SynthConfig,
    pub unintended: SynthConfig,
    pub split: SplitRatios,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            per_class: 600,
            intended: SynthConfig {
                temperature: 0.5,
                ..SynthConfig::default()
            },
            unintended: SynthConfig {
                temperature: 1.5,
                ..SynthConfig::default()
            },
            split: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub paths: Paths,
    pub vocab_size: usize,
    pub cbow: CbowConfig,
    pub window: usize,
    pub synth: SynthSection,
    pub model: A2IConfig,
    pub tpr: f64,
    pub top_k: usize,
    /// Ablation rows as partial overrides of `model`.
    pub grid: Vec<serde_json::Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            vocab_size: 800,
            cbow: CbowConfig::default(),
            window: DEFAULT_WINDOW,
            synth: SynthSection::default(),
            model: A2IConfig::default(),
            tpr: DEFAULT_TPR,
            top_k: 100,
            grid: Vec::new(),
        }
    }
}

pub mod stream {
    pub const CBOW: u64 = 1;
    pub const SAMPLE_INTENDED: u64 = 2;
    pub const SAMPLE_UNINTENDED: u64 = 3;
    pub const SYNTH_INTENDED: u64 = 4;
    pub const SYNTH_UNINTENDED: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const MODEL: u64 = 7;
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_slice(&text)
            .map_err(a2i::Error::from)
            .with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream, 0)
    }

    /// Writes the master seed into every component config.
    pub fn propagate_seed(&mut self) {
        self.cbow.seed = self.derived_seed(stream::CBOW);
        self.synth.intended.seed = self.derived_seed(stream::SYNTH_INTENDED);
        self.synth.unintended.seed = self.derived_seed(stream::SYNTH_UNINTENDED);
        self.model.seed = self.derived_seed(stream::MODEL);
    }

    /// Applies one grid entry on top of the base model config.
    pub fn grid_row(&self, overrides: &serde_json::Value) -> Result<A2IConfig> {
        let mut base = serde_json::to_value(&self.model)?;
        let (Some(obj), Some(patch)) = (base.as_object_mut(), overrides.as_object()) else {
            anyhow::bail!(crate::Usage(format!(
                "grid entries must be JSON objects, got {overrides}"
            )));
        };
        for (k, v) in patch {
            obj.insert(k.clone(), v.clone());
        }
        let cfg: A2IConfig = serde_json::from_value(base).map_err(a2i::Error::from)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Effective configuration echoed next to or inside every output.
#[derive(Serialize)]
pub struct Provenance<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
}

impl Provenance<'_> {
    pub fn to_value(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Writes `<artifact>.meta.json` for formats without room for metadata.
    pub fn write_sidecar(&self, artifact: &Path) -> Result<PathBuf> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".meta.json");
        let path = PathBuf::from(name);
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"seed": 7, "model": {"top_n": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.top_n, 3);
        assert_eq!(cfg.model.hidden_dim, A2IConfig::default().hidden_dim);
        assert_eq!(cfg.vocab_size, 800);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn grid_row_overrides_base() {
        let cfg = ExperimentConfig::default();
        let row = cfg
            .grid_row(&serde_json::json!({"mode": "textual", "top_n": 7}))
            .unwrap();
        assert_eq!(row.top_n, 7);
        assert_eq!(row.heads, cfg.model.heads);
        assert!(cfg.grid_row(&serde_json::json!({"bogus": 1})).is_err());
        assert!(cfg.grid_row(&serde_json::json!([1])).is_err());
    }

    #[test]
    fn seeds_follow_master() {
        let mut a = ExperimentConfig::default();
        a.propagate_seed();
        let mut b = ExperimentConfig {
            seed: 1,
            ..ExperimentConfig::default()
        };
        b.propagate_seed();
        assert_ne!(a.model.seed, b.model.seed);
        assert_ne!(a.cbow.seed, a.model.seed);
    }
}
