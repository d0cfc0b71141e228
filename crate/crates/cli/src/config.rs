//! TOML run configuration. Keys left out take the values of
//! `RunConfig::default()`; relative paths resolve against the config file.

use std::fs;
use std::path::{Path, PathBuf};

use artlink::baselines::StaticConfig;
use artlink::synth::SynthConfig;
use artlink::{Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub generic: PathBuf,
    pub art: PathBuf,
    pub pairs: PathBuf,
    pub themes: PathBuf,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            generic: "data/generic.jsonl".into(),
            art: "data/art.jsonl".into(),
            pairs: "data/pairs.jsonl".into(),
            themes: "data/themes.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    pub max_size: usize,
    pub min_freq: usize,
}

impl Default for VocabSection {
    fn default() -> Self {
        Self {
            max_size: 50_000,
            min_freq: 1,
        }
    }
}

/// Encoder shape; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub max_positions: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "small".into(),
            max_positions: 128,
            hidden_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            dropout_rate: 0.1,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_positions: self.max_positions,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_dim: self.ffn_dim,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub generic_docs: usize,
    pub art_docs: usize,
    pub pairs: usize,
    #[serde(flatten)]
    pub world: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            generic_docs: 300,
            art_docs: 600,
            pairs: 200,
            world: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// Cosine threshold for static keyword expansion.
    pub static_threshold: f64,
    /// Class-0 probability of the random guesser.
    pub random_p0: f64,
    #[serde(rename = "static")]
    pub static_embeddings: StaticConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            static_threshold: 0.5,
            random_p0: 0.5,
            static_embeddings: StaticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    pub output_dir: PathBuf,
    pub data: DataPaths,
    pub vocab: VocabSection,
    pub model: ModelSection,
    pub pretrain_base: TrainConfig,
    pub pretrain_art: TrainConfig,
    pub finetune: TrainConfig,
    pub baseline: BaselineSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let desk = TrainConfig {
            learning_rate: 2e-3,
            epochs: 5,
            batch_size: 16,
            max_len: 128,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            k: 5,
            output_dir: "runs".into(),
            data: DataPaths::default(),
            vocab: VocabSection::default(),
            model: ModelSection::default(),
            pretrain_base: desk.clone(),
            pretrain_art: TrainConfig { epochs: 40, ..desk.clone() },
            finetune: TrainConfig { epochs: 20, ..desk },
            baseline: BaselineSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let bad = |e: &dyn std::fmt::Display| Error::InvalidConfig(format!("{}: {e}", path.display()));
        let given: toml::Table = toml::from_str(&text).map_err(|e| bad(&e))?;
        let mut merged = toml::Table::try_from(RunConfig::default()).map_err(|e| bad(&e))?;
        merge(&mut merged, given);
        let mut config: RunConfig = merged.try_into().map_err(|e| bad(&e))?;
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve(root);
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.generic);
        fix(&mut self.data.art);
        fix(&mut self.data.pairs);
        fix(&mut self.data.themes);
    }

    /// Seed overrides also reseed every training section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.pretrain_base.seed = seed;
        self.pretrain_art.seed = seed;
        self.finetune.seed = seed;
        self.baseline.static_embeddings.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain_base.validate()?;
        self.pretrain_art.validate()?;
        self.finetune.validate()?;
        if self.k < 3 {
            return Err(Error::InvalidConfig(format!("k = {} (need at least 3)", self.k)));
        }
        for (name, max_len) in [
            ("pretrain_base", self.pretrain_base.max_len),
            ("pretrain_art", self.pretrain_art.max_len),
            ("finetune", self.finetune.max_len),
        ] {
            if max_len > self.model.max_positions {
                return Err(Error::InvalidConfig(format!(
                    "{name}.max_len {max_len} exceeds model.max_positions {}",
                    self.model.max_positions
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.baseline.random_p0) {
            return Err(Error::InvalidConfig("baseline.random_p0 must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
