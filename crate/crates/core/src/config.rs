//! Declarative run description, read from TOML.
//!
//! Unknown keys are rejected so a config file fully determines a run.
//! `model.seed` seeds initialization, batch order, noise and evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::metrics::extractor::{AVAILABLE, EXTERNAL_ID};
use crate::metrics::{ToyConfig, MIN_EVAL_SAMPLES};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

/// Environment variable that re-roots every relative `out_dir`.
pub const OUTPUT_ROOT_ENV: &str = "USEGAN_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub adam_g: AdamConfig,
    pub adam_d: AdamConfig,
    /// Write a fixed-latent sample grid every this many steps (0 = never).
    pub sample_every: u64,
    pub sample_count: usize,
    /// Checkpoint every this many steps; the final step is always saved.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            adam_g: AdamConfig::default(),
            adam_d: AdamConfig::default(),
            sample_every: 100,
            sample_count: 64,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `manifest.tsv` and the images it lists.
    pub dir: PathBuf,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub extractor: String,
    pub n_samples: usize,
    pub splits: usize,
    /// Cap on real reference images (all of the split when absent).
    pub n_real: Option<usize>,
    pub toy: ToyConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { extractor: "toy-cnn".into(), n_samples: 1000, splits: 10, n_real: None, toy: ToyConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("{}: {}", origin.display(), e.message())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every problem with the configuration.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(Error::Config(m)) = self.model.validate() {
            p.extend(m.into_iter().map(|s| format!("model: {s}")));
        }
        if self.model.image_channels != 3 {
            p.push(format!("model: image_channels must be 3 for RGB data, got {}", self.model.image_channels));
        }
        if self.out_dir.as_os_str().is_empty() {
            p.push("out_dir must not be empty".into());
        }
        let t = &self.train;
        if t.steps == 0 {
            p.push("train: steps must be positive".into());
        }
        if t.batch_size == 0 {
            p.push("train: batch_size must be positive".into());
        }
        if t.sample_every > 0 && t.sample_count == 0 {
            p.push("train: sample_count must be positive when sample_every > 0".into());
        }
        p.extend(t.adam_g.problems("train.adam_g: "));
        p.extend(t.adam_d.problems("train.adam_d: "));
        let e = &self.eval;
        if !AVAILABLE.contains(&e.extractor.as_str()) {
            p.push(format!("eval: unknown extractor {:?}; available: {}", e.extractor, AVAILABLE.join(", ")));
        }
        if e.extractor == EXTERNAL_ID {
            p.push(
                "eval: the external extractor reads activation files and is only available from the eval command"
                    .into(),
            );
        }
        if e.n_samples < MIN_EVAL_SAMPLES {
            p.push(format!("eval: n_samples must be at least {MIN_EVAL_SAMPLES}, got {}", e.n_samples));
        }
        if e.splits == 0 || e.splits > e.n_samples {
            p.push(format!("eval: splits must lie in 1..=n_samples, got {}", e.splits));
        }
        if e.n_real.is_some_and(|n| n < 2) {
            p.push("eval: n_real must be at least 2".into());
        }
        if e.toy.epochs == 0 || e.toy.batch_size == 0 || !(e.toy.lr > 0.0 && e.toy.lr.is_finite()) {
            p.push("eval.toy: epochs, batch_size and lr must be positive".into());
        }
        if self.ablation.seeds.is_empty() {
            p.push("ablation: seeds must not be empty".into());
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// `out_dir`, re-rooted under `$USEGAN_OUTPUT_ROOT` when set and relative.
    pub fn output_dir(&self) -> PathBuf {
        resolve_output(&self.out_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
out_dir = "runs/a"
[data]
dir = "data"
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::from_toml(MINIMAL, Path::new("c.toml")).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.data.split, Split::Train);
        let back = RunConfig::from_toml(&c.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nlearning_rate = 0.1\n");
        let e = RunConfig::from_toml(&text, Path::new("c.toml")).unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("learning_rate"), "{e}");
    }

    #[test]
    fn all_problems_are_listed() {
        let text = format!(
            "{MINIMAL}\n[model]\nimage_side = 20\n[train]\nsteps = 0\nbatch_size = 0\n[eval]\nextractor = \"inception\"\nn_samples = 10\n"
        );
        match RunConfig::from_toml(&text, Path::new("c.toml")).unwrap_err() {
            Error::Config(p) => assert!(p.len() >= 5, "{p:#?}"),
            e => panic!("{e}"),
        }
    }
}
