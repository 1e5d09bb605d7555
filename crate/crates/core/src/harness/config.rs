//! Experiment configuration in TOML with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distillation::DistillationConfig;
use crate::error::{CssError, Result};
use crate::model::ModelSpec;
use crate::nn::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetKind {
    pub fn classes(self) -> Option<usize> {
        match self {
            DatasetKind::Cifar10 => Some(10),
            DatasetKind::Cifar100 => Some(100),
            DatasetKind::Synthetic => None,
        }
    }
}

/// Gaussian-blob image generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Standard deviation of per-pixel noise around each class prototype.
    pub noise: f64,
    /// Seed of the generator; independent of the run seed so every run sees the same data.
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            train_size: 512,
            test_size: 256,
            noise: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub split_depth: usize,
    pub branches: usize,
    pub classes: usize,
    pub input_shape: [usize; 3],
    pub base_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 20,
            split_depth: 1,
            branches: 2,
            classes: 10,
            input_shape: [3, 32, 32],
            base_width: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub temperature: f64,
    /// Coefficient of both directed terms when dynamic weights are off.
    pub fixed_alpha: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillationConfig::default();
        DistillSection {
            temperature: d.temperature,
            fixed_alpha: d.fixed_alpha,
        }
    }
}

/// The four independently switchable diversity components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Quadrant masks on the stem output.
    pub sample_diversity: bool,
    /// Joint `K * m` label space.
    pub target_diversity: bool,
    /// Second peer network with mutual distillation.
    pub network_diversity: bool,
    /// Loss-ratio weighting of the distillation terms.
    pub dynamic_weights: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags::preset("D").expect("known preset")
    }
}

impl AblationFlags {
    /// `baseline` (nothing), `A` (+SD), `B` (+TD), `C` (+ND, fixed weights), `D` (+DW).
    pub fn preset(name: &str) -> Option<AblationFlags> {
        let level = match name {
            "baseline" => 0,
            "A" | "a" => 1,
            "B" | "b" => 2,
            "C" | "c" => 3,
            "D" | "d" | "css" => 4,
            _ => return None,
        };
        Some(AblationFlags {
            sample_diversity: level >= 1,
            target_diversity: level >= 2,
            network_diversity: level >= 3,
            dynamic_weights: level >= 4,
        })
    }

    pub fn none() -> AblationFlags {
        AblationFlags::preset("baseline").expect("known preset")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    #[serde(default = "one")]
    pub subset_fraction: f64,
    /// Dataset root; falls back to `CSS_DATA_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Random crop and horizontal flip on training batches.
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub synthetic: SyntheticConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub ablation: AblationFlags,
    #[serde(default)]
    pub optimizer: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_eval_batch() -> usize {
    256
}

/// Environment variable consulted when `data_dir` is unset.
pub const DATA_DIR_ENV: &str = "CSS_DATA_DIR";

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        Self::from_toml_str_with_overrides::<&str>(text, &[])
    }

    /// Parses `text` and applies `key=value` overrides addressed by dotted
    /// field paths (`distill.temperature=2.5`). Values use TOML literal
    /// syntax; anything that does not parse is taken as a string.
    pub fn from_toml_str_with_overrides<S: AsRef<str>>(
        text: &str,
        overrides: &[S],
    ) -> Result<ExperimentConfig> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CssError::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o.as_ref())?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CssError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CssError::io(path, e))?;
        Self::from_toml_str_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CssError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(CssError::Config(format!(
                "subset_fraction must lie in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        if self.epochs < 1 {
            return Err(CssError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(CssError::Config("batch_size must be at least 2".into()));
        }
        if self.eval_batch_size < 1 {
            return Err(CssError::Config(
                "eval_batch_size must be at least 1".into(),
            ));
        }
        self.distillation().validate()?;
        self.optimizer.validate()?;
        self.model_spec()
            .validate()
            .map_err(|e| CssError::Config(format!("model: {e}")))?;
        if let Some(k) = self.dataset.classes() {
            if self.model.classes != k {
                return Err(CssError::Config(format!(
                    "model.classes = {} but {:?} has {k} classes",
                    self.model.classes, self.dataset
                )));
            }
            if self.model.input_shape != [3, 32, 32] {
                return Err(CssError::Config(
                    "CIFAR images are 3x32x32; set model.input_shape accordingly".into(),
                ));
            }
        } else if self.synthetic.train_size < self.model.classes || self.synthetic.test_size < 1 {
            return Err(CssError::Config(
                "synthetic.train_size must cover every class and test_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            depth: self.model.depth,
            split_depth: self.model.split_depth,
            branches: self.model.branches,
            classes: self.model.classes,
            input_shape: self.model.input_shape,
            base_width: self.model.base_width,
            sample_diversity: self.ablation.sample_diversity,
            target_diversity: self.ablation.target_diversity,
        }
    }

    pub fn distillation(&self) -> DistillationConfig {
        DistillationConfig {
            temperature: self.distill.temperature,
            dynamic_weights: self.ablation.dynamic_weights,
            fixed_alpha: self.distill.fixed_alpha,
        }
    }

    pub fn resolved_data_dir(&self) -> Option<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }

    /// A small all-synthetic configuration suitable for tests and demos.
    pub fn synthetic_smoke(out_dir: impl Into<PathBuf>) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetKind::Synthetic,
            subset_fraction: 1.0,
            data_dir: None,
            augment: false,
            synthetic: SyntheticConfig {
                train_size: 128,
                test_size: 64,
                noise: 1.0,
                seed: 0,
            },
            model: ModelConfig {
                depth: 8,
                split_depth: 1,
                branches: 2,
                classes: 4,
                input_shape: [3, 8, 8],
                base_width: 4,
            },
            distill: DistillSection::default(),
            ablation: AblationFlags::default(),
            optimizer: SgdConfig {
                lr: 0.05,
                ..SgdConfig::default()
            },
            epochs: 1,
            batch_size: 32,
            eval_batch_size: 64,
            seed: 0,
            out_dir: out_dir.into(),
        }
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CssError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CssError::Config(format!("bad override key `{key}`")));
    }
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("non-empty key");
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| CssError::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cursor.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
