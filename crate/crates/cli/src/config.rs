//! Declarative run configuration. Values come from the preset, then the
//! optional TOML file, then command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use csit::model::ModelConfig;
use csit::robust::LlmConfig;
use csit::synthetic::SyntheticConfig;
use csit::trainer::{Preset, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const DEFAULT_MAX_VOCAB: usize = 50_000;

/// The effective configuration of one command, snapshotted into its manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    /// Model shape; `vocab_size` is filled in from the training data.
    pub model: ModelConfig,
    pub max_vocab_words: usize,
    pub synthetic: SyntheticConfig,
    pub llm: Option<LlmConfig>,
}

/// Flags that override file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(&file, flags)
    }

    /// Builds the configuration and reports every problem found, not just
    /// the first.
    pub fn from_table(file: &toml::Table, flags: &Overrides) -> Result<Self> {
        let mut problems = Vec::new();
        for key in file.keys() {
            if !["preset", "train", "model", "max_vocab_words", "synthetic", "llm"].contains(&key.as_str()) {
                problems.push(format!("unknown section or key `{key}`"));
            }
        }
        let preset = match (flags.preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.clone().try_into().unwrap_or_else(|e| {
                problems.push(format!("preset: {e}"));
                Preset::Desk
            }),
            (None, None) => Preset::Desk,
        };
        let mut train = merge_section(TrainConfig::preset(preset), file, "train", &mut problems);
        let model = merge_section(ModelConfig::desk(1), file, "model", &mut problems);
        let synthetic = merge_section(SyntheticConfig::default(), file, "synthetic", &mut problems);
        let llm = file
            .contains_key("llm")
            .then(|| merge_section(LlmConfig::default(), file, "llm", &mut problems));
        let max_vocab_words = match file.get("max_vocab_words") {
            Some(v) => v.clone().try_into().unwrap_or_else(|e| {
                problems.push(format!("max_vocab_words: {e}"));
                DEFAULT_MAX_VOCAB
            }),
            None => DEFAULT_MAX_VOCAB,
        };
        if let Some(seed) = flags.seed {
            train.seed = seed;
        }
        if let Some(steps) = flags.steps {
            train.steps = steps;
        }
        problems.extend(train.problems().into_iter().map(|p| format!("train: {p}")));
        problems.extend(model.problems().into_iter().map(|p| format!("model: {p}")));
        if max_vocab_words == 0 {
            problems.push("max_vocab_words must be positive".into());
        }
        if !problems.is_empty() {
            bail!(
                "invalid configuration ({} problems):\n  - {}",
                problems.len(),
                problems.join("\n  - ")
            );
        }
        Ok(Self {
            preset,
            train,
            model,
            max_vocab_words,
            synthetic,
            llm,
        })
    }
}

/// Applies the keys of `file[section]` to `base` one at a time so that each
/// unknown key or ill-typed value is reported separately.
fn merge_section<T>(base: T, file: &toml::Table, section: &str, problems: &mut Vec<String>) -> T
where
    T: Serialize + DeserializeOwned,
{
    let Some(value) = file.get(section) else {
        return base;
    };
    let Some(overrides) = value.as_table() else {
        problems.push(format!("`{section}` must be a table"));
        return base;
    };
    let mut merged = toml::Table::try_from(&base).expect("config serializes to a table");
    for (key, v) in overrides {
        if !merged.contains_key(key) {
            problems.push(format!("{section}: unknown key `{key}`"));
            continue;
        }
        let mut trial = merged.clone();
        trial.insert(key.clone(), v.clone());
        match trial.clone().try_into::<T>() {
            Ok(_) => merged = trial,
            Err(e) => problems.push(format!("{section}.{key}: {}", e.message().trim())),
        }
    }
    merged.try_into().unwrap_or(base)
}
