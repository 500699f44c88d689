use serde::{Deserialize, Serialize};

use super::{MiningConfig, TrainError};
use crate::model::ModelConfig;
use crate::objectives::{ContrastiveConfig, LmMask, LossWeights, ObjectiveConfig};

/// Switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the session-masked LM term.
    pub no_sit: bool,
    /// Use a plain causal mask for the LM term.
    pub vanilla_it: bool,
    /// Use a single trailing embedding token.
    pub no_rcot: bool,
}

/// Named hyperparameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-scale settings: 2500 steps, batch 64.
    Paper,
    /// CPU-sized settings: 2000 steps, batch 16.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per optimizer step, split across `grad_accum_steps`
    /// micro-batches.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub n_hard_negatives: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub seed: u64,
    pub in_batch_negatives: bool,
    pub ablation: Ablation,
    /// Lowest and highest 1-based retrieval rank drawn from when mining.
    pub mining_window: (usize, usize),
    /// Re-mine hard negatives every this many steps; 0 mines once up front.
    pub remine_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let base = Self {
            steps: 2500,
            batch_size: 64,
            grad_accum_steps: 4,
            n_hard_negatives: 4,
            learning_rate: 1e-4,
            temperature: ContrastiveConfig::default().temperature,
            alpha: LossWeights::default().alpha,
            seed: 0,
            in_batch_negatives: true,
            ablation: Ablation::default(),
            mining_window: (15, 30),
            remine_every: 0,
        };
        match p {
            Preset::Paper => base,
            Preset::Desk => Self {
                steps: 2000,
                batch_size: 16,
                learning_rate: 1e-3,
                ..base
            },
        }
    }

    /// Every problem with the configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("n_hard_negatives", self.n_hard_negatives),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            out.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        let (lo, hi) = self.mining_window;
        if lo == 0 || lo > hi {
            out.push(format!("mining window [{lo}, {hi}] is empty or starts below rank 1"));
        }
        if let Err(e) = self.objective().contrastive.validate() {
            out.push(e.to_string());
        }
        if let Err(e) = self.objective().weights.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }

    /// Mining settings for a pass made at `step`.
    pub fn mining(&self, step: u64) -> MiningConfig {
        MiningConfig {
            window_lo: self.mining_window.0,
            window_hi: self.mining_window.1,
            k_per_sample: self.n_hard_negatives,
            seed: self.seed ^ step.rotate_left(17),
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            contrastive: ContrastiveConfig {
                temperature: self.temperature,
                use_in_batch_negatives: self.in_batch_negatives,
            },
            weights: LossWeights { alpha: self.alpha },
            lm_mask: if self.ablation.vanilla_it {
                LmMask::Causal
            } else {
                LmMask::Session
            },
            session_lm: !self.ablation.no_sit,
        }
    }

    /// Applies the special-token ablation to a model shape.
    pub fn model_config(&self, mut model: ModelConfig) -> ModelConfig {
        if self.ablation.no_rcot {
            model.t_special = 1;
        }
        model
    }

    /// Micro-batch size for a batch of `n` samples.
    pub fn micro_batch_len(&self, n: usize) -> usize {
        n.div_ceil(self.grad_accum_steps.min(n).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = TrainConfig::preset(Preset::Paper);
        assert_eq!((p.steps, p.batch_size, p.grad_accum_steps, p.n_hard_negatives), (2500, 64, 4, 4));
        assert_eq!(p.learning_rate, 1e-4);
        assert_eq!(p, TrainConfig::default());
        let d = TrainConfig::preset(Preset::Desk);
        assert_eq!((d.steps, d.batch_size), (2000, 16));
        p.validate().unwrap();
        d.validate().unwrap();
    }

    #[test]
    fn ablations_map_to_objective() {
        let mut c = TrainConfig::default();
        assert!(c.objective().lm_enabled());
        c.ablation.no_sit = true;
        assert!(!c.objective().lm_enabled());
        c.ablation = Ablation {
            vanilla_it: true,
            no_rcot: true,
            ..Ablation::default()
        };
        assert_eq!(c.objective().lm_mask, LmMask::Causal);
        assert_eq!(c.model_config(ModelConfig::desk(100)).t_special, 1);
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = TrainConfig::default();
        c.grad_accum_steps = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.mining_window = (30, 15);
        assert!(c.validate().is_err());
    }

    #[test]
    fn micro_batches() {
        let c = TrainConfig::default();
        assert_eq!(c.micro_batch_len(16), 4);
        assert_eq!(c.micro_batch_len(2), 1);
        assert_eq!(c.micro_batch_len(10), 3);
    }
}
