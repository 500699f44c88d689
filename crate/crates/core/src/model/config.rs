use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::text::{TemplateConfig, MAX_SPECIAL};

/// Transformer shape and special-token count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub t_special: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// Desk-scale shape: d_model 64, two layers, four heads.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 256,
            t_special: 3,
            dropout: 0.0,
        }
    }

    /// Every problem with the configuration, empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("t_special", self.t_special),
        ] {
            if v == 0 {
                out.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            out.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.t_special > MAX_SPECIAL {
            out.push(format!("t_special {} exceeds {MAX_SPECIAL}", self.t_special));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout {} outside [0, 1)", self.dropout));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn template(&self) -> TemplateConfig {
        TemplateConfig {
            t_special: self.t_special,
            max_seq_len: self.max_seq_len,
        }
    }
}
