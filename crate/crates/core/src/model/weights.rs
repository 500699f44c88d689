//! Parameter containers. [`ModelParams`] is generic so the same layout can
//! hold tensors, graph handles, or gradient buffers.

use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::numeric::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gain", "ln1_bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2_gain",
    "ln2_bias", "w_ff1", "b_ff1", "w_ff2", "b_ff2",
];

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            w_q: it.next()?,
            b_q: it.next()?,
            w_k: it.next()?,
            b_k: it.next()?,
            w_v: it.next()?,
            b_v: it.next()?,
            w_o: it.next()?,
            b_o: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w_ff1: it.next()?,
            b_ff1: it.next()?,
            w_ff2: it.next()?,
            b_ff2: it.next()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
    /// `d_model × vocab_size` LM head.
    pub output_proj: T,
}

impl<T> ModelParams<T> {
    /// Parameters in canonical order.
    pub fn iter(&self) -> Vec<&T> {
        let mut out = vec![&self.token_embedding];
        for l in &self.layers {
            out.extend(l.refs());
        }
        out.extend([&self.final_gain, &self.final_bias, &self.output_proj]);
        out
    }

    pub fn iter_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend([
            &mut self.final_gain,
            &mut self.final_bias,
            &mut self.output_proj,
        ]);
        out
    }

    /// Canonical parameter names, parallel to [`ModelParams::iter`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["token_embedding".to_string()];
        for i in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{i}.{f}")));
        }
        out.extend(["final_gain", "final_bias", "output_proj"].map(String::from));
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams::from_list(self.layers.len(), self.iter().into_iter().map(&mut f))
            .expect("same layout")
    }

    /// Rebuilds the layout from a canonical-order sequence.
    pub fn from_list(n_layers: usize, items: impl IntoIterator<Item = T>) -> Option<Self> {
        let mut it = items.into_iter();
        let token_embedding = it.next()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(LayerParams::from_iter(&mut it)?);
        }
        let out = Self {
            token_embedding,
            layers,
            final_gain: it.next()?,
            final_bias: it.next()?,
            output_proj: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn len(&self) -> usize {
        4 + 16 * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Expected shape of every parameter for `cfg`, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut out = vec![vec![v, d]];
    for _ in 0..cfg.n_layers {
        out.extend([
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]);
    }
    out.extend([vec![d], vec![d], vec![d, v]]);
    out
}

/// One shared weight set used to encode sessions and passages alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl ModelWeights {
    /// Random initialization: unit-variance token embeddings, `N(0, 0.02)`
    /// projections with residual outputs scaled by `1/sqrt(2·n_layers)`,
    /// identity layer norms and zero biases.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let std = 0.02;
        let resid_std = std / ((2 * config.n_layers) as f64).sqrt();
        let token_embedding = Tensor::randn(&[v, d], 1.0, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: Tensor::filled(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                w_q: Tensor::randn(&[d, d], std, rng),
                b_q: Tensor::zeros(&[d]),
                w_k: Tensor::randn(&[d, d], std, rng),
                b_k: Tensor::zeros(&[d]),
                w_v: Tensor::randn(&[d, d], std, rng),
                b_v: Tensor::zeros(&[d]),
                w_o: Tensor::randn(&[d, d], resid_std, rng),
                b_o: Tensor::zeros(&[d]),
                ln2_gain: Tensor::filled(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w_ff1: Tensor::randn(&[d, f], std, rng),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: Tensor::randn(&[f, d], resid_std, rng),
                b_ff2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config,
            params: ModelParams {
                token_embedding,
                layers,
                final_gain: Tensor::filled(&[d], 1.0),
                final_bias: Tensor::zeros(&[d]),
                output_proj: Tensor::randn(&[d, v], std, rng),
            },
        })
    }

    /// Checks every parameter shape against the config and finiteness.
    pub fn validate(&self) -> Result<(), ModelError> {
        self.config.validate()?;
        let shapes = param_shapes(&self.config);
        let tensors = self.params.iter();
        if shapes.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, t), shape) in self.params.names().iter().zip(tensors).zip(shapes) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Config(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ModelError::Config(format!("{name}: non-finite values")));
            }
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().iter().map(|t| t.numel()).sum()
    }
}
