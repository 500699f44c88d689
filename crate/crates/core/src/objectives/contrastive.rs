use serde::{Deserialize, Serialize};

use super::ObjectiveError;
use crate::numeric::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    /// Softmax temperature τ over cosine scores.
    pub temperature: f64,
    /// Add the other samples' positives to each sample's negative pool.
    pub use_in_batch_negatives: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            use_in_batch_negatives: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.temperature > 0.0 && self.temperature.is_finite() {
            Ok(())
        } else {
            Err(ObjectiveError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )))
        }
    }
}

const UNIT_TOL: f64 = 1e-6;

fn check_unit(v: &[f64], what: &str) -> Result<(), ObjectiveError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(ObjectiveError::Contract(format!("{what} is a zero vector")));
    }
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(ObjectiveError::Contract(format!(
            "{what} has norm {n}, expected a unit vector"
        )));
    }
    Ok(())
}

/// `exp(cos(e_x, e_y) / τ)` for unit vectors.
pub fn score_phi(e_x: &[f64], e_y: &[f64], temperature: f64) -> Result<f64, ObjectiveError> {
    if e_x.len() != e_y.len() {
        return Err(ObjectiveError::Contract(format!(
            "dimensions {} and {} differ",
            e_x.len(),
            e_y.len()
        )));
    }
    check_unit(e_x, "e_x")?;
    check_unit(e_y, "e_y")?;
    let cos: f64 = e_x.iter().zip(e_y).map(|(a, b)| a * b).sum();
    Ok((cos / temperature).exp())
}

/// `−log(φ⁺ / (φ⁺ + Σφ⁻))` as a log-softmax over `[pos, negatives…]` scores.
///
/// Inputs are `1×d` unit-norm rows.
pub fn contrastive_loss(
    g: &mut Graph,
    e_x: Var,
    e_pos: Var,
    negatives: &[Var],
    temperature: f64,
) -> Result<Var, ObjectiveError> {
    if negatives.is_empty() {
        return Err(ObjectiveError::Contract("empty negative set".into()));
    }
    let mut rows = Vec::with_capacity(negatives.len() + 1);
    rows.push(e_pos);
    rows.extend_from_slice(negatives);
    let candidates = g.concat_rows(&rows)?;
    let scores = g.matmul_nt(e_x, candidates)?;
    let logits = g.scale(scores, 1.0 / temperature);
    Ok(g.cross_entropy(logits, &[0])?)
}

/// Evaluates [`contrastive_loss`] on plain vectors.
pub fn contrastive_loss_value(
    e_x: &[f64],
    e_pos: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let mut row = |v: &[f64]| -> Result<Var, ObjectiveError> {
        check_unit(v, "embedding")?;
        Ok(g.constant(Tensor::new(vec![1, v.len()], v.to_vec())?))
    };
    let x = row(e_x)?;
    let p = row(e_pos)?;
    let negs = negatives
        .iter()
        .map(|n| row(n))
        .collect::<Result<Vec<_>, _>>()?;
    let l = contrastive_loss(&mut g, x, p, &negs, temperature)?;
    Ok(g.value(l).item())
}
