//! Semantic bases: the latent vectors associated with vocabulary tokens.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{self, l2_normalize, Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// rows of the embedding matrix
    Input,
    /// rows of `pinv(lm_head)`: the latent vector that decodes to each token
    Output,
    /// columns of `lm_head` itself; inner products reproduce the logits
    Head,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    #[default]
    InnerProduct,
    /// diagnostic only
    NegativeDistance,
}

/// One basis vector per vocabulary token (row `t` belongs to token `t`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SemanticBases {
    pub side: Side,
    pub bases: Matrix,
}

impl SemanticBases {
    pub fn vocab_size(&self) -> usize {
        self.bases.rows()
    }

    pub fn dim(&self) -> usize {
        self.bases.cols()
    }

    pub fn basis(&self, token: usize) -> &[f64] {
        self.bases.row(token)
    }
}

/// `transpose(pinv(lm_head))`: row `t` is `e_t · W_o⁺`.
pub fn output_side_bases(lm_head: &Matrix) -> Result<SemanticBases> {
    let p = linalg::pinv(lm_head, linalg::DEFAULT_TOLERANCE)?;
    Ok(SemanticBases {
        side: Side::Output,
        bases: p,
    })
}

/// Row `t` is `e_t · W_i`, i.e. the embedding row.
pub fn input_side_bases(embedding: &Matrix) -> SemanticBases {
    SemanticBases {
        side: Side::Input,
        bases: embedding.clone(),
    }
}

/// Bases whose inner products with a representation are exactly its logits.
pub fn head_bases(lm_head: &Matrix) -> SemanticBases {
    SemanticBases {
        side: Side::Head,
        bases: lm_head.transpose(),
    }
}

/// One score per token: `r · basis` or `−‖r − basis‖`.
pub fn semantic_logits(
    representation: &[f64],
    bases: &SemanticBases,
    scoring: Scoring,
) -> Result<Vector> {
    if representation.len() != bases.dim() {
        return Err(invalid(format!(
            "representation has dim {}, bases have dim {}",
            representation.len(),
            bases.dim()
        )));
    }
    let scores = (0..bases.vocab_size()).map(|t| {
        let b = bases.basis(t);
        match scoring {
            Scoring::InnerProduct => linalg::dot(representation, b),
            Scoring::NegativeDistance => -representation
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    });
    Ok(Vector(scores.collect()))
}

/// `normalize(s_o(argmax) − s_o(target))`; zero when the two coincide.
pub fn semantic_delta(bases: &SemanticBases, argmax: usize, target: usize) -> Result<Vector> {
    let v = bases.vocab_size();
    if argmax >= v || target >= v {
        return Err(invalid(format!(
            "token ids ({argmax}, {target}) out of range for {v} bases"
        )));
    }
    if argmax == target {
        return Ok(Vector::zeros(bases.dim()));
    }
    let diff: Vec<f64> = bases
        .basis(argmax)
        .iter()
        .zip(bases.basis(target))
        .map(|(a, b)| a - b)
        .collect();
    Ok(l2_normalize(&diff))
}
