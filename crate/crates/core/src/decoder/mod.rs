//! A small decoder-only transformer that reads a single learnable 3D query
//! token and regresses the geometric quantities needed to build a box.
//!
//! A `<pos>` marker precedes one query slot at the tail of the sequence.
//! The slot's embedding is overwritten with the learnable query vector, the
//! sequence runs through causal self-attention layers, and the final hidden
//! state at the slot feeds four MLP heads: projected center (sigmoid),
//! size (softplus), virtual depth (softplus) and a 6D rotation.

mod gradcheck;
mod model;
mod params;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Matrix;
use crate::rotation::Rot6D;

pub use gradcheck::{
    gradcheck, gradcheck_config, random_params, random_sequence, random_target, relative_error, GradcheckReport,
    GRADCHECK_FLOOR, GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use model::{backward, forward, heads, loss, predict, Feature3D};
pub use params::{Checkpoint, DecoderConfig, DecoderParams, LayerParams, Mlp};
pub use train::{train, TrainConfig, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Caption,
    Image,
    PosMarker,
    QuerySlot,
}

/// Embedded input tokens, `(seq_len, d_model)`, with one kind tag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    embeddings: Matrix,
    kinds: Vec<TokenKind>,
}

impl TokenSequence {
    /// Requires exactly one `PosMarker` immediately followed by exactly one
    /// `QuerySlot`, both at the tail.
    pub fn new(embeddings: Matrix, kinds: Vec<TokenKind>) -> Result<Self, DecoderError> {
        if embeddings.nrows() != kinds.len() {
            return Err(DecoderError::MalformedSequence(format!(
                "{} embeddings but {} kind tags",
                embeddings.nrows(),
                kinds.len()
            )));
        }
        let n = kinds.len();
        if n < 2 || kinds[n - 2] != TokenKind::PosMarker || kinds[n - 1] != TokenKind::QuerySlot {
            return Err(DecoderError::MalformedSequence(
                "sequence must end with <pos> followed by the query slot".into(),
            ));
        }
        let markers = kinds.iter().filter(|k| **k == TokenKind::PosMarker).count();
        let slots = kinds.iter().filter(|k| **k == TokenKind::QuerySlot).count();
        if markers != 1 || slots != 1 {
            return Err(DecoderError::MalformedSequence(format!(
                "expected one <pos> and one query slot, found {markers} and {slots}"
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(DecoderError::MalformedSequence("non-finite embedding".into()));
        }
        Ok(Self { embeddings, kinds })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn kinds(&self) -> &[TokenKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Row index of the query slot.
    pub fn query_index(&self) -> usize {
        self.kinds.len() - 1
    }

    /// Mutable access to a non-query row, for perturbation experiments.
    pub fn embedding_mut(&mut self, row: usize) -> nalgebra::DMatrixViewMut<'_, f64> {
        self.embeddings.rows_mut(row, 1)
    }
}

/// Overwrites the query slot with the learnable query vector `query` (`1 × d_model`).
pub fn substitute_query(seq: &TokenSequence, query: &Matrix) -> Result<TokenSequence, DecoderError> {
    if query.nrows() != 1 || query.ncols() != seq.d_model() {
        return Err(DecoderError::ShapeMismatch(format!(
            "query is {}x{}, sequence width is {}",
            query.nrows(),
            query.ncols(),
            seq.d_model()
        )));
    }
    let mut out = TokenSequence::new(seq.embeddings.clone(), seq.kinds.clone())?;
    let q = out.query_index();
    out.embeddings.row_mut(q).copy_from(query);
    Ok(out)
}

/// Quantities regressed by the heads: normalized projected center, virtual
/// depth, size `(L, W, H)` and a 6D rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawHeadOutput {
    pub u_norm: f64,
    pub v_norm: f64,
    pub d_v: f64,
    pub dims: [f64; 3],
    pub rot6d: Rot6D,
}

impl RawHeadOutput {
    pub const COMPONENTS: usize = 12;

    /// Flat order: `u_norm, v_norm, d_v, L, W, H, a1, a2, a3, b1, b2, b3`.
    pub fn to_vec(&self) -> [f64; 12] {
        let r = self.rot6d.to_array();
        [
            self.u_norm,
            self.v_norm,
            self.d_v,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            u_norm: v[0],
            v_norm: v[1],
            d_v: v[2],
            dims: [v[3], v[4], v[5]],
            rot6d: Rot6D::from_array([v[6], v[7], v[8], v[9], v[10], v[11]]),
        }
    }

    /// Range checks: normalized center in `[0, 1]`, positive depth and size.
    pub fn validate(&self) -> Result<(), String> {
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err("non-finite component".into());
        }
        if !(0.0..=1.0).contains(&self.u_norm) || !(0.0..=1.0).contains(&self.v_norm) {
            return Err("u_norm and v_norm must lie in [0, 1]".into());
        }
        if self.d_v <= 0.0 {
            return Err("d_v must be positive".into());
        }
        if self.dims.iter().any(|d| *d <= 0.0) {
            return Err("dims must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(n_img: usize) -> Vec<TokenKind> {
        let mut k = vec![TokenKind::Caption];
        k.extend(std::iter::repeat_n(TokenKind::Image, n_img));
        k.push(TokenKind::PosMarker);
        k.push(TokenKind::QuerySlot);
        k
    }

    #[test]
    fn sequence_structure_is_checked() {
        assert!(TokenSequence::new(Matrix::zeros(4, 3), kinds(1)).is_ok());
        let mut bad = kinds(1);
        bad.swap(2, 3);
        assert!(matches!(
            TokenSequence::new(Matrix::zeros(4, 3), bad),
            Err(DecoderError::MalformedSequence(_))
        ));
        let mut two_markers = kinds(2);
        two_markers[1] = TokenKind::PosMarker;
        assert!(TokenSequence::new(Matrix::zeros(5, 3), two_markers).is_err());
        assert!(TokenSequence::new(Matrix::zeros(3, 3), kinds(1)).is_err());
    }

    #[test]
    fn substitution_overwrites_only_the_slot() {
        let emb = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let seq = TokenSequence::new(emb.clone(), kinds(1)).unwrap();
        let q = Matrix::from_row_slice(1, 3, &[9.0, 8.0, 7.0]);
        let out = substitute_query(&seq, &q).unwrap();
        assert_eq!(out.embeddings().row(3), q.row(0));
        assert_eq!(out.embeddings().rows(0, 3), emb.rows(0, 3));
        assert_eq!(substitute_query(&out, &q).unwrap(), out);
        assert!(substitute_query(&seq, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn raw_output_json_shape() {
        let raw = RawHeadOutput::from_slice(&[0.5, 0.25, 3.0, 1.0, 2.0, 3.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = serde_json::to_value(raw).unwrap();
        assert_eq!(v["rot6d"].as_array().unwrap().len(), 6);
        assert_eq!(v["dims"], serde_json::json!([1.0, 2.0, 3.0]));
        assert!(raw.validate().is_ok());
        let mut bad = raw;
        bad.u_norm = 1.5;
        assert!(bad.validate().is_err());
    }
}
