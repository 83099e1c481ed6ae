use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DecoderError;
use crate::nn::{from_row_major, init_matrix, row_major, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub head_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            layers: 2,
            ff_dim: 64,
            head_hidden: 32,
        }
    }
}

/// Two-layer perceptron `gelu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w1: init_matrix(input, hidden, 1.0, rng),
            b1: Matrix::zeros(1, hidden),
            w2: init_matrix(hidden, output, 1.0, rng),
            b2: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(input, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, output),
            b2: Matrix::zeros(1, output),
        }
    }

    fn tensors(&self) -> [&Matrix; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// One causal self-attention block followed by a position-wise feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ff_w1: Matrix,
    pub ff_b1: Matrix,
    pub ff_w2: Matrix,
    pub ff_b2: Matrix,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(d: usize, ff: usize, rng: &mut R) -> Self {
        // residual branches start small so early layers stay near identity
        Self {
            w_q: init_matrix(d, d, 1.0, rng),
            w_k: init_matrix(d, d, 1.0, rng),
            w_v: init_matrix(d, d, 1.0, rng),
            w_o: init_matrix(d, d, 0.5, rng),
            ff_w1: init_matrix(d, ff, 1.0, rng),
            ff_b1: Matrix::zeros(1, ff),
            ff_w2: init_matrix(ff, d, 0.5, rng),
            ff_b2: Matrix::zeros(1, d),
        }
    }

    fn zeros(d: usize, ff: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ff_w1: Matrix::zeros(d, ff),
            ff_b1: Matrix::zeros(1, ff),
            ff_w2: Matrix::zeros(ff, d),
            ff_b2: Matrix::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Matrix; 8] {
        [
            &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ff_w1, &self.ff_b1, &self.ff_w2, &self.ff_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ff_w1,
            &mut self.ff_b1,
            &mut self.ff_w2,
            &mut self.ff_b2,
        ]
    }
}

const LAYER_NAMES: [&str; 8] = ["w_q", "w_k", "w_v", "w_o", "ff_w1", "ff_b1", "ff_w2", "ff_b2"];
const MLP_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];
const HEAD_NAMES: [&str; 4] = ["head_uv", "head_lwh", "head_depth", "head_rot"];

/// Every learnable tensor of the decoder. The same type doubles as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub layers: Vec<LayerParams>,
    pub head_uv: Mlp,
    pub head_lwh: Mlp,
    pub head_depth: Mlp,
    pub head_rot: Mlp,
    /// The learnable 3D query token, `1 × d_model`.
    pub query: Matrix,
}

impl DecoderParams {
    pub fn init<R: Rng + ?Sized>(config: DecoderConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        let h = config.head_hidden;
        let layers = (0..config.layers)
            .map(|_| LayerParams::init(d, config.ff_dim, rng))
            .collect();
        Self {
            config,
            layers,
            head_uv: Mlp::init(d, h, 2, rng),
            head_lwh: Mlp::init(d, h, 3, rng),
            head_depth: Mlp::init(d, h, 1, rng),
            head_rot: Mlp::init(d, h, 6, rng),
            query: init_matrix(1, d, 1.0, rng),
        }
    }

    pub fn zeros(config: DecoderConfig) -> Self {
        let d = config.d_model;
        let h = config.head_hidden;
        Self {
            config,
            layers: (0..config.layers).map(|_| LayerParams::zeros(d, config.ff_dim)).collect(),
            head_uv: Mlp::zeros(d, h, 2),
            head_lwh: Mlp::zeros(d, h, 3),
            head_depth: Mlp::zeros(d, h, 1),
            head_rot: Mlp::zeros(d, h, 6),
            query: Matrix::zeros(1, d),
        }
    }

    pub fn heads(&self) -> [&Mlp; 4] {
        [&self.head_uv, &self.head_lwh, &self.head_depth, &self.head_rot]
    }

    /// All tensors in a fixed order, paired with dotted names.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        for (head, mlp) in HEAD_NAMES.iter().zip(self.heads()) {
            for (name, t) in MLP_NAMES.iter().zip(mlp.tensors()) {
                out.push((format!("{head}.{name}"), t));
            }
        }
        out.push(("query".to_string(), &self.query));
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend(self.head_uv.tensors_mut());
        out.extend(self.head_lwh.tensors_mut());
        out.extend(self.head_depth.tensors_mut());
        out.extend(self.head_rot.tensors_mut());
        out.push(&mut self.query);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// On-disk form of a trained decoder: every tensor as nested row-major arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: DecoderConfig,
    pub seed: u64,
    pub tensors: Vec<(String, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn from_params(params: &DecoderParams, seed: u64) -> Self {
        Self {
            config: params.config,
            seed,
            tensors: params
                .named_tensors()
                .into_iter()
                .map(|(name, t)| (name, row_major(t)))
                .collect(),
        }
    }

    pub fn to_params(&self) -> Result<DecoderParams, DecoderError> {
        let mut params = DecoderParams::zeros(self.config);
        let names: Vec<(String, (usize, usize))> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(DecoderError::InvalidCheckpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                self.tensors.len()
            )));
        }
        for ((slot, (name, shape)), (stored_name, rows)) in
            params.tensors_mut().into_iter().zip(names).zip(&self.tensors)
        {
            if &name != stored_name {
                return Err(DecoderError::InvalidCheckpoint(format!(
                    "expected tensor {name}, found {stored_name}"
                )));
            }
            let m = from_row_major(rows)
                .filter(|m| m.shape() == shape)
                .ok_or_else(|| DecoderError::InvalidCheckpoint(format!("tensor {name} has the wrong shape")))?;
            *slot = m;
        }
        Ok(params)
    }
}
