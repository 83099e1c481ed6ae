use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{backward, loss, predict};
use super::params::{DecoderConfig, DecoderParams};
use super::{DecoderError, RawHeadOutput, TokenSequence};
use crate::nn::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: DecoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: DecoderConfig::default(),
            epochs: 500,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    /// Mean loss over the dataset before any update.
    pub initial_loss: f64,
    /// Mean loss over the dataset after each epoch, in epoch order.
    pub history: Vec<f64>,
}

fn mean_loss(data: &[(TokenSequence, RawHeadOutput)], params: &DecoderParams) -> Result<f64, DecoderError> {
    let mut total = 0.0;
    for (seq, target) in data {
        total += loss(&predict(seq, params)?, target);
    }
    Ok(total / data.len() as f64)
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    fn new(params: &DecoderParams) -> Self {
        let zeros: Vec<Matrix> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Matrix::zeros(t.nrows(), t.ncols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut DecoderParams, grads: &mut DecoderParams, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors_mut())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

/// Mini-batch Adam on the mean L1 loss. Batches are reshuffled every epoch
/// from a generator seeded by `cfg.seed`; everything runs on one thread so
/// identical seeds give bitwise-identical histories.
pub fn train(data: &[(TokenSequence, RawHeadOutput)], cfg: &TrainConfig) -> Result<TrainOutcome, DecoderError> {
    if data.is_empty() {
        return Err(DecoderError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = DecoderParams::init(cfg.model, &mut rng);
    let initial_loss = mean_loss(data, &params)?;
    let mut adam = Adam::new(&params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut acc = DecoderParams::zeros(cfg.model);
            for &i in chunk {
                let (_, g) = backward(&data[i].0, &params, &data[i].1)?;
                for (a, gi) in acc.tensors_mut().into_iter().zip(g.named_tensors()) {
                    *a += gi.1;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for a in acc.tensors_mut() {
                *a *= scale;
            }
            adam.step(&mut params, &mut acc, cfg);
        }
        history.push(mean_loss(data, &params)?);
    }
    Ok(TrainOutcome {
        params,
        initial_loss,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::super::TokenKind;
    use super::*;

    fn tiny_data() -> Vec<(TokenSequence, RawHeadOutput)> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..4)
            .map(|i| {
                let kinds = vec![TokenKind::Image, TokenKind::PosMarker, TokenKind::QuerySlot];
                let seq = TokenSequence::new(crate::nn::init_matrix(3, 4, 1.0, &mut rng), kinds).unwrap();
                let t = 0.1 * i as f64;
                let target =
                    RawHeadOutput::from_slice(&[0.3 + t, 0.6, 1.0 + t, 1.0, 0.5, 0.8, 1.0, t, 0.0, 0.0, 1.0, 0.0]);
                (seq, target)
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: DecoderConfig {
                d_model: 4,
                layers: 1,
                ff_dim: 6,
                head_hidden: 5,
            },
            epochs: 5,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(train(&[], &tiny_config()), Err(DecoderError::EmptyDataset)));
    }

    #[test]
    fn equal_seeds_equal_histories() {
        let data = tiny_data();
        let a = train(&data, &tiny_config()).unwrap();
        let b = train(&data, &tiny_config()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = tiny_data();
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let out = train(&data, &cfg).unwrap();
        let init = DecoderParams::init(cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        assert_eq!(out.params, init);
        assert!(out.history.iter().all(|l| *l == out.initial_loss));
    }
}
