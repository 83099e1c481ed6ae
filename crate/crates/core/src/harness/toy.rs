//! Token sequences for the toy grounding task: image tokens are fixed random
//! linear encodings of the target geometry, so a decoder that learns to read
//! them can be checked end to end without a vision backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{box_to_raw, query_id, DatasetProfile, HarnessError, Payload, PredictionRecord, SceneRecord};
use crate::decoder::{predict, train, DecoderParams, RawHeadOutput, TokenKind, TokenSequence, TrainConfig, TrainOutcome};
use crate::nn::{init_matrix, Matrix};

pub const TOY_IMAGE_TOKENS: usize = 4;
const CAPTION_TOKENS: usize = 2;

/// Fixed per-component shift and scale applied before encoding so every
/// component reaches the tokens at a comparable magnitude.
const TARGET_SHIFT: [f64; 12] = [0.5, 0.5, 2.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
const TARGET_SCALE: [f64; 12] = [0.3, 0.3, 2.0, 0.5, 0.5, 0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    d_model: usize,
    caption: Matrix,
    image_maps: Vec<Matrix>,
    image_bias: Matrix,
    pos: Matrix,
    /// Standard deviation of Gaussian noise added to image tokens.
    pub noise_sigma: f64,
}

impl ToyEncoder {
    pub fn new(d_model: usize, seed: u64, noise_sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            d_model,
            caption: init_matrix(CAPTION_TOKENS, d_model, (CAPTION_TOKENS as f64).sqrt(), &mut rng),
            image_maps: (0..TOY_IMAGE_TOKENS)
                .map(|_| init_matrix(RawHeadOutput::COMPONENTS, d_model, 1.0, &mut rng))
                .collect(),
            image_bias: init_matrix(TOY_IMAGE_TOKENS, d_model, 0.1 * (TOY_IMAGE_TOKENS as f64).sqrt(), &mut rng),
            pos: init_matrix(1, d_model, 1.0, &mut rng),
            noise_sigma,
        }
    }

    pub fn seq_len(&self) -> usize {
        CAPTION_TOKENS + TOY_IMAGE_TOKENS + 2
    }

    /// `[caption × 2, image × 4, <pos>, query slot]`; the slot holds zeros
    /// until the decoder substitutes its query embedding.
    pub fn encode<R: Rng>(&self, target: &RawHeadOutput, rng: &mut R) -> TokenSequence {
        let t = target.to_vec();
        let z = Matrix::from_fn(1, t.len(), |_, j| (t[j] - TARGET_SHIFT[j]) / TARGET_SCALE[j]);
        let mut emb = Matrix::zeros(self.seq_len(), self.d_model);
        let mut kinds = Vec::with_capacity(self.seq_len());
        for i in 0..CAPTION_TOKENS {
            emb.row_mut(i).copy_from(&self.caption.row(i));
            kinds.push(TokenKind::Caption);
        }
        for (k, map) in self.image_maps.iter().enumerate() {
            let mut row = &z * map + self.image_bias.rows(k, 1);
            if self.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += self.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            emb.row_mut(CAPTION_TOKENS + k).copy_from(&row);
            kinds.push(TokenKind::Image);
        }
        emb.row_mut(self.seq_len() - 2).copy_from(&self.pos);
        kinds.push(TokenKind::PosMarker);
        kinds.push(TokenKind::QuerySlot);
        TokenSequence::new(emb, kinds).expect("toy sequence has the required tail structure")
    }
}

#[derive(Debug, Clone)]
pub struct ToySample {
    pub image_id: String,
    pub object_id: String,
    pub seq: TokenSequence,
    pub target: RawHeadOutput,
}

/// One sample per object, in scene order. Targets come from the ground-truth
/// boxes under `profile`, with depth supervised in virtual-camera space.
pub fn build_toy_dataset(
    scenes: &[SceneRecord],
    profile: &DatasetProfile,
    encoder: &ToyEncoder,
    noise_seed: u64,
) -> Result<Vec<ToySample>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    rng.set_stream(2);
    let mut out = Vec::new();
    for scene in scenes {
        for obj in &scene.objects {
            let target = box_to_raw(&obj.box3d, &scene.intrinsics, profile).map_err(|source| HarnessError::Geometry {
                query: query_id(&scene.image_id, &obj.object_id),
                source,
            })?;
            out.push(ToySample {
                image_id: scene.image_id.clone(),
                object_id: obj.object_id.clone(),
                seq: encoder.encode(&target, &mut rng),
                target,
            });
        }
    }
    Ok(out)
}

/// Raw-mode predictions of a trained decoder for every sample.
pub fn predict_toy(params: &DecoderParams, samples: &[ToySample]) -> Result<Vec<PredictionRecord>, HarnessError> {
    samples
        .iter()
        .map(|s| {
            Ok(PredictionRecord {
                image_id: s.image_id.clone(),
                object_id: s.object_id.clone(),
                payload: Payload::Raw(predict(&s.seq, params)?),
            })
        })
        .collect()
}

pub struct ToyOutcome {
    pub train: TrainOutcome,
    pub samples: Vec<ToySample>,
}

/// Builds the toy dataset from `scenes` and trains a decoder on it. The
/// encoder and noise streams derive from `cfg.seed`.
pub fn train_toy(
    scenes: &[SceneRecord],
    profile: &DatasetProfile,
    cfg: &TrainConfig,
    noise_sigma: f64,
) -> Result<ToyOutcome, HarnessError> {
    let encoder = ToyEncoder::new(cfg.model.d_model, cfg.seed, noise_sigma);
    let samples = build_toy_dataset(scenes, profile, &encoder, cfg.seed)?;
    let data: Vec<(TokenSequence, RawHeadOutput)> = samples.iter().map(|s| (s.seq.clone(), s.target)).collect();
    let outcome = train(&data, cfg)?;
    Ok(ToyOutcome {
        train: outcome,
        samples,
    })
}
