use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::{backward, loss, predict};
use super::params::{DecoderConfig, DecoderParams};
use super::{DecoderError, RawHeadOutput, TokenKind, TokenSequence};
use crate::nn::init_matrix;

pub const GRADCHECK_STEP: f64 = 1e-6;
/// Denominator floor for the relative error, so entries whose true gradient
/// is essentially zero are judged on absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

pub fn gradcheck_config() -> DecoderConfig {
    DecoderConfig {
        d_model: 8,
        layers: 1,
        ff_dim: 16,
        head_hidden: 8,
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    /// Worst relative error per named tensor, across all instances.
    pub per_tensor: Vec<(String, f64)>,
    /// Whether every tensor saw at least one nonzero analytic gradient.
    pub all_groups_exercised: bool,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// A 5-token sequence (caption, two image tokens, `<pos>`, query slot) with
/// unit-scale embeddings.
pub fn random_sequence<R: Rng>(d_model: usize, rng: &mut R) -> TokenSequence {
    let kinds = vec![
        TokenKind::Caption,
        TokenKind::Image,
        TokenKind::Image,
        TokenKind::PosMarker,
        TokenKind::QuerySlot,
    ];
    let emb = nalgebra::DMatrix::from_fn(kinds.len(), d_model, |_, _| rng.sample::<f64, _>(StandardNormal));
    TokenSequence::new(emb, kinds).expect("well-formed by construction")
}

pub fn random_target<R: Rng>(rng: &mut R) -> RawHeadOutput {
    let mut v = [0.0; 12];
    v[0] = rng.random::<f64>();
    v[1] = rng.random::<f64>();
    v[2] = 0.5 + 4.5 * rng.random::<f64>();
    for x in &mut v[3..6] {
        *x = 0.3 + 2.7 * rng.random::<f64>();
    }
    for x in &mut v[6..] {
        *x = rng.sample(StandardNormal);
    }
    RawHeadOutput::from_slice(&v)
}

/// Parameters with every tensor, biases included, drawn at unit scale.
pub fn random_params<R: Rng>(config: DecoderConfig, rng: &mut R) -> DecoderParams {
    let mut p = DecoderParams::zeros(config);
    for t in p.tensors_mut() {
        *t = init_matrix(t.nrows(), t.ncols(), 1.0, rng);
    }
    p
}

/// Central finite differences against the analytic backward pass for every
/// scalar parameter of `instances` random decoders.
pub fn gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport, DecoderError> {
    let config = gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_tensor: Vec<(String, f64)> = Vec::new();
    let mut touched: Vec<bool> = Vec::new();
    for _ in 0..instances {
        let params = random_params(config, &mut rng);
        let seq = random_sequence(config.d_model, &mut rng);
        let target = random_target(&mut rng);
        let (_, grads) = backward(&seq, &params, &target)?;
        let analytic: Vec<(String, Vec<f64>)> = grads
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.iter().copied().collect()))
            .collect();
        if per_tensor.is_empty() {
            per_tensor = analytic.iter().map(|(n, _)| (n.clone(), 0.0)).collect();
            touched = vec![false; analytic.len()];
        }
        let mut probe = params.clone();
        for (ti, (_, a)) in analytic.iter().enumerate() {
            for (k, &ak) in a.iter().enumerate() {
                let original = probe.tensors_mut()[ti][k];
                probe.tensors_mut()[ti][k] = original + GRADCHECK_STEP;
                let up = loss(&predict(&seq, &probe)?, &target);
                probe.tensors_mut()[ti][k] = original - GRADCHECK_STEP;
                let down = loss(&predict(&seq, &probe)?, &target);
                probe.tensors_mut()[ti][k] = original;
                let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
                let e = relative_error(ak, numeric);
                per_tensor[ti].1 = per_tensor[ti].1.max(e);
                touched[ti] |= ak != 0.0;
            }
        }
    }
    let max_rel_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradcheckReport {
        instances,
        max_rel_error,
        per_tensor,
        all_groups_exercised: touched.iter().all(|t| *t),
    })
}
