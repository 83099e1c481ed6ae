use super::params::{DecoderParams, LayerParams, Mlp};
use super::{substitute_query, DecoderError, RawHeadOutput, TokenSequence};
use crate::nn::{add_row, gelu, gelu_grad, l1_grad, sigmoid, softmax_rows, softmax_rows_backward, softplus, sum_rows, Matrix};
use crate::rotation::Rot6D;

/// Final hidden state at the query slot, `1 × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature3D(pub Matrix);

impl Feature3D {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    p: Matrix,
    a: Matrix,
    x1: Matrix,
    h: Matrix,
    g: Matrix,
}

fn check_shapes(seq: &TokenSequence, params: &DecoderParams) -> Result<(), DecoderError> {
    let d = params.config.d_model;
    if seq.d_model() != d {
        return Err(DecoderError::ShapeMismatch(format!(
            "sequence width {} but d_model is {d}",
            seq.d_model()
        )));
    }
    let ok = params.query.shape() == (1, d)
        && params.layers.iter().all(|l| {
            l.w_q.shape() == (d, d)
                && l.w_k.shape() == (d, d)
                && l.w_v.shape() == (d, d)
                && l.w_o.shape() == (d, d)
                && l.ff_w1.nrows() == d
                && l.ff_b1.shape() == (1, l.ff_w1.ncols())
                && l.ff_w2.shape() == (l.ff_w1.ncols(), d)
                && l.ff_b2.shape() == (1, d)
        });
    if !ok {
        return Err(DecoderError::ShapeMismatch("decoder parameter shapes are inconsistent".into()));
    }
    Ok(())
}

fn layer_forward(x: &Matrix, layer: &LayerParams) -> (Matrix, LayerCache) {
    let scale = 1.0 / (x.ncols() as f64).sqrt();
    let q = x * &layer.w_q;
    let k = x * &layer.w_k;
    let v = x * &layer.w_v;
    let scores = (&q * k.transpose()) * scale;
    let p = softmax_rows(&scores, |i, j| j <= i);
    let a = &p * &v;
    let x1 = x + &a * &layer.w_o;
    let h = add_row(&(&x1 * &layer.ff_w1), &layer.ff_b1);
    let g = h.map(gelu);
    let out = &x1 + add_row(&(&g * &layer.ff_w2), &layer.ff_b2);
    let cache = LayerCache {
        x: x.clone(),
        q,
        k,
        v,
        p,
        a,
        x1,
        h,
        g,
    };
    (out, cache)
}

fn forward_cached(seq: &TokenSequence, params: &DecoderParams) -> Result<(Feature3D, Vec<LayerCache>), DecoderError> {
    check_shapes(seq, params)?;
    let mut x = seq.embeddings().clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(&x, layer);
        caches.push(cache);
        x = next;
    }
    let last = x.nrows() - 1;
    Ok((Feature3D(x.rows(last, 1).into_owned()), caches))
}

/// Causal self-attention stack. The query slot must already hold the query
/// embedding (see [`substitute_query`]).
pub fn forward(seq: &TokenSequence, params: &DecoderParams) -> Result<Feature3D, DecoderError> {
    forward_cached(seq, params).map(|(f, _)| f)
}

struct MlpCache {
    h: Matrix,
    g: Matrix,
}

fn mlp_forward(x: &Matrix, mlp: &Mlp) -> (Matrix, MlpCache) {
    let h = x * &mlp.w1 + &mlp.b1;
    let g = h.map(gelu);
    let out = &g * &mlp.w2 + &mlp.b2;
    (out, MlpCache { h, g })
}

/// Accumulates this MLP's gradients into `grad` and returns the gradient
/// with respect to its input.
fn mlp_backward(x: &Matrix, mlp: &Mlp, cache: &MlpCache, d_out: &Matrix, grad: &mut Mlp) -> Matrix {
    grad.w2 += cache.g.transpose() * d_out;
    grad.b2 += d_out;
    let d_h = (d_out * mlp.w2.transpose()).component_mul(&cache.h.map(gelu_grad));
    grad.w1 += x.transpose() * &d_h;
    grad.b1 += &d_h;
    d_h * mlp.w1.transpose()
}

fn positive(x: f64) -> f64 {
    softplus(x).max(f64::MIN_POSITIVE)
}

struct HeadsCache {
    pre: [Matrix; 4],
    caches: [MlpCache; 4],
}

fn heads_cached(f: &Feature3D, params: &DecoderParams) -> (RawHeadOutput, HeadsCache) {
    let (uv, c_uv) = mlp_forward(&f.0, &params.head_uv);
    let (lwh, c_lwh) = mlp_forward(&f.0, &params.head_lwh);
    let (d, c_d) = mlp_forward(&f.0, &params.head_depth);
    let (rot, c_rot) = mlp_forward(&f.0, &params.head_rot);
    let raw = RawHeadOutput {
        u_norm: sigmoid(uv[0]),
        v_norm: sigmoid(uv[1]),
        d_v: positive(d[0]),
        dims: [positive(lwh[0]), positive(lwh[1]), positive(lwh[2])],
        rot6d: Rot6D::from_array([rot[0], rot[1], rot[2], rot[3], rot[4], rot[5]]),
    };
    let cache = HeadsCache {
        pre: [uv, lwh, d, rot],
        caches: [c_uv, c_lwh, c_d, c_rot],
    };
    (raw, cache)
}

/// The four regression heads, all reading the same feature vector.
pub fn heads(f: &Feature3D, params: &DecoderParams) -> RawHeadOutput {
    heads_cached(f, params).0
}

/// Unit-weight L1 over all twelve regressed components.
pub fn loss(raw: &RawHeadOutput, target: &RawHeadOutput) -> f64 {
    raw.to_vec()
        .iter()
        .zip(target.to_vec())
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Substitutes the query, runs the stack and applies the heads.
pub fn predict(seq: &TokenSequence, params: &DecoderParams) -> Result<RawHeadOutput, DecoderError> {
    let seq = substitute_query(seq, &params.query)?;
    let f = forward(&seq, params)?;
    Ok(heads(&f, params))
}

/// Loss and analytic gradients for every parameter, including the query
/// embedding. `seq` is taken before substitution.
pub fn backward(
    seq: &TokenSequence,
    params: &DecoderParams,
    target: &RawHeadOutput,
) -> Result<(f64, DecoderParams), DecoderError> {
    let seq = substitute_query(seq, &params.query)?;
    let (f, caches) = forward_cached(&seq, params)?;
    let (raw, hc) = heads_cached(&f, params);
    let value = loss(&raw, target);

    let sign: Vec<f64> = raw
        .to_vec()
        .iter()
        .zip(target.to_vec())
        .map(|(a, b)| l1_grad(a - b))
        .collect();
    let [pre_uv, pre_lwh, pre_d, _] = &hc.pre;
    let d_uv = Matrix::from_fn(1, 2, |_, j| {
        let s = sigmoid(pre_uv[j]);
        sign[j] * s * (1.0 - s)
    });
    let d_d = Matrix::from_element(1, 1, sign[2] * sigmoid(pre_d[0]));
    let d_lwh = Matrix::from_fn(1, 3, |_, j| sign[3 + j] * sigmoid(pre_lwh[j]));
    let d_rot = Matrix::from_fn(1, 6, |_, j| sign[6 + j]);

    let mut grads = DecoderParams::zeros(params.config);
    let [c_uv, c_lwh, c_d, c_rot] = &hc.caches;
    let mut d_f = mlp_backward(&f.0, &params.head_uv, c_uv, &d_uv, &mut grads.head_uv);
    d_f += mlp_backward(&f.0, &params.head_lwh, c_lwh, &d_lwh, &mut grads.head_lwh);
    d_f += mlp_backward(&f.0, &params.head_depth, c_d, &d_d, &mut grads.head_depth);
    d_f += mlp_backward(&f.0, &params.head_rot, c_rot, &d_rot, &mut grads.head_rot);

    let n = seq.len();
    let mut d_x = Matrix::zeros(n, params.config.d_model);
    d_x.row_mut(n - 1).copy_from(&d_f);
    for ((layer, cache), grad) in params.layers.iter().zip(&caches).zip(grads.layers.iter_mut()).rev() {
        d_x = layer_backward(layer, cache, &d_x, grad);
    }
    grads.query = d_x.rows(n - 1, 1).into_owned();
    Ok((value, grads))
}

fn layer_backward(layer: &LayerParams, c: &LayerCache, d_out: &Matrix, grad: &mut LayerParams) -> Matrix {
    let scale = 1.0 / (c.x.ncols() as f64).sqrt();
    // feed-forward branch
    grad.ff_w2 = c.g.transpose() * d_out;
    grad.ff_b2 = sum_rows(d_out);
    let d_h = (d_out * layer.ff_w2.transpose()).component_mul(&c.h.map(gelu_grad));
    grad.ff_w1 = c.x1.transpose() * &d_h;
    grad.ff_b1 = sum_rows(&d_h);
    let d_x1 = d_out + &d_h * layer.ff_w1.transpose();
    // attention branch
    grad.w_o = c.a.transpose() * &d_x1;
    let d_a = &d_x1 * layer.w_o.transpose();
    let d_p = &d_a * c.v.transpose();
    let d_v = c.p.transpose() * &d_a;
    let d_s = softmax_rows_backward(&c.p, &d_p) * scale;
    let d_q = &d_s * &c.k;
    let d_k = d_s.transpose() * &c.q;
    grad.w_q = c.x.transpose() * &d_q;
    grad.w_k = c.x.transpose() * &d_k;
    grad.w_v = c.x.transpose() * &d_v;
    d_x1 + d_q * layer.w_q.transpose() + d_k * layer.w_k.transpose() + d_v * layer.w_v.transpose()
}

#[cfg(test)]
mod tests {
    use super::super::{DecoderConfig, TokenKind};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DecoderConfig {
        DecoderConfig {
            d_model: 8,
            layers: 1,
            ff_dim: 12,
            head_hidden: 6,
        }
    }

    fn random_seq(n: usize, d: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
        let mut kinds = vec![TokenKind::Caption];
        kinds.extend(std::iter::repeat_n(TokenKind::Image, n - 3));
        kinds.push(TokenKind::PosMarker);
        kinds.push(TokenKind::QuerySlot);
        TokenSequence::new(crate::nn::init_matrix(n, d, (n as f64).sqrt(), rng), kinds).unwrap()
    }

    #[test]
    fn zero_weights_reduce_to_query() {
        let cfg = DecoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = DecoderParams::zeros(cfg);
        p.query = crate::nn::init_matrix(1, cfg.d_model, 1.0, &mut rng);
        let seq = substitute_query(&random_seq(6, cfg.d_model, &mut rng), &p.query).unwrap();
        assert_eq!(forward(&seq, &p).unwrap().0, p.query);
    }

    #[test]
    fn zero_heads_activation_values() {
        let p = DecoderParams::zeros(small_config());
        let raw = heads(&Feature3D(Matrix::from_element(1, 8, 0.3)), &p);
        assert_eq!((raw.u_norm, raw.v_norm), (0.5, 0.5));
        assert!((raw.d_v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(raw.rot6d.to_array(), [0.0; 6]);
    }

    #[test]
    fn two_dim_head_by_hand() {
        let mut p = DecoderParams::zeros(DecoderConfig {
            d_model: 2,
            layers: 0,
            ff_dim: 1,
            head_hidden: 2,
        });
        p.head_depth.w1 = Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        p.head_depth.b1 = Matrix::from_row_slice(1, 2, &[0.1, 0.0]);
        p.head_depth.w2 = Matrix::from_row_slice(2, 1, &[2.0, -0.5]);
        p.head_depth.b2 = Matrix::from_row_slice(1, 1, &[0.25]);
        let f = Feature3D(Matrix::from_row_slice(1, 2, &[1.0, 2.0]));
        // hidden pre-activations: [1 + 1 + 0.1, -1 + 4] = [2.1, 3]
        let z = 2.0 * gelu(2.1) - 0.5 * gelu(3.0) + 0.25;
        let expected = (1.0 + z.exp()).ln();
        assert!((heads(&f, &p).d_v - expected).abs() <= 1e-12);
    }

    #[test]
    fn loss_examples() {
        let t = RawHeadOutput::from_slice(&[0.5, 0.5, 2.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(loss(&t, &t), 0.0);
        let mut r = t;
        r.d_v += 0.3;
        assert!((loss(&r, &t) - 0.3).abs() < 1e-15);
        let mut r = t;
        r.dims[0] += 0.1;
        r.u_norm -= 0.2;
        assert!((loss(&r, &t) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn zero_value_path_leaves_query_and_key_unused() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = DecoderParams::init(small_config(), &mut rng);
        p.layers[0].w_v = Matrix::zeros(8, 8);
        let seq = random_seq(5, 8, &mut rng);
        let target = RawHeadOutput::from_slice(&[0.2, 0.7, 3.0, 1.0, 2.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (_, g) = backward(&seq, &p, &target).unwrap();
        assert!(g.layers[0].w_q.iter().all(|v| *v == 0.0));
        assert!(g.layers[0].w_k.iter().all(|v| *v == 0.0));
        assert!(g.query.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_loss_matches_predict() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = DecoderParams::init(small_config(), &mut rng);
        let seq = random_seq(5, 8, &mut rng);
        let target = RawHeadOutput::from_slice(&[0.2, 0.7, 3.0, 1.0, 2.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (value, _) = backward(&seq, &p, &target).unwrap();
        assert_eq!(value, loss(&predict(&seq, &p).unwrap(), &target));
    }

    #[test]
    fn width_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = DecoderParams::init(small_config(), &mut rng);
        let seq = random_seq(5, 4, &mut rng);
        assert!(matches!(forward(&seq, &p), Err(DecoderError::ShapeMismatch(_))));
    }
}
