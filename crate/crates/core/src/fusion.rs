//! Spatial-enhanced local feature mining on small feature grids.
//!
//! A high-resolution local feature grid is split into a spatial branch and
//! an RGB branch (per-cell linear maps), the spatial branch predicts an
//! object-level depth map supervised with L1, the two branches are summed,
//! and low-resolution global tokens attend over the summed grid cells:
//!
//! ```text
//! Q = T_vit W_Q    K = F_sl W_K    V = F_sl W_V
//! T = softmax(Q Kᵀ / sqrt(d_k)) V
//! ```
//!
//! Every stage has an analytic backward pass so the whole block can be
//! checked against finite differences.

use rand::Rng;
use thiserror::Error;

use crate::nn::{add_row, init_matrix, l1_grad, sigmoid, softmax_rows, softmax_rows_backward, softplus, sum_rows, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("depth map has no valid cells")]
    EmptyValidMask,
}

fn mismatch(msg: impl Into<String>) -> FusionError {
    FusionError::ShapeMismatch(msg.into())
}

/// Feature tensor of shape `(height, width, channels)`, stored as one row
/// per cell in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub data: Matrix,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, data: Matrix) -> Result<Self, FusionError> {
        if data.nrows() != height * width || data.ncols() == 0 {
            return Err(mismatch(format!(
                "grid {height}x{width} needs {} rows and at least one channel, got {}x{}",
                height * width,
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of cell `(row, col)`.
    pub fn cell(&self, row: usize, col: usize) -> Vec<f64> {
        self.data.row(row * self.width + col).iter().copied().collect()
    }

    fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels() == other.channels()
    }
}

/// Per-cell depth values with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self, FusionError> {
        if values.len() != height * width || valid.len() != values.len() {
            return Err(mismatch("depth map size does not match its grid"));
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize, values: Vec<f64>) -> Result<Self, FusionError> {
        let n = values.len();
        Self::new(height, width, values, vec![true; n])
    }
}

/// `(num_tokens, channels)` token features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(pub Matrix);

/// A 1x1 convolution: the same affine map applied to every cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLinear {
    /// `(in, out)`
    pub weight: Matrix,
    /// `(1, out)`
    pub bias: Matrix,
}

impl CellLinear {
    pub fn identity(channels: usize) -> Self {
        Self {
            weight: Matrix::identity(channels, channels),
            bias: Matrix::zeros(1, channels),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: init_matrix(input, output, 1.0, rng),
            bias: init_matrix(1, output, 0.1, rng),
        }
    }

    pub fn apply(&self, grid: &FeatureGrid) -> Result<FeatureGrid, FusionError> {
        if grid.channels() != self.weight.nrows() || self.bias.ncols() != self.weight.ncols() {
            return Err(mismatch(format!(
                "cell map expects {} channels, grid has {}",
                self.weight.nrows(),
                grid.channels()
            )));
        }
        FeatureGrid::new(grid.height, grid.width, add_row(&(&grid.data * &self.weight), &self.bias))
    }
}

/// Projection of spatial features to one depth channel, squashed by softplus.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthHead {
    /// `(channels, 1)`
    pub weight: Matrix,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionParams {
    pub fn d_k(&self) -> usize {
        self.w_q.ncols()
    }

    pub fn random<R: Rng + ?Sized>(token_channels: usize, grid_channels: usize, d_k: usize, rng: &mut R) -> Self {
        Self {
            w_q: init_matrix(token_channels, d_k, 1.0, rng),
            w_k: init_matrix(grid_channels, d_k, 1.0, rng),
            w_v: init_matrix(grid_channels, d_k, 1.0, rng),
        }
    }

    fn check(&self, tokens: &TokenMatrix, grid: &FeatureGrid) -> Result<(), FusionError> {
        let d_k = self.w_q.ncols();
        if self.w_k.ncols() != d_k || self.w_v.ncols() != d_k {
            return Err(mismatch("W_Q, W_K, W_V must share d_k"));
        }
        if tokens.0.ncols() != self.w_q.nrows() {
            return Err(mismatch(format!(
                "tokens have {} channels, W_Q expects {}",
                tokens.0.ncols(),
                self.w_q.nrows()
            )));
        }
        if grid.channels() != self.w_k.nrows() || grid.channels() != self.w_v.nrows() {
            return Err(mismatch(format!(
                "grid has {} channels, W_K/W_V expect {}",
                grid.channels(),
                self.w_k.nrows()
            )));
        }
        Ok(())
    }
}

pub fn branch_split(
    f_local: &FeatureGrid,
    spatial_map: &CellLinear,
    rgb_map: &CellLinear,
) -> Result<(FeatureGrid, FeatureGrid), FusionError> {
    Ok((spatial_map.apply(f_local)?, rgb_map.apply(f_local)?))
}

fn depth_logits(f_spatial: &FeatureGrid, head: &DepthHead) -> Result<Matrix, FusionError> {
    if head.weight.nrows() != f_spatial.channels() || head.weight.ncols() != 1 {
        return Err(mismatch("depth head weight must be (channels, 1)"));
    }
    Ok((&f_spatial.data * &head.weight).add_scalar(head.bias))
}

pub fn depth_head(f_spatial: &FeatureGrid, head: &DepthHead) -> Result<DepthMap, FusionError> {
    let logits = depth_logits(f_spatial, head)?;
    DepthMap::all_valid(
        f_spatial.height,
        f_spatial.width,
        logits.iter().map(|&z| softplus(z)).collect(),
    )
}

fn valid_cells(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<usize>, FusionError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(mismatch("predicted and ground-truth depth maps differ in size"));
    }
    let cells: Vec<usize> = (0..gt.values.len()).filter(|&i| gt.valid[i] && pred.valid[i]).collect();
    if cells.is_empty() {
        return Err(FusionError::EmptyValidMask);
    }
    Ok(cells)
}

/// Mean absolute error over cells valid in both maps.
pub fn depth_l1_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64, FusionError> {
    let cells = valid_cells(pred, gt)?;
    Ok(cells.iter().map(|&i| (pred.values[i] - gt.values[i]).abs()).sum::<f64>() / cells.len() as f64)
}

/// Gradient of [`depth_l1_loss`] with respect to `pred.values`.
pub fn depth_l1_loss_grad(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<f64>, FusionError> {
    let cells = valid_cells(pred, gt)?;
    let scale = 1.0 / cells.len() as f64;
    let mut grad = vec![0.0; pred.values.len()];
    for i in cells {
        grad[i] = l1_grad(pred.values[i] - gt.values[i]) * scale;
    }
    Ok(grad)
}

pub fn add_fuse(f_spatial: &FeatureGrid, f_rgb: &FeatureGrid) -> Result<FeatureGrid, FusionError> {
    if !f_spatial.same_shape(f_rgb) {
        return Err(mismatch("branches must have identical shapes"));
    }
    FeatureGrid::new(f_spatial.height, f_spatial.width, &f_spatial.data + &f_rgb.data)
}

struct AttentionCache {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Matrix,
    out: Matrix,
}

fn attention_forward(
    t_vit: &TokenMatrix,
    f_sl: &FeatureGrid,
    params: &AttentionParams,
) -> Result<AttentionCache, FusionError> {
    params.check(t_vit, f_sl)?;
    let q = &t_vit.0 * &params.w_q;
    let k = &f_sl.data * &params.w_k;
    let v = &f_sl.data * &params.w_v;
    let scale = 1.0 / (params.d_k() as f64).sqrt();
    let probs = softmax_rows(&((&q * k.transpose()) * scale), |_, _| true);
    let out = &probs * &v;
    Ok(AttentionCache { q, k, v, probs, out })
}

/// Global tokens query the flattened grid cells; output is `(num_tokens, d_k)`.
pub fn cross_branch_attention(
    t_vit: &TokenMatrix,
    f_sl: &FeatureGrid,
    params: &AttentionParams,
) -> Result<TokenMatrix, FusionError> {
    attention_forward(t_vit, f_sl, params).map(|c| TokenMatrix(c.out))
}

/// Attention weights `softmax(Q Kᵀ / sqrt(d_k))`, one row per token.
pub fn attention_weights(
    t_vit: &TokenMatrix,
    f_sl: &FeatureGrid,
    params: &AttentionParams,
) -> Result<Matrix, FusionError> {
    attention_forward(t_vit, f_sl, params).map(|c| c.probs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub t_vit: Matrix,
    /// Gradient with respect to the grid features, one row per cell.
    pub f_sl: Matrix,
}

/// Backpropagates an upstream gradient `d_out` through [`cross_branch_attention`].
pub fn cross_branch_attention_backward(
    t_vit: &TokenMatrix,
    f_sl: &FeatureGrid,
    params: &AttentionParams,
    d_out: &Matrix,
) -> Result<AttentionGrads, FusionError> {
    let c = attention_forward(t_vit, f_sl, params)?;
    if d_out.shape() != c.out.shape() {
        return Err(mismatch("upstream gradient shape differs from attention output"));
    }
    let scale = 1.0 / (params.d_k() as f64).sqrt();
    let d_probs = d_out * c.v.transpose();
    let d_v = c.probs.transpose() * d_out;
    let d_scores = softmax_rows_backward(&c.probs, &d_probs) * scale;
    let d_q = &d_scores * &c.k;
    let d_k = d_scores.transpose() * &c.q;
    Ok(AttentionGrads {
        w_q: t_vit.0.transpose() * &d_q,
        w_k: f_sl.data.transpose() * &d_k,
        w_v: f_sl.data.transpose() * &d_v,
        t_vit: &d_q * params.w_q.transpose(),
        f_sl: &d_k * params.w_k.transpose() + &d_v * params.w_v.transpose(),
    })
}

/// All learnable parameters of the feature-mining block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMiner {
    pub spatial: CellLinear,
    pub rgb: CellLinear,
    pub depth: DepthHead,
    pub attention: AttentionParams,
}

/// Intermediate tensors of one [`FeatureMiner::forward`] pass.
#[derive(Debug, Clone)]
pub struct MinerOutput {
    pub f_spatial: FeatureGrid,
    pub f_rgb: FeatureGrid,
    pub depth: DepthMap,
    pub f_spatial_local: FeatureGrid,
    pub tokens: TokenMatrix,
}

impl FeatureMiner {
    pub fn random<R: Rng + ?Sized>(
        local_channels: usize,
        branch_channels: usize,
        token_channels: usize,
        d_k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            spatial: CellLinear::random(local_channels, branch_channels, rng),
            rgb: CellLinear::random(local_channels, branch_channels, rng),
            depth: DepthHead {
                weight: init_matrix(branch_channels, 1, 1.0, rng),
                bias: 0.5,
            },
            attention: AttentionParams::random(token_channels, branch_channels, d_k, rng),
        }
    }

    pub fn forward(&self, f_local: &FeatureGrid, t_vit: &TokenMatrix) -> Result<MinerOutput, FusionError> {
        let (f_spatial, f_rgb) = branch_split(f_local, &self.spatial, &self.rgb)?;
        let depth = depth_head(&f_spatial, &self.depth)?;
        let f_spatial_local = add_fuse(&f_spatial, &f_rgb)?;
        let tokens = cross_branch_attention(t_vit, &f_spatial_local, &self.attention)?;
        Ok(MinerOutput {
            f_spatial,
            f_rgb,
            depth,
            f_spatial_local,
            tokens,
        })
    }

    /// Training objective `depth_l1(M_depth, gt) + <probe, T>`, where `probe`
    /// stands in for the upstream gradient of whatever consumes the tokens.
    pub fn objective(
        &self,
        f_local: &FeatureGrid,
        t_vit: &TokenMatrix,
        gt_depth: &DepthMap,
        probe: &Matrix,
    ) -> Result<f64, FusionError> {
        let out = self.forward(f_local, t_vit)?;
        if probe.shape() != out.tokens.0.shape() {
            return Err(mismatch("probe shape differs from token output"));
        }
        Ok(depth_l1_loss(&out.depth, gt_depth)? + out.tokens.0.component_mul(probe).sum())
    }

    /// Objective value and its gradient with respect to every parameter.
    pub fn objective_grads(
        &self,
        f_local: &FeatureGrid,
        t_vit: &TokenMatrix,
        gt_depth: &DepthMap,
        probe: &Matrix,
    ) -> Result<(f64, FeatureMiner), FusionError> {
        let out = self.forward(f_local, t_vit)?;
        let value = self.objective(f_local, t_vit, gt_depth, probe)?;

        let att = cross_branch_attention_backward(t_vit, &out.f_spatial_local, &self.attention, probe)?;
        // F_sl = F_spatial + F_rgb, so both branches receive the same gradient.
        let d_rgb_out = &att.f_sl;

        let d_depth = depth_l1_loss_grad(&out.depth, gt_depth)?;
        let logits = depth_logits(&out.f_spatial, &self.depth)?;
        let d_logits = Matrix::from_fn(logits.nrows(), 1, |i, _| d_depth[i] * sigmoid(logits[(i, 0)]));
        let depth_grad = DepthHead {
            weight: out.f_spatial.data.transpose() * &d_logits,
            bias: d_logits.sum(),
        };
        let d_spatial_out = &att.f_sl + &d_logits * self.depth.weight.transpose();

        let x_t = f_local.data.transpose();
        Ok((
            value,
            FeatureMiner {
                spatial: CellLinear {
                    weight: &x_t * &d_spatial_out,
                    bias: sum_rows(&d_spatial_out),
                },
                rgb: CellLinear {
                    weight: &x_t * d_rgb_out,
                    bias: sum_rows(d_rgb_out),
                },
                depth: depth_grad,
                attention: AttentionParams {
                    w_q: att.w_q,
                    w_k: att.w_k,
                    w_v: att.w_v,
                },
            },
        ))
    }

    /// Mutable views of every parameter tensor, with group names.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("spatial.weight", self.spatial.weight.as_mut_slice()),
            ("spatial.bias", self.spatial.bias.as_mut_slice()),
            ("rgb.weight", self.rgb.weight.as_mut_slice()),
            ("rgb.bias", self.rgb.bias.as_mut_slice()),
            ("depth.weight", self.depth.weight.as_mut_slice()),
            ("depth.bias", std::slice::from_mut(&mut self.depth.bias)),
            ("attention.w_q", self.attention.w_q.as_mut_slice()),
            ("attention.w_k", self.attention.w_k.as_mut_slice()),
            ("attention.w_v", self.attention.w_v.as_mut_slice()),
        ]
    }
}
