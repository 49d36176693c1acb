//! Location encoder: multi-scale sinusoidal grid encoding of normalized
//! coordinates followed by a residual fully connected network whose output
//! rows are L2-normalized.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{self, Linear, Parameters};
use crate::poi::NormalizedCoord;
use crate::{Error, Result};

/// Wavelength schedule of the grid encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridEncodingConfig {
    pub num_scales: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for GridEncodingConfig {
    fn default() -> Self {
        GridEncodingConfig {
            num_scales: 16,
            lambda_min: 1e-3,
            lambda_max: 2.0,
        }
    }
}

impl GridEncodingConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.num_scales == 0 {
            return Err("num_scales must be at least 1".into());
        }
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max) {
            return Err(format!(
                "need 0 < lambda_min < lambda_max, got {} and {}",
                self.lambda_min, self.lambda_max
            ));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        4 * self.num_scales
    }

    /// Geometric progression from `lambda_min` to `lambda_max`.
    pub fn wavelengths(&self) -> Vec<f64> {
        let s = self.num_scales;
        if s == 1 {
            return vec![self.lambda_min];
        }
        let ratio = self.lambda_max / self.lambda_min;
        (0..s)
            .map(|i| self.lambda_min * ratio.powf(i as f64 / (s - 1) as f64))
            .collect()
    }
}

/// `[sin(x/l), cos(x/l), sin(y/l), cos(y/l)]` for each wavelength `l`,
/// finest first.
pub fn grid_encode(coord: NormalizedCoord, cfg: &GridEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.output_dim());
    for l in cfg.wavelengths() {
        let (sx, cx) = (coord.x / l).sin_cos();
        let (sy, cy) = (coord.y / l).sin_cos();
        out.extend_from_slice(&[sx, cx, sy, cy]);
    }
    out
}

pub fn grid_encode_batch(coords: &[NormalizedCoord], cfg: &GridEncodingConfig) -> Array2<f64> {
    let dim = cfg.output_dim();
    let mut out = Array2::zeros((coords.len(), dim));
    for (mut row, &c) in out.rows_mut().into_iter().zip(coords) {
        for (dst, v) in row.iter_mut().zip(grid_encode(c, cfg)) {
            *dst = v;
        }
    }
    out
}

/// Widths of the residual network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    pub hidden_dim: usize,
    pub num_residual_blocks: usize,
    pub output_dim: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            hidden_dim: 256,
            num_residual_blocks: 2,
            output_dim: 128,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err("hidden_dim and output_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub first: Linear,
    pub second: Linear,
}

/// All trainable weights of the location encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEncoderParams {
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

pub fn init_params(grid: &GridEncodingConfig, dims: &EncoderDims, seed: u64) -> LocationEncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = grid.output_dim();
    let h = dims.hidden_dim;
    let input = Linear::init(input_dim, h, true, &mut rng);
    let blocks = (0..dims.num_residual_blocks)
        .map(|_| ResidualBlock {
            first: Linear::init(h, h, true, &mut rng),
            second: Linear::init(h, h, true, &mut rng),
        })
        .collect();
    let output = Linear::init(h, dims.output_dim, true, &mut rng);
    LocationEncoderParams { input, blocks, output }
}

impl LocationEncoderParams {
    pub fn input_dim(&self) -> usize {
        self.input.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out()
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            hidden_dim: self.input.fan_out(),
            num_residual_blocks: self.blocks.len(),
            output_dim: self.output_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LocationEncoderParams {
            input: self.input.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    first: b.first.zeros_like(),
                    second: b.second.zeros_like(),
                })
                .collect(),
            output: self.output.zeros_like(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

impl Parameters for LocationEncoderParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut v = Vec::new();
        self.input.push_tensors("encoder.input", &mut v);
        for (i, b) in self.blocks.iter().enumerate() {
            b.first.push_tensors(&format!("encoder.block{i}.first"), &mut v);
            b.second.push_tensors(&format!("encoder.block{i}.second"), &mut v);
        }
        self.output.push_tensors("encoder.output", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        self.input.push_tensors_mut("encoder.input", &mut v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.first.push_tensors_mut(&format!("encoder.block{i}.first"), &mut v);
            b.second.push_tensors_mut(&format!("encoder.block{i}.second"), &mut v);
        }
        self.output.push_tensors_mut("encoder.output", &mut v);
        v
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    pre_first: Array2<f64>,
    act_first: Array2<f64>,
    pre_out: Array2<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    pre_input: Array2<f64>,
    blocks: Vec<BlockCache>,
    hidden: Array2<f64>,
    norms: Array1<f64>,
    /// Unit-norm output rows.
    pub embeddings: Array2<f64>,
}

/// Runs the encoder on a batch of grid encodings and returns unit rows.
pub fn forward(params: &LocationEncoderParams, encodings: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(forward_with_cache(params, encodings)?.embeddings)
}

pub fn forward_with_cache(params: &LocationEncoderParams, encodings: ArrayView2<f64>) -> Result<ForwardCache> {
    if encodings.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if encodings.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} input features, got {}",
            params.input_dim(),
            encodings.ncols()
        )));
    }
    let pre_input = params.input.forward(encodings)?;
    let mut h = nn::relu(&pre_input);
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for b in &params.blocks {
        let pre_first = b.first.forward(h.view())?;
        let act_first = nn::relu(&pre_first);
        let pre_out = &h + &b.second.forward(act_first.view())?;
        let next = nn::relu(&pre_out);
        blocks.push(BlockCache {
            input: h,
            pre_first,
            act_first,
            pre_out,
        });
        h = next;
    }
    let out = params.output.forward(h.view())?;
    let (embeddings, norms) = nn::l2_normalize_rows(&out)?;
    Ok(ForwardCache {
        input: encodings.to_owned(),
        pre_input,
        blocks,
        hidden: h,
        norms,
        embeddings,
    })
}

/// Reverse-mode pass through normalization, output layer, residual blocks
/// and input layer. Returns parameter gradients and the gradient with
/// respect to the encodings.
pub fn backward(
    params: &LocationEncoderParams,
    cache: &ForwardCache,
    upstream: ArrayView2<f64>,
) -> Result<(LocationEncoderParams, Array2<f64>)> {
    if cache.blocks.len() != params.blocks.len()
        || cache.input.ncols() != params.input_dim()
        || cache.embeddings.ncols() != params.output_dim()
    {
        return Err(Error::Shape(
            "forward cache does not match these parameters (missing intermediates)".into(),
        ));
    }
    if upstream.dim() != cache.embeddings.dim() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs embeddings {:?}",
            upstream.dim(),
            cache.embeddings.dim()
        )));
    }
    let mut grads = params.zeros_like();
    let d_out = nn::l2_normalize_rows_backward(&cache.embeddings, &cache.norms, upstream);
    let mut d_h = params.output.backward(cache.hidden.view(), d_out.view(), &mut grads.output);

    for (k, (b, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let g = &mut grads.blocks[k];
        let d_pre_out = nn::relu_backward(&bc.pre_out, d_h);
        let d_act = b.second.backward(bc.act_first.view(), d_pre_out.view(), &mut g.second);
        let d_pre_first = nn::relu_backward(&bc.pre_first, d_act);
        let d_in = b.first.backward(bc.input.view(), d_pre_first.view(), &mut g.first);
        d_h = d_pre_out + d_in;
    }
    let d_pre_input = nn::relu_backward(&cache.pre_input, d_h);
    let d_x = params
        .input
        .backward(cache.input.view(), d_pre_input.view(), &mut grads.input);
    Ok((grads, d_x))
}
