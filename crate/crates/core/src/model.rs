//! The frame embedding network: three strided convolutions with leaky ReLU,
//! flattened into a linear head.
//!
//! Parameters are kept in a fixed order, which the checkpoint format relies on:
//! `conv1.weight, conv1.bias, conv2.weight, conv2.bias, conv3.weight,
//! conv3.bias, head.weight, head.bias`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, conv_output_size, leaky_relu_backward_in_place,
    linear_backward, linear_forward, Scalar, Tensor,
};

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "head.weight",
    "head.bias",
];

const CHECKPOINT_MAGIC: &[u8; 4] = b"S3NM";
const CHECKPOINT_VERSION: u32 = 1;

/// Frames embedded per forward pass when scoring long sequences.
const EMBED_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub channels: [usize; 3],
    pub kernel_sizes: [usize; 3],
    pub strides: [usize; 3],
    pub paddings: [usize; 3],
    pub embed_dim: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    /// 64x64 grayscale: 64 -> 32 -> 16 -> 8 spatially, 4096 features into a
    /// 32-dimensional head.
    fn default() -> Self {
        Self::for_frames(64, 64, 32)
    }
}

impl ModelConfig {
    pub fn for_frames(height: usize, width: usize, embed_dim: usize) -> Self {
        Self {
            input_height: height,
            input_width: width,
            input_channels: 1,
            channels: [16, 32, 64],
            kernel_sizes: [4, 4, 4],
            strides: [2, 2, 2],
            paddings: [1, 1, 1],
            embed_dim,
            leaky_slope: 0.01,
        }
    }

    /// Spatial size after each convolution.
    pub fn spatial_sizes(&self) -> Result<[(usize, usize); 3]> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut sizes = [(0, 0); 3];
        for (layer, size) in sizes.iter_mut().enumerate() {
            let (k, s, p) = (self.kernel_sizes[layer], self.strides[layer], self.paddings[layer]);
            match (conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)) {
                (Some(nh), Some(nw)) if nh >= 1 && nw >= 1 => {
                    (h, w) = (nh, nw);
                    *size = (h, w);
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "conv{} collapses a {h}x{w} input (kernel {k}, stride {s}, padding {p})",
                        layer + 1
                    )))
                }
            }
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0 || self.input_width == 0 || self.input_channels == 0 {
            return Err(Error::InvalidConfig("empty input geometry".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidConfig("conv layer with zero channels".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "leaky slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        self.spatial_sizes().map(|_| ())
    }

    pub fn flat_features(&self) -> Result<usize> {
        let (h, w) = self.spatial_sizes()?[2];
        Ok(self.channels[2] * h * w)
    }

    /// Parameter shapes in [`PARAM_NAMES`] order.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        self.validate()?;
        let mut shapes = Vec::with_capacity(8);
        let mut in_ch = self.input_channels;
        for layer in 0..3 {
            let k = self.kernel_sizes[layer];
            shapes.push(vec![self.channels[layer], in_ch, k, k]);
            shapes.push(vec![self.channels[layer]]);
            in_ch = self.channels[layer];
        }
        shapes.push(vec![self.embed_dim, self.flat_features()?]);
        shapes.push(vec![self.embed_dim]);
        Ok(shapes)
    }

    fn frame_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    inputs: Tensor<T>,
    /// Post-activation outputs of the first two conv layers. A positive slope
    /// keeps their signs equal to the pre-activations', which is all the
    /// activation backward needs.
    activations: [Tensor<T>; 2],
    /// Third conv layer's activations, flattened to `[N, F]`.
    features: Tensor<T>,
}

/// Parameter gradients plus the input gradient when requested.
type ParamGrads<T> = (Vec<Tensor<T>>, Option<Tensor<T>>);

fn activate<T: Scalar>(mut z: Tensor<T>, slope: T) -> Tensor<T> {
    for v in z.data_mut() {
        if *v <= T::zero() {
            *v = slope * *v;
        }
    }
    z
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel<T = f32> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> EmbeddingModel<T> {
    /// He-normal weights (std `sqrt(2 / fan_in)`) from a seeded generator,
    /// zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let shapes = config.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = shapes
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if params.len() != shapes.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in PARAM_NAMES.iter().zip(&shapes).zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: shape {:?}, config implies {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingModel<U> {
        EmbeddingModel {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_input(&self, frames: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels, c.input_height, c.input_width];
        if frames.rank() != 4 || frames.shape()[1..] != want {
            return Err(Error::shape(format!(
                "frames of shape {:?} do not match model input [N, {}, {}, {}]",
                frames.shape(),
                want[0],
                want[1],
                want[2]
            )));
        }
        Ok(())
    }

    fn slope(&self) -> T {
        T::from_f64_lossy(self.config.leaky_slope)
    }

    /// Forward pass returning `[N, embed_dim]` plus the activations needed by
    /// [`EmbeddingModel::backward`].
    pub fn forward(&self, frames: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(frames)?;
        let c = &self.config;
        let slope = self.slope();
        let z1 = conv2d_forward(frames, &self.params[0], &self.params[1], c.strides[0], c.paddings[0])?;
        let a1 = activate(z1, slope);
        let z2 = conv2d_forward(&a1, &self.params[2], &self.params[3], c.strides[1], c.paddings[1])?;
        let a2 = activate(z2, slope);
        let z3 = conv2d_forward(&a2, &self.params[4], &self.params[5], c.strides[2], c.paddings[2])?;
        let n = frames.shape()[0];
        let features = activate(z3, slope).reshape(&[n, c.flat_features()?])?;
        let out = linear_forward(&features, &self.params[6], &self.params[7])?;
        Ok((
            out,
            ForwardCache {
                inputs: frames.clone(),
                activations: [a1, a2],
                features,
            },
        ))
    }

    /// Parameter gradients of `sum(grad_out * forward(frames))`, in
    /// [`PARAM_NAMES`] order, along with the gradient on the input frames.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        self.backward_impl(cache, grad_out, true)
            .map(|(grads, input)| (grads, input.expect("requested")))
    }

    /// [`EmbeddingModel::backward`] without the input gradient, which training
    /// never needs.
    pub fn backward_params(&self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.backward_impl(cache, grad_out, false).map(|(grads, _)| grads)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &Tensor<T>,
        want_input: bool,
    ) -> Result<ParamGrads<T>> {
        let c = &self.config;
        let slope = self.slope();
        let [a1, a2] = &cache.activations;
        let head = linear_backward(grad_out, &cache.features, &self.params[6])?;
        let mut g3 = head.input;
        leaky_relu_backward_in_place(&mut g3, &cache.features, slope)?;
        let (h3, w3) = c.spatial_sizes()?[2];
        let g3 = g3.reshape(&[a2.shape()[0], c.channels[2], h3, w3])?;
        let conv3 = conv2d_backward(&g3, a2, &self.params[4], c.strides[2], c.paddings[2])?;
        let mut g2 = conv3.input;
        leaky_relu_backward_in_place(&mut g2, a2, slope)?;
        let conv2 = conv2d_backward(&g2, a1, &self.params[2], c.strides[1], c.paddings[1])?;
        let mut g1 = conv2.input;
        leaky_relu_backward_in_place(&mut g1, a1, slope)?;
        let (conv1_kernel, conv1_bias, input) = if want_input {
            let g = conv2d_backward(&g1, &cache.inputs, &self.params[0], c.strides[0], c.paddings[0])?;
            (g.kernel, g.bias, Some(g.input))
        } else {
            let (k, b) =
                conv2d_backward_params(&g1, &cache.inputs, &self.params[0], c.strides[0], c.paddings[0])?;
            (k, b, None)
        };
        Ok((
            vec![
                conv1_kernel,
                conv1_bias,
                conv2.kernel,
                conv2.bias,
                conv3.kernel,
                conv3.bias,
                head.weight,
                head.bias,
            ],
            input,
        ))
    }

    /// Embed a batch of frames `[N, C, H, W]` with values in `[0, 1]`.
    pub fn embed(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(frames).map(|(out, _)| out)
    }

    /// Embed raw `u8` frames, chunked to bound memory. Returns one row of
    /// `embed_dim` values per frame.
    pub fn embed_frames(&self, frames: &[&[u8]]) -> Result<Vec<Vec<T>>> {
        let mut rows = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(EMBED_CHUNK) {
            let batch = frames_to_tensor(chunk, &self.config)?;
            let out = self.embed(&batch)?;
            rows.extend(out.data().chunks(self.config.embed_dim).map(<[T]>::to_vec));
        }
        Ok(rows)
    }
}

/// Stack `u8` frames into an `[N, C, H, W]` tensor scaled to `[0, 1]`.
pub fn frames_to_tensor<T: Scalar>(frames: &[&[u8]], config: &ModelConfig) -> Result<Tensor<T>> {
    let len = config.frame_len();
    if frames.is_empty() {
        return Err(Error::shape("no frames to embed"));
    }
    if let Some(bad) = frames.iter().find(|f| f.len() != len) {
        return Err(Error::shape(format!(
            "frame of {} bytes, model expects {}x{}x{} = {len}",
            bad.len(),
            config.input_channels,
            config.input_height,
            config.input_width
        )));
    }
    let scale = T::from_f64_lossy(255.0);
    let data = frames
        .iter()
        .flat_map(|f| f.iter().map(|&p| T::from_f64_lossy(p as f64) / scale))
        .collect();
    Tensor::new(
        vec![
            frames.len(),
            config.input_channels,
            config.input_height,
            config.input_width,
        ],
        data,
    )
}

// ---------------------------------------------------------------------------
// checkpoints

impl<T: Scalar> EmbeddingModel<T> {
    /// Serialize as: magic `S3NM`, version u32, config JSON length u32, config
    /// JSON, then per parameter: name length u16, name, rank u8, dims u32 each,
    /// raw f32 data. All integers little-endian.
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        for (name, p) in PARAM_NAMES.iter().zip(&self.params) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.rank() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
            .map_err(|e| Error::CheckpointFormat(format!("config json: {e}")))?;
        let shapes = config
            .param_shapes()
            .map_err(|e| Error::CheckpointFormat(format!("config: {e}")))?;

        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in PARAM_NAMES.iter().zip(&shapes) {
            let name_len = r.u16()? as usize;
            let found = r.take(name_len)?;
            if found != name.as_bytes() {
                return Err(Error::CheckpointFormat(format!(
                    "expected parameter `{name}`, found `{}`",
                    String::from_utf8_lossy(found)
                )));
            }
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::CheckpointFormat(format!(
                    "{name}: stored shape {dims:?}, config implies {shape:?}"
                )));
            }
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| T::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect();
            params.push(Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CheckpointFormat(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
