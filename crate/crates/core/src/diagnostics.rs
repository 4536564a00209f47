//! Finite-difference checks of every backward pass, run in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{EmbeddingModel, ModelConfig};
use crate::tensor::{
    conv2d_backward, conv2d_forward, gradcheck, leaky_relu, leaky_relu_backward, linear_backward,
    linear_forward, pairwise_sq_dist, pairwise_sq_dist_backward, GradcheckReport, Tensor,
};
use crate::triplet::batch_triplet_loss;

pub const DEFAULT_PROBES: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// A deliberately wrong backward pass, used to confirm the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scale the analytic conv kernel gradient by 1.01.
    ConvKernel,
    /// Drop the linear bias gradient.
    LinearBias,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub probes: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            probes: DEFAULT_PROBES,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<GradcheckReport>,
    pub passed: bool,
}

/// Small network used for the end-to-end check; every layer type appears and
/// strides and paddings vary between layers.
pub fn probe_network_config() -> ModelConfig {
    ModelConfig {
        input_height: 8,
        input_width: 8,
        input_channels: 1,
        channels: [2, 3, 4],
        kernel_sizes: [3, 3, 3],
        strides: [1, 2, 1],
        paddings: [1, 1, 0],
        embed_dim: 4,
        leaky_slope: 0.01,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn weighted_sum(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

pub fn run_suite(options: &SuiteOptions) -> Result<SuiteReport> {
    let SuiteOptions {
        probes,
        tolerance,
        seed,
        fault,
    } = *options;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    // conv: stride 2, padding 1, non-square filter bank
    let x = uniform(&mut rng, &[2, 2, 7, 7]);
    let k = uniform(&mut rng, &[3, 2, 4, 4]);
    let b = uniform(&mut rng, &[3]);
    let w = uniform(&mut rng, &[2, 3, 3, 3]);
    checks.push(gradcheck(
        "conv2d",
        &[x, k, b],
        |xs| {
            let out = conv2d_forward(&xs[0], &xs[1], &xs[2], 2, 1)?;
            let g = conv2d_backward(&w, &xs[0], &xs[1], 2, 1)?;
            let kernel = match fault {
                Some(Fault::ConvKernel) => g.kernel.map(|v| v * 1.01),
                _ => g.kernel,
            };
            Ok((weighted_sum(&out, &w), vec![g.input, kernel, g.bias]))
        },
        probes,
        tolerance,
        seed ^ 1,
    )?);

    // leaky ReLU away from the kink at zero
    let x = Tensor::from_fn(&[4, 6], |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    });
    let w = uniform(&mut rng, &[4, 6]);
    checks.push(gradcheck(
        "leaky_relu",
        &[x],
        |xs| {
            let out = leaky_relu(&xs[0], 0.01);
            Ok((weighted_sum(&out, &w), vec![leaky_relu_backward(&w, &xs[0], 0.01)?]))
        },
        probes,
        tolerance,
        seed ^ 2,
    )?);

    let x = uniform(&mut rng, &[3, 5]);
    let wt = uniform(&mut rng, &[4, 5]);
    let b = uniform(&mut rng, &[4]);
    let w = uniform(&mut rng, &[3, 4]);
    checks.push(gradcheck(
        "linear",
        &[x, wt, b],
        |xs| {
            let out = linear_forward(&xs[0], &xs[1], &xs[2])?;
            let g = linear_backward(&w, &xs[0], &xs[1])?;
            let bias = match fault {
                Some(Fault::LinearBias) => Tensor::zeros(g.bias.shape()),
                _ => g.bias,
            };
            Ok((weighted_sum(&out, &w), vec![g.input, g.weight, bias]))
        },
        probes,
        tolerance,
        seed ^ 3,
    )?);

    let a = uniform(&mut rng, &[4, 3]);
    let p = uniform(&mut rng, &[4, 3]);
    let w = uniform(&mut rng, &[4, 4]);
    checks.push(gradcheck(
        "pairwise_sq_dist",
        &[a, p],
        |xs| {
            let out = pairwise_sq_dist(&xs[0], &xs[1])?;
            let (ga, gb) = pairwise_sq_dist_backward(&w, &xs[0], &xs[1])?;
            Ok((weighted_sum(&out, &w), vec![ga, gb]))
        },
        probes,
        tolerance,
        seed ^ 4,
    )?);

    let a = uniform(&mut rng, &[6, 4]).map(|v| v * 0.5);
    let p = uniform(&mut rng, &[6, 4]).map(|v| v * 0.5);
    checks.push(gradcheck(
        "triplet_loss",
        &[a, p],
        |xs| {
            let out = batch_triplet_loss(&xs[0], &xs[1], 0.2)?;
            Ok((out.loss, vec![out.grad_anchors, out.grad_positives]))
        },
        probes,
        tolerance,
        seed ^ 5,
    )?);

    let config = probe_network_config();
    let model = EmbeddingModel::<f64>::init(config.clone(), seed)?;
    let x = Tensor::from_fn(&[2, 1, 8, 8], |_| rng.random::<f64>());
    let w = uniform(&mut rng, &[2, config.embed_dim]);
    checks.push(gradcheck(
        "network",
        model.params(),
        |params| {
            let m = EmbeddingModel::from_parts(config.clone(), params.to_vec())?;
            let (out, cache) = m.forward(&x)?;
            let mut grads = m.backward(&cache, &w)?.0;
            match fault {
                Some(Fault::ConvKernel) => grads[2] = grads[2].map(|v| v * 1.01),
                Some(Fault::LinearBias) => grads[7] = Tensor::zeros(grads[7].shape()),
                None => {}
            }
            Ok((weighted_sum(&out, &w), grads))
        },
        probes,
        tolerance,
        seed ^ 6,
    )?);

    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport { checks, passed })
}
