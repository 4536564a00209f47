use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};

/// Central difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub probes: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic gradients of a scalar function against central finite
/// differences at `probe_count` coordinates drawn uniformly over all inputs.
///
/// `f` returns the scalar value and one gradient tensor per input.
pub fn gradcheck<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    probe_count: usize,
    tolerance: f64,
    seed: u64,
) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (_, analytic) = f(inputs)?;
    if analytic.len() != inputs.len()
        || analytic.iter().zip(inputs).any(|(g, x)| g.shape() != x.shape())
    {
        return Err(Error::shape(format!(
            "gradcheck `{name}`: gradients do not match input shapes"
        )));
    }
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut max_rel_error = 0.0f64;

    for _ in 0..probe_count {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let original = work[which].data()[flat];
        work[which].data_mut()[flat] = original + GRADCHECK_STEP;
        let (plus, _) = f(&work)?;
        work[which].data_mut()[flat] = original - GRADCHECK_STEP;
        let (minus, _) = f(&work)?;
        work[which].data_mut()[flat] = original;

        let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
        let err = rel_error(analytic[which].data()[flat], numeric);
        // NaN must fail the check, so do not let f64::max swallow it
        max_rel_error = if err.is_nan() { f64::NAN } else { max_rel_error.max(err) };
        if max_rel_error.is_nan() {
            break;
        }
    }

    Ok(GradcheckReport {
        name: name.to_string(),
        probes: probe_count,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
