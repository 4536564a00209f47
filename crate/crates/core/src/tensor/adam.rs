use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters of the Adam optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::with_hyperparameters(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(params: &[Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }

    fn check(&self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape()
                || p.shape() != self.first_moment[i].shape()
                || p.shape() != self.second_moment[i].shape()
            {
                return Err(Error::shape(format!(
                    "adam: parameter {i} shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: self.step_count + 1,
                    reason: format!("non-finite gradient for parameter {i}"),
                });
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update, in place.
    ///
    /// Elements whose gradient is exactly zero keep their value and moments,
    /// so an all-zero gradient leaves the parameters untouched for any state.
    /// Nothing is modified if validation fails.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        self.check(params, grads)?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let correction1 = 1.0 - b1.powi(t);
        let correction2 = 1.0 - b2.powi(t);

        let (cb1, cb2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (cb1c, cb2c) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
        let (c1, c2) = (T::from_f64_lossy(correction1), T::from_f64_lossy(correction2));
        let (lr, eps) = (T::from_f64_lossy(lr), T::from_f64_lossy(self.eps));

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                if g == T::zero() {
                    continue;
                }
                *m = cb1 * *m + cb1c * g;
                *v = cb2 * *v + cb2c * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`]: returns updated parameters and
/// state, leaving the inputs untouched.
pub fn adam_step<T: Scalar>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state: &AdamState<T>,
    lr: f64,
) -> Result<(Vec<Tensor<T>>, AdamState<T>)> {
    let mut params = params.to_vec();
    let mut state = state.clone();
    state.step(&mut params, grads, lr)?;
    Ok((params, state))
}
