//! Batch-all triplet loss with in-batch negatives.
//!
//! For a batch of consecutive-frame pairs `(s_t, s_{t+1})` embedded as rows of
//! `Z` and `Z+`, every other row's positive acts as a negative for each anchor:
//!
//! ```text
//! y[i][k] = |Z_i - Z+_k|^2
//! L       = sum_i sum_{k != i} max(y[i][i] - y[i][k] + margin, 0)
//! ```

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sq_dist, pairwise_sq_dist_backward, Scalar, Tensor};

/// Anchor frames and their immediate temporal successors, row-aligned.
#[derive(Debug, Clone)]
pub struct PairBatch<T = f32> {
    pub anchors: Tensor<T>,
    pub positives: Tensor<T>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(anchors: Tensor<T>, positives: Tensor<T>) -> Result<Self> {
        if anchors.shape() != positives.shape() {
            return Err(Error::shape(format!(
                "anchors {:?} and positives {:?} differ in shape",
                anchors.shape(),
                positives.shape()
            )));
        }
        Ok(Self { anchors, positives })
    }

    pub fn len(&self) -> usize {
        self.anchors.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct TripletLoss<T> {
    pub loss: f64,
    /// Number of `(i, k)` terms with a positive hinge.
    pub active: usize,
    pub grad_anchors: Tensor<T>,
    pub grad_positives: Tensor<T>,
}

pub fn batch_triplet_loss<T: Scalar>(
    anchors: &Tensor<T>,
    positives: &Tensor<T>,
    margin: f64,
) -> Result<TripletLoss<T>> {
    anchors.expect_rank(2, "triplet loss embeddings")?;
    let n = anchors.shape()[0];
    if n < 2 {
        return Err(Error::InvalidBatch(format!(
            "batch of {n} pair(s) has no in-batch negatives"
        )));
    }
    if !(margin > 0.0) {
        return Err(Error::InvalidInput(format!("margin must be > 0, got {margin}")));
    }
    let y = pairwise_sq_dist(anchors, positives)?;
    let y = y.data();
    let mut grad_y = vec![T::zero(); n * n];
    let mut loss = 0.0f64;
    let mut active = 0;
    for i in 0..n {
        let pos = y[i * n + i].as_f64();
        let mut hits = 0usize;
        for k in (0..n).filter(|&k| k != i) {
            let hinge = pos - y[i * n + k].as_f64() + margin;
            if hinge > 0.0 {
                loss += hinge;
                hits += 1;
                grad_y[i * n + k] = grad_y[i * n + k] - T::one();
            }
        }
        grad_y[i * n + i] = T::from_usize(hits).expect("count fits");
        active += hits;
    }
    let (grad_anchors, grad_positives) =
        pairwise_sq_dist_backward(&Tensor::new(vec![n, n], grad_y)?, anchors, positives)?;
    Ok(TripletLoss {
        loss,
        active,
        grad_anchors,
        grad_positives,
    })
}
