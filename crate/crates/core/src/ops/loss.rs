//! Euclidean (sum of squared differences) loss.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::pairwise_sum;
use crate::{Scalar, Tensor};

/// `scale · Σ_b ‖pred_b − gt_b‖² / B` for `B×…` tensors.
pub fn euclidean_forward<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, scale: T) -> Result<T> {
    if pred.shape() != gt.shape() {
        return shape_err(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    let b = T::of(pred.shape()[0] as f64);
    let sq: Vec<T> = pred.data().iter().zip(gt.data()).map(|(&p, &g)| (p - g) * (p - g)).collect();
    Ok(scale * pairwise_sum(&sq) / b)
}

pub(crate) fn euclidean_backward<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    scale: T,
    gout: T,
) -> Result<Vec<Option<Vec<T>>>> {
    let b = T::of(pred.shape()[0] as f64);
    let k = gout * (scale + scale) / b;
    let dp = pred.data().iter().zip(gt.data()).map(|(&p, &g)| k * (p - g)).collect();
    Ok(vec![Some(dp), None])
}

impl<T: Scalar> Graph<T> {
    /// Records [`euclidean_forward`]; `gt` is treated as a constant.
    pub fn euclidean_loss(&mut self, pred: Var, gt: Var, scale: T) -> Result<Var> {
        let v = euclidean_forward(self.value(pred), self.value(gt), scale)?;
        self.push(Op::EuclideanLoss { scale }, vec![pred, gt], Tensor::scalar(v))
    }
}
