//! Reverse-mode gradient engine.
//!
//! A [`Graph`] records every differentiable operation as it executes. Values
//! live in an arena indexed by [`Var`]; each record names its input and output
//! vars plus whatever the backward rule needs (argmax tables, specs). Records
//! are appended in execution order, so the record list is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec};
use crate::{ParamStore, Scalar, Tensor};

/// Handle to a value stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Conv2d(ConvSpec),
    DeformConv2d(ConvSpec),
    MaxPool2x2 { argmax: Vec<usize> },
    GlobalAvgPool,
    GlobalMaxPool { argmax: Vec<usize> },
    ChannelMean,
    ChannelMax { argmax: Vec<usize> },
    Relu,
    Sigmoid,
    Add,
    Mul,
    Concat,
    SumAll,
    EuclideanLoss { scale: T },
    BilinearSample,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::DeformConv2d(_) => "deformable_conv2d",
            Op::MaxPool2x2 { .. } => "max_pool2x2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::ChannelMean => "channel_mean",
            Op::ChannelMax { .. } => "channel_max",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat => "concat_channels",
            Op::SumAll => "sum_all",
            Op::EuclideanLoss { .. } => "euclidean_loss",
            Op::BilinearSample => "bilinear_sample",
        }
    }
}

#[derive(Debug, Clone)]
struct Record<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    output: Var,
}

/// Recorded computation: value arena plus operation log.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    requires_grad: Vec<bool>,
    records: Vec<Record<T>>,
    params: Vec<(String, Var)>,
    param_vars: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            requires_grad: Vec::new(),
            records: Vec::new(),
            params: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn alloc(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    /// Constant input; no gradient is computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.alloc(t, false)
    }

    /// Differentiable leaf; its gradient is available from [`Gradients::get`].
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.alloc(t, true)
    }

    /// Registers a named parameter once per graph and returns its var.
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let mut copy = t.clone();
        copy.clear_grad();
        let v = self.alloc(copy, true);
        self.params.push((name.to_string(), v));
        self.param_vars.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Number of recorded operations.
    pub fn num_ops(&self) -> usize {
        self.records.len()
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: Vec<Var>, out: Tensor<T>) -> Result<Var> {
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        let rg = inputs.iter().any(|v| self.requires_grad[v.0]);
        let output = self.alloc(out, rg);
        self.records.push(Record { op, inputs, output });
        Ok(output)
    }

    /// Gradients of the scalar `loss` with respect to every differentiable
    /// leaf. Each recorded operation is visited exactly once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = &self.values[loss.0];
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);
        let mut visits = 0;
        for rec in self.records.iter().rev() {
            visits += 1;
            let Some(gout) = grads[rec.output.0].take() else { continue };
            let needs: Vec<bool> = rec.inputs.iter().map(|v| self.requires_grad[v.0]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = rec.inputs.iter().map(|v| &self.values[v.0]).collect();
            let out = &self.values[rec.output.0];
            let gin = backward_op(&rec.op, &inputs, out, &gout, &needs)?;
            for ((v, g), need) in rec.inputs.iter().zip(gin).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        // Outputs were consumed above; what is left belongs to leaves.
        Ok(Gradients { grads, visits })
    }

    /// Runs [`backward`](Self::backward) and adds each registered parameter's
    /// gradient into the matching tensor of `store`. Parameters the loss does
    /// not depend on are left untouched. Gradients accumulate across calls
    /// until the caller clears them.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for (name, v) in &self.params {
            if let Some(g) = &grads.grads[v.0] {
                let t = store
                    .get_mut(name)
                    .ok_or_else(|| Error::Contract(format!("parameter {name:?} not in store")))?;
                t.accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visits: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf or parameter var, `None` when the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Number of operation records visited during the reverse sweep.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

type InputGrads<T> = Vec<Option<Vec<T>>>;

fn backward_op<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    gout: &[T],
    needs: &[bool],
) -> Result<InputGrads<T>> {
    Ok(match op {
        Op::Conv2d(spec) => ops::conv::conv2d_backward(inputs[0], inputs[1], spec, gout, needs)?,
        Op::DeformConv2d(spec) => {
            ops::deform::deform_conv2d_backward(inputs[0], inputs[1], inputs[3], spec, gout, needs)?
        }
        Op::MaxPool2x2 { argmax } | Op::GlobalMaxPool { argmax } | Op::ChannelMax { argmax } => {
            vec![Some(ops::pool::scatter_argmax(inputs[0].numel(), argmax, gout))]
        }
        Op::GlobalAvgPool => vec![Some(ops::pool::global_avg_pool_backward(inputs[0], gout)?)],
        Op::ChannelMean => vec![Some(ops::pool::channel_mean_backward(inputs[0], gout)?)],
        Op::Relu => vec![Some(ops::elementwise::relu_backward(out, gout))],
        Op::Sigmoid => vec![Some(ops::elementwise::sigmoid_backward(out, gout))],
        Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
        Op::Mul => ops::elementwise::mul_backward(inputs[0], inputs[1], gout, needs)?,
        Op::Concat => ops::elementwise::concat_backward(inputs, gout)?,
        Op::SumAll => vec![Some(vec![gout[0]; inputs[0].numel()])],
        Op::EuclideanLoss { scale } => ops::loss::euclidean_backward(inputs[0], inputs[1], *scale, gout[0])?,
        Op::BilinearSample => ops::bilinear::sample_op_backward(inputs[0], inputs[1], gout, needs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2, 3], vec![1., -2., 3., 0.5, 0., 9.]));
        let s = g.sum_all(w).unwrap();
        assert_eq!(g.value(s).data(), &[11.5]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], vec![2.0, 3.0]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum_all(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(t(&[2], vec![2.0, 3.0]));
        let r = g.relu(w).unwrap();
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn visits_every_record_once() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], vec![1., -1., 2.]));
        let w = g.leaf(t(&[3], vec![0.5, 0.5, 0.5]));
        let a = g.mul(x, w).unwrap();
        let b = g.relu(a).unwrap();
        let c = g.sigmoid(b).unwrap();
        // dead branch: recorded but does not feed the loss
        let _d = g.relu(x).unwrap();
        let s = g.sum_all(c).unwrap();
        assert_eq!(g.num_ops(), 5);
        assert_eq!(g.backward(s).unwrap().visits(), 5);
    }

    #[test]
    fn params_accumulate_and_unreachable_stay_absent() {
        let mut store = ParamStore::new();
        store.insert("used", t(&[2], vec![1.0, 2.0])).unwrap();
        store.insert("unused", t(&[2], vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let u = g.param("used", store.get("used").unwrap());
        let _ = g.param("unused", store.get("unused").unwrap());
        let sq = g.mul(u, u).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get("used").unwrap().grad().unwrap(), &[2.0, 4.0]);
        assert!(store.get("unused").unwrap().grad().is_none());
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get("used").unwrap().grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn param_registered_once() {
        let p = t(&[1], vec![1.0]);
        let mut g = Graph::new();
        assert_eq!(g.param("a", &p), g.param("a", &p));
    }
}
