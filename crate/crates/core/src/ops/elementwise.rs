use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::{Scalar, Tensor};

/// Logistic function, clamped to the open interval (0, 1) where rounding
/// would otherwise saturate it.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let s = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::of(2.0))
}

pub(crate) fn relu_backward<T: Scalar>(out: &Tensor<T>, gout: &[T]) -> Vec<T> {
    out.data().iter().zip(gout).map(|(&y, &g)| if y > T::zero() { g } else { T::zero() }).collect()
}

pub(crate) fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, gout: &[T]) -> Vec<T> {
    out.data().iter().zip(gout).map(|(&y, &g)| g * y * (T::one() - y)).collect()
}

/// Strides for reading `b` while walking `a`'s index space; broadcast axes get 0.
fn broadcast_strides(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return shape_err(format!("cannot broadcast {b:?} onto {a:?}"));
    }
    let mut strides = vec![0; b.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        strides[i] = if b[i] == 1 && a[i] != 1 { 0 } else { s };
        s *= b[i];
    }
    Ok(strides)
}

fn for_each_pair(a: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = a.iter().product();
    let mut idx = vec![0usize; a.len()];
    let mut bi = 0usize;
    for ai in 0..n {
        f(ai, bi);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            bi += strides[d];
            if idx[d] < a[d] {
                break;
            }
            bi -= strides[d] * a[d];
            idx[d] = 0;
        }
    }
}

/// `a ⊙ b` where every extent of `b` equals `a`'s or is 1.
pub fn mul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let strides = broadcast_strides(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); a.numel()];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(a.shape(), &strides, |i, j| out[i] = ad[i] * bd[j]);
    Tensor::new(a.shape(), out)
}

pub(crate) fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gout: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let strides = broadcast_strides(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let da = needs[0].then(|| {
        let mut da = vec![T::zero(); a.numel()];
        for_each_pair(a.shape(), &strides, |i, j| da[i] = gout[i] * bd[j]);
        da
    });
    let db = needs[1].then(|| {
        let mut db = vec![T::zero(); b.numel()];
        for_each_pair(a.shape(), &strides, |i, j| db[j] += gout[i] * ad[i]);
        db
    });
    Ok(vec![da, db])
}

pub fn concat_channels_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        return shape_err("concat of zero tensors");
    };
    let [b, _, h, w] = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let [tb, tc, th, tw] = t.dims4()?;
        if (tb, th, tw) != (b, h, w) {
            return shape_err(format!("concat extents {:?} vs {:?}", t.shape(), first.shape()));
        }
        total += tc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * total * hw);
    for bi in 0..b {
        for t in inputs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::new(&[b, total, h, w], out)
}

pub(crate) fn concat_backward<T: Scalar>(inputs: &[&Tensor<T>], gout: &[T]) -> Result<Vec<Option<Vec<T>>>> {
    let [b, _, h, w] = inputs[0].dims4()?;
    let hw = h * w;
    let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut grads: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
    for bi in 0..b {
        let mut off = bi * total * hw;
        for (g, t) in grads.iter_mut().zip(inputs) {
            let n = t.shape()[1] * hw;
            g.extend_from_slice(&gout[off..off + n]);
            off += n;
        }
    }
    Ok(grads.into_iter().map(Some).collect())
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid, vec![x], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("add {:?} + {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.push(Op::Add, vec![a, b], out)
    }

    /// Elementwise product; `b` may broadcast along unit extents.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = mul_forward(self.value(a), self.value(b))?;
        self.push(Op::Mul, vec![a, b], out)
    }

    /// Stacks `B×Cᵢ×H×W` tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = concat_channels_forward(&ts)?;
        self.push(Op::Concat, xs.to_vec(), out)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(Op::SumAll, vec![x], out)
    }
}
