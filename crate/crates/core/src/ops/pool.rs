//! Max pooling and the pooled descriptors used by attention.
//!
//! Max reductions keep the first maximal element in row-major order and
//! route the whole gradient there.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::{Scalar, Tensor};

/// 2×2 window, stride 2. Returns the pooled tensor and, for each output
/// element, the flat input index that won.
pub fn max_pool2x2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("max_pool2x2 needs even extents, got {h}×{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], out)?, argmax))
}

pub(crate) fn scatter_argmax<T: Scalar>(n: usize, argmax: &[usize], gout: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); n];
    for (&i, &v) in argmax.iter().zip(gout) {
        g[i] += v;
    }
    g
}

/// `B×C×H×W → B×C×1×1` mean.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let out = input.data().chunks(hw).map(|p| crate::tensor::pairwise_sum(p) * inv).collect();
    Tensor::new(&[b, c, 1, 1], out)
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(input: &Tensor<T>, gout: &[T]) -> Result<Vec<T>> {
    let [_, _, h, w] = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    Ok(gout.iter().flat_map(|&g| std::iter::repeat(g * inv).take(hw)).collect())
}

/// `B×C×H×W → B×C×1×1` maximum, with argmax.
pub fn global_max_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = input.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(b * c);
    let mut argmax = Vec::with_capacity(b * c);
    for (pi, p) in input.data().chunks(hw).enumerate() {
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        out.push(p[best]);
        argmax.push(pi * hw + best);
    }
    Ok((Tensor::new(&[b, c, 1, 1], out)?, argmax))
}

/// `B×C×H×W → B×1×H×W` mean over channels.
pub fn channel_mean_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::of(c as f64);
    let x = input.data();
    let mut out = vec![T::zero(); b * hw];
    for bi in 0..b {
        let o = &mut out[bi * hw..(bi + 1) * hw];
        for ci in 0..c {
            let p = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            o.iter_mut().zip(p).for_each(|(a, &v)| *a += v);
        }
        o.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::new(&[b, 1, h, w], out)
}

pub(crate) fn channel_mean_backward<T: Scalar>(input: &Tensor<T>, gout: &[T]) -> Result<Vec<T>> {
    let [b, c, h, w] = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::of(c as f64);
    let mut g = Vec::with_capacity(input.numel());
    for bi in 0..b {
        let go = &gout[bi * hw..(bi + 1) * hw];
        for _ in 0..c {
            g.extend(go.iter().map(|&v| v * inv));
        }
    }
    Ok(g)
}

/// `B×C×H×W → B×1×H×W` maximum over channels, with argmax.
pub fn channel_max_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = input.dims4()?;
    let hw = h * w;
    let x = input.data();
    let mut out = Vec::with_capacity(b * hw);
    let mut argmax = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = bi * c * hw + p;
            for ci in 1..c {
                let idx = (bi * c + ci) * hw + p;
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            out.push(x[best]);
            argmax.push(best);
        }
    }
    Ok((Tensor::new(&[b, 1, h, w], out)?, argmax))
}

impl<T: Scalar> Graph<T> {
    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = max_pool2x2_forward(self.value(x))?;
        self.push(Op::MaxPool2x2 { argmax }, vec![x], out)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = global_avg_pool_forward(self.value(x))?;
        self.push(Op::GlobalAvgPool, vec![x], out)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = global_max_pool_forward(self.value(x))?;
        self.push(Op::GlobalMaxPool { argmax }, vec![x], out)
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let out = channel_mean_forward(self.value(x))?;
        self.push(Op::ChannelMean, vec![x], out)
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = channel_max_forward(self.value(x))?;
        self.push(Op::ChannelMax { argmax }, vec![x], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maximum() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, am) = max_pool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(am, vec![3]);
    }

    #[test]
    fn constant_halves_extents() {
        let x = Tensor::<f64>::create(&[2, 3, 6, 4], crate::Init::Constant(2.5)).unwrap();
        let (y, am) = max_pool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        // ties go to the top-left element of each window
        assert_eq!(am[0], 0);
        assert_eq!(am[1], 2);
    }

    #[test]
    fn three_pools_leave_one_sixty_fourth() {
        let mut x = Tensor::<f64>::zeros(&[1, 1, 512, 512]).unwrap();
        for _ in 0..3 {
            x = max_pool2x2_forward(&x).unwrap().0;
        }
        assert_eq!(x.shape(), &[1, 1, 64, 64]);
        assert_eq!(512 * 512 / x.numel(), 64);
    }

    #[test]
    fn odd_extent_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(max_pool2x2_forward(&x).is_err());
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, 5.0, 3.0, -1.0]).unwrap();
        assert_eq!(channel_mean_forward(&x).unwrap().data(), &[2.0, 2.0]);
        let (m, am) = channel_max_forward(&x).unwrap();
        assert_eq!(m.data(), &[3.0, 5.0]);
        assert_eq!(am, vec![2, 1]);
        assert_eq!(global_avg_pool_forward(&x).unwrap().data(), &[3.0, 1.0]);
        assert_eq!(global_max_pool_forward(&x).unwrap().0.data(), &[5.0, 3.0]);
    }
}
