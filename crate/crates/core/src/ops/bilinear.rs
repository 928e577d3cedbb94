//! Bilinear interpolation with a zero exterior.
//!
//! A sample at `(x, y)` (x along width, y along height, pixel centres on the
//! integer lattice) blends the four lattice neighbours
//! `(⌊x⌋, ⌊y⌋) … (⌊x⌋+1, ⌊y⌋+1)`; neighbours outside the plane read zero.
//! Derivatives with respect to the coordinates are taken from the cell
//! containing the point, so at lattice points they are the forward
//! differences.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::{Scalar, Tensor};

/// Neighbour indices and weights for one sampling location on an `h×w` plane.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Sampler<T> {
    idx: [usize; 4],
    valid: [bool; 4],
    fx: T,
    fy: T,
}

impl<T: Scalar> Sampler<T> {
    pub(crate) fn new(h: usize, w: usize, x: T, y: T) -> Self {
        let none = Self { idx: [0; 4], valid: [false; 4], fx: T::zero(), fy: T::zero() };
        let (hf, wf) = (T::of(h as f64), T::of(w as f64));
        if !(x > -T::one() && y > -T::one() && x < wf && y < hf) {
            return none;
        }
        let (x0f, y0f) = (x.floor(), y.floor());
        let x0 = x0f.to_isize().unwrap_or(-2);
        let y0 = y0f.to_isize().unwrap_or(-2);
        let mut s = Self { fx: x - x0f, fy: y - y0f, ..none };
        for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                s.valid[k] = true;
                s.idx[k] = yy as usize * w + xx as usize;
            }
        }
        s
    }

    fn weights(&self) -> [T; 4] {
        let (fx, fy) = (self.fx, self.fy);
        let (gx, gy) = (T::one() - fx, T::one() - fy);
        [gx * gy, fx * gy, gx * fy, fx * fy]
    }

    fn corners(&self, plane: &[T]) -> [T; 4] {
        let mut v = [T::zero(); 4];
        for k in 0..4 {
            if self.valid[k] {
                v[k] = plane[self.idx[k]];
            }
        }
        v
    }

    pub(crate) fn is_empty(&self) -> bool {
        !self.valid.iter().any(|&v| v)
    }

    pub(crate) fn value(&self, plane: &[T]) -> T {
        if self.is_empty() {
            return T::zero();
        }
        let v = self.corners(plane);
        let wt = self.weights();
        wt[0] * v[0] + wt[1] * v[1] + wt[2] * v[2] + wt[3] * v[3]
    }

    /// `(∂/∂x, ∂/∂y)` of the sampled value.
    pub(crate) fn coord_grad(&self, plane: &[T]) -> (T, T) {
        if self.is_empty() {
            return (T::zero(), T::zero());
        }
        let v = self.corners(plane);
        let (fx, fy) = (self.fx, self.fy);
        let dx = (T::one() - fy) * (v[1] - v[0]) + fy * (v[3] - v[2]);
        let dy = (T::one() - fx) * (v[2] - v[0]) + fx * (v[3] - v[1]);
        (dx, dy)
    }

    /// Adds `g · ∂value/∂plane` into `dplane`.
    pub(crate) fn scatter(&self, dplane: &mut [T], g: T) {
        if self.is_empty() {
            return;
        }
        let wt = self.weights();
        for k in 0..4 {
            if self.valid[k] {
                dplane[self.idx[k]] += g * wt[k];
            }
        }
    }
}

fn dims3<T: Scalar>(feature: &Tensor<T>) -> Result<[usize; 3]> {
    match feature.shape()[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => shape_err(format!("bilinear_sample needs a C×H×W feature, got {:?}", feature.shape())),
    }
}

/// Samples every channel of a `C×H×W` feature at `(x, y)`.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, x: T, y: T) -> Result<Tensor<T>> {
    let [c, h, w] = dims3(feature)?;
    let s = Sampler::new(h, w, x, y);
    let out = feature.data().chunks(h * w).map(|p| s.value(p)).collect();
    Tensor::new(&[c], out)
}

/// Per-channel `(∂/∂x, ∂/∂y)` of [`bilinear_sample`].
pub fn bilinear_sample_grad<T: Scalar>(feature: &Tensor<T>, x: T, y: T) -> Result<Vec<(T, T)>> {
    let [_, h, w] = dims3(feature)?;
    let s = Sampler::new(h, w, x, y);
    Ok(feature.data().chunks(h * w).map(|p| s.coord_grad(p)).collect())
}

pub(crate) fn sample_op_backward<T: Scalar>(
    feature: &Tensor<T>,
    coords: &Tensor<T>,
    gout: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let [_, h, w] = dims3(feature)?;
    let (x, y) = (coords.data()[0], coords.data()[1]);
    let s = Sampler::new(h, w, x, y);
    let df = needs[0].then(|| {
        let mut df = vec![T::zero(); feature.numel()];
        for (dp, &g) in df.chunks_mut(h * w).zip(gout) {
            s.scatter(dp, g);
        }
        df
    });
    let dc = needs[1].then(|| {
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for (p, &g) in feature.data().chunks(h * w).zip(gout) {
            let (dx, dy) = s.coord_grad(p);
            gx += g * dx;
            gy += g * dy;
        }
        vec![gx, gy]
    });
    Ok(vec![df, dc])
}

impl<T: Scalar> Graph<T> {
    /// Differentiable [`bilinear_sample`]; `coords` holds `[x, y]`.
    pub fn bilinear_sample(&mut self, feature: Var, coords: Var) -> Result<Var> {
        let ct = self.value(coords);
        if ct.shape() != [2] {
            return shape_err(format!("coordinates must have shape [2], got {:?}", ct.shape()));
        }
        let (x, y) = (ct.data()[0], ct.data()[1]);
        let out = bilinear_sample(self.value(feature), x, y)?;
        self.push(Op::BilinearSample, vec![feature, coords], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_are_exact() {
        let f = Tensor::new(&[1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        for (i, want) in [1., 2., 3., 4., 5., 6.].into_iter().enumerate() {
            let (x, y) = ((i % 3) as f64, (i / 3) as f64);
            assert_eq!(bilinear_sample(&f, x, y).unwrap().data(), &[want]);
        }
    }

    #[test]
    fn midpoint_averages_neighbours() {
        let f = Tensor::new(&[1, 2, 2], vec![0., 0., 0., 4.]).unwrap();
        assert_eq!(bilinear_sample(&f, 0.5, 0.5).unwrap().data(), &[1.0]);
    }

    #[test]
    fn exterior_is_zero() {
        let f = Tensor::new(&[2, 2, 2], vec![1.0; 8]).unwrap();
        assert_eq!(bilinear_sample(&f, -10.0, -10.0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(bilinear_sample(&f, f64::INFINITY, 0.0).unwrap().data(), &[0.0, 0.0]);
        // half a pixel past the edge keeps half the weight
        assert_eq!(bilinear_sample(&f, 1.5, 0.0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn coordinate_gradient() {
        let f = Tensor::new(&[1, 2, 2], vec![0., 1., 2., 5.]).unwrap();
        let g = bilinear_sample_grad(&f, 0.25, 0.5).unwrap();
        // d/dx = 0.5·(1−0) + 0.5·(5−2), d/dy = 0.75·(2−0) + 0.25·(5−1)
        assert_eq!(g, vec![(2.0, 2.5)]);
    }
}
