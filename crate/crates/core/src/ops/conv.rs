//! Dense (optionally dilated / strided) 2-D cross-correlation via im2col.

use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, transpose};
use super::ConvSpec;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Op, Var};
use crate::{Scalar, Tensor};

pub(crate) struct ConvGeom {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self, spec: &ConvSpec) -> usize {
        self.c * spec.taps()
    }
    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGeom> {
    spec.validate()?;
    let [b, c, h, w] = input.dims4()?;
    if c != spec.in_channels {
        return shape_err(format!("input has {c} channels, convolution expects {}", spec.in_channels));
    }
    if weight.shape() != spec.weight_shape() {
        return shape_err(format!("weight shape {:?}, expected {:?}", weight.shape(), spec.weight_shape()));
    }
    if bias.shape() != [spec.out_channels] {
        return shape_err(format!("bias shape {:?}, expected [{}]", bias.shape(), spec.out_channels));
    }
    let ho = spec.output_extent(h)?;
    let wo = spec.output_extent(w)?;
    Ok(ConvGeom { b, c, h, w, ho, wo })
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_size == 1 && spec.stride == 1 && spec.padding == 0
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (H'·W')` matrix; out-of-image
/// taps read zero.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize) -> Vec<T> {
    let k = spec.kernel_size;
    let n = ho * wo;
    let mut col = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, dv) in d.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *dv = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the image.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, dx: &mut [T]) {
    let k = spec.kernel_size;
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution forward pass: `B×C×H×W` input, `O×C×k×k` weights, `O` bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check_conv(input, weight, bias, spec)?;
    let o = spec.out_channels;
    let (kk, n) = (g.rows(spec), g.cols());
    let in_sz = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.b * o * n];
    out.par_chunks_mut(o * n).enumerate().for_each(|(bi, ob)| {
        let x = &input.data()[bi * in_sz..(bi + 1) * in_sz];
        for (oi, row) in ob.chunks_mut(n).enumerate() {
            row.fill(bias.data()[oi]);
        }
        if is_pointwise(spec) {
            gemm_nn(o, kk, n, weight.data(), x, ob);
        } else {
            let col = im2col(x, g.c, g.h, g.w, spec, g.ho, g.wo);
            gemm_nn(o, kk, n, weight.data(), &col, ob);
        }
    });
    Tensor::new(&[g.b, o, g.ho, g.wo], out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    gout: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let [b, c, h, w] = input.dims4()?;
    let (ho, wo) = (spec.output_extent(h)?, spec.output_extent(w)?);
    let o = spec.out_channels;
    let kk = c * spec.taps();
    let n = ho * wo;
    let in_sz = c * h * w;
    let wt = transpose(o, kk, weight.data());

    let per_item: Vec<(Vec<T>, Option<Vec<T>>)> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x = &input.data()[bi * in_sz..(bi + 1) * in_sz];
            let go = &gout[bi * o * n..(bi + 1) * o * n];
            let pointwise = is_pointwise(spec);
            let col_owned;
            let col: &[T] = if pointwise {
                x
            } else {
                col_owned = im2col(x, c, h, w, spec, ho, wo);
                &col_owned
            };
            let mut dw = vec![T::zero(); o * kk];
            if needs[1] {
                gemm_nt(o, n, kk, go, col, &mut dw);
            }
            let dx = needs[0].then(|| {
                let mut dcol = vec![T::zero(); kk * n];
                gemm_nn(kk, o, n, &wt, go, &mut dcol);
                if pointwise {
                    dcol
                } else {
                    let mut dx = vec![T::zero(); in_sz];
                    col2im(&dcol, c, h, w, spec, ho, wo, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); o * kk];
    let mut dx = needs[0].then(|| Vec::with_capacity(b * in_sz));
    for (w_i, x_i) in per_item {
        dw.iter_mut().zip(&w_i).for_each(|(a, &v)| *a += v);
        if let (Some(all), Some(x_i)) = (dx.as_mut(), x_i) {
            all.extend_from_slice(&x_i);
        }
    }
    let db = needs[2].then(|| {
        let mut db = vec![T::zero(); o];
        for bi in 0..b {
            for (oi, d) in db.iter_mut().enumerate() {
                let row = &gout[(bi * o + oi) * n..(bi * o + oi + 1) * n];
                *d += row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        db
    });
    Ok(vec![dx, needs[1].then_some(dw), db])
}

impl<T: Scalar> Graph<T> {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(weight), self.value(bias), spec)?;
        self.push(Op::Conv2d(*spec), vec![input, weight, bias], out)
    }
}
