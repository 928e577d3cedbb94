//! Deformable convolution.
//!
//! Each kernel tap `t = ki·k + kj` at output location `p` reads the input at
//! its regular grid position displaced by a learned fractional offset,
//! through [`Sampler`]. Offsets come as a `B × 2k² × H' × W'` tensor where
//! channel `2t` holds the horizontal (x) displacement of tap `t` and channel
//! `2t + 1` the vertical (y) one.

use rayon::prelude::*;

use super::bilinear::Sampler;
use super::conv::check_conv;
use super::gemm::{gemm_nn, gemm_nt, transpose};
use super::ConvSpec;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::{Scalar, Tensor};

struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

fn check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    offsets: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Geom> {
    if spec.stride != 1 {
        return Err(Error::Config("deformable convolution supports stride 1 only".into()));
    }
    let g = check_conv(input, weight, bias, spec)?;
    let want = [g.b, 2 * spec.taps(), g.ho, g.wo];
    if offsets.shape() != want {
        return shape_err(format!("offsets shape {:?}, expected {want:?}", offsets.shape()));
    }
    Ok(Geom { b: g.b, c: g.c, h: g.h, w: g.w, ho: g.ho, wo: g.wo })
}

fn samplers<T: Scalar>(g: &Geom, spec: &ConvSpec, off: &[T]) -> Vec<Sampler<T>> {
    let k = spec.kernel_size;
    let n = g.ho * g.wo;
    let mut s = Vec::with_capacity(k * k * n);
    for ki in 0..k {
        for kj in 0..k {
            let t = ki * k + kj;
            let (ox_ch, oy_ch) = (&off[2 * t * n..(2 * t + 1) * n], &off[(2 * t + 1) * n..(2 * t + 2) * n]);
            for oy in 0..g.ho {
                let by = (oy + ki * spec.dilation) as f64 - spec.padding as f64;
                for ox in 0..g.wo {
                    let bx = (ox + kj * spec.dilation) as f64 - spec.padding as f64;
                    let p = oy * g.wo + ox;
                    s.push(Sampler::new(g.h, g.w, T::of(bx) + ox_ch[p], T::of(by) + oy_ch[p]));
                }
            }
        }
    }
    s
}

fn deform_col<T: Scalar>(g: &Geom, taps: usize, x: &[T], smp: &[Sampler<T>]) -> Vec<T> {
    let n = g.ho * g.wo;
    let hw = g.h * g.w;
    let mut col = vec![T::zero(); g.c * taps * n];
    for ci in 0..g.c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        let dst = &mut col[ci * taps * n..(ci + 1) * taps * n];
        for (d, s) in dst.iter_mut().zip(smp) {
            *d = s.value(plane);
        }
    }
    col
}

/// Forward pass; `offsets` is `B × 2k² × H' × W'`.
pub fn deform_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    offsets: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check(input, weight, bias, offsets, spec)?;
    let (o, taps, n) = (spec.out_channels, spec.taps(), g.ho * g.wo);
    let in_sz = g.c * g.h * g.w;
    let off_sz = 2 * taps * n;
    let mut out = vec![T::zero(); g.b * o * n];
    out.par_chunks_mut(o * n).enumerate().for_each(|(bi, ob)| {
        let x = &input.data()[bi * in_sz..(bi + 1) * in_sz];
        let smp = samplers(&g, spec, &offsets.data()[bi * off_sz..(bi + 1) * off_sz]);
        let col = deform_col(&g, taps, x, &smp);
        for (oi, row) in ob.chunks_mut(n).enumerate() {
            row.fill(bias.data()[oi]);
        }
        gemm_nn(o, g.c * taps, n, weight.data(), &col, ob);
    });
    Tensor::new(&[g.b, o, g.ho, g.wo], out)
}

pub(crate) fn deform_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    offsets: &Tensor<T>,
    spec: &ConvSpec,
    gout: &[T],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let [b, c, h, w] = input.dims4()?;
    let [_, _, ho, wo] = offsets.dims4()?;
    let g = Geom { b, c, h, w, ho, wo };
    let (o, taps, n) = (spec.out_channels, spec.taps(), ho * wo);
    let kk = c * taps;
    let (in_sz, off_sz, hw) = (c * h * w, 2 * taps * n, h * w);
    let wt = transpose(o, kk, weight.data());

    type Item<T> = (Vec<T>, Option<Vec<T>>, Option<Vec<T>>);
    let per_item: Vec<Item<T>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let x = &input.data()[bi * in_sz..(bi + 1) * in_sz];
            let go = &gout[bi * o * n..(bi + 1) * o * n];
            let smp = samplers(&g, spec, &offsets.data()[bi * off_sz..(bi + 1) * off_sz]);
            let mut dw = vec![T::zero(); o * kk];
            if needs[1] {
                let col = deform_col(&g, taps, x, &smp);
                gemm_nt(o, n, kk, go, &col, &mut dw);
            }
            if !needs[0] && !needs[3] {
                return (dw, None, None);
            }
            let mut dcol = vec![T::zero(); kk * n];
            gemm_nn(kk, o, n, &wt, go, &mut dcol);
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); in_sz];
                for ci in 0..c {
                    let dplane = &mut dx[ci * hw..(ci + 1) * hw];
                    for (s, &gv) in smp.iter().zip(&dcol[ci * taps * n..(ci + 1) * taps * n]) {
                        s.scatter(dplane, gv);
                    }
                }
                dx
            });
            let doff = needs[3].then(|| {
                let mut doff = vec![T::zero(); off_sz];
                for ci in 0..c {
                    let plane = &x[ci * hw..(ci + 1) * hw];
                    let dc = &dcol[ci * taps * n..(ci + 1) * taps * n];
                    for t in 0..taps {
                        for p in 0..n {
                            let gv = dc[t * n + p];
                            if gv == T::zero() {
                                continue;
                            }
                            let (gx, gy) = smp[t * n + p].coord_grad(plane);
                            doff[2 * t * n + p] += gv * gx;
                            doff[(2 * t + 1) * n + p] += gv * gy;
                        }
                    }
                }
                doff
            });
            (dw, dx, doff)
        })
        .collect();

    let mut dw = vec![T::zero(); o * kk];
    let mut dx = needs[0].then(|| Vec::with_capacity(b * in_sz));
    let mut doff = needs[3].then(|| Vec::with_capacity(b * off_sz));
    for (w_i, x_i, off_i) in per_item {
        dw.iter_mut().zip(&w_i).for_each(|(a, &v)| *a += v);
        if let (Some(all), Some(v)) = (dx.as_mut(), x_i) {
            all.extend_from_slice(&v);
        }
        if let (Some(all), Some(v)) = (doff.as_mut(), off_i) {
            all.extend_from_slice(&v);
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
    Ok(vec![dx, needs[1].then_some(dw), db, doff])
}

impl<T: Scalar> Graph<T> {
    pub fn deform_conv2d(&mut self, input: Var, weight: Var, bias: Var, offsets: Var, spec: &ConvSpec) -> Result<Var> {
        let out = deform_conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            self.value(offsets),
            spec,
        )?;
        self.push(Op::DeformConv2d(*spec), vec![input, weight, bias, offsets], out)
    }
}
