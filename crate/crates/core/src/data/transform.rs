//! Geometric transforms that keep annotations consistent with pixels.

use rand::Rng as _;

use super::annotations::AnnotationSet;
use super::image::AnnotatedImage;
use crate::error::{shape_err, Error, Result};
use crate::{rng, Tensor};

/// Number of patches [`augment`] produces per image.
pub const PATCHES_PER_IMAGE: usize = 18;
const RANDOM_CROPS: usize = 5;

struct Taps {
    i0: Vec<usize>,
    i1: Vec<usize>,
    f: Vec<f64>,
}

/// Half-pixel-centre bilinear taps from `src` samples onto `dst` samples.
fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut t = Taps { i0: Vec::with_capacity(dst), i1: Vec::with_capacity(dst), f: Vec::with_capacity(dst) };
    for i in 0..dst {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        t.i0.push(i0);
        t.i1.push((i0 + 1).min(src - 1));
        t.f.push(s - i0 as f64);
    }
    t
}

fn scale_coord(v: f64, from: usize, to: usize) -> f64 {
    let s = v * to as f64 / from as f64;
    // Keeps the half-open bound when rounding lands on it.
    if v < from as f64 && s >= to as f64 {
        (to as f64).next_down()
    } else {
        s
    }
}

/// Bilinear resampling of the pixels to `target_w × target_h`; annotation
/// coordinates scale by `target/source` per axis.
pub fn resize_with_annotations(img: &AnnotatedImage, target_w: usize, target_h: usize) -> Result<AnnotatedImage> {
    if target_w == 0 || target_h == 0 {
        return shape_err(format!("resize target {target_w}×{target_h} has a zero extent"));
    }
    let (h, w) = (img.height(), img.width());
    if (h, w) == (target_h, target_w) {
        return Ok(img.clone());
    }
    let (ty, tx) = (taps(h, target_h), taps(w, target_w));
    let src = img.pixels.data();
    let mut out = vec![0.0; 3 * target_h * target_w];
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for oy in 0..target_h {
            let (r0, r1, fy) = (ty.i0[oy] * w, ty.i1[oy] * w, ty.f[oy]);
            let row = &mut out[(c * target_h + oy) * target_w..][..target_w];
            for (ox, o) in row.iter_mut().enumerate() {
                let (x0, x1, fx) = (tx.i0[ox], tx.i1[ox], tx.f[ox]);
                let top = plane[r0 + x0] * (1.0 - fx) + plane[r0 + x1] * fx;
                let bot = plane[r1 + x0] * (1.0 - fx) + plane[r1 + x1] * fx;
                *o = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let sx = |x: f64| scale_coord(x, w, target_w);
    let sy = |y: f64| scale_coord(y, h, target_h);
    let annotations = match &img.annotations {
        AnnotationSet::Points(ps) => AnnotationSet::Points(ps.iter().map(|&[x, y]| [sx(x), sy(y)]).collect()),
        AnnotationSet::Boxes(bs) => {
            AnnotationSet::Boxes(bs.iter().map(|&[x0, y0, x1, y1]| [sx(x0), sy(y0), sx(x1), sy(y1)]).collect())
        }
    };
    AnnotatedImage::new(img.id.clone(), Tensor::new(&[3, target_h, target_w], out)?, annotations)
}

/// Cuts a `cw × ch` window at `(x0, y0)`. Points are translated and kept iff
/// inside the window; a box is kept iff its centre is inside, and is emitted
/// as that centre point.
pub fn crop(img: &AnnotatedImage, x0: usize, y0: usize, cw: usize, ch: usize) -> Result<AnnotatedImage> {
    let (h, w) = (img.height(), img.width());
    if cw == 0 || ch == 0 || x0 + cw > w || y0 + ch > h {
        return shape_err(format!("crop {cw}×{ch} at ({x0}, {y0}) does not fit a {w}×{h} image"));
    }
    let src = img.pixels.data();
    let mut out = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in y0..y0 + ch {
            out.extend_from_slice(&src[(c * h + y) * w + x0..][..cw]);
        }
    }
    let (fx, fy) = (x0 as f64, y0 as f64);
    let points = img
        .annotations
        .centers()?
        .into_iter()
        .map(|[x, y]| [x - fx, y - fy])
        .filter(|&[x, y]| (0.0..cw as f64).contains(&x) && (0.0..ch as f64).contains(&y))
        .collect();
    AnnotatedImage::new(img.id.clone(), Tensor::new(&[3, ch, cw], out)?, AnnotationSet::Points(points))
}

/// Horizontal mirror. Coordinates map `x → (w − 1) − x`, which is exact and
/// self-inverse on `[0, w−1]`; a point in the last half-open pixel column
/// `(w−1, w)` would land left of zero and is clamped to 0. Box corners are
/// swapped and clamped to `[0, w]`.
pub fn hflip(img: &AnnotatedImage) -> Result<AnnotatedImage> {
    let (h, w) = (img.height(), img.width());
    let mut out = img.pixels.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    let m = (w - 1) as f64;
    let annotations = match &img.annotations {
        AnnotationSet::Points(ps) => AnnotationSet::Points(ps.iter().map(|&[x, y]| [(m - x).max(0.0), y]).collect()),
        AnnotationSet::Boxes(bs) => AnnotationSet::Boxes(
            bs.iter()
                .map(|&[x0, y0, x1, y1]| [(m - x1).clamp(0.0, w as f64), y0, (m - x0).clamp(0.0, w as f64), y1])
                .collect(),
        ),
    };
    AnnotatedImage::new(img.id.clone(), Tensor::new(&[3, h, w], out)?, annotations)
}

/// The nine crop origins for a `w × h` image: the four quadrants, then five
/// drawn uniformly from the valid range with the `(seed, "augment")` stream.
pub fn crop_origins(w: usize, h: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return shape_err(format!("augmentation needs even extents, got {w}×{h}"));
    }
    let (cw, ch) = (w / 2, h / 2);
    let mut origins = vec![(0, 0), (cw, 0), (0, ch), (cw, ch)];
    let mut r = rng::stream(seed, "augment");
    for _ in 0..RANDOM_CROPS {
        origins.push((r.random_range(0..=w - cw), r.random_range(0..=h - ch)));
    }
    Ok(origins)
}

/// Nine half-size crops, each followed by its mirror: 18 patches. Patch ids
/// are `<id>/c<k>` and `<id>/c<k>f`.
pub fn augment(img: &AnnotatedImage, seed: u64) -> Result<Vec<AnnotatedImage>> {
    let (w, h) = (img.width(), img.height());
    let origins = crop_origins(w, h, seed)?;
    let mut out = Vec::with_capacity(PATCHES_PER_IMAGE);
    for (k, &(x0, y0)) in origins.iter().enumerate() {
        let mut c = crop(img, x0, y0, w / 2, h / 2)?;
        c.id = format!("{}/c{k}", img.id);
        let mut f = hflip(&c)?;
        f.id = format!("{}f", c.id);
        out.push(c);
        out.push(f);
    }
    Ok(out)
}

/// Zero-pads a `C×H×W` or `B×C×H×W` tensor on the right and bottom so both
/// spatial extents are multiples of `m`.
pub fn pad_to_multiple(t: &Tensor<f64>, m: usize) -> Result<Tensor<f64>> {
    let s = t.shape();
    if s.len() < 2 || m == 0 {
        return shape_err(format!("cannot pad {s:?} to a multiple of {m}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(t.clone());
    }
    let planes = t.numel() / (h * w);
    let mut out = vec![0.0; planes * ph * pw];
    for p in 0..planes {
        for y in 0..h {
            out[(p * ph + y) * pw..][..w].copy_from_slice(&t.data()[(p * h + y) * w..][..w]);
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = ph;
    shape[n - 1] = pw;
    Tensor::new(&shape, out)
}

/// Keeps the top-left `h × w` window of every plane of a tensor.
pub fn crop_spatial<T: crate::Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::InvalidShape(format!("{s:?} has no spatial extents")));
    }
    let (sh, sw) = (s[s.len() - 2], s[s.len() - 1]);
    if h > sh || w > sw || h == 0 || w == 0 {
        return shape_err(format!("cannot crop {sh}×{sw} to {h}×{w}"));
    }
    if (h, w) == (sh, sw) {
        return Ok(t.clone());
    }
    let planes = t.numel() / (sh * sw);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            out.extend_from_slice(&t.data()[(p * sh + y) * sw..][..w]);
        }
    }
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(&shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize, points: Vec<[f64; 2]>) -> AnnotatedImage {
        let data = (0..3 * h * w).map(|i| (i % 251) as f64 / 250.0).collect();
        AnnotatedImage::new("ramp", Tensor::new(&[3, h, w], data).unwrap(), AnnotationSet::Points(points)).unwrap()
    }

    #[test]
    fn halving_resize_halves_coordinates() {
        let img = ramp(16, 12, vec![[3.0, 5.0], [15.5, 11.25]]);
        let r = resize_with_annotations(&img, 8, 6).unwrap();
        assert_eq!(r.annotations, AnnotationSet::Points(vec![[1.5, 2.5], [7.75, 5.625]]));
        assert_eq!(r.pixels.shape(), &[3, 6, 8]);
        let same = resize_with_annotations(&img, 16, 12).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn resize_preserves_constant_image() {
        let img = AnnotatedImage::new(
            "c",
            Tensor::new(&[3, 5, 7], vec![0.25; 105]).unwrap(),
            AnnotationSet::Boxes(vec![[0.0, 0.0, 7.0, 5.0]]),
        )
        .unwrap();
        let r = resize_with_annotations(&img, 11, 3).unwrap();
        assert!(r.pixels.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(r.annotations, AnnotationSet::Boxes(vec![[0.0, 0.0, 11.0, 3.0]]));
    }

    #[test]
    fn crops_filter_points() {
        let img = ramp(8, 8, vec![[1.0, 1.0], [3.5, 3.99], [4.0, 4.0]]);
        let out = augment(&img, 0).unwrap();
        assert_eq!(out.len(), 18);
        assert_eq!(out[0].count(), 2);
        assert_eq!(out[6].count(), 1);
        assert_eq!(out[6].annotations, AnnotationSet::Points(vec![[0.0, 0.0]]));
        assert_eq!(out[7].annotations, AnnotationSet::Points(vec![[3.0, 0.0]]));
        assert_eq!(out[3].id, "ramp/c1f");
    }

    #[test]
    fn flip_clamps_last_column() {
        let img = ramp(4, 2, vec![[3.5, 1.0], [0.25, 0.0]]);
        let f = hflip(&img).unwrap();
        assert_eq!(f.annotations, AnnotationSet::Points(vec![[0.0, 1.0], [2.75, 0.0]]));
    }

    #[test]
    fn odd_extents_rejected() {
        assert!(augment(&ramp(5, 4, vec![]), 0).is_err());
    }

    #[test]
    fn pad_and_crop_back() {
        let t = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad_to_multiple(&t, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 4, 4]);
        assert_eq!(p.sum_all(), 21.0);
        assert_eq!(crop_spatial(&p, 2, 3).unwrap(), t);
    }
}
